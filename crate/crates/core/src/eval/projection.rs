//! Two-dimensional PCA projection of pixel embeddings, for qualitative plots.

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{DomainTag, Sample};
use crate::error::Result;
use crate::model::SegmentationModel;
use crate::rng::Rng;
use crate::tensor::{ClassIndex, IGNORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub class: ClassIndex,
    pub domain: DomainTag,
}

/// Top-two principal components of the rows of `data`. Signs are fixed so
/// the largest loading of each component is positive.
fn pca_2d(data: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = data.len();
    let dim = data.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 {
        return vec![(0.0, 0.0); n];
    }
    let mut m = DMatrix::from_fn(n, dim, |i, j| data[i][j]);
    for j in 0..dim {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    if m.iter().all(|v| v.abs() < 1e-12) {
        return vec![(0.0, 0.0); n];
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let component = |k: usize| -> Vec<f64> {
        let Some(&row) = order.get(k) else {
            return vec![0.0; dim];
        };
        let mut v: Vec<f64> = v_t.row(row).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (c0, c1) = (component(0), component(1));
    (0..n)
        .map(|i| {
            let row = m.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            (dot(&c0), dot(&c1))
        })
        .collect()
}

/// Embeddings of up to `per_class_cap` pixels per (class, domain), projected to 2-D.
pub fn project_features(
    model: &SegmentationModel,
    samples: &[Sample],
    per_class_cap: usize,
    rng: &mut Rng,
) -> Result<Vec<ProjectedPoint>> {
    if per_class_cap == 0 {
        return Ok(Vec::new());
    }
    let factor = model.arch.downsample_factor();
    // (class, domain) -> candidate embedding vectors
    let mut pools: Vec<((ClassIndex, DomainTag), Vec<Vec<f64>>)> = Vec::new();
    for s in samples {
        let (_, emb) = model.forward(&s.image)?;
        let label = s.label.downsample(factor)?;
        let plane = emb.plane();
        for p in 0..plane {
            let class = label.data[p];
            if class == IGNORE {
                continue;
            }
            let v: Vec<f64> = (0..emb.channels).map(|d| emb.data[d * plane + p]).collect();
            let key = (class, s.domain);
            match pools.iter_mut().find(|(k, _)| *k == key) {
                Some((_, pool)) => pool.push(v),
                None => pools.push((key, vec![v])),
            }
        }
    }
    let mut vectors = Vec::new();
    let mut tags = Vec::new();
    for ((class, domain), pool) in pools {
        let picks: Vec<usize> = if pool.len() > per_class_cap {
            let mut p = index::sample(rng, pool.len(), per_class_cap).into_vec();
            p.sort_unstable();
            p
        } else {
            (0..pool.len()).collect()
        };
        for i in picks {
            vectors.push(pool[i].clone());
            tags.push((class, domain));
        }
    }
    Ok(pca_2d(&vectors)
        .into_iter()
        .zip(tags)
        .map(|((x, y), (class, domain))| ProjectedPoint { x, y, class, domain })
        .collect())
}

/// Mean silhouette coefficient of 2-D points under the given cluster labels.
pub fn silhouette(points: &[(f64, f64)], labels: &[usize]) -> f64 {
    let n = points.len();
    let dist = |a: usize, b: usize| ((points[a].0 - points[b].0).powi(2) + (points[a].1 - points[b].1).powi(2)).sqrt();
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let members: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            (!members.is_empty()).then(|| members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64)
        };
        let Some(a) = mean_to(labels[i]) else { continue };
        let b = clusters
            .iter()
            .filter(|&&c| c != labels[i])
            .filter_map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}
