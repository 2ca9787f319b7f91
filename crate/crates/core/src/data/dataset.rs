use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{OpenVariant, Scenario, ScenarioKind};
use super::scene::{generate_scene, DomainShift, SceneLayout};
use super::{make_fewshot_split, source_label_view, target_label_view, DomainTag, Sample, ShotCount};
use crate::error::{Error, Result};
use crate::rng;
use crate::taxonomy::TaxonomyPair;
use crate::tensor::{ClassIndex, LabelMap, Tensor3, IGNORE};

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub variant: OpenVariant,
    pub layout: SceneLayout,
    pub n_source: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub shots: ShotCount,
    pub disjoint_fewshot: bool,
    pub seed: u64,
    /// Defaults to [`super::default_shifts`] when absent.
    #[serde(default)]
    pub shifts: Option<(DomainShift, DomainShift)>,
}

impl DatasetParams {
    /// Desk-scale defaults: 32×32, 300 source, 300 unlabeled, 10 shots.
    pub fn new(scenario: ScenarioKind, seed: u64) -> Self {
        DatasetParams {
            scenario,
            variant: OpenVariant::Unlabeled,
            layout: SceneLayout::default(),
            n_source: 300,
            n_unlabeled: 300,
            n_test: 100,
            shots: ShotCount::Exactly(10),
            disjoint_fewshot: true,
            seed,
            shifts: None,
        }
    }

    pub fn scenario(&self) -> Scenario {
        match self.shifts {
            Some((s, t)) => Scenario::with_shifts(self.scenario, self.variant, s, t),
            None => Scenario::new(self.scenario, self.variant),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_source == 0 {
            problems.push("n_source must be >= 1");
        }
        if self.n_unlabeled == 0 {
            problems.push("n_unlabeled must be >= 1");
        }
        if self.n_test == 0 {
            problems.push("n_test must be >= 1");
        }
        if self.shots == ShotCount::Exactly(0) {
            problems.push("few-shot count must be >= 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotEntry {
    pub id: String,
    pub class: ClassIndex,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub source: Vec<String>,
    pub unlabeled: Vec<String>,
    pub fewshot: Vec<FewShotEntry>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub params: DatasetParams,
    pub taxonomy_file: String,
    pub splits: Splits,
}

/// Source, unlabeled target, few-shot target and held-out target test samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenario: Scenario,
    /// Labels in the source label space.
    pub source: Vec<Sample>,
    /// All-IGNORE labels.
    pub unlabeled: Vec<Sample>,
    /// Target images labeled for one inconsistent class each.
    pub fewshot: Vec<(ClassIndex, Sample)>,
    /// Ground-truth target labels.
    pub test: Vec<Sample>,
}

fn sub_seed(seed: u64, name: &str) -> u64 {
    rng::stream(seed, name).random()
}

impl Dataset {
    pub fn generate(params: DatasetParams) -> Result<Dataset> {
        params.validate()?;
        let scenario = params.scenario();
        let layout = params.layout;
        let source_classes = scenario.source_scene_classes();

        let scenes = |name: &str, n: usize, shift: &DomainShift, allowed: Option<&[ClassIndex]>| -> Result<Vec<Sample>> {
            let seed = sub_seed(params.seed, name);
            (0..n)
                .into_par_iter()
                .map(|i| {
                    generate_scene(
                        seed,
                        i as u64,
                        &layout,
                        shift,
                        &scenario.palette,
                        allowed,
                        DomainTag::Source,
                        format!("{name}-{i:04}"),
                    )
                })
                .collect()
        };

        let source = scenes("source", params.n_source, &scenario.source_shift, Some(&source_classes))?
            .iter()
            .map(|s| source_label_view(s, &scenario))
            .collect::<Result<Vec<_>>>()?;
        let pool = scenes("unlabeled", params.n_unlabeled, &scenario.target_shift, None)?
            .iter()
            .map(|s| target_label_view(s, &scenario, DomainTag::TargetTest))
            .collect::<Result<Vec<_>>>()?;
        let test = scenes("test", params.n_test, &scenario.target_shift, None)?
            .iter()
            .map(|s| target_label_view(s, &scenario, DomainTag::TargetTest))
            .collect::<Result<Vec<_>>>()?;

        let mut fewshot_rng = rng::stream(params.seed, "fewshot-split");
        let fewshot = make_fewshot_split(
            &pool,
            &scenario.taxonomy,
            params.shots,
            params.disjoint_fewshot,
            &mut fewshot_rng,
        )?;
        let unlabeled: Vec<Sample> = pool.iter().map(|s| s.unlabeled(s.id.clone())).collect();

        let splits = Splits {
            source: source.iter().map(|s| s.id.clone()).collect(),
            unlabeled: unlabeled.iter().map(|s| s.id.clone()).collect(),
            fewshot: fewshot
                .iter()
                .map(|(c, s)| FewShotEntry {
                    id: s.id.clone(),
                    class: *c,
                })
                .collect(),
            test: test.iter().map(|s| s.id.clone()).collect(),
        };
        Ok(Dataset {
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                params,
                taxonomy_file: "taxonomy.json".into(),
                splits,
            },
            scenario,
            source,
            unlabeled,
            fewshot,
            test,
        })
    }

    pub fn taxonomy(&self) -> &TaxonomyPair {
        &self.scenario.taxonomy
    }

    /// Write `manifest.json`, `taxonomy.json`, `images/*.png`, `labels/*.png`.
    /// Unlabeled samples get no label file.
    pub fn save(&self, dir: &Path, overwrite: bool) -> Result<()> {
        prepare_output_dir(dir, overwrite)?;
        let images = dir.join("images");
        let labels = dir.join("labels");
        fs::create_dir_all(&images).map_err(Error::io(&images))?;
        fs::create_dir_all(&labels).map_err(Error::io(&labels))?;

        let labeled = self
            .source
            .iter()
            .chain(self.fewshot.iter().map(|(_, s)| s))
            .chain(&self.test);
        for sample in labeled {
            write_rgb(&images.join(format!("{}.png", sample.id)), &sample.image)?;
            write_label(&labels.join(format!("{}.png", sample.id)), &sample.label)?;
        }
        for sample in &self.unlabeled {
            write_rgb(&images.join(format!("{}.png", sample.id)), &sample.image)?;
        }
        self.taxonomy().save(&dir.join(&self.manifest.taxonomy_file))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(Error::json(&path))?;
        fs::write(&path, text).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::InvalidArgument(format!(
                "dataset manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let scenario = manifest.params.scenario();
        let declared = TaxonomyPair::load(&dir.join(&manifest.taxonomy_file))?;
        if declared.to_file() != scenario.taxonomy.to_file() {
            return Err(Error::Taxonomy(vec![format!(
                "{} does not match the `{}` scenario",
                manifest.taxonomy_file, manifest.params.scenario
            )]));
        }

        let images = dir.join("images");
        let labels = dir.join("labels");
        let labeled = |id: &String, domain: DomainTag| -> Result<Sample> {
            Ok(Sample {
                id: id.clone(),
                domain,
                image: read_rgb(&images.join(format!("{id}.png")))?,
                label: read_label(&labels.join(format!("{id}.png")))?,
            })
        };
        let splits = &manifest.splits;
        let source = splits
            .source
            .par_iter()
            .map(|id| labeled(id, DomainTag::Source))
            .collect::<Result<Vec<_>>>()?;
        let test = splits
            .test
            .par_iter()
            .map(|id| labeled(id, DomainTag::TargetTest))
            .collect::<Result<Vec<_>>>()?;
        let fewshot = splits
            .fewshot
            .par_iter()
            .map(|e| Ok((e.class, labeled(&e.id, DomainTag::TargetFewshot)?)))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = splits
            .unlabeled
            .par_iter()
            .map(|id| {
                let image = read_rgb(&images.join(format!("{id}.png")))?;
                let (h, w) = (image.height, image.width);
                Ok(Sample {
                    id: id.clone(),
                    domain: DomainTag::TargetUnlabeled,
                    image,
                    label: LabelMap::filled(h, w, IGNORE),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        validate_labels(&source, scenario.taxonomy.source().count())?;
        validate_labels(&test, scenario.taxonomy.target().count())?;
        for (class, s) in &fewshot {
            if s.label.data.iter().any(|v| *v != IGNORE && v != class) {
                return Err(Error::Class {
                    index: *class,
                    reason: format!("few-shot sample {} labels classes other than its own", s.id),
                });
            }
        }
        Ok(Dataset {
            manifest,
            scenario,
            source,
            unlabeled,
            fewshot,
            test,
        })
    }
}

fn validate_labels(samples: &[Sample], count: usize) -> Result<()> {
    for s in samples {
        if let Some(&bad) = s.label.data.iter().find(|&&v| usize::from(v) > count) {
            return Err(Error::Class {
                index: bad,
                reason: format!("label of {} outside 0..={count}", s.id),
            });
        }
    }
    Ok(())
}

/// Create `dir`, refusing to reuse a non-empty directory unless `overwrite`.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(Error::io(dir))?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::Exists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error {
    let path: PathBuf = path.to_path_buf();
    move |source| Error::Image { path, source }
}

pub fn write_rgb(path: &Path, image: &Tensor3) -> Result<()> {
    let (h, w) = (image.height, image.width);
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized for the image")
        .save(path)
        .map_err(image_err(path))
}

pub fn read_rgb(path: &Path) -> Result<Tensor3> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor3::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, f64::from(px[c]) / 255.0);
        }
    }
    Ok(out)
}

/// Single-channel PNG, pixel value = class index.
pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    let buf = label
        .data
        .iter()
        .map(|&v| {
            u8::try_from(v).map_err(|_| Error::Class {
                index: v,
                reason: "label PNGs hold at most 255 classes".into(),
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    image::GrayImage::from_raw(label.width as u32, label.height as u32, buf)
        .expect("buffer sized for the label map")
        .save(path)
        .map_err(image_err(path))
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    Ok(LabelMap {
        height: img.height() as usize,
        width: img.width() as usize,
        data: img.into_raw().into_iter().map(ClassIndex::from).collect(),
    })
}
