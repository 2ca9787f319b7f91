//! Source/target label spaces and the relations between them.
//!
//! A [`TaxonomyPair`] declares, for every source class, which target classes
//! it corresponds to and how (consistent one-to-one, split into finer target
//! classes, or partially overlapping). Target classes that no source class
//! covers are declared as open. Class extents are declared, never inferred.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ClassIndex, IGNORE};

/// Ordered class names; class `i` (1-based) is `names[i - 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut problems = Vec::new();
        if names.is_empty() {
            problems.push("label space has no classes".to_string());
        }
        if names.len() >= usize::from(ClassIndex::MAX) {
            problems.push(format!("too many classes ({})", names.len()));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if name.trim().is_empty() {
                problems.push("empty class name".to_string());
            } else if !seen.insert(name.as_str()) {
                problems.push(format!("duplicate class name `{name}`"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Taxonomy(problems));
        }
        Ok(LabelSpace { names })
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: ClassIndex) -> Option<&str> {
        if index == IGNORE {
            return None;
        }
        self.names.get(usize::from(index) - 1).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<ClassIndex> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| (i + 1) as ClassIndex)
    }

    pub fn contains(&self, index: ClassIndex) -> bool {
        index != IGNORE && usize::from(index) <= self.count()
    }

    /// All class indices `1..=count`.
    pub fn indices(&self) -> impl Iterator<Item = ClassIndex> {
        1..=(self.count() as ClassIndex)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelationKind {
    Consistent,
    OpenTargetOnly,
    CoarseToFine,
    PartialOverlap,
    /// A source class with no target counterpart. Assigned by
    /// [`TaxonomyPair::classify`] to source classes that appear in no relation.
    UnlabeledSource,
}

impl RelationKind {
    pub fn is_consistent(self) -> bool {
        self == RelationKind::Consistent
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRelation {
    /// `None` only for [`RelationKind::OpenTargetOnly`].
    pub source: Option<ClassIndex>,
    pub kind: RelationKind,
    pub targets: Vec<ClassIndex>,
}

/// Per-class relation tags of a validated pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomySummary {
    /// `source_kinds[i - 1]` is the kind of source class `i`.
    pub source_kinds: Vec<RelationKind>,
    pub target_kinds: Vec<RelationKind>,
    /// Non-fatal findings, e.g. a target class fed by several overlapping source classes.
    pub warnings: Vec<String>,
}

impl TaxonomySummary {
    pub fn targets_of_kind(&self, kind: RelationKind) -> Vec<ClassIndex> {
        kinds_to_indices(&self.target_kinds, kind)
    }

    pub fn sources_of_kind(&self, kind: RelationKind) -> Vec<ClassIndex> {
        kinds_to_indices(&self.source_kinds, kind)
    }
}

fn kinds_to_indices(kinds: &[RelationKind], kind: RelationKind) -> Vec<ClassIndex> {
    kinds
        .iter()
        .enumerate()
        .filter(|(_, &k)| k == kind)
        .map(|(i, _)| (i + 1) as ClassIndex)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TaxonomyPair {
    source: LabelSpace,
    target: LabelSpace,
    relations: Vec<ClassRelation>,
    summary: TaxonomySummary,
    /// Relation index per source class (index 0 unused).
    by_source: Vec<Option<usize>>,
}

impl TaxonomyPair {
    pub fn new(source: LabelSpace, target: LabelSpace, relations: Vec<ClassRelation>) -> Result<Self> {
        let summary = classify(&source, &target, &relations)?;
        let mut by_source = vec![None; source.count() + 1];
        for (i, rel) in relations.iter().enumerate() {
            if let Some(s) = rel.source {
                by_source[usize::from(s)] = Some(i);
            }
        }
        Ok(TaxonomyPair {
            source,
            target,
            relations,
            summary,
            by_source,
        })
    }

    /// Identical label spaces related one-to-one.
    pub fn identity(space: LabelSpace) -> Self {
        let relations = space
            .indices()
            .map(|i| ClassRelation {
                source: Some(i),
                kind: RelationKind::Consistent,
                targets: vec![i],
            })
            .collect();
        TaxonomyPair::new(space.clone(), space, relations).expect("identity taxonomy is valid")
    }

    pub fn source(&self) -> &LabelSpace {
        &self.source
    }

    pub fn target(&self) -> &LabelSpace {
        &self.target
    }

    pub fn relations(&self) -> &[ClassRelation] {
        &self.relations
    }

    /// Relation tags computed at construction.
    pub fn classify(&self) -> &TaxonomySummary {
        &self.summary
    }

    pub fn relation_of(&self, source_index: ClassIndex) -> Option<&ClassRelation> {
        self.by_source
            .get(usize::from(source_index))
            .copied()
            .flatten()
            .map(|i| &self.relations[i])
    }

    /// The consistent index map from source to target. IGNORE maps to IGNORE.
    pub fn map_consistent(&self, source_index: ClassIndex) -> Result<ClassIndex> {
        if source_index == IGNORE {
            return Ok(IGNORE);
        }
        match self.relation_of(source_index) {
            Some(rel) if rel.kind.is_consistent() => Ok(rel.targets[0]),
            Some(rel) => Err(Error::Class {
                index: source_index,
                reason: format!(
                    "source class `{}` is {:?}; use stochastic mapping or relabeling",
                    self.source.name(source_index).unwrap_or("?"),
                    rel.kind
                ),
            }),
            None => Err(self.unknown_source(source_index)),
        }
    }

    /// Target candidates of a source class; a singleton for consistent classes.
    pub fn candidates(&self, source_index: ClassIndex) -> Result<&[ClassIndex]> {
        self.relation_of(source_index)
            .map(|rel| rel.targets.as_slice())
            .ok_or_else(|| self.unknown_source(source_index))
    }

    pub fn is_consistent_source(&self, source_index: ClassIndex) -> bool {
        self.relation_of(source_index)
            .is_some_and(|rel| rel.kind.is_consistent())
    }

    /// True when every class on both sides is consistent.
    pub fn is_fully_consistent(&self) -> bool {
        self.summary.source_kinds.iter().all(|k| k.is_consistent())
            && self.summary.target_kinds.iter().all(|k| k.is_consistent())
    }

    /// Target classes that are not the image of a consistent source class.
    pub fn inconsistent_targets(&self) -> Vec<ClassIndex> {
        self.summary
            .target_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| !k.is_consistent())
            .map(|(i, _)| (i + 1) as ClassIndex)
            .collect()
    }

    /// The unique source class whose candidate set contains `target_index`.
    pub fn source_of_target(&self, target_index: ClassIndex) -> Option<ClassIndex> {
        let mut found = self
            .relations
            .iter()
            .filter(|r| r.targets.contains(&target_index))
            .filter_map(|r| r.source);
        let first = found.next()?;
        match found.next() {
            None => Some(first),
            Some(_) => None,
        }
    }

    fn unknown_source(&self, index: ClassIndex) -> Error {
        Error::Class {
            index,
            reason: if self.source.contains(index) {
                "source class has no target relation".to_string()
            } else {
                format!("outside the source label space 1..={}", self.source.count())
            },
        }
    }

    pub fn to_file(&self) -> TaxonomyFile {
        let src = |i: ClassIndex| self.source.name(i).unwrap_or_default().to_string();
        let tgt = |i: ClassIndex| self.target.name(i).unwrap_or_default().to_string();
        TaxonomyFile {
            source_classes: self.source.names().to_vec(),
            target_classes: self.target.names().to_vec(),
            relations: self
                .relations
                .iter()
                .map(|r| RelationEntry {
                    source: r.source.map(src),
                    kind: r.kind,
                    targets: r.targets.iter().map(|&t| tgt(t)).collect(),
                })
                .collect(),
        }
    }

    pub fn from_file(file: &TaxonomyFile) -> Result<Self> {
        let source = LabelSpace::new(file.source_classes.iter().cloned())?;
        let target = LabelSpace::new(file.target_classes.iter().cloned())?;
        let mut problems = Vec::new();
        let mut relations = Vec::with_capacity(file.relations.len());
        for entry in &file.relations {
            let src = match &entry.source {
                Some(name) => match source.index_of(name) {
                    Some(i) => Some(i),
                    None => {
                        problems.push(format!("unknown source class `{name}`"));
                        continue;
                    }
                },
                None => None,
            };
            let mut targets = Vec::with_capacity(entry.targets.len());
            for name in &entry.targets {
                match target.index_of(name) {
                    Some(i) => targets.push(i),
                    None => problems.push(format!("unknown target class `{name}`")),
                }
            }
            relations.push(ClassRelation {
                source: src,
                kind: entry.kind,
                targets,
            });
        }
        if !problems.is_empty() {
            return Err(Error::Taxonomy(problems));
        }
        TaxonomyPair::new(source, target, relations)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let file: TaxonomyFile = serde_json::from_str(&text).map_err(Error::json(path))?;
        TaxonomyPair::from_file(&file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).map_err(Error::json(path))?;
        std::fs::write(path, text).map_err(Error::io(path))
    }
}

/// On-disk taxonomy declaration. Classes are referenced by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub source_classes: Vec<String>,
    pub target_classes: Vec<String>,
    pub relations: Vec<RelationEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEntry {
    #[serde(default)]
    pub source: Option<String>,
    pub kind: RelationKind,
    pub targets: Vec<String>,
}

/// Validate a relation table and tag every class with its relation kind.
pub fn classify(
    source: &LabelSpace,
    target: &LabelSpace,
    relations: &[ClassRelation],
) -> Result<TaxonomySummary> {
    let mut problems = Vec::new();
    let mut warnings = Vec::new();
    let mut source_kinds: Vec<Option<RelationKind>> = vec![None; source.count()];
    let mut target_kinds: Vec<Vec<RelationKind>> = vec![Vec::new(); target.count()];
    let tname = |i: ClassIndex| target.name(i).unwrap_or("?").to_string();
    let sname = |i: ClassIndex| source.name(i).unwrap_or("?").to_string();

    for (n, rel) in relations.iter().enumerate() {
        let label = match rel.source {
            Some(s) => format!("relation {n} (source `{}`)", sname(s)),
            None => format!("relation {n}"),
        };
        let bad_targets: Vec<_> = rel.targets.iter().filter(|&&t| !target.contains(t)).collect();
        if !bad_targets.is_empty() {
            problems.push(format!("{label}: target indices {bad_targets:?} out of range"));
            continue;
        }
        let distinct: BTreeSet<_> = rel.targets.iter().collect();
        if distinct.len() != rel.targets.len() {
            problems.push(format!("{label}: repeated target candidates"));
        }
        match rel.kind {
            RelationKind::OpenTargetOnly => {
                if rel.source.is_some() {
                    problems.push(format!("{label}: open target relation must not name a source class"));
                }
                if rel.targets.len() != 1 {
                    problems.push(format!("{label}: open target relation needs exactly one target class"));
                }
            }
            RelationKind::UnlabeledSource => {
                problems.push(format!(
                    "{label}: UNLABELED_SOURCE is implied by omitting the source class, not declared"
                ));
            }
            kind => {
                let Some(s) = rel.source else {
                    problems.push(format!("{label}: {kind:?} relation needs a source class"));
                    continue;
                };
                if !source.contains(s) {
                    problems.push(format!("{label}: source index {s} out of range"));
                    continue;
                }
                let need = if kind.is_consistent() { 1..=1 } else { 2..=usize::MAX };
                if !need.contains(&rel.targets.len()) {
                    problems.push(format!(
                        "{label}: {kind:?} needs {} target candidates, got {}",
                        if kind.is_consistent() { "exactly 1" } else { "at least 2" },
                        rel.targets.len()
                    ));
                }
                let slot = &mut source_kinds[usize::from(s) - 1];
                if slot.is_some() {
                    problems.push(format!("source class `{}` assigned by more than one relation", sname(s)));
                }
                *slot = Some(kind);
            }
        }
        for &t in &rel.targets {
            target_kinds[usize::from(t) - 1].push(rel.kind);
        }
    }

    let mut final_targets = Vec::with_capacity(target.count());
    for (i, kinds) in target_kinds.iter().enumerate() {
        let t = (i + 1) as ClassIndex;
        let distinct: BTreeSet<_> = kinds.iter().copied().collect();
        match (kinds.len(), distinct.len()) {
            (0, _) => {
                problems.push(format!("target class `{}` is covered by no relation", tname(t)));
                final_targets.push(RelationKind::OpenTargetOnly);
            }
            (1, _) => final_targets.push(kinds[0]),
            (_, 1) if !kinds[0].is_consistent() && kinds[0] != RelationKind::OpenTargetOnly => {
                warnings.push(format!(
                    "target class `{}` receives mass from {} overlapping source classes",
                    tname(t),
                    kinds.len()
                ));
                final_targets.push(kinds[0]);
            }
            _ => {
                problems.push(format!(
                    "target class `{}` appears in {} relations of kinds {:?}",
                    tname(t),
                    kinds.len(),
                    distinct
                ));
                final_targets.push(kinds[0]);
            }
        }
    }

    if !problems.is_empty() {
        return Err(Error::Taxonomy(problems));
    }
    Ok(TaxonomySummary {
        source_kinds: source_kinds
            .into_iter()
            .map(|k| k.unwrap_or(RelationKind::UnlabeledSource))
            .collect(),
        target_kinds: final_targets,
        warnings,
    })
}
