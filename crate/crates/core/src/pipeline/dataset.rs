//! Labeled examples, stratified train/test splits and cross-validation folds.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::models::LabelSet;

/// One training record: tracker reference, component, label and log text.
/// Field order matches the exchange format `{id, component, label, log}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub component: String,
    pub label: String,
    pub log: String,
}

impl LabeledExample {
    pub fn new(
        id: impl Into<String>,
        component: impl Into<String>,
        label: impl Into<String>,
        log: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            component: component.into(),
            label: label.into(),
            log: log.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    label_set: LabelSet,
}

impl Dataset {
    /// Builds a dataset. Without a pinned label set, labels are taken in
    /// first-seen order.
    pub fn new(
        examples: Vec<LabeledExample>,
        label_set: Option<LabelSet>,
    ) -> Result<Self, PipelineError> {
        let label_set = match label_set {
            Some(l) => l,
            None => {
                let mut seen: Vec<&str> = Vec::new();
                for e in &examples {
                    if !seen.contains(&e.label.as_str()) {
                        seen.push(&e.label);
                    }
                }
                LabelSet::new(seen).map_err(|_| PipelineError::EmptyDataset)?
            }
        };
        let mut ids = HashSet::new();
        for e in &examples {
            if !label_set.contains(&e.label) {
                return Err(PipelineError::UnknownLabel(e.label.clone()));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(PipelineError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self {
            examples,
            label_set,
        })
    }

    /// Parses a JSON array of `{id, component, label, log}` records.
    pub fn from_json(bytes: &[u8], label_set: Option<LabelSet>) -> Result<Self, PipelineError> {
        let examples: Vec<LabeledExample> =
            serde_json::from_slice(bytes).map_err(|e| PipelineError::Malformed(e.to_string()))?;
        Self::new(examples, label_set)
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.examples
            .iter()
            .map(|e| self.label_set.index_of(&e.label).expect("validated label"))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_set.len()];
        for c in self.class_ids() {
            counts[c] += 1;
        }
        counts
    }

    pub fn texts(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.log.as_str()).collect()
    }

    fn subset(&self, mut indices: Vec<usize>) -> Dataset {
        indices.sort_unstable();
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            label_set: self.label_set.clone(),
        }
    }

    /// Stratified, seeded train/test partition. Each class contributes
    /// `round(count * test_fraction)` test examples, clamped so both sides
    /// get at least one.
    pub fn split_train_test(
        &self,
        test_fraction: f64,
        seed: u64,
    ) -> Result<(Dataset, Dataset), PipelineError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(PipelineError::InvalidFraction(test_fraction));
        }
        let by_class = self.indices_by_class();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, mut idx) in by_class.into_iter().enumerate() {
            if idx.len() < 2 {
                return Err(PipelineError::ClassTooSmall {
                    label: self.label_set.name(class).to_owned(),
                    count: idx.len(),
                    required: 2,
                });
            }
            idx.shuffle(&mut rng);
            let n_test =
                ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        Ok((self.subset(train), self.subset(test)))
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.label_set.len()];
        for (i, c) in self.class_ids().into_iter().enumerate() {
            by_class[c].push(i);
        }
        by_class
    }
}

/// Validation index sets for stratified k-fold cross-validation.
///
/// Classes are shuffled independently and dealt round-robin, continuing
/// the rotation across classes, so every fold holds each class to within
/// one example of its proportional share.
pub fn stratified_folds(
    labels: &[usize],
    n_classes: usize,
    k: usize,
    seed: u64,
    label_names: &LabelSet,
) -> Result<Vec<Vec<usize>>, PipelineError> {
    if k < 2 {
        return Err(PipelineError::InvalidFolds(k));
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < k {
            return Err(PipelineError::ClassTooSmall {
                label: label_names.name(class).to_owned(),
                count: idx.len(),
                required: k,
            });
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[offset % k].push(i);
            offset += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(classes: usize, per_class: usize) -> Dataset {
        let labels: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let examples = (0..classes * per_class)
            .map(|i| {
                LabeledExample::new(
                    format!("id-{i}"),
                    "comp",
                    &labels[i % classes],
                    format!("log {i}"),
                )
            })
            .collect();
        Dataset::new(examples, None).unwrap()
    }

    #[test]
    fn stratified_80_20() {
        let d = balanced(4, 25);
        let (train, test) = d.split_train_test(0.2, 1).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(test.class_counts(), vec![5, 5, 5, 5]);
        let ids: HashSet<&str> = train.examples().iter().map(|e| e.id.as_str()).collect();
        assert!(test.examples().iter().all(|e| !ids.contains(e.id.as_str())));
    }

    #[test]
    fn split_is_deterministic() {
        let d = balanced(3, 10);
        assert_eq!(
            d.split_train_test(0.3, 9).unwrap(),
            d.split_train_test(0.3, 9).unwrap()
        );
        assert_ne!(
            d.split_train_test(0.3, 9).unwrap().1,
            d.split_train_test(0.3, 10).unwrap().1
        );
    }

    #[test]
    fn two_example_class_clamps_to_one_each() {
        let mut ex: Vec<LabeledExample> = balanced(1, 10).examples().to_vec();
        ex.push(LabeledExample::new("x1", "c", "rare", "a"));
        ex.push(LabeledExample::new("x2", "c", "rare", "b"));
        let d = Dataset::new(ex, None).unwrap();
        let (train, test) = d.split_train_test(0.2, 3).unwrap();
        assert_eq!(test.class_counts(), vec![2, 1]);
        assert_eq!(train.class_counts(), vec![8, 1]);
    }

    #[test]
    fn singleton_class_is_too_small() {
        let mut ex: Vec<LabeledExample> = balanced(1, 10).examples().to_vec();
        ex.push(LabeledExample::new("x1", "c", "rare", "a"));
        let d = Dataset::new(ex, None).unwrap();
        assert!(matches!(
            d.split_train_test(0.2, 0),
            Err(PipelineError::ClassTooSmall { count: 1, .. })
        ));
    }

    #[test]
    fn validation_errors() {
        let pinned = LabelSet::new(["a"]).unwrap();
        let bad = vec![LabeledExample::new("1", "c", "b", "x")];
        assert!(matches!(
            Dataset::new(bad, Some(pinned)),
            Err(PipelineError::UnknownLabel(_))
        ));
        let dup = vec![
            LabeledExample::new("1", "c", "a", "x"),
            LabeledExample::new("1", "c", "a", "y"),
        ];
        assert!(matches!(
            Dataset::new(dup, None),
            Err(PipelineError::DuplicateId(_))
        ));
        assert!(balanced(2, 4).split_train_test(1.0, 0).is_err());
    }

    #[test]
    fn folds_are_stratified_and_disjoint() {
        let d = balanced(3, 11);
        let y = d.class_ids();
        let folds = stratified_folds(&y, 3, 4, 5, d.label_set()).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
        for f in &folds {
            for c in 0..3 {
                let n = f.iter().filter(|&&i| y[i] == c).count() as f64;
                assert!((n - 11.0 / 4.0).abs() <= 1.0, "{n}");
            }
        }
    }
}
