use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} >= num_classes {classes}")]
    Label { label: usize, classes: usize },
    #[error("split fractions must be positive and sum to at most 1")]
    Fractions,
    #[error("invalid synthetic dataset parameters: {0}")]
    Synthetic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Gaussian-mixture classification data: one isotropic cluster per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub test: usize,
    /// Standard deviation of the class means; samples have unit noise.
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub seed: u64,
}

fn default_separation() -> f64 {
    1.5
}

/// Feature matrix plus labels, partitioned into disjoint splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

impl Dataset {
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self, DatasetError> {
        if spec.num_classes < 2 || spec.dim == 0 || spec.train == 0 || spec.val == 0 {
            return Err(DatasetError::Synthetic(format!("{spec:?}")));
        }
        if !(spec.separation.is_finite() && spec.separation > 0.0) {
            return Err(DatasetError::Synthetic(
                "separation must be positive".into(),
            ));
        }
        let mut rng = substream(spec.seed, "dataset");
        let means_dist = Normal::new(0.0, spec.separation).expect("valid normal");
        let noise = Normal::new(0.0, 1.0).expect("valid normal");
        let means: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| (0..spec.dim).map(|_| means_dist.sample(&mut rng)).collect())
            .collect();
        let total = spec.train + spec.val + spec.test;
        let mut features = Vec::with_capacity(total * spec.dim);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let label = i % spec.num_classes;
            labels.push(label);
            features.extend(means[label].iter().map(|m| m + noise.sample(&mut rng)));
        }
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng);
        let test = order.split_off(spec.train + spec.val);
        let val = order.split_off(spec.train);
        Ok(Self {
            dim: spec.dim,
            num_classes: spec.num_classes,
            features,
            labels,
            train: order,
            val,
            test,
        })
    }

    /// Label column first, then features. A non-numeric first line is
    /// treated as a header. Rows are shuffled with `seed` and split by the
    /// given train/val fractions; the remainder becomes the test split.
    pub fn from_csv(
        text: &str,
        train_fraction: f64,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        if !(train_fraction > 0.0
            && val_fraction > 0.0
            && train_fraction + val_fraction <= 1.0 + 1e-12)
        {
            return Err(DatasetError::Fractions);
        }
        let mut dim = None;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let first = fields.next().unwrap_or_default();
            let label = match first.parse::<usize>() {
                Ok(l) => l,
                Err(_) if lineno == 0 => continue,
                Err(_) => {
                    return Err(DatasetError::Csv {
                        line: lineno + 1,
                        msg: format!("bad label {first:?}"),
                    })
                }
            };
            let row = fields
                .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| DatasetError::Csv {
                    line: lineno + 1,
                    msg: "bad feature value".into(),
                })?;
            match dim {
                None if row.is_empty() => {
                    return Err(DatasetError::Csv {
                        line: lineno + 1,
                        msg: "no features".into(),
                    })
                }
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(DatasetError::Csv {
                        line: lineno + 1,
                        msg: format!("expected {d} features, got {}", row.len()),
                    })
                }
                _ => {}
            }
            labels.push(label);
            features.extend(row);
        }
        let dim = dim.ok_or(DatasetError::Empty)?;
        let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(seed, "csv-split"));
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n);
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_train);
        if n_val == 0 {
            return Err(DatasetError::Fractions);
        }
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
            train: order,
            val,
            test,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn features(&self, index: usize) -> &[f64] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    /// Dataset-level indices for positions inside a split.
    pub(crate) fn resolve(
        &self,
        split: Split,
        positions: &[usize],
    ) -> Result<Vec<usize>, super::EvalError> {
        let ids = self.split(split);
        positions
            .iter()
            .map(|&p| {
                ids.get(p).copied().ok_or(super::EvalError::BatchIndex {
                    index: p,
                    len: ids.len(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            dim: 4,
            train: 60,
            val: 30,
            test: 9,
            separation: 2.0,
            seed: 5,
        }
    }

    #[test]
    fn synthetic_splits_are_disjoint_and_labels_valid() {
        let d = Dataset::synthetic(&spec()).unwrap();
        assert_eq!(d.len(), 99);
        let train: HashSet<_> = d.split(Split::Train).iter().collect();
        let val: HashSet<_> = d.split(Split::Val).iter().collect();
        let test: HashSet<_> = d.split(Split::Test).iter().collect();
        assert_eq!((train.len(), val.len(), test.len()), (60, 30, 9));
        assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        assert!((0..d.len()).all(|i| d.label(i) < 3));
        assert_eq!(d, Dataset::synthetic(&spec()).unwrap());
    }

    #[test]
    fn csv_loading() {
        let text = "label,x,y\n0,1.0,2.0\n1,3.0,4.0\n2,5,6\n0,7,8\n1,9,10\n";
        let d = Dataset::from_csv(text, 0.6, 0.4, 1).unwrap();
        assert_eq!((d.dim(), d.num_classes(), d.len()), (2, 3, 5));
        assert_eq!(d.split(Split::Train).len() + d.split(Split::Val).len(), 5);
        let i = (0..5).find(|&i| d.label(i) == 2).unwrap();
        assert_eq!(d.features(i), &[5.0, 6.0]);

        assert!(matches!(
            Dataset::from_csv("0,1\n1,2,3\n", 0.5, 0.5, 0),
            Err(DatasetError::Csv { line: 2, .. })
        ));
        assert!(matches!(
            Dataset::from_csv("0,1\nx,2\n", 0.5, 0.5, 0),
            Err(DatasetError::Csv { line: 2, .. })
        ));
        assert_eq!(Dataset::from_csv("", 0.5, 0.5, 0), Err(DatasetError::Empty));
        assert_eq!(
            Dataset::from_csv("0,1\n", 0.8, 0.8, 0),
            Err(DatasetError::Fractions)
        );
    }
}
