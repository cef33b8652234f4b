//! Discrete architecture space, paths through it, and per-path costs.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rng::digest64;

/// Version written into (and required from) search-space files.
pub const SPACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("search space has no layers")]
    NoLayers,
    #[error("layer {layer} has no operation choices")]
    EmptyLayer { layer: usize },
    #[error("layer {layer}: duplicate choice id {id}")]
    DuplicateChoiceId { layer: usize, id: u32 },
    #[error(
        "layer {layer}: identity choice requires input dim == output dim ({input} != {output})"
    )]
    IdentityDimMismatch {
        layer: usize,
        input: usize,
        output: usize,
    },
    #[error("layer {layer} choice {choice}: identity must have zero flops")]
    IdentityWithFlops { layer: usize, choice: usize },
    #[error("layer {layer} choice {choice}: width factor must be positive and finite")]
    BadWidthFactor { layer: usize, choice: usize },
    #[error("layer {layer} choice {choice}: latency must be finite and non-negative")]
    BadLatency { layer: usize, choice: usize },
    #[error("layer {layer}: zero-sized dimension")]
    ZeroDim { layer: usize },
    #[error("layer {layer}: input dim {got} does not match previous output dim {expected}")]
    DimChain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("unsupported search-space format version {0} (expected {SPACE_FORMAT_VERSION})")]
    Version(u32),
    #[error("path has {got} entries, space has {expected} layers")]
    PathLength { expected: usize, got: usize },
    #[error("path index {index} at layer {layer} out of range ({choices} choices)")]
    PathIndex {
        layer: usize,
        index: usize,
        choices: usize,
    },
    #[error("malformed path string {0:?}")]
    PathParse(String),
    #[error("malformed search-space file: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Identity,
    AffineRelu,
}

/// One selectable operation at a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationChoice {
    pub id: u32,
    pub kind: OpKind,
    /// Hidden-width multiplier of an affine block. Ignored for identity.
    #[serde(default = "one")]
    pub width_factor: f64,
    pub flops: u64,
    pub latency_ms: f64,
}

fn one() -> f64 {
    1.0
}

impl OperationChoice {
    pub fn identity(id: u32, latency_ms: f64) -> Self {
        Self {
            id,
            kind: OpKind::Identity,
            width_factor: 1.0,
            flops: 0,
            latency_ms,
        }
    }

    /// Affine block whose flops follow [`affine_block_flops`].
    pub fn affine(
        id: u32,
        input_dim: usize,
        output_dim: usize,
        width_factor: f64,
        latency_ms: f64,
    ) -> Self {
        Self {
            id,
            kind: OpKind::AffineRelu,
            width_factor,
            flops: affine_block_flops(input_dim, output_dim, width_factor),
            latency_ms,
        }
    }
}

/// Hidden width of an affine block between `output_dim` features.
pub fn hidden_width(output_dim: usize, width_factor: f64) -> usize {
    ((output_dim as f64 * width_factor).round() as usize).max(1)
}

/// Multiply-add count (two flops each) of an expand/project affine block.
pub fn affine_block_flops(input_dim: usize, output_dim: usize, width_factor: f64) -> u64 {
    let hidden = hidden_width(output_dim, width_factor) as u64;
    2 * (input_dim as u64 * hidden + hidden * output_dim as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub choices: Vec<OperationChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSpace {
    pub version: u32,
    pub layers: Vec<Layer>,
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            version: u32,
            layers: Vec<Layer>,
        }
        let raw = Raw::deserialize(d)?;
        SearchSpace::new_versioned(raw.version, raw.layers).map_err(serde::de::Error::custom)
    }
}

impl SearchSpace {
    pub fn new(layers: Vec<Layer>) -> Result<Self, SpaceError> {
        Self::new_versioned(SPACE_FORMAT_VERSION, layers)
    }

    fn new_versioned(version: u32, layers: Vec<Layer>) -> Result<Self, SpaceError> {
        if version != SPACE_FORMAT_VERSION {
            return Err(SpaceError::Version(version));
        }
        let space = Self { version, layers };
        space.validate()?;
        Ok(space)
    }

    /// `num_layers` equal layers of width `dim`. Choice 0 is identity when
    /// `with_identity` is set; the rest are affine blocks with the given
    /// width factors. Latency is a fixed per-block overhead plus a term
    /// proportional to flops.
    pub fn uniform(
        num_layers: usize,
        dim: usize,
        widths: &[f64],
        with_identity: bool,
    ) -> Result<Self, SpaceError> {
        let layers = (0..num_layers)
            .map(|_| {
                let mut choices = Vec::new();
                if with_identity {
                    choices.push(OperationChoice::identity(0, 0.0));
                }
                for &w in widths {
                    let id = choices.len() as u32;
                    let flops = affine_block_flops(dim, dim, w);
                    choices.push(OperationChoice::affine(
                        id,
                        dim,
                        dim,
                        w,
                        0.05 + flops as f64 * 1e-4,
                    ));
                }
                Layer {
                    input_dim: dim,
                    output_dim: dim,
                    choices,
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.layers.is_empty() {
            return Err(SpaceError::NoLayers);
        }
        let mut prev_out: Option<usize> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(SpaceError::ZeroDim { layer: l });
            }
            if let Some(expected) = prev_out {
                if expected != layer.input_dim {
                    return Err(SpaceError::DimChain {
                        layer: l,
                        expected,
                        got: layer.input_dim,
                    });
                }
            }
            prev_out = Some(layer.output_dim);
            if layer.choices.is_empty() {
                return Err(SpaceError::EmptyLayer { layer: l });
            }
            let mut ids = HashSet::new();
            for (c, choice) in layer.choices.iter().enumerate() {
                if !ids.insert(choice.id) {
                    return Err(SpaceError::DuplicateChoiceId {
                        layer: l,
                        id: choice.id,
                    });
                }
                if !(choice.latency_ms.is_finite() && choice.latency_ms >= 0.0) {
                    return Err(SpaceError::BadLatency {
                        layer: l,
                        choice: c,
                    });
                }
                match choice.kind {
                    OpKind::Identity => {
                        if layer.input_dim != layer.output_dim {
                            return Err(SpaceError::IdentityDimMismatch {
                                layer: l,
                                input: layer.input_dim,
                                output: layer.output_dim,
                            });
                        }
                        if choice.flops != 0 {
                            return Err(SpaceError::IdentityWithFlops {
                                layer: l,
                                choice: c,
                            });
                        }
                    }
                    OpKind::AffineRelu => {
                        if !(choice.width_factor.is_finite() && choice.width_factor > 0.0) {
                            return Err(SpaceError::BadWidthFactor {
                                layer: l,
                                choice: c,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_choices(&self, layer: usize) -> usize {
        self.layers[layer].choices.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn choice(&self, layer: usize, index: usize) -> &OperationChoice {
        &self.layers[layer].choices[index]
    }

    /// Exact number of paths: the product of per-layer choice counts.
    pub fn space_size(&self) -> BigUint {
        self.layers.iter().fold(BigUint::from(1u32), |acc, l| {
            acc * BigUint::from(l.choices.len())
        })
    }

    /// Space size when it fits in a `u64`.
    pub fn space_size_u64(&self) -> Option<u64> {
        self.layers
            .iter()
            .try_fold(1u64, |acc, l| acc.checked_mul(l.choices.len() as u64))
    }

    /// Each layer's index independently uniform over its choices.
    pub fn uniform_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Path {
        Path(
            self.layers
                .iter()
                .map(|l| rng.random_range(0..l.choices.len()))
                .collect(),
        )
    }

    pub fn validate_path(&self, path: &Path) -> Result<(), SpaceError> {
        if path.len() != self.layers.len() {
            return Err(SpaceError::PathLength {
                expected: self.layers.len(),
                got: path.len(),
            });
        }
        for (layer, (&index, l)) in path.ops().iter().zip(&self.layers).enumerate() {
            if index >= l.choices.len() {
                return Err(SpaceError::PathIndex {
                    layer,
                    index,
                    choices: l.choices.len(),
                });
            }
        }
        Ok(())
    }

    pub fn path_cost(&self, path: &Path) -> Result<CostSummary, SpaceError> {
        self.validate_path(path)?;
        let mut cost = CostSummary::default();
        for (layer, &index) in path.ops().iter().enumerate() {
            let c = self.choice(layer, index);
            cost.flops += c.flops;
            cost.latency_ms += c.latency_ms;
        }
        Ok(cost)
    }

    /// Every path in lexicographic order. Only sensible for small spaces.
    pub fn enumerate(&self) -> impl Iterator<Item = Path> + '_ {
        let counts: Vec<usize> = self.layers.iter().map(|l| l.choices.len()).collect();
        let total = self.space_size_u64().expect("space too large to enumerate");
        (0..total).map(move |mut code| {
            let mut ops = vec![0; counts.len()];
            for (slot, &n) in ops.iter_mut().zip(&counts).rev() {
                *slot = (code % n as u64) as usize;
                code /= n as u64;
            }
            Path(ops)
        })
    }

    /// Digest of the canonical JSON form; ties checkpoints to their space.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("search space serializes");
        digest64(&[b"gnas-space", &json])
    }

    pub fn from_json(text: &str) -> Result<Self, SpaceError> {
        serde_json::from_str(text).map_err(|e| SpaceError::Json(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("search space serializes")
    }
}

/// One operation index per layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Path(pub Vec<usize>);

impl Path {
    pub fn new(ops: Vec<usize>) -> Self {
        Self(ops)
    }

    pub fn ops(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

impl FromStr for Path {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Ok(Path(Vec::new()));
        }
        s.split(',')
            .map(|tok| {
                // Reject anything `to_string` would not have produced.
                if tok.is_empty()
                    || (tok.len() > 1 && tok.starts_with('0'))
                    || !tok.bytes().all(|b| b.is_ascii_digit())
                {
                    return Err(SpaceError::PathParse(s.to_string()));
                }
                tok.parse::<usize>()
                    .map_err(|_| SpaceError::PathParse(s.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Path)
    }
}

impl Serialize for Path {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub flops: u64,
    pub latency_ms: f64,
}

/// Hardware budget; unset bounds are unconstrained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_ms: Option<f64>,
}

impl Constraint {
    pub fn has_bound(&self) -> bool {
        self.max_flops.is_some() || self.max_latency_ms.is_some()
    }

    /// Inclusive on every set bound.
    pub fn check(&self, cost: &CostSummary) -> bool {
        self.max_flops.is_none_or(|b| cost.flops <= b)
            && self.max_latency_ms.is_none_or(|b| cost.latency_ms <= b)
    }
}

pub fn check_constraint(constraint: &Constraint, cost: &CostSummary) -> bool {
    constraint.check(cost)
}
