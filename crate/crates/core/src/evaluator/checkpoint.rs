//! Binary checkpoint format.
//!
//! ```text
//! "GNAS" | version: u32 | space fingerprint: u64 | num_layers: u32
//! per layer:  num_choices: u32
//!   per choice: num_tensors: u32, then tensors
//! classifier: num_tensors: u32, then tensors
//! tensor:     rows: u32 | cols: u32 | rows*cols f64
//! ```
//!
//! All integers and floats little-endian. Each parameter group stores its
//! parameters followed by the matching momentum buffers.

use thiserror::Error;

use super::supernet::{ParamGroup, SupernetWeights, Tensor};
use super::EvalError;
use crate::search_space::SearchSpace;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GNAS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint was written for a different search space (fingerprint {found:016x}, expected {expected:016x})")]
    SpaceMismatch { expected: u64, found: u64 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
    #[error("non-finite value in checkpoint")]
    NonFinite,
    #[error("malformed checkpoint: {0}")]
    Layout(String),
    #[error(transparent)]
    Shape(#[from] EvalError),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_group(out: &mut Vec<u8>, g: &ParamGroup) {
    put_u32(out, (g.params.len() + g.momentum.len()) as u32);
    for t in g.params.iter().chain(&g.momentum) {
        put_u32(out, t.rows as u32);
        put_u32(out, t.cols as u32);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(weights: &SupernetWeights, space_fingerprint: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&space_fingerprint.to_le_bytes());
    put_u32(&mut out, weights.blocks.len() as u32);
    for layer in &weights.blocks {
        put_u32(&mut out, layer.len() as u32);
        for g in layer {
            put_group(&mut out, g);
        }
    }
    put_group(&mut out, &weights.classifier);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Layout("tensor too large".into()))?;
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite);
        }
        Ok(Tensor { rows, cols, data })
    }

    fn group(&mut self) -> Result<ParamGroup, CheckpointError> {
        let n = self.u32()? as usize;
        if !n.is_multiple_of(2) {
            return Err(CheckpointError::Layout(format!(
                "odd tensor count {n} in parameter group"
            )));
        }
        let mut tensors = (0..n)
            .map(|_| self.tensor())
            .collect::<Result<Vec<_>, _>>()?;
        let momentum = tensors.split_off(n / 2);
        Ok(ParamGroup {
            params: tensors,
            momentum,
        })
    }
}

/// Decodes and validates a checkpoint against `space`.
pub fn decode_checkpoint(
    bytes: &[u8],
    space: &SearchSpace,
) -> Result<SupernetWeights, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let found = r.u64()?;
    let expected = space.fingerprint();
    if found != expected {
        return Err(CheckpointError::SpaceMismatch { expected, found });
    }
    let layers = r.u32()? as usize;
    if layers != space.num_layers() {
        return Err(CheckpointError::Layout(format!(
            "{layers} layers, space has {}",
            space.num_layers()
        )));
    }
    let mut blocks = Vec::with_capacity(layers);
    for _ in 0..layers {
        let n = r.u32()? as usize;
        blocks.push((0..n).map(|_| r.group()).collect::<Result<Vec<_>, _>>()?);
    }
    let classifier = r.group()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    if classifier.params.is_empty() {
        return Err(CheckpointError::Layout("missing classifier".into()));
    }
    let weights = SupernetWeights { blocks, classifier };
    weights.check_shapes(space, weights.num_classes())?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sample() -> (SearchSpace, SupernetWeights) {
        let space = SearchSpace::uniform(3, 5, &[0.5, 2.0], true).unwrap();
        let mut w = SupernetWeights::init(&space, 4, &mut substream(3, "ckpt"));
        w.blocks[1][2].momentum[0].data[3] = -0.125;
        (space, w)
    }

    #[test]
    fn exact_round_trip() {
        let (space, w) = sample();
        let bytes = encode_checkpoint(&w, space.fingerprint());
        assert_eq!(&bytes[..4], b"GNAS");
        let back = decode_checkpoint(&bytes, &space).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode_checkpoint(&back, space.fingerprint()), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let (space, w) = sample();
        let bytes = encode_checkpoint(&w, space.fingerprint());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, &space),
            Err(CheckpointError::Magic)
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad, &space),
            Err(CheckpointError::Version(9))
        ));

        let other = SearchSpace::uniform(3, 5, &[0.5, 3.0], true).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes, &other),
            Err(CheckpointError::SpaceMismatch { .. })
        ));

        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], &space),
            Err(CheckpointError::Truncated)
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(
            decode_checkpoint(&bad, &space),
            Err(CheckpointError::Trailing(1))
        ));

        let mut nan = w.clone();
        nan.classifier.params[1].data[0] = f64::NAN;
        let bad = encode_checkpoint(&nan, space.fingerprint());
        assert!(matches!(
            decode_checkpoint(&bad, &space),
            Err(CheckpointError::NonFinite)
        ));

        let mut inf = w.clone();
        inf.blocks[2][1].params[0].data[0] = f64::INFINITY;
        let bad = encode_checkpoint(&inf, space.fingerprint());
        assert!(matches!(
            decode_checkpoint(&bad, &space),
            Err(CheckpointError::NonFinite)
        ));
    }
}
