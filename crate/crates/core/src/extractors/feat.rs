//! FEAT files: precomputed per-frame backbone features.
//!
//! Layout (little-endian): magic `FEAT1\0`, `u32 T`, `u32 D`, then `T·D`
//! `f32` values row-major.

use std::path::Path;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

pub const FEAT_MAGIC: &[u8] = b"FEAT1\0";

/// `(T, D)` features for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub data: Tensor<f32>,
    /// Features produced by an external backbone are never trained.
    pub trainable: bool,
}

impl FeatureSequence {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::shape(format!("features must be (T, D), got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(Self { data, trainable: false })
    }

    pub fn len(&self) -> usize {
        self.data.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.data.dim(1)
    }
}

pub fn encode_feat(features: &FeatureSequence) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(FEAT_MAGIC.len() + 8 + 4 * features.data.len());
    out.extend_from_slice(FEAT_MAGIC);
    binio::put_u32(&mut out, binio::dim_u32(features.len(), "T")?);
    binio::put_u32(&mut out, binio::dim_u32(features.width(), "D")?);
    binio::put_f32s(&mut out, features.data.data().iter().copied());
    Ok(out)
}

pub fn decode_feat(bytes: &[u8]) -> Result<FeatureSequence> {
    let mut r = Reader::new(bytes);
    r.magic(FEAT_MAGIC)?;
    let t = r.u32("T")? as usize;
    let d = r.u32("D")? as usize;
    if t == 0 || d == 0 {
        return Err(Error::Malformed(format!("FEAT dimensions must be positive, got T={t} D={d}")));
    }
    let count = checked_numel(&[t, d]).ok_or_else(|| Error::OutOfRange(format!("FEAT T={t} D={d} overflows")))?;
    let values = r.f32s(count, "FEAT payload")?;
    r.finish("FEAT")?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("FEAT element {i}")));
    }
    FeatureSequence::new(Tensor::new(vec![t, d], values)?)
}

pub fn write_feat(features: &FeatureSequence, path: &Path) -> Result<()> {
    binio::write_atomic(path, &encode_feat(features)?)
}

pub fn read_feat(path: &Path) -> Result<FeatureSequence> {
    decode_feat(&std::fs::read(path)?)
}

/// Loads precomputed features; the result is always marked non-trainable.
pub fn load_precomputed(path: &Path) -> Result<FeatureSequence> {
    read_feat(path)
}
