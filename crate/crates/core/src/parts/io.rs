//! `PGMM` files: one diagonal mixture per class.
//!
//! ```text
//! "PGMM" | u32 version=1 | u32 C | u32 d
//! per class: u32 K (0 = no mixture) | f32[K] weights | f32[K*d] means | f32[K*d] variances
//! ```
//! Little-endian throughout, like the feature container.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::GmmParams;
use crate::error::{Error, Result};

pub const GMM_MAGIC: [u8; 4] = *b"PGMM";
pub const GMM_VERSION: u32 = 1;

pub fn encode_gmms(gmms: &[Option<GmmParams<f32>>], dim: usize) -> Result<Vec<u8>> {
    let u32_of =
        |field: &'static str, v: usize| u32::try_from(v).map_err(|_| Error::HeaderOverflow { field, value: v });
    let mut buf = Vec::new();
    buf.extend_from_slice(&GMM_MAGIC);
    buf.extend_from_slice(&GMM_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of("C", gmms.len())?.to_le_bytes());
    buf.extend_from_slice(&u32_of("d", dim)?.to_le_bytes());
    for g in gmms {
        match g {
            None => buf.extend_from_slice(&0u32.to_le_bytes()),
            Some(p) => {
                if p.dim() != dim {
                    return Err(Error::Shape(format!("mixture of dim {} in a dim-{dim} file", p.dim())));
                }
                buf.extend_from_slice(&u32_of("K", p.k())?.to_le_bytes());
                for x in p.weights.iter().chain(p.means.iter()).chain(p.variances.iter()) {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(buf)
}

pub fn decode_gmms(bytes: &[u8]) -> Result<(Vec<Option<GmmParams<f32>>>, usize)> {
    let mut pos = 0usize;
    let mut take = |n: usize, record: usize| -> Result<&[u8]> {
        let out = bytes.get(pos..pos + n).ok_or(Error::Truncated { record })?;
        pos += n;
        Ok(out)
    };
    let magic: [u8; 4] = take(4, 0)?.try_into().unwrap();
    if magic != GMM_MAGIC {
        return Err(Error::BadMagic { expected: GMM_MAGIC, found: magic });
    }
    let rd = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = rd(take(4, 0)?);
    if version != GMM_VERSION {
        return Err(Error::VersionMismatch { expected: GMM_VERSION, found: version });
    }
    let c = rd(take(4, 0)?) as usize;
    let d = rd(take(4, 0)?) as usize;
    let mut out = Vec::with_capacity(c.min(1 << 16));
    for record in 0..c {
        let k = rd(take(4, record)?) as usize;
        if k == 0 {
            out.push(None);
            continue;
        }
        let n = k + 2 * k * d;
        let raw = take(n * 4, record)?;
        let vals: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite parameter in mixture {record}")));
        }
        let params = GmmParams {
            weights: Array1::from(vals[..k].to_vec()),
            means: Array2::from_shape_vec((k, d), vals[k..k + k * d].to_vec()).expect("sized"),
            variances: Array2::from_shape_vec((k, d), vals[k + k * d..].to_vec()).expect("sized"),
        };
        out.push(Some(params));
    }
    if pos != bytes.len() {
        return Err(Error::Invalid("trailing bytes after last mixture".into()));
    }
    Ok((out, d))
}

pub fn save_gmms(gmms: &[Option<GmmParams<f32>>], dim: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_gmms(gmms, dim)?).map_err(|e| Error::io(path, e))
}

pub fn load_gmms(path: impl AsRef<Path>) -> Result<(Vec<Option<GmmParams<f32>>>, usize)> {
    let path = path.as_ref();
    decode_gmms(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
