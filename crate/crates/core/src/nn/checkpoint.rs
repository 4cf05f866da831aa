//! Model checkpoints: a binary blob of little-endian f64 tensors plus a JSON
//! sidecar carrying the network spec.
//!
//! Blob layout: `b"XCKP"`, `u32` version, `u32` tensor count, then per
//! tensor a `u64` length followed by the values. Tensor order: trainable
//! parameters, batch-norm running statistics, then the ZCA whitener (mean,
//! eigenvalues, basis rows) when present.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::ZcaWhitener;
use super::model::TrainedModel;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    spec: NetworkSpec,
    zca: Option<ZcaMeta>,
}

#[derive(Serialize, Deserialize)]
struct ZcaMeta {
    rank: usize,
    epsilon: f64,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

fn tensors(model: &TrainedModel) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    let mut out: Vec<Vec<f64>> = m.parameters_mut().into_iter().map(|p| p.to_vec()).collect();
    for l in &model.levels {
        if let Some(bn) = &l.bn {
            out.push(bn.running_mean.clone());
            out.push(bn.running_var.clone());
        }
    }
    if let Some(z) = &model.zca {
        out.push(z.mean.clone());
        out.push(z.eigenvalues.clone());
        out.extend(z.basis.iter().cloned());
    }
    out
}

pub fn save_checkpoint(model: &TrainedModel, blob: &Path) -> Result<()> {
    let ts = tensors(model);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in &ts {
        bytes.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
    let sidecar = Sidecar {
        format_version: VERSION,
        spec: model.spec.clone(),
        zca: model.zca.as_ref().map(|z| ZcaMeta {
            rank: z.basis.len(),
            epsilon: z.epsilon,
        }),
    };
    let side = sidecar_path(blob);
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(blob: &Path) -> Result<TrainedModel> {
    let side = sidecar_path(blob);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    let mut r = Reader {
        path: blob,
        bytes: &bytes,
        pos: 0,
    };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            path: blob.to_path_buf(),
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != VERSION || sidecar.format_version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: blob.to_path_buf(),
            version,
        });
    }
    let count = r.u32()? as usize;
    let mut ts = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u64()? as usize;
        let raw = r.take(n * 8)?;
        ts.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f64>>(),
        );
    }
    let mut model = TrainedModel::zeros(sidecar.spec)?;
    let mut it = ts.into_iter();
    let mismatch = || Error::Shape(format!("{}: tensor layout does not match spec", blob.display()));
    for p in model.parameters_mut() {
        let t = it.next().ok_or_else(mismatch)?;
        if t.len() != p.len() {
            return Err(mismatch());
        }
        p.copy_from_slice(&t);
    }
    for l in &mut model.levels {
        if let Some(bn) = &mut l.bn {
            bn.running_mean = it.next().ok_or_else(mismatch)?;
            bn.running_var = it.next().ok_or_else(mismatch)?;
            if bn.running_mean.len() != bn.channels() || bn.running_var.len() != bn.channels() {
                return Err(mismatch());
            }
        }
    }
    if let Some(meta) = sidecar.zca {
        let mean = it.next().ok_or_else(mismatch)?;
        let eigenvalues = it.next().ok_or_else(mismatch)?;
        let basis: Vec<Vec<f64>> = it.by_ref().take(meta.rank).collect();
        if basis.len() != meta.rank || eigenvalues.len() != meta.rank {
            return Err(mismatch());
        }
        model.zca = Some(ZcaWhitener {
            mean,
            basis,
            eigenvalues,
            epsilon: meta.epsilon,
        });
    }
    if it.next().is_some() {
        return Err(mismatch());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::NetworkSpec;
    use crate::volume::{Dims, Volume3D};

    #[test]
    fn round_trip_preserves_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut m = TrainedModel::init(NetworkSpec::two_cnn_mhl(Dims::cube(8), 1.0 / 16.0, 2), 4).unwrap();
        m.levels[0].bn.as_mut().unwrap().running_var[0] = 2.5;
        let samples: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..512).map(|i| ((i * (k + 1)) % 7) as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        m.zca = Some(ZcaWhitener::fit(&refs, 1e-2).unwrap());
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        let x = Volume3D::filled(Dims::cube(8), 0.3);
        assert_eq!(back.scores(&x).unwrap(), m.scores(&x).unwrap());
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = TrainedModel::init(NetworkSpec::simple_cnn(Dims::cube(4), 1.0 / 32.0), 1).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));
        bytes[0] = b'Z';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));
    }
}
