//! Checkpoint persistence and top-k averaging.
//!
//! File layout: magic `UASR`, one format version byte, a little-endian u64
//! header length, a JSON header (config, validation loss, step, ordered
//! tensor manifest with byte offsets), then raw little-endian f32 data.
//! Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::Parameters;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UASR";
const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub val_loss: f64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    val_loss: f64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = Header {
            config: self.config.clone(),
            val_loss: self.val_loss,
            step: self.step,
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CheckpointFormat(format!("bad magic {magic:?}")));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != VERSION {
            return Err(Error::CheckpointFormat(format!("unsupported version {}", version[0])));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::CheckpointFormat(e.to_string()))?;

        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut map = BTreeMap::new();
        for entry in &header.tensors {
            let start = entry.offset as usize;
            let end = start + 4 * entry.len as usize;
            if end > data.len() {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {} extends past end of file",
                    entry.name
                )));
            }
            let values: Vec<f32> = data[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(entry.shape.clone(), values)
                .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
            map.insert(entry.name.clone(), t);
        }
        Ok(Checkpoint {
            config: header.config,
            params: Parameters::from_map(map),
            val_loss: header.val_loss,
            step: header.step,
        })
    }
}

/// Average the `k` checkpoints with the lowest validation loss (ties broken
/// by preferring the later training step). All checkpoints must share one
/// config. Accumulation runs in f64.
pub fn average_checkpoints(paths: &[std::path::PathBuf], k: usize) -> Result<Checkpoint> {
    if paths.is_empty() {
        return Err(Error::invalid("no checkpoints to average"));
    }
    if k == 0 || k > paths.len() {
        return Err(Error::invalid(format!("k={k} out of range for {} checkpoints", paths.len())));
    }
    let mut ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    for c in &ckpts[1..] {
        if c.config != ckpts[0].config {
            return Err(Error::ConfigMismatch(
                "checkpoints disagree on model config".into(),
            ));
        }
    }
    ckpts.sort_by(|a, b| {
        a.val_loss
            .partial_cmp(&b.val_loss)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.step.cmp(&a.step))
    });
    ckpts.truncate(k);

    let mut sums: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for c in &ckpts {
        for (name, t) in c.params.iter() {
            let slot = sums
                .entry(name.clone())
                .or_insert_with(|| (t.shape().to_vec(), vec![0.0; t.numel()]));
            if slot.0 != t.shape() {
                return Err(Error::ConfigMismatch(format!("tensor {name} shape varies")));
            }
            for (acc, &v) in slot.1.iter_mut().zip(t.data()) {
                *acc += v as f64;
            }
        }
    }
    let kn = k as f64;
    let mut map = BTreeMap::new();
    for (name, (shape, sum)) in sums {
        let data: Vec<f32> = sum.into_iter().map(|v| (v / kn) as f32).collect();
        map.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint {
        config: ckpts[0].config.clone(),
        params: Parameters::from_map(map),
        val_loss: ckpts[0].val_loss,
        step: ckpts.iter().map(|c| c.step).max().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    fn ckpt(seed: u64, val_loss: f64, step: u64) -> Checkpoint {
        let config = ModelConfig { n_enc_layers: 1, n_dec_layers: 1, ..Default::default() };
        Checkpoint {
            params: init_params(seed, &config).unwrap(),
            config,
            val_loss,
            step,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.uasr");
        let c = ckpt(1, 0.123456789f64, 42);
        c.save(&path).unwrap();
        let l = Checkpoint::load(&path).unwrap();
        assert_eq!(c.config, l.config);
        assert_eq!(c.val_loss.to_bits(), l.val_loss.to_bits());
        assert_eq!(c.step, l.step);
        assert_eq!(c.params, l.params);
    }

    #[test]
    fn averaging_identical_copies_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt(1, 1.0, 10);
        let paths: Vec<_> = (0..3)
            .map(|i| {
                let p = dir.path().join(format!("{i}.uasr"));
                c.save(&p).unwrap();
                p
            })
            .collect();
        let avg = average_checkpoints(&paths, 3).unwrap();
        assert_eq!(avg.params, c.params);
    }

    #[test]
    fn averaging_opposites_gives_zero() {
        let dir = tempfile::tempdir().unwrap();
        let a = ckpt(1, 1.0, 10);
        let mut b = a.clone();
        for (_, t) in b.params.iter_mut() {
            for v in t.data_mut() {
                *v = -*v;
            }
        }
        let pa = dir.path().join("a.uasr");
        let pb = dir.path().join("b.uasr");
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        let avg = average_checkpoints(&[pa, pb], 2).unwrap();
        for (_, t) in avg.params.iter() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn k_one_selects_best_by_loss_then_later_step() {
        let dir = tempfile::tempdir().unwrap();
        let worst = ckpt(1, 2.0, 30);
        let early = ckpt(2, 1.0, 10);
        let late = ckpt(3, 1.0, 20);
        let paths: Vec<_> = [(&worst, "w"), (&early, "e"), (&late, "l")]
            .iter()
            .map(|(c, n)| {
                let p = dir.path().join(format!("{n}.uasr"));
                c.save(&p).unwrap();
                p
            })
            .collect();
        let avg = average_checkpoints(&paths, 1).unwrap();
        assert_eq!(avg.params, late.params);
    }

    #[test]
    fn config_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = ckpt(1, 1.0, 1);
        let mut b = ckpt(2, 1.0, 2);
        b.config.d_ff = 128;
        b.params = init_params(2, &b.config).unwrap();
        let pa = dir.path().join("a.uasr");
        let pb = dir.path().join("b.uasr");
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        assert!(matches!(
            average_checkpoints(&[pa, pb], 2).unwrap_err(),
            Error::ConfigMismatch(_)
        ));
    }
}
