//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ATNF"  u32 version
//! u32 n_config   { u32 len, key bytes, u32 len, value bytes } * n_config
//! u32 n_matrices { u32 len, name bytes, u64 rows, u64 cols, f64 * rows*cols } * n_matrices
//! ```
//!
//! Matrices appear in the canonical order of [`ModelParams::named`]. Values
//! are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::config::ModelConfig;
use super::params::ModelParams;

pub const MAGIC: &[u8; 4] = b"ATNF";
pub const FORMAT_VERSION: u32 = 1;

/// Longest key, value or name accepted when reading.
const MAX_STRING: u32 = 1 << 16;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes `params` with their configuration.
pub fn encode_checkpoint(cfg: &ModelConfig, params: &ModelParams<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let kv = cfg.to_kv();
    out.extend_from_slice(&(kv.len() as u32).to_le_bytes());
    for (k, v) in &kv {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, m) in named {
        put_str(&mut out, &name);
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated while reading {what} at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        if n > MAX_STRING {
            return Err(bad(format!("{what} length {n} is implausible")));
        }
        let bytes = self.take(n as usize, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| bad(format!("{what} is not UTF-8")))
    }
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(buf: &[u8]) -> Result<(ModelConfig, ModelParams<f64>)> {
    let mut c = Cursor { buf, at: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }

    let mut cfg = ModelConfig::default();
    let mut seen = Vec::new();
    for _ in 0..c.u32("config count")? {
        let key = c.string("config key")?;
        let value = c.string("config value")?;
        if seen.contains(&key) {
            return Err(bad(format!("config key {key:?} repeated")));
        }
        cfg.set(&key, &value).map_err(|e| bad(e.to_string()))?;
        seen.push(key);
    }
    if let Some(missing) = ModelConfig::KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
        return Err(bad(format!("config key {missing:?} missing")));
    }
    cfg.validate().map_err(|e| bad(e.to_string()))?;

    let mut params = ModelParams::<f64>::init(&cfg, &mut Rng::seed(0))?;
    let names = params.names();
    let count = c.u32("matrix count")? as usize;
    if count != names.len() {
        return Err(bad(format!("{count} matrices stored, configuration implies {}", names.len())));
    }
    for (expected, m) in names.iter().zip(params.matrices_mut()) {
        let name = c.string("matrix name")?;
        if &name != expected {
            return Err(bad(format!("found matrix {name:?} where {expected:?} belongs")));
        }
        let rows = c.u64("rows")?;
        let cols = c.u64("cols")?;
        if (rows, cols) != (m.rows() as u64, m.cols() as u64) {
            return Err(bad(format!("{name} is {rows}x{cols}, expected {:?}", m.shape())));
        }
        for v in m.data_mut() {
            *v = f64::from_le_bytes(c.take(8, &name)?.try_into().expect("eight bytes"));
        }
    }
    if c.at != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - c.at)));
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter values"));
    }
    Ok((cfg, params))
}

pub fn write_checkpoint(mut out: impl Write, cfg: &ModelConfig, params: &ModelParams<f64>) -> Result<()> {
    out.write_all(&encode_checkpoint(cfg, params))?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<(ModelConfig, ModelParams<f64>)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams<f64>) -> Result<()> {
    fs::write(path, encode_checkpoint(cfg, params)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::config::{Activation, NormPlacement, PeMode};
    use crate::transformer::model::forward_batch;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            n_layers: 2,
            max_len: 10,
            norm_placement: NormPlacement::PreNorm,
            activation: Activation::Swish { beta: 1.5 },
            pe_mode: PeMode::Learned,
            dropout_p: 0.05,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = cfg();
        let p = ModelParams::<f64>::init(&c, &mut Rng::seed(4)).unwrap();
        let bytes = encode_checkpoint(&c, &p);
        assert_eq!(&bytes[..4], b"ATNF");
        let (c2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c2, c);
        for (a, b) in p.matrices().iter().zip(p2.matrices()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_checkpoint(&c2, &p2), bytes);
        let src: &[usize] = &[3, 4, 5];
        let tgt: &[usize] = &[1, 6];
        let (l1, _) = forward_batch(&[src], &[tgt], &p, &c, &mut Rng::seed(0), false).unwrap();
        let (l2, _) = forward_batch(&[src], &[tgt], &p2, &c2, &mut Rng::seed(0), false).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn file_round_trip() {
        let c = ModelConfig {
            pe_mode: PeMode::Sinusoidal,
            ..cfg()
        };
        let p = ModelParams::<f64>::init(&c, &mut Rng::seed(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.atnf");
        save_checkpoint(&path, &c, &p).unwrap();
        let (c2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!((c2, p2.matrices()), (c, p.matrices()));
        assert!(load_checkpoint(&dir.path().join("absent")).is_err());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let c = cfg();
        let p = ModelParams::<f64>::init(&c, &mut Rng::seed(4)).unwrap();
        let good = encode_checkpoint(&c, &p);
        let reject = |b: &[u8]| assert!(matches!(decode_checkpoint(b), Err(Error::Checkpoint(_))));
        reject(&good[..good.len() - 1]);
        reject(&[good.as_slice(), &[0]].concat());
        let mut b = good.clone();
        b[0] = b'X';
        reject(&b);
        let mut b = good.clone();
        b[4] = 2;
        reject(&b);
        reject(&good[..3]);
        // A NaN in the last stored value.
        let mut b = good.clone();
        let n = b.len();
        b[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        reject(&b);
        // Unknown config key.
        let mut b = Vec::new();
        b.extend_from_slice(b"ATNF");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        put_str(&mut b, "colour");
        put_str(&mut b, "blue");
        reject(&b);
    }
}
