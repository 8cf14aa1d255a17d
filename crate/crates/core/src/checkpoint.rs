//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TOICKPT\0"  u32 version  u32 header_len  header (JSON)
//! u32 param_count
//! per parameter: u32 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f64 data[numel]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, ForecasterConfig};
use crate::imputer::{Imputer, ImputerConfig};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TOICKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Imputer(ImputerConfig),
    Forecaster(ForecasterConfig),
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        version: FORMAT_VERSION,
        msg: msg.into(),
    }
}

pub fn encode(header: &ModelConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            version,
            msg: format!("unsupported format version (this build reads v{FORMAT_VERSION})"),
        });
    }
    let hlen = r.u32()? as usize;
    let header: ModelConfig = serde_json::from_slice(r.take(hlen)?).map_err(|e| err(format!("bad header: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| err("parameter name is not UTF-8"))?
            .to_owned();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel.checked_mul(8).ok_or_else(|| err("parameter too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| err(format!("parameter `{name}`: {e}")))?;
        store.insert(name, t).map_err(|e| err(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(err("trailing bytes after the last parameter"));
    }
    Ok((header, store))
}

pub fn save(path: impl AsRef<Path>, header: &ModelConfig, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(header, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamStore)> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_imputer(path: impl AsRef<Path>, m: &Imputer) -> Result<()> {
    save(path, &ModelConfig::Imputer(m.config().clone()), m.params())
}

pub fn save_forecaster(path: impl AsRef<Path>, m: &Forecaster) -> Result<()> {
    save(path, &ModelConfig::Forecaster(m.config().clone()), m.params())
}

/// Loads an imputer; when `expected` is given the stored config must equal it.
pub fn load_imputer(path: impl AsRef<Path>, expected: Option<&ImputerConfig>) -> Result<Imputer> {
    match load(path)? {
        (ModelConfig::Imputer(cfg), params) => {
            if let Some(want) = expected {
                if *want != cfg {
                    return Err(err(format!("stored imputer config {cfg:?} does not match {want:?}")));
                }
            }
            Imputer::from_params(cfg, params)
        }
        (other, _) => Err(err(format!("expected an imputer checkpoint, found {other:?}"))),
    }
}

pub fn load_forecaster(path: impl AsRef<Path>, expected: Option<&ForecasterConfig>) -> Result<Forecaster> {
    match load(path)? {
        (ModelConfig::Forecaster(cfg), params) => {
            if let Some(want) = expected {
                if *want != cfg {
                    return Err(err(format!("stored forecaster config {cfg:?} does not match {want:?}")));
                }
            }
            Forecaster::from_params(cfg, params)
        }
        (other, _) => Err(err(format!("expected a forecaster checkpoint, found {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::Backbone;
    use crate::imputer::ImputerHyper;
    use crate::rng::rng_from;
    use crate::subset::{mask_channel, SubsetMask};

    fn imputer() -> Imputer {
        let h = ImputerHyper {
            embed_dim: 8,
            heads: 2,
            mlp_hidden: 8,
            tcn_channels: 4,
            ..ImputerHyper::default()
        };
        Imputer::new(ImputerConfig::new(3, 12, h).unwrap(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = imputer();
        let p = dir.path().join("imp.ckpt");
        save_imputer(&p, &m).unwrap();
        let back = load_imputer(&p, Some(m.config())).unwrap();
        assert_eq!(back, m);
        let x = Tensor::uniform(&[2, 3, 12], 1.0, &mut rng_from(1, &[]));
        let mc = mask_channel(2, &SubsetMask::from_indices(3, &[2]).unwrap());
        let (a, b) = (m.trace(&x, &mc).unwrap().output, back.trace(&x, &mc).unwrap().output);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let f = Forecaster::new(
            ForecasterConfig {
                backbone: Backbone::Mix,
                n_vars: 3,
                lookback: 12,
                horizon: 4,
                channels: 2,
            },
            1,
            0,
        )
        .unwrap();
        let fp = dir.path().join("f.ckpt");
        save_forecaster(&fp, &f).unwrap();
        assert_eq!(load_forecaster(&fp, None).unwrap(), f);
    }

    #[test]
    fn mismatches_are_versioned_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = imputer();
        let p = dir.path().join("imp.ckpt");
        save_imputer(&p, &m).unwrap();
        let mut other = m.config().clone();
        other.hyper.embed_dim = 4;
        match load_imputer(&p, Some(&other)) {
            Err(Error::Checkpoint { version: 1, .. }) => {}
            r => panic!("{r:?}"),
        }
        assert!(matches!(load_forecaster(&p, None), Err(Error::Checkpoint { .. })));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint { version: 9, .. })));
        let bytes = std::fs::read(&p).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
