//! Binary checkpoint container.
//!
//! Layout, little endian throughout:
//!
//! ```text
//! magic      b"ASPDC1\0"
//! meta_len   u32, then meta_len bytes of UTF-8 "key=value\n" lines
//! count      u32
//! count × { name_len u32, name bytes, ndim u32, ndim × u64 dims, offset u64 }
//! blob       f32 values; each entry starts `offset` bytes into the blob
//! ```
//!
//! Metadata records the network configuration so a checkpoint is enough to
//! rebuild its network. Optimizer moments are stored as ordinary entries
//! under `opt/m/<param>` and `opt/v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::aspdc::{AspdcConfig, Duplicate};
use crate::deblur::{DeblurConfig, DeblurNet};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::reblur::{ReblurConfig, ReblurNet};
use crate::tensor::{Shape, Tensor};
use crate::train::Adam;

const MAGIC: &[u8; 7] = b"ASPDC1\0";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| bad("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing metadata key {key:?}")))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| bad(format!("bad metadata value {key}={v}")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn add_store(&mut self, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.push(name, t.clone());
        }
    }

    /// Copy every parameter of `store` from the checkpoint, checking shapes.
    pub fn fill_store(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self
                .get(&name)
                .ok_or_else(|| bad(format!("missing tensor {name:?}")))?;
            store
                .set(&name, t.clone())
                .map_err(|e| bad(format!("incompatible checkpoint: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().as_array();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let meta_len = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for line in r.str(meta_len)?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.str(len)?.to_string();
            let ndim = r.u32()? as usize;
            if ndim != 4 {
                return Err(bad(format!("{name}: expected 4 dims, found {ndim}")));
            }
            let mut d = [0usize; 4];
            for v in &mut d {
                *v = usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?;
            }
            let offset = r.u64()?;
            entries.push((name, Shape::new(d[0], d[1], d[2], d[3]), offset));
        }
        let blob = &buf[r.pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let start = usize::try_from(offset).map_err(|_| bad("offset overflow"))?;
            let len = shape
                .as_array()
                .iter()
                .try_fold(4usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("size overflow"))?;
            let bytes = start
                .checked_add(len)
                .and_then(|end| blob.get(start..end))
                .ok_or_else(|| bad(format!("{name}: data out of range")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    /// Store Adam moments and step count next to the parameters.
    pub fn add_optimizer(&mut self, store: &ParamStore<f32>, adam: &Adam) {
        for (i, (name, t)) in store.iter().enumerate() {
            let (m, v) = adam.moments(i);
            let shape = t.shape();
            let f = |x: &[f64]| {
                Tensor::from_vec(shape, x.iter().map(|&a| a as f32).collect())
                    .expect("moment shape")
            };
            self.push(format!("opt/m/{name}"), f(m));
            self.push(format!("opt/v/{name}"), f(v));
        }
        self.meta
            .insert("opt_step".into(), adam.step_count().to_string());
    }

    /// Adam state for `store`, if the checkpoint carries one.
    pub fn optimizer(&self, store: &ParamStore<f32>) -> Result<Option<Adam>> {
        let Ok(step) = self.meta_parse::<u64>("opt_step") else {
            return Ok(None);
        };
        let mut adam = Adam::new(store);
        for (i, (name, t)) in store.iter().enumerate() {
            let get = |prefix: &str| -> Result<Vec<f64>> {
                let key = format!("{prefix}{name}");
                let m = self
                    .get(&key)
                    .ok_or_else(|| bad(format!("missing tensor {key:?}")))?;
                if m.shape() != t.shape() {
                    return Err(bad(format!(
                        "{key}: shape {} vs parameter {}",
                        m.shape(),
                        t.shape()
                    )));
                }
                Ok(m.data().iter().map(|&v| v as f64).collect())
            };
            adam.set_moments(i, get("opt/m/")?, get("opt/v/")?);
        }
        adam.set_step_count(step);
        Ok(Some(adam))
    }

    pub fn epoch(&self) -> usize {
        self.meta_parse("epoch").unwrap_or(0)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: std::str::FromStr, const N: usize>(s: &str, key: &str) -> Result<[T; N]> {
    let v: Vec<T> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| bad(format!("bad list {key}={s}")))
        })
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| bad(format!("{key} needs {N} entries")))
}

pub fn deblur_meta(cfg: &DeblurConfig) -> BTreeMap<String, String> {
    let a = &cfg.aspdc;
    let mut m = BTreeMap::new();
    m.insert("net".into(), "deblur".into());
    m.insert("width".into(), cfg.width.to_string());
    m.insert("modules".into(), cfg.n_modules.to_string());
    m.insert("branches".into(), join(&a.branch_enabled.map(u8::from)));
    m.insert("dilations".into(), join(&a.branch_dilations));
    m.insert(
        "duplicate".into(),
        a.duplicate
            .map_or("none".into(), |d| format!("{}x{}", d.branch, d.copies)),
    );
    m.insert("afim".into(), a.afim_enabled.to_string());
    m
}

pub fn reblur_meta(cfg: &ReblurConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("net".into(), "reblur".into());
    m.insert("width".into(), cfg.width.to_string());
    m.insert("residual".into(), cfg.residual.to_string());
    m
}

impl Checkpoint {
    fn expect_net(&self, kind: &str) -> Result<()> {
        let found = self.meta("net")?;
        if found != kind {
            return Err(bad(format!("expected a {kind} checkpoint, found {found}")));
        }
        Ok(())
    }

    pub fn deblur_config(&self) -> Result<DeblurConfig> {
        self.expect_net("deblur")?;
        let enabled: [u8; 4] = parse_list(self.meta("branches")?, "branches")?;
        let duplicate = match self.meta("duplicate")? {
            "none" => None,
            s => {
                let (b, c) = s
                    .split_once('x')
                    .ok_or_else(|| bad(format!("bad duplicate={s}")))?;
                Some(Duplicate {
                    branch: b.parse().map_err(|_| bad(format!("bad duplicate={s}")))?,
                    copies: c.parse().map_err(|_| bad(format!("bad duplicate={s}")))?,
                })
            }
        };
        Ok(DeblurConfig {
            width: self.meta_parse("width")?,
            n_modules: self.meta_parse("modules")?,
            aspdc: AspdcConfig {
                branch_enabled: enabled.map(|e| e != 0),
                branch_dilations: parse_list(self.meta("dilations")?, "dilations")?,
                duplicate,
                afim_enabled: self.meta_parse("afim")?,
            },
        })
    }

    pub fn reblur_config(&self) -> Result<ReblurConfig> {
        self.expect_net("reblur")?;
        Ok(ReblurConfig {
            width: self.meta_parse("width")?,
            residual: self.meta_parse("residual")?,
        })
    }
}

pub fn deblur_checkpoint(cfg: &DeblurConfig, store: &ParamStore<f32>) -> Checkpoint {
    let mut c = Checkpoint {
        meta: deblur_meta(cfg),
        tensors: Vec::new(),
    };
    c.add_store(store);
    c
}

pub fn reblur_checkpoint(cfg: &ReblurConfig, store: &ParamStore<f32>) -> Checkpoint {
    let mut c = Checkpoint {
        meta: reblur_meta(cfg),
        tensors: Vec::new(),
    };
    c.add_store(store);
    c
}

/// Rebuild a deblurring network and its parameters from a checkpoint.
pub fn load_deblur(ckpt: &Checkpoint) -> Result<(DeblurNet, ParamStore<f32>)> {
    let cfg = ckpt.deblur_config()?;
    let (net, mut store) = DeblurNet::init::<f32>(&cfg, 0)?;
    ckpt.fill_store(&mut store)?;
    Ok((net, store))
}

pub fn load_reblur(ckpt: &Checkpoint) -> Result<(ReblurNet, ParamStore<f32>)> {
    let cfg = ckpt.reblur_config()?;
    let (net, mut store) = ReblurNet::init::<f32>(&cfg, 0)?;
    ckpt.fill_store(&mut store)?;
    Ok((net, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut c = Checkpoint::default();
        c.meta.insert("a".into(), "1".into());
        c.push(
            "x",
            Tensor::from_fn(Shape::new(2, 3, 1, 2), |n, ch, _, w| {
                (n * 10 + ch * 2 + w) as f32 - 0.5
            }),
        );
        c.push("empty", Tensor::zeros(Shape::new(0, 1, 1, 1)));
        c.push("s", Tensor::scalar(f32::MIN_POSITIVE));
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn corrupt_input_is_an_error_not_a_panic() {
        let mut c = Checkpoint::default();
        c.push("x", Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let bytes = c.to_bytes();
        for cut in 0..bytes.len() {
            assert!(
                Checkpoint::from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut}"
            );
        }
        assert!(Checkpoint::from_bytes(b"PNG....").is_err());
    }

    #[test]
    fn deblur_config_round_trips_for_every_ablation() {
        for v in 1..=12 {
            let cfg = DeblurConfig {
                width: 4,
                n_modules: 1,
                aspdc: AspdcConfig::ablation_version(v).unwrap(),
            };
            let (_, store) = DeblurNet::init::<f32>(&cfg, 1).unwrap();
            let ck = Checkpoint::from_bytes(&deblur_checkpoint(&cfg, &store).to_bytes()).unwrap();
            let (net, back) = load_deblur(&ck).unwrap();
            assert_eq!(net.cfg, cfg);
            assert_eq!(back.checksum(), store.checksum());
        }
    }

    #[test]
    fn wrong_network_kind_and_shapes_are_rejected() {
        let (_, store) = ReblurNet::init::<f32>(&ReblurConfig::desk(), 0).unwrap();
        let ck = reblur_checkpoint(&ReblurConfig::desk(), &store);
        assert!(load_deblur(&ck).is_err());
        let mut other = ck.clone();
        other.meta.insert("width".into(), "4".into());
        let err = load_reblur(&other).unwrap_err().to_string();
        assert!(err.contains("incompatible"), "{err}");
    }
}
