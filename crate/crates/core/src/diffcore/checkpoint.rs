//! Flat parameter checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  b"MAFFCKPT"
//! version    u32      1
//! count      u32      number of records
//! record*    count times:
//!   name_len u32
//!   name     name_len bytes, UTF-8 dotted path (e.g. "fusion.pfn.linear.weight")
//!   ndim     u32
//!   dims     ndim × u64
//!   values   product(dims) × f64 (IEEE-754 binary64, little-endian)
//! ```
//!
//! Records are written in sorted name order, so equal models produce equal
//! bytes. Both trainable parameters and batch-norm running statistics are
//! stored.

use std::collections::BTreeMap;
use std::path::Path;

use super::layers::{Module, Visitor, VisitorMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MAFFCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub type StateDict = BTreeMap<String, Entry>;

pub fn state_dict(m: &dyn Module) -> StateDict {
    struct Collect(StateDict);
    impl Visitor for Collect {
        fn param(&mut self, name: &str, t: &Tensor) {
            self.0.insert(
                name.to_string(),
                Entry {
                    shape: t.shape().to_vec(),
                    values: t.to_vec(),
                },
            );
        }
        fn buffer(&mut self, name: &str, shape: &[usize], data: &[f64]) {
            self.0.insert(
                name.to_string(),
                Entry {
                    shape: shape.to_vec(),
                    values: data.to_vec(),
                },
            );
        }
    }
    let mut c = Collect(StateDict::new());
    m.visit("", &mut c);
    c.0
}

/// Copies every entry of `sd` into `m`. Every model slot must be present
/// with a matching shape; the error names the first offending parameter.
pub fn load_state_dict(m: &mut dyn Module, sd: &StateDict) -> Result<()> {
    struct Load<'a> {
        sd: &'a StateDict,
        err: Option<Error>,
    }
    impl Load<'_> {
        fn lookup(&mut self, name: &str, shape: &[usize]) -> Option<Vec<f64>> {
            if self.err.is_some() {
                return None;
            }
            match self.sd.get(name) {
                None => {
                    self.err = Some(Error::dim(format!("checkpoint is missing parameter {name}")));
                    None
                }
                Some(e) if e.shape != shape => {
                    self.err = Some(Error::dim(format!(
                        "parameter {name}: checkpoint shape {:?}, model shape {shape:?}",
                        e.shape
                    )));
                    None
                }
                Some(e) => Some(e.values.clone()),
            }
        }
    }
    impl VisitorMut for Load<'_> {
        fn param(&mut self, name: &str, t: &mut Tensor) {
            if let Some(v) = self.lookup(name, &t.shape().to_vec()) {
                match t.with_data(v) {
                    Ok(nt) => *t = nt,
                    Err(e) => self.err = Some(e),
                }
            }
        }
        fn buffer(&mut self, name: &str, shape: &[usize], data: &mut Vec<f64>) {
            if let Some(v) = self.lookup(name, shape) {
                *data = v;
            }
        }
    }
    let mut l = Load { sd, err: None };
    m.visit_mut("", &mut l);
    match l.err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn encode(sd: &StateDict) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sd.len() as u32).to_le_bytes());
    for (name, e) in sd {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, None, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8], path: &Path) -> Result<StateDict> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, None, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, None, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut sd = StateDict::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, None, "parameter name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, None, format!("non-finite value in {name}")));
        }
        sd.insert(name, Entry { shape, values });
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, None, "trailing bytes after last record"));
    }
    Ok(sd)
}

pub fn save(m: &dyn Module, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&state_dict(m))).map_err(|e| Error::io(path, e))
}

pub fn load(m: &mut dyn Module, path: &Path) -> Result<()> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_state_dict(m, &decode(&buf, path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::layers::{BatchNorm, LinearLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Pair {
        lin: LinearLayer,
        bn: BatchNorm,
    }

    impl Module for Pair {
        fn visit(&self, prefix: &str, v: &mut dyn Visitor) {
            self.lin.visit(&crate::diffcore::join(prefix, "lin"), v);
            self.bn.visit(&crate::diffcore::join(prefix, "bn"), v);
        }
        fn visit_mut(&mut self, prefix: &str, v: &mut dyn VisitorMut) {
            self.lin.visit_mut(&crate::diffcore::join(prefix, "lin"), v);
            self.bn.visit_mut(&crate::diffcore::join(prefix, "bn"), v);
        }
    }

    fn pair(seed: u64, fan_in: usize) -> Pair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pair {
            lin: LinearLayer::new(&mut rng, fan_in, 4, true),
            bn: BatchNorm::new(4),
        }
    }

    #[test]
    fn roundtrip_restores_params_and_buffers() {
        let a = pair(1, 3);
        a.bn.set_running(vec![0.5; 4], vec![2.0; 4]).unwrap();
        let bytes = encode(&state_dict(&a));
        let mut b = pair(2, 3);
        load_state_dict(&mut b, &decode(&bytes, Path::new("mem")).unwrap()).unwrap();
        assert_eq!(b.lin.weight.data(), a.lin.weight.data());
        assert_eq!(b.bn.running_var(), vec![2.0; 4]);
        assert!(b.lin.weight.requires_grad());
        assert_eq!(encode(&state_dict(&b)), bytes);
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let a = pair(1, 3);
        let sd = state_dict(&a);
        let mut b = pair(1, 5);
        let err = load_state_dict(&mut b, &sd).unwrap_err().to_string();
        assert!(err.contains("lin.weight"), "{err}");
    }

    #[test]
    fn truncated_buffer_is_format_error() {
        let bytes = encode(&state_dict(&pair(1, 3)));
        let err = decode(&bytes[..bytes.len() - 3], Path::new("x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
