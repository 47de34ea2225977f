//! Versioned binary model files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "JRLB"
//! 4       4     u32 LE format version (1)
//! 8       4     u32 LE layer count L
//! then per layer, in order:
//!         4     u32 LE inputs  n_in
//!         4     u32 LE outputs n_out
//!         1     u8 activation: 0 identity, 1 tanh, 2 relu
//!         8*n_out*n_in   weights, f64 LE, row-major (out x in)
//!         8*n_out        bias, f64 LE
//! ```
//!
//! Nothing follows the last layer. Saving the same model twice gives the
//! same bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"JRLB";
pub const VERSION: u32 = 1;

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Tanh => 1,
        Activation::Relu => 2,
    }
}

pub fn to_bytes(model: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * model.num_params() + 9 * model.layers().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        out.extend_from_slice(&(layer.inputs() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.outputs() as u32).to_le_bytes());
        out.push(activation_code(layer.activation));
        for v in layer.weights.as_slice().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(Error::Truncated { path: self.path.to_path_buf(), offset: self.pos as u64, needed: (n - have) as u64 });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn fail(&self, offset: usize, msg: String) -> Error {
        Error::Parse { path: self.path.to_path_buf(), offset: offset as u64, msg }
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Mlp> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(r.fail(0, "not a checkpoint (magic mismatch)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let inputs = r.u32()? as usize;
        let outputs = r.u32()? as usize;
        let at = r.pos;
        let activation = match r.take(1)?[0] {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            2 => Activation::Relu,
            code => return Err(r.fail(at, format!("unknown activation code {code}"))),
        };
        let weights = Tensor::matrix(outputs, inputs, r.f64s(outputs * inputs)?)?;
        let bias = r.f64s(outputs)?;
        layers.push(Dense { weights, bias, activation });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Mlp::new(layers)
}

pub fn save(model: &Mlp, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Mlp> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
