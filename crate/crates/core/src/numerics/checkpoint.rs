//! Binary parameter checkpoints.
//!
//! Layout (little-endian): 4-byte magic `PRCK`, version byte, `u32` record count, then
//! per record `u32` name length, UTF-8 name, `u32` rank, `u64` dims, and the `f64` payload.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::mlp::{Activation, Mlp, Params};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PRCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.records.push(Record { name: name.into(), shape, data });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, vec![1], vec![value]);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing record `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let r = self.require(name)?;
        r.data.first().copied().ok_or_else(|| Error::Format(format!("record `{name}` is empty")))
    }

    pub fn push_mlp<S: Scalar>(&mut self, prefix: &str, net: &Mlp<S>) {
        let dims = net.dims();
        self.push(format!("{prefix}.dims"), vec![dims.len()], dims.iter().map(|&d| d as f64).collect());
        self.push_scalar(format!("{prefix}.activation"), net.activation().code() as f64);
        for l in 0..net.num_layers() {
            let p = net.params();
            self.push(
                format!("{prefix}.w{l}"),
                vec![dims[l], dims[l + 1]],
                p.weights[l].iter().map(|x| x.as_f64()).collect(),
            );
            self.push(format!("{prefix}.b{l}"), vec![dims[l + 1]], p.biases[l].iter().map(|x| x.as_f64()).collect());
        }
    }

    pub fn read_mlp<S: Scalar>(&self, prefix: &str) -> Result<Mlp<S>> {
        let dims: Vec<usize> = self.require(&format!("{prefix}.dims"))?.data.iter().map(|&d| d as usize).collect();
        let code = self.scalar(&format!("{prefix}.activation"))? as u8;
        let activation =
            Activation::from_code(code).ok_or_else(|| Error::Format(format!("unknown activation code {code}")))?;
        let layers = dims.len().saturating_sub(1);
        let mut params = Params { weights: Vec::with_capacity(layers), biases: Vec::with_capacity(layers) };
        for l in 0..layers {
            let w = self.require(&format!("{prefix}.w{l}"))?;
            let b = self.require(&format!("{prefix}.b{l}"))?;
            params.weights.push(w.data.iter().map(|&x| S::lit(x)).collect());
            params.biases.push(b.data.iter().map(|&x| S::lit(x)).collect());
        }
        Mlp::from_params(&dims, activation, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &r.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        if rd.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = rd.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = rd.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let rank = rd.u32()? as usize;
            let shape = (0..rank).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            records.push(Record { name, shape, data });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_survives_serialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::new(&[3, 7, 2], Activation::Gelu, &mut rng);
        let mut ck = Checkpoint::new();
        ck.push_mlp("critic.0", &net);
        ck.push_scalar("meta.kind", 2.0);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"PRCK");
        assert_eq!(bytes[4], CHECKPOINT_VERSION);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.read_mlp::<f64>("critic.0").unwrap(), net);
        assert_eq!(back.scalar("meta.kind").unwrap(), 2.0);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.push("x", vec![2], vec![1.0, 2.0]);
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes = ck.to_bytes();
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
