//! Binary dataset files: `PRDS` magic, version byte, little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use super::dataset::{CoverageTag, Dataset, Transition};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"PRDS";
pub const DATASET_VERSION: u8 = 1;

pub fn to_bytes(dataset: &Dataset) -> Vec<u8> {
    let ds = dataset.d_state();
    let da = dataset.d_action();
    let mut out = Vec::with_capacity(32 + dataset.len() * 8 * (2 * ds + da + 3));
    out.extend_from_slice(DATASET_MAGIC);
    out.push(DATASET_VERSION);
    out.extend_from_slice(&(ds as u32).to_le_bytes());
    out.extend_from_slice(&(da as u32).to_le_bytes());
    out.extend_from_slice(&dataset.discount.to_le_bytes());
    out.push(dataset.coverage_tag.code());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    let put = |x: f64, out: &mut Vec<u8>| out.extend_from_slice(&x.to_le_bytes());
    for t in &dataset.transitions {
        for &x in t.state.iter().chain(&t.action) {
            put(x, &mut out);
        }
        put(t.reward, &mut out);
        for &x in &t.next_state {
            put(x, &mut out);
        }
        put(if t.done { 1.0 } else { 0.0 }, &mut out);
        put(t.mc_return, &mut out);
    }
    out.extend_from_slice(&(dataset.episodes.len() as u64).to_le_bytes());
    for ep in &dataset.episodes {
        out.extend_from_slice(&(ep.start as u64).to_le_bytes());
        out.extend_from_slice(&(ep.end as u64).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("dataset truncated at byte {}", self.pos)));
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
    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = c.u8()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let ds = c.u32()? as usize;
    let da = c.u32()? as usize;
    let discount = c.f64()?;
    let code = c.u8()?;
    let coverage_tag = CoverageTag::from_code(code).ok_or_else(|| Error::Format(format!("unknown coverage tag {code}")))?;
    let n = c.u64()? as usize;
    let record = 8 * (2 * ds + da + 3);
    if n.checked_mul(record).is_none_or(|b| b > bytes.len()) {
        return Err(Error::Format(format!("dataset claims {n} transitions, file too short")));
    }
    let mut transitions = Vec::with_capacity(n);
    for _ in 0..n {
        let state = c.vec(ds)?;
        let action = c.vec(da)?;
        let reward = c.f64()?;
        let next_state = c.vec(ds)?;
        let done = c.f64()? != 0.0;
        let mc_return = c.f64()?;
        transitions.push(Transition { state, action, reward, next_state, done, mc_return });
    }
    let n_ep = c.u64()? as usize;
    if n_ep.checked_mul(16).is_none_or(|b| b > bytes.len()) {
        return Err(Error::Format(format!("dataset claims {n_ep} episodes, file too short")));
    }
    let mut episodes = Vec::with_capacity(n_ep);
    for _ in 0..n_ep {
        let start = c.u64()? as usize;
        let end = c.u64()? as usize;
        episodes.push(start..end);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    let dataset = Dataset { transitions, episodes, coverage_tag, discount };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(dataset))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{annotate_mc_returns, generate_dataset, MazeLayout};

    #[test]
    fn round_trip_is_exact() {
        let spec = MazeLayout::Medium.spec();
        let d = annotate_mc_returns(generate_dataset(&spec, CoverageTag::Play, 6, 0.2, 4).unwrap(), 0.99);
        let back = from_bytes(&to_bytes(&d)).unwrap();
        assert_eq!(back, d);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save(&d, &path).unwrap();
        assert_eq!(load(&path).unwrap(), d);
    }

    #[test]
    fn corrupt_files_rejected() {
        let spec = MazeLayout::Medium.spec();
        let d = generate_dataset(&spec, CoverageTag::Diverse, 3, 0.2, 4).unwrap();
        let bytes = to_bytes(&d);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(from_bytes(&longer), Err(Error::Format(_))));
    }
}
