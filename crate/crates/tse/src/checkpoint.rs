//! Self-describing binary checkpoint container.
//!
//! Layout (all little-endian): magic, format version, config snapshot
//! (JSON), progress counters, RNG state, named f64 parameter tensors, both
//! optimizer states, then an FNV-1a checksum over everything before it.
//! Values round-trip bit-exactly; any truncation, magic/version mismatch or
//! checksum failure is rejected without yielding partial state.

use std::fs;
use std::path::Path;

use ndarray::IxDyn;

use crate::autograd::Arr;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSECKPT\x01";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct OptStateData {
    pub t: u64,
    /// (parameter name, first moment, second moment)
    pub entries: Vec<(String, Arr, Arr)>,
}

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config_json: String,
    pub epoch: u64,
    pub step: u64,
    pub best_val: Option<f64>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub params: Vec<(String, Arr)>,
    pub opt_g: OptStateData,
    pub opt_d: OptStateData,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self {
            buf: Vec::with_capacity(1 << 20),
        }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn arr(&mut self, a: &Arr) {
        self.u32(a.ndim() as u32);
        for &d in a.shape() {
            self.u64(d as u64);
        }
        for &v in a.iter() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad utf-8 string".into()))
    }

    fn arr(&mut self) -> Result<Arr> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        if numel > (1 << 28) {
            return Err(Error::Checkpoint("implausible tensor size".into()));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Arr::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

fn write_opt(w: &mut Writer, o: &OptStateData) {
    w.u64(o.t);
    w.u32(o.entries.len() as u32);
    for (name, m, v) in &o.entries {
        w.str(name);
        w.arr(m);
        w.arr(v);
    }
}

fn read_opt(r: &mut Reader) -> Result<OptStateData> {
    let t = r.u64()?;
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let m = r.arr()?;
        let v = r.arr()?;
        entries.push((name, m, v));
    }
    Ok(OptStateData { t, entries })
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&data.config_json);
    w.u64(data.epoch);
    w.u64(data.step);
    match data.best_val {
        Some(v) => {
            w.buf.push(1);
            w.f64(v);
        }
        None => {
            w.buf.push(0);
            w.f64(0.0);
        }
    }
    w.buf.extend_from_slice(&data.rng_seed);
    w.u128(data.rng_word_pos);
    w.u32(data.params.len() as u32);
    for (name, a) in &data.params {
        w.str(name);
        w.arr(a);
    }
    write_opt(&mut w, &data.opt_g);
    write_opt(&mut w, &data.opt_d);
    let checksum = fnv1a(&w.buf);
    w.u64(checksum);

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &w.buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint("file too small".into()));
    }
    let (payload, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(payload) != stored {
        return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
    }
    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let config_json = r.str()?;
    let epoch = r.u64()?;
    let step = r.u64()?;
    let has_best = r.take(1)?[0] != 0;
    let best_raw = r.f64()?;
    let best_val = has_best.then_some(best_raw);
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_word_pos = r.u128()?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str()?;
        let a = r.arr()?;
        params.push((name, a));
    }
    let opt_g = read_opt(&mut r)?;
    let opt_d = read_opt(&mut r)?;
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(CheckpointData {
        config_json,
        epoch,
        step,
        best_val,
        rng_seed,
        rng_word_pos,
        params,
        opt_g,
        opt_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample() -> CheckpointData {
        CheckpointData {
            config_json: "{\"seed\":7}".into(),
            epoch: 3,
            step: 42,
            best_val: Some(5.25),
            rng_seed: [9u8; 32],
            rng_word_pos: 1234567890123,
            params: vec![
                ("w".into(), arr2(&[[1.0, -2.5], [0.125, 3.0]]).into_dyn()),
                ("b".into(), ndarray::arr1(&[0.0625]).into_dyn()),
            ],
            opt_g: OptStateData {
                t: 42,
                entries: vec![(
                    "w".into(),
                    arr2(&[[0.1, 0.2], [0.3, 0.4]]).into_dyn(),
                    arr2(&[[0.5, 0.6], [0.7, 0.8]]).into_dyn(),
                )],
            },
            opt_d: OptStateData {
                t: 0,
                entries: vec![],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let data = sample();
        save_checkpoint(&path, &data).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config_json, data.config_json);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.step, 42);
        assert_eq!(back.best_val, Some(5.25));
        assert_eq!(back.rng_word_pos, data.rng_word_pos);
        for ((n1, a1), (n2, a2)) in back.params.iter().zip(&data.params) {
            assert_eq!(n1, n2);
            assert_eq!(a1.shape(), a2.shape());
            for (x, y) in a1.iter().zip(a2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.opt_g.t, 42);
        assert_eq!(back.opt_g.entries.len(), 1);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [1usize, 8, 40, bytes.len() / 2, bytes.len() - 1] {
            let p2 = dir.path().join(format!("cut{cut}.ckpt"));
            fs::write(&p2, &bytes[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&p2), Err(Error::Checkpoint(_))),
                "cut at {cut} must be rejected"
            );
        }
    }

    #[test]
    fn corrupted_byte_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
