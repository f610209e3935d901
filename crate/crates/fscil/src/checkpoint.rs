//! Versioned little-endian binary checkpoints for the frozen models.
//!
//! Network blob:
//!
//! ```text
//! magic "FSCN" | version u32 | activation u8 | layer count u32 |
//! dims u64 * (layers + 1) | param count u64 | params f64 * count
//! ```
//!
//! Encoder file: magic "FSCE", version u32, optimizer steps u64, one network
//! blob. Denoiser file: magic "FSCD", version u32, schedule steps u64, cosine
//! offset f64, sample dim u64, condition dim u64, time width u64, condition
//! width u64, output head u8, optimizer steps u64, then the condition
//! projection blob and the main network blob.

use std::io::{Read, Write};
use std::path::Path;

use fscil_core::diffusion::{Denoiser, DenoiserConfig, FrozenDenoiser, OutputHead};
use fscil_core::embedding::FrozenEncoder;
use fscil_core::numerics::{Activation, DenseNet};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;
const NET_MAGIC: &[u8; 4] = b"FSCN";
const ENCODER_MAGIC: &[u8; 4] = b"FSCE";
const DENOISER_MAGIC: &[u8; 4] = b"FSCD";
/// Refuse absurd lengths from corrupt headers before allocating.
const MAX_LEN: u64 = 1 << 32;

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn net(&mut self, net: &DenseNet) {
        self.bytes(NET_MAGIC);
        self.u32(VERSION);
        self.u8(net.hidden_activation().tag());
        self.u32((net.dims().len() - 1) as u32);
        for &d in net.dims() {
            self.u64(d as u64);
        }
        self.u64(net.num_params() as u64);
        for &p in net.params() {
            self.f64(p);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err(format!("truncated {}", self.what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(format!("implausible length {v} in {}", self.what));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        let got = self.array::<4>()?;
        if &got != magic {
            return Err(format!("bad magic {:?} for {}", String::from_utf8_lossy(&got), self.what));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(format!("unsupported {} version {version} (expected {VERSION})", self.what));
        }
        Ok(())
    }
    fn net(&mut self) -> std::result::Result<DenseNet, String> {
        let outer = self.what;
        self.what = "network blob";
        self.header(NET_MAGIC)?;
        let tag = self.u8()?;
        let activation = Activation::from_tag(tag).ok_or_else(|| format!("unknown activation tag {tag}"))?;
        let layers = self.u32()? as usize;
        if layers == 0 || layers as u64 > MAX_LEN {
            return Err(format!("implausible layer count {layers}"));
        }
        let dims = (0..=layers).map(|_| self.len()).collect::<std::result::Result<Vec<_>, _>>()?;
        let count = self.len()?;
        if self.buf.len() < count * 8 {
            return Err("truncated network parameters".into());
        }
        let params = (0..count).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        self.what = outer;
        DenseNet::from_params(&dims, activation, params).map_err(|e| e.to_string())
    }
    fn finish(&self) -> std::result::Result<(), String> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes after {}", self.buf.len(), self.what))
        }
    }
}

pub fn encoder_bytes(encoder: &FrozenEncoder) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(ENCODER_MAGIC);
    w.u32(VERSION);
    w.u64(encoder.optimizer_steps());
    w.net(encoder.net());
    w.0
}

pub fn encoder_from_bytes(bytes: &[u8]) -> std::result::Result<FrozenEncoder, String> {
    let mut r = Reader { buf: bytes, what: "encoder checkpoint" };
    r.header(ENCODER_MAGIC)?;
    let steps = r.u64()?;
    let net = r.net()?;
    r.finish()?;
    Ok(FrozenEncoder::freeze(net, steps))
}

pub fn denoiser_bytes(denoiser: &FrozenDenoiser) -> Vec<u8> {
    let cfg = denoiser.config();
    let mut w = Writer(Vec::new());
    w.bytes(DENOISER_MAGIC);
    w.u32(VERSION);
    w.u64(cfg.schedule_steps as u64);
    w.f64(cfg.cosine_offset);
    w.u64(cfg.sample_dim as u64);
    w.u64(cfg.condition_dim as u64);
    w.u64(cfg.time_width as u64);
    w.u64(cfg.condition_width as u64);
    w.u8(cfg.head.tag());
    w.u64(denoiser.optimizer_steps());
    w.net(denoiser.denoiser().projection());
    w.net(denoiser.denoiser().net());
    w.0
}

pub fn denoiser_from_bytes(bytes: &[u8]) -> std::result::Result<FrozenDenoiser, String> {
    let mut r = Reader { buf: bytes, what: "denoiser checkpoint" };
    r.header(DENOISER_MAGIC)?;
    let schedule_steps = r.len()?;
    let cosine_offset = r.f64()?;
    let sample_dim = r.len()?;
    let condition_dim = r.len()?;
    let time_width = r.len()?;
    let condition_width = r.len()?;
    let tag = r.u8()?;
    let head = OutputHead::from_tag(tag).ok_or_else(|| format!("unknown output head tag {tag}"))?;
    let steps = r.u64()?;
    let projection = r.net()?;
    let net = r.net()?;
    r.finish()?;
    let dims = net.dims();
    let config = DenoiserConfig {
        sample_dim,
        condition_dim,
        time_width,
        condition_width,
        hidden: dims[1..dims.len() - 1].to_vec(),
        head,
        schedule_steps,
        cosine_offset,
    };
    let inner = Denoiser::from_nets(config, projection, net).map_err(|e| e.to_string())?;
    Ok(FrozenDenoiser::freeze(inner, steps))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn save_encoder(path: &Path, encoder: &FrozenEncoder) -> Result<()> {
    write_bytes(path, &encoder_bytes(encoder))
}

pub fn load_encoder(path: &Path) -> Result<FrozenEncoder> {
    encoder_from_bytes(&read_bytes(path)?).map_err(|m| Error::format(path, m))
}

pub fn save_denoiser(path: &Path, denoiser: &FrozenDenoiser) -> Result<()> {
    write_bytes(path, &denoiser_bytes(denoiser))
}

pub fn load_denoiser(path: &Path) -> Result<FrozenDenoiser> {
    denoiser_from_bytes(&read_bytes(path)?).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fscil_core::rng::seeded;

    fn denoiser(head: OutputHead) -> FrozenDenoiser {
        let cfg = DenoiserConfig {
            sample_dim: 5,
            condition_dim: 3,
            time_width: 4,
            condition_width: 2,
            hidden: vec![7, 6],
            head,
            schedule_steps: 20,
            cosine_offset: 0.008,
        };
        FrozenDenoiser::freeze(Denoiser::seeded(cfg, &mut seeded(3)).unwrap(), 1234)
    }

    #[test]
    fn denoiser_round_trip_is_exact() {
        for head in [OutputHead::Epsilon, OutputHead::Velocity] {
            let d = denoiser(head);
            let bytes = denoiser_bytes(&d);
            let back = denoiser_from_bytes(&bytes).unwrap();
            assert_eq!(back, d);
            assert_eq!(back.checksum(), d.checksum());
            assert_eq!(denoiser_bytes(&back), bytes);
        }
    }

    #[test]
    fn encoder_round_trip_is_exact() {
        let net = DenseNet::seeded(&[6, 4, 3], Activation::Silu, &mut seeded(9)).unwrap();
        let e = FrozenEncoder::freeze(net, 77);
        let back = encoder_from_bytes(&encoder_bytes(&e)).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.optimizer_steps(), 77);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = denoiser_bytes(&denoiser(OutputHead::Velocity));
        assert!(denoiser_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().contains("truncated"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(denoiser_from_bytes(&extra).unwrap_err().contains("trailing"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(denoiser_from_bytes(&bad).unwrap_err().contains("magic"));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(denoiser_from_bytes(&ver).unwrap_err().contains("version"));
        assert!(encoder_from_bytes(&bytes).is_err());
    }
}
