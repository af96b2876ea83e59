//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "BPCK" u32 version
//! str mode, str architecture, u64 seed, [u64; 4] refresh-rng state
//! u32 count, then per tensor: str name, u32 rank, u64 dims[rank], f64 data[..]
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::init::InitSpec;
use crate::tensor::Tensor;

use super::{build_architecture, FeedbackMode, Network};

const MAGIC: &[u8; 4] = b"BPCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: FeedbackMode,
    pub architecture: String,
    pub seed: u64,
    pub refresh_rng: [u64; 4],
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn of(net: &Network) -> Self {
        Self {
            mode: net.mode(),
            architecture: net.architecture().to_string(),
            seed: net.seed(),
            refresh_rng: net.refresh_rng_state(),
            tensors: net.state_dict(),
        }
    }

    /// Rebuilds a built-in architecture and loads the stored state into it.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = build_architecture(&self.architecture, self.mode, &InitSpec::default(), self.seed)?;
        self.restore(&mut net)?;
        Ok(net)
    }

    /// Loads the stored state into an existing network of the same mode.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        if net.mode() != self.mode {
            return Err(Error::Checkpoint(format!(
                "checkpoint mode {} does not match network mode {}",
                self.mode,
                net.mode()
            )));
        }
        net.load_state_dict(&self.tensors)?;
        net.set_refresh_rng_state(self.refresh_rng);
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let put_str = |w: &mut dyn Write, s: &str| -> std::io::Result<()> {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())
        };
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_str(w, self.mode.as_str())?;
        put_str(w, &self.architecture)?;
        w.write_all(&self.seed.to_le_bytes())?;
        for s in self.refresh_rng {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            put_str(w, name)?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut rd = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| bad("unexpected end of file"))?;
            Ok(buf)
        };
        if rd(4)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_of(rd(4)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let read_str = |rd: &mut dyn FnMut(usize) -> Result<Vec<u8>>| -> Result<String> {
            let len = u32_of(rd(4)?) as usize;
            String::from_utf8(rd(len)?).map_err(|_| bad("invalid UTF-8 string"))
        };
        let mode: FeedbackMode = read_str(&mut rd)?.parse()?;
        let architecture = read_str(&mut rd)?;
        let seed = u64_of(rd(8)?);
        let mut refresh_rng = [0u64; 4];
        for s in &mut refresh_rng {
            *s = u64_of(rd(8)?);
        }
        let count = u32_of(rd(4)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = read_str(&mut rd)?;
            let rank = u32_of(rd(4)?) as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("`{name}` has implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64_of(rd(8)?) as usize);
            }
            let n: usize = dims.iter().product();
            let bytes = rd(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(&dims, data)?);
        }
        Ok(Self {
            mode,
            architecture,
            seed,
            refresh_rng,
            tensors,
        })
    }
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    Checkpoint::of(net)
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Checkpoint::read_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = build_architecture("lenet_mnist", FeedbackMode::Brsf, &InitSpec::default(), 3).unwrap();
        net.refresh_feedback().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck, Checkpoint::of(&net));
        let back = ck.to_network().unwrap();
        assert_eq!(back.state_dict(), net.state_dict());
        assert_eq!(back.refresh_rng_state(), net.refresh_rng_state());
        let x = Rng::new(0).uniform(&[1, 1, 32, 32], 0.0, 1.0).unwrap();
        assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        assert!(Checkpoint::read_from(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        let net = build_architecture("lenet_mnist", FeedbackMode::Fa, &InitSpec::default(), 0).unwrap();
        let mut buf = Vec::new();
        Checkpoint::of(&net).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut &buf[..]).is_err());
    }

    #[test]
    fn mode_mismatch_rejected() {
        let fa = build_architecture("lenet_mnist", FeedbackMode::Fa, &InitSpec::default(), 0).unwrap();
        let mut bp = build_architecture("lenet_mnist", FeedbackMode::Bp, &InitSpec::default(), 0).unwrap();
        assert!(Checkpoint::of(&fa).restore(&mut bp).is_err());
    }
}
