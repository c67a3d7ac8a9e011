//! Single-file checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CUMAMBA\0"
//! version  u32
//! width    u8       bytes per scalar (4 = f32, 8 = f64)
//! config   u32 length + UTF-8 key = value text
//! step     u64
//! rng      32-byte seed, u64 stream, u128 word position
//! params   u32 count, then records
//! adamw    f64 beta1, beta2, epsilon, weight_decay; u64 step;
//!          u32 count + first-moment records; u32 count + second-moment records
//! ```
//!
//! A record is `u32 name length, name, u32 rank, u64 per dim, u64 byte
//! length, data`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};
use crate::train::config::TrainConfig;
use crate::train::optim::{AdamW, AdamWConfig};
use crate::unet::CuMambaNet;

pub const MAGIC: &[u8; 8] = b"CUMAMBA\0";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 generator, enough to rebuild it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    /// Parameters in registry order.
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: AdamW<T>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
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
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn record<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        self.str(name);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        let mut data = Vec::with_capacity(t.len() * T::WIDTH as usize);
        T::to_le_bytes_vec(t.data(), &mut data);
        self.u64(data.len() as u64);
        self.bytes(&data);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
    fn record<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.str("record name")?;
        let rank = self.u32("record rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}`: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64("record shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bytes = self.u64("record length")? as usize;
        let expected = numel(&shape) * T::WIDTH as usize;
        if bytes != expected {
            return Err(Error::Checkpoint(format!(
                "`{name}`: {bytes} data bytes for shape {shape:?}, expected {expected}"
            )));
        }
        let data = T::from_le_bytes_slice(self.take(bytes, "record data")?);
        Ok((name, Tensor::new(shape, data)?))
    }
    fn records<T: Real>(&mut self, what: &str) -> Result<Vec<(String, Tensor<T>)>> {
        let n = self.u32(what)?;
        (0..n).map(|_| self.record()).collect()
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&[T::WIDTH]);
        w.str(&self.config.to_text());
        w.u64(self.step);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.record(name, t);
        }
        let o = &self.optimizer;
        w.f64(o.config.beta1);
        w.f64(o.config.beta2);
        w.f64(o.config.epsilon);
        w.f64(o.config.weight_decay);
        w.u64(o.step);
        for moments in [&o.first, &o.second] {
            w.u32(moments.len() as u32);
            for ((name, _), t) in self.params.iter().zip(moments) {
                w.record(name, t);
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let width = r.array::<1>("scalar width")?[0];
        if width != T::WIDTH {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {width}-byte scalars, expected {}",
                T::WIDTH
            )));
        }
        let config = TrainConfig::from_text(&r.str("config")?)?;
        let step = r.u64("step")?;
        let rng = RngState {
            seed: r.array("rng seed")?,
            stream: r.u64("rng stream")?,
            word_pos: u128::from_le_bytes(r.array("rng position")?),
        };
        let params = r.records::<T>("parameter count")?;
        let config_opt = AdamWConfig {
            beta1: r.f64("beta1")?,
            beta2: r.f64("beta2")?,
            epsilon: r.f64("epsilon")?,
            weight_decay: r.f64("weight decay")?,
        };
        let opt_step = r.u64("optimizer step")?;
        let mut moments = Vec::with_capacity(2);
        for what in ["first moments", "second moments"] {
            let recs = r.records::<T>(what)?;
            if recs.len() != params.len()
                || recs
                    .iter()
                    .zip(&params)
                    .any(|((n, t), (pn, pt))| n != pn || t.shape() != pt.shape())
            {
                return Err(Error::Checkpoint(format!("{what} do not match the parameter records")));
            }
            moments.push(recs.into_iter().map(|(_, t)| t).collect::<Vec<_>>());
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let second = moments.pop().unwrap();
        let first = moments.pop().unwrap();
        Ok(Self {
            config,
            step,
            rng,
            params,
            optimizer: AdamW {
                config: config_opt,
                first,
                second,
                step: opt_step,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Copies the stored tensors into `params`, which must hold the same
    /// names and shapes in the same order.
    pub fn load_params(&self, params: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, network {}",
                self.params.len(),
                params.len()
            )));
        }
        for (id, (name, value)) in params.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            if params.name(id) != name {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` where the network expects `{}`",
                    params.name(id)
                )));
            }
            params
                .set(id, value.clone())
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        }
        Ok(())
    }

    /// The network described by the stored config, with the stored weights.
    pub fn network(&self) -> Result<CuMambaNet<T>> {
        let mut net = CuMambaNet::zeroed(self.config.model.clone())?;
        self.load_params(&mut net.params)?;
        Ok(net)
    }

    /// One line per tensor: name, shape, and sum of absolute values.
    pub fn summary(&self) -> String {
        let mut out = format!("step {} | {} parameters\n", self.step, self.params.len());
        for (name, t) in &self.params {
            let l1: f64 = t.data().iter().map(|v| v.as_f64().abs()).sum();
            out.push_str(&format!("{name} {:?} l1={l1:.6e}\n", t.shape()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::{RngCore, SeedableRng};

    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        store.add("a.bias", Tensor::from_f64([3], &[-0.5, 0.0, 0.25]).unwrap(), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let grads = vec![Some(Tensor::ones([2, 3])), Some(Tensor::ones([3]))];
        opt.update(&mut store, &grads, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        Checkpoint {
            config: TrainConfig::default(),
            step: 1,
            rng: RngState::capture(&rng),
            params: store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect(),
            optimizer: opt,
        }
    }

    #[test]
    fn encode_decode_round_trips() {
        let c = sample();
        assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        for _ in 0..5 {
            assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().encode();
        for cut in [0, 4, 12, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::<f32>::decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::<f32>::decode(&bad).unwrap_err().to_string().contains("version"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::<f32>::decode(&long).is_err());
        assert!(Checkpoint::<f64>::decode(&bytes).unwrap_err().to_string().contains("scalars"));
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(Checkpoint::<f32>::load(dir.path().join("missing")), Err(Error::Io { .. })));
        assert!(c.summary().contains("a.bias [3]"));
    }
}
