//! Named parameter collections, their binding onto a [`Graph`], and the
//! binary checkpoint format.
//!
//! Parameter values are kept at `f32` precision (every stored `f64` is exactly
//! representable as `f32`), so checkpoints round-trip bit-for-bit.
//!
//! Checkpoint layout, all integers little-endian `u32`:
//!
//! ```text
//! b"VPCK" | version | metadata_len | metadata (UTF-8 key=value text)
//! entry_count | { name_len | name | ndim | dims... } * entry_count
//! raw little-endian f32 data of every entry, in manifest order
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VPCK";
const VERSION: u32 = 1;

/// Momentum of running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable tensors and batch-norm buffers keyed by layer path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkParams {
    tensors: BTreeMap<String, Tensor>,
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl NetworkParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) {
        value.round_to_f32();
        self.tensors.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable entries only (batch-norm buffers excluded).
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(k, _)| !is_buffer(k))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (layer, s) in stats {
            for (suffix, observed) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let key = format!("{layer}.{suffix}");
                let buf = self
                    .tensors
                    .get_mut(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{key}`")))?;
                for (r, o) in buf.data_mut().iter_mut().zip(observed) {
                    *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o) as f32 as f64;
                }
            }
        }
        Ok(())
    }

    /// Largest absolute element-wise difference against `other` (infinite if
    /// the key sets differ).
    pub fn max_abs_diff(&self, other: &NetworkParams) -> f64 {
        if self.tensors.len() != other.tensors.len() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (k, a) in &self.tensors {
            match other.tensors.get(k) {
                Some(b) if a.shape() == b.shape() => worst = worst.max(a.max_abs_diff(b)),
                _ => return f64::INFINITY,
            }
        }
        worst
    }

    pub fn write_to(&self, metadata: &KvConfig, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<checkpoint stream>", e);
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        let meta = metadata.to_text();
        header.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        header.extend_from_slice(meta.as_bytes());
        header.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            header.extend_from_slice(&(name.len() as u32).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                header.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        out.write_all(&header).map_err(io)?;
        for t in self.tensors.values() {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<(Self, KvConfig)> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<checkpoint stream>", e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let metadata = KvConfig::parse(meta)?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("layer path is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, dims));
        }
        let mut tensors = BTreeMap::new();
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.insert(name, Tensor::new(&dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok((NetworkParams { tensors }, metadata))
    }

    pub fn save(&self, path: &Path, metadata: &KvConfig) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(metadata, &mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, KvConfig)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Fills a [`NetworkParams`] with freshly initialized layers.
///
/// Kernels are drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)`; biases start
/// at zero, batch-norm scale at one and shift at zero.
pub struct ParamInit<'r, R: Rng> {
    rng: &'r mut R,
    params: NetworkParams,
}

impl<'r, R: Rng> ParamInit<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            rng,
            params: NetworkParams::default(),
        }
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    pub fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) {
        let w = self.uniform(&[out_ch, in_ch, k, k], in_ch * k * k);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
    }

    pub fn conv_transpose(&mut self, name: &str, in_ch: usize, out_ch: usize) {
        let w = self.uniform(&[in_ch, out_ch, 2, 2], in_ch);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
    }

    pub fn batch_norm(&mut self, name: &str, ch: usize) {
        self.params.insert(format!("{name}.weight"), Tensor::full(&[ch], 1.0));
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[ch]));
        self.params.insert(format!("{name}.running_mean"), Tensor::zeros(&[ch]));
        self.params.insert(format!("{name}.running_var"), Tensor::full(&[ch], 1.0));
    }

    pub fn finish(self) -> NetworkParams {
        self.params
    }
}

/// Whether batch normalization uses batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a [`NetworkParams`] onto a graph, creating leaves on first use.
///
/// With `trainable = false` the leaves are constants, so no gradient reaches
/// the parameters while gradients still flow through them to the inputs.
pub struct Binding<'p> {
    params: &'p NetworkParams,
    mode: Mode,
    trainable: bool,
    vars: BTreeMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl<'p> Binding<'p> {
    pub fn new(params: &'p NetworkParams, mode: Mode, trainable: bool) -> Self {
        Self {
            params,
            mode,
            trainable,
            vars: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable && !is_buffer(name) {
            g.param(t)
        } else {
            g.input(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, g: &mut Graph, name: &str, x: Var, pad: usize) -> Result<Var> {
        let w = self.var(g, &format!("{name}.weight"))?;
        let b = self.var(g, &format!("{name}.bias"))?;
        g.conv2d(x, w, Some(b), 1, pad)
    }

    pub fn conv_transpose(&mut self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = self.var(g, &format!("{name}.weight"))?;
        let b = self.var(g, &format!("{name}.bias"))?;
        g.conv_transpose2x2(x, w, Some(b))
    }

    pub fn batch_norm(&mut self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(g, &format!("{name}.weight"))?;
        let beta = self.var(g, &format!("{name}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, None)?;
                if let Some(s) = stats {
                    self.stats.push((name.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params.get(&format!("{name}.running_mean"))?;
                let rv = self.params.get(&format!("{name}.running_var"))?;
                Ok(g.batch_norm(x, gamma, beta, Some((rm.data(), rv.data())))?.0)
            }
        }
    }

    /// Leaves created so far, keyed by parameter path.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Batch statistics observed in training mode, in forward order.
    pub fn take_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = ParamInit::new(&mut rng);
        init.conv("a.conv", 4, 2, 3);
        init.batch_norm("a.bn", 4);
        init.conv_transpose("b.up", 4, 2);
        init.finish()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = sample();
        let mut meta = KvConfig::default();
        meta.set("kind", "unet");
        let mut buf = Vec::new();
        p.write_to(&meta, &mut buf).unwrap();
        let (q, m) = NetworkParams::read_from(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.raw("kind"), Some("unet"));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&KvConfig::default(), &mut buf).unwrap();
        buf.pop();
        assert!(NetworkParams::read_from(&buf[..]).is_err());
        buf[0] = b'X';
        assert!(NetworkParams::read_from(&buf[..]).is_err());
    }

    #[test]
    fn init_bounds_and_buffers() {
        let p = sample();
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(p.get("a.conv.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.get("a.bn.weight").unwrap().data(), &[1.0; 4]);
        assert_eq!(p.trainable().count(), 6);
        assert!(p.iter().all(|(_, t)| t.data().iter().all(|&v| v == v as f32 as f64)));
    }

    #[test]
    fn frozen_binding_creates_constants() {
        let p = sample();
        let mut g = Graph::new();
        let mut b = Binding::new(&p, Mode::Eval, false);
        let v = b.var(&mut g, "a.conv.weight").unwrap();
        assert!(!g.requires_grad(v));
        let mut b = Binding::new(&p, Mode::Train, true);
        let v = b.var(&mut g, "a.conv.weight").unwrap();
        assert!(g.requires_grad(v));
        assert!(b.var(&mut g, "nope").is_err());
    }
}
