//! The filtering network: an input projection, a stack of selective
//! state-space blocks with pre-normalization and residual connections, and an
//! output projection back to observation space.
//!
//! Every linear map is bias-free, so a zero observation stream produces a
//! zero prediction stream and an identically-zero dataset yields zero loss
//! and zero gradient. Element `t` of the network's prediction sequence is its
//! estimate of `y_{t+1}` computed from `y_0..y_t` only.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::is_all_finite_vec;
use crate::rng::stream;
use crate::ssm::{self, SsmGrad, SsmParams, SsmState};

/// Variance floor inside the layer norms.
pub const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. `d_e` is the embedding width (also the
/// channel count of every block), `l` the per-channel state dimension, `m`
/// the observation dimension, `blocks` the stack depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub d_e: usize,
    pub l: usize,
    pub m: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl NetConfig {
    /// Full-scale reference configuration: 512-wide embeddings, 256-deep
    /// per-channel states, 3 observation channels, 2 blocks.
    pub fn full_scale(seed: u64) -> Self {
        NetConfig { d_e: 512, l: 256, m: 3, blocks: 2, seed }
    }

    /// Small configuration for fast experiments and tests.
    pub fn desk_scale(seed: u64) -> Self {
        NetConfig { d_e: 64, l: 32, m: 3, blocks: 2, seed }
    }
}

/// One block: gain-only layer norm on the block input, a selective
/// state-space layer on the normalized stream, and a residual connection
/// around both.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_gain: DVector<f64>,
    pub ssm: SsmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterNet {
    cfg: NetConfig,
    pub input_proj: DMatrix<f64>,
    pub blocks: Vec<Block>,
    pub output_proj: DMatrix<f64>,
}

impl FilterNet {
    /// Seeded initialization. Draw order is fixed: input projection (stream
    /// 0), output projection (stream 1), then block b from stream 100 + b;
    /// layer-norm gains start at one.
    pub fn init(cfg: NetConfig) -> Result<Self> {
        if cfg.d_e == 0 || cfg.l == 0 || cfg.m == 0 || cfg.blocks == 0 {
            return Err(Error::contract(
                "network dimensions and block count must all be positive",
            ));
        }
        let mut rng_in = stream(cfg.seed, 0);
        let in_scale = (1.0 / cfg.m as f64).sqrt();
        let input_proj =
            DMatrix::from_fn(cfg.d_e, cfg.m, |_, _| in_scale * rng_in.sample::<f64, _>(StandardNormal));
        let mut rng_out = stream(cfg.seed, 1);
        let out_scale = (1.0 / cfg.d_e as f64).sqrt();
        let output_proj =
            DMatrix::from_fn(cfg.m, cfg.d_e, |_, _| out_scale * rng_out.sample::<f64, _>(StandardNormal));
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            blocks.push(Block {
                ln_gain: DVector::from_element(cfg.d_e, 1.0),
                ssm: SsmParams::init(cfg.d_e, cfg.d_e, cfg.l, cfg.seed, 100 + b as u64)?,
            });
        }
        Ok(FilterNet { cfg, input_proj, blocks, output_proj })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.input_proj.len()
            + self.output_proj.len()
            + self
                .blocks
                .iter()
                .map(|b| b.ln_gain.len() + b.ssm.param_count())
                .sum::<usize>()
    }

    /// Copies all parameters into `buf` in the serialization order: input
    /// projection (column-major), then per block the layer-norm gain, a_log,
    /// w_b, w_c (each column-major), p, q, and finally the output projection.
    pub fn copy_to_flat(&self, buf: &mut Vec<f64>) {
        buf.clear();
        buf.reserve(self.param_count());
        buf.extend(self.input_proj.iter());
        for b in &self.blocks {
            buf.extend(b.ln_gain.iter());
            buf.extend(b.ssm.a_log.iter());
            buf.extend(b.ssm.w_b.iter());
            buf.extend(b.ssm.w_c.iter());
            buf.push(b.ssm.p);
            buf.extend(b.ssm.q.iter());
        }
        buf.extend(self.output_proj.iter());
    }

    /// Inverse of [`copy_to_flat`].
    pub fn copy_from_flat(&mut self, buf: &[f64]) -> Result<()> {
        if buf.len() != self.param_count() {
            return Err(Error::contract(format!(
                "flat buffer has {} values, network has {} parameters",
                buf.len(),
                self.param_count()
            )));
        }
        let mut it = buf.iter().copied();
        for v in self.input_proj.iter_mut() {
            *v = it.next().unwrap();
        }
        for b in &mut self.blocks {
            for v in b.ln_gain.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in b.ssm.a_log.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in b.ssm.w_b.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in b.ssm.w_c.iter_mut() {
                *v = it.next().unwrap();
            }
            b.ssm.p = it.next().unwrap();
            for v in b.ssm.q.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in self.output_proj.iter_mut() {
            *v = it.next().unwrap();
        }
        Ok(())
    }
}

fn ln_forward(u: &DVector<f64>, gain: &DVector<f64>) -> (DVector<f64>, DVector<f64>, f64) {
    let d = u.len() as f64;
    let mu = u.sum() / d;
    let centered = u.map(|v| v - mu);
    let var = centered.iter().map(|v| v * v).sum::<f64>() / d;
    let istd = 1.0 / (var + LN_EPS).sqrt();
    let xh = centered.map(|v| v * istd);
    let z = xh.component_mul(gain);
    (z, xh, istd)
}

fn ln_backward(
    d_z: &DVector<f64>,
    xh: &DVector<f64>,
    istd: f64,
    gain: &DVector<f64>,
    d_gain: &mut DVector<f64>,
) -> DVector<f64> {
    let d = xh.len() as f64;
    for i in 0..xh.len() {
        d_gain[i] += d_z[i] * xh[i];
    }
    let d_xh = d_z.component_mul(gain);
    let mean_dxh = d_xh.sum() / d;
    let mean_dxh_xh = d_xh.dot(xh) / d;
    DVector::from_fn(xh.len(), |i, _| istd * (d_xh[i] - mean_dxh - xh[i] * mean_dxh_xh))
}

/// Recurrent state of the whole stack for streaming evaluation; memory is
/// one state matrix per block, independent of how long the stream runs.
#[derive(Debug, Clone)]
pub struct NetState {
    per_block: Vec<SsmState>,
}

impl FilterNet {
    pub fn begin_stream(&self) -> NetState {
        NetState {
            per_block: self.blocks.iter().map(|b| SsmState::zeros(&b.ssm)).collect(),
        }
    }

    /// Consumes one observation and returns the prediction of the next one.
    pub fn step_stream(&self, state: &mut NetState, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.cfg.m {
            return Err(Error::contract(format!(
                "observation has dimension {}, network expects {}",
                y.len(),
                self.cfg.m
            )));
        }
        if !is_all_finite_vec(y) {
            return Err(Error::numeric("observation contains non-finite entries"));
        }
        let mut u = &self.input_proj * y;
        for (bi, block) in self.blocks.iter().enumerate() {
            let (z, _, _) = ln_forward(&u, &block.ln_gain);
            let (next, s_out) = ssm::step(&block.ssm, &state.per_block[bi], &z)
                .map_err(|e| Error::numeric(format!("block {bi}: {e}")))?;
            state.per_block[bi] = next;
            u += s_out;
        }
        Ok(&self.output_proj * u)
    }

    /// Evaluates the whole sequence at once. Element `t` of the result is the
    /// prediction of `y_{t+1}` from `y_0..y_t`; it matches [`step_stream`]
    /// composition to within 1e-12 relative error (the two paths differ only
    /// in traversal order).
    pub fn predict_sequence(&self, ys: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let (preds, _) = self.forward_cached(ys, false)?;
        Ok(preds)
    }

    fn forward_cached(
        &self,
        ys: &[DVector<f64>],
        keep: bool,
    ) -> Result<(Vec<DVector<f64>>, Option<NetCache>)> {
        for (t, y) in ys.iter().enumerate() {
            if y.len() != self.cfg.m {
                return Err(Error::contract(format!(
                    "observation {t} has dimension {}, network expects {}",
                    y.len(),
                    self.cfg.m
                )));
            }
            if !is_all_finite_vec(y) {
                return Err(Error::numeric(format!("observation at time {t} is not finite")));
            }
        }
        let mut level: Vec<DVector<f64>> = ys.iter().map(|y| &self.input_proj * y).collect();
        let mut cache = if keep {
            Some(NetCache {
                levels: vec![level.clone()],
                ln_xh: Vec::new(),
                ln_istd: Vec::new(),
                ssm: Vec::new(),
            })
        } else {
            None
        };
        for (bi, block) in self.blocks.iter().enumerate() {
            let mut zs = Vec::with_capacity(level.len());
            let mut xhs = Vec::with_capacity(level.len());
            let mut istds = Vec::with_capacity(level.len());
            for u in &level {
                let (z, xh, istd) = ln_forward(u, &block.ln_gain);
                zs.push(z);
                xhs.push(xh);
                istds.push(istd);
            }
            let (s_outs, ssm_cache) = ssm::forward_seq(&block.ssm, &zs)
                .map_err(|e| Error::numeric(format!("block {bi}: {e}")))?;
            for (u, s) in level.iter_mut().zip(&s_outs) {
                *u += s;
            }
            if let Some(c) = cache.as_mut() {
                c.levels.push(level.clone());
                c.ln_xh.push(xhs);
                c.ln_istd.push(istds);
                c.ssm.push(ssm_cache);
            }
        }
        let preds = level.iter().map(|u| &self.output_proj * u).collect();
        Ok((preds, cache))
    }

    /// Forward pass that keeps every intermediate needed by
    /// [`FilterNet::backward`].
    pub fn forward_train(&self, ys: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, NetCache)> {
        let (preds, cache) = self.forward_cached(ys, true)?;
        Ok((preds, cache.expect("cache requested")))
    }

    /// Reverse-mode pass for `loss = sum_t upstream[t] . pred[t]`.
    pub fn backward(
        &self,
        ys: &[DVector<f64>],
        cache: &NetCache,
        upstream: &[DVector<f64>],
    ) -> Result<NetGrad> {
        let t_len = ys.len();
        if upstream.len() != t_len {
            return Err(Error::contract(format!(
                "upstream gradient count {} != sequence length {t_len}",
                upstream.len()
            )));
        }
        let mut grad = NetGrad::zeros(self);
        let final_level = &cache.levels[self.cfg.blocks];
        let mut d_u: Vec<DVector<f64>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            grad.output_proj.ger(1.0, &upstream[t], &final_level[t], 1.0);
            d_u.push(self.output_proj.tr_mul(&upstream[t]));
        }
        for bi in (0..self.cfg.blocks).rev() {
            let block = &self.blocks[bi];
            let xhs = &cache.ln_xh[bi];
            let istds = &cache.ln_istd[bi];
            // The SSM consumed the normalized stream; rebuild it from the cache.
            let zs: Vec<DVector<f64>> =
                xhs.iter().map(|xh| xh.component_mul(&block.ln_gain)).collect();
            let bw = ssm::backward_seq(&block.ssm, &zs, &cache.ssm[bi], &d_u)
                .map_err(|e| Error::numeric(format!("block {bi}: {e}")))?;
            grad.blocks[bi].ssm = bw.grad;
            for t in 0..t_len {
                let d_in_ln = ln_backward(
                    &bw.d_ys[t],
                    &xhs[t],
                    istds[t],
                    &block.ln_gain,
                    &mut grad.blocks[bi].ln_gain,
                );
                // Residual: the block input also feeds through unchanged.
                d_u[t] += d_in_ln;
            }
        }
        for t in 0..t_len {
            grad.input_proj.ger(1.0, &d_u[t], &ys[t], 1.0);
        }
        Ok(grad)
    }
}

/// Intermediates of one training forward pass.
pub struct NetCache {
    /// `levels[b]` is the input sequence of block `b`; the last entry is the
    /// final residual stream feeding the output projection.
    levels: Vec<Vec<DVector<f64>>>,
    ln_xh: Vec<Vec<DVector<f64>>>,
    ln_istd: Vec<Vec<f64>>,
    ssm: Vec<ssm::SsmCache>,
}

/// Gradient with the same structure as the network.
pub struct NetGrad {
    pub input_proj: DMatrix<f64>,
    pub blocks: Vec<BlockGrad>,
    pub output_proj: DMatrix<f64>,
}

pub struct BlockGrad {
    pub ln_gain: DVector<f64>,
    pub ssm: SsmGrad,
}

impl NetGrad {
    pub fn zeros(net: &FilterNet) -> Self {
        NetGrad {
            input_proj: DMatrix::zeros(net.input_proj.nrows(), net.input_proj.ncols()),
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockGrad {
                    ln_gain: DVector::zeros(b.ln_gain.len()),
                    ssm: SsmGrad::zeros(&b.ssm),
                })
                .collect(),
            output_proj: DMatrix::zeros(net.output_proj.nrows(), net.output_proj.ncols()),
        }
    }

    /// Same flat layout as [`FilterNet::copy_to_flat`].
    pub fn copy_to_flat(&self, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.input_proj.iter());
        for b in &self.blocks {
            buf.extend(b.ln_gain.iter());
            buf.extend(b.ssm.a_log.iter());
            buf.extend(b.ssm.w_b.iter());
            buf.extend(b.ssm.w_c.iter());
            buf.push(b.ssm.p);
            buf.extend(b.ssm.q.iter());
        }
        buf.extend(self.output_proj.iter());
    }
}

// ── Checkpoint container ────────────────────────────────────────────────────

/// Metadata stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub trained_epochs: u32,
    /// Trajectory length the checkpoint was trained on; zero when unset.
    pub train_horizon: u32,
    /// Digest of the run configuration that produced the checkpoint.
    pub digest: [u8; 32],
    /// Zero-padded UTF-8 tool version string.
    pub tool_version: [u8; 16],
}

/// Optimizer moments, persisted so training can resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

const CKPT_MAGIC: &[u8; 8] = b"SSMLABCK";
const CKPT_VERSION: u32 = 1;

/// Writes a checkpoint: fixed little-endian header (magic, version, d_e, l,
/// m, blocks, seed, trained_epochs, train_horizon, digest, tool version,
/// parameter count), the flat parameter vector as f64 little-endian in
/// [`FilterNet::copy_to_flat`] order, then an optional optimizer section.
/// Save followed by load is bit-exact.
pub fn save_checkpoint(
    path: &Path,
    net: &FilterNet,
    meta: &CheckpointMeta,
    adam: Option<&AdamSnapshot>,
) -> Result<()> {
    let mut flat = Vec::new();
    net.copy_to_flat(&mut flat);
    let mut out: Vec<u8> = Vec::with_capacity(128 + flat.len() * 8);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.cfg.d_e as u32).to_le_bytes());
    out.extend_from_slice(&(net.cfg.l as u32).to_le_bytes());
    out.extend_from_slice(&(net.cfg.m as u32).to_le_bytes());
    out.extend_from_slice(&(net.cfg.blocks as u32).to_le_bytes());
    out.extend_from_slice(&net.cfg.seed.to_le_bytes());
    out.extend_from_slice(&meta.trained_epochs.to_le_bytes());
    out.extend_from_slice(&meta.train_horizon.to_le_bytes());
    out.extend_from_slice(&meta.digest);
    out.extend_from_slice(&meta.tool_version);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in &flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match adam {
        None => out.push(0),
        Some(snap) => {
            if snap.m.len() != flat.len() || snap.v.len() != flat.len() {
                return Err(Error::contract(
                    "optimizer snapshot length does not match parameter count",
                ));
            }
            out.push(1);
            out.extend_from_slice(&snap.step.to_le_bytes());
            for v in &snap.m {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &snap.v {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
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
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(FilterNet, CheckpointMeta, Option<AdamSnapshot>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} not supported (expected {CKPT_VERSION})"
        )));
    }
    let d_e = r.u32()? as usize;
    let l = r.u32()? as usize;
    let m = r.u32()? as usize;
    let blocks = r.u32()? as usize;
    let seed = r.u64()?;
    let trained_epochs = r.u32()?;
    let train_horizon = r.u32()?;
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32)?);
    let mut tool_version = [0u8; 16];
    tool_version.copy_from_slice(r.take(16)?);
    let n_params = r.u64()? as usize;
    let cfg = NetConfig { d_e, l, m, blocks, seed };
    let mut net = FilterNet::init(cfg).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if n_params != net.param_count() {
        return Err(Error::Format(format!(
            "checkpoint stores {n_params} parameters but config implies {}",
            net.param_count()
        )));
    }
    let flat = r.f64s(n_params)?;
    net.copy_from_flat(&flat)?;
    let meta = CheckpointMeta { trained_epochs, train_horizon, digest, tool_version };
    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let m_vec = r.f64s(n_params)?;
            let v_vec = r.f64s(n_params)?;
            Some(AdamSnapshot { step, m: m_vec, v: v_vec })
        }
        other => {
            return Err(Error::Format(format!("unknown optimizer flag {other}")));
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok((net, meta, adam))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_hand_formula() {
        // Projections alone: d_e*m each way.
        let tiny = FilterNet::init(NetConfig { d_e: 4, l: 1, m: 3, blocks: 1, seed: 0 }).unwrap();
        assert_eq!(tiny.input_proj.len(), 12);

        let net = FilterNet::init(NetConfig::full_scale(0)).unwrap();
        let per_block = 512 + 512 * 256 + 256 * 512 + 256 * 512 + 1 + 512;
        let expect = 512 * 3 + 3 * 512 + 2 * per_block;
        assert_eq!(net.param_count(), expect);
        assert_eq!(expect, 791_554);
        // Within 20% of the reference full-scale budget of roughly 662k.
        let ratio = expect as f64 / 662_000.0;
        assert!((ratio - 1.0).abs() <= 0.20, "ratio {ratio}");
    }

    #[test]
    fn zero_observations_predict_zero() {
        let net = FilterNet::init(NetConfig { d_e: 8, l: 4, m: 3, blocks: 2, seed: 3 }).unwrap();
        let ys = vec![DVector::<f64>::zeros(3); 6];
        let preds = net.predict_sequence(&ys).unwrap();
        for p in &preds {
            assert_eq!(p.norm(), 0.0);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = FilterNet::init(NetConfig::desk_scale(9)).unwrap();
        let b = FilterNet::init(NetConfig::desk_scale(9)).unwrap();
        assert_eq!(a, b);
        let c = FilterNet::init(NetConfig::desk_scale(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flat_roundtrip_preserves_everything() {
        let net = FilterNet::init(NetConfig { d_e: 6, l: 3, m: 2, blocks: 2, seed: 1 }).unwrap();
        let mut flat = Vec::new();
        net.copy_to_flat(&mut flat);
        assert_eq!(flat.len(), net.param_count());
        let mut other = FilterNet::init(NetConfig { d_e: 6, l: 3, m: 2, blocks: 2, seed: 2 }).unwrap();
        other.copy_from_flat(&flat).unwrap();
        assert_eq!(net.input_proj, other.input_proj);
        assert_eq!(net.blocks, other.blocks);
        assert_eq!(net.output_proj, other.output_proj);
    }

    #[test]
    fn flat_roundtrip_rejects_wrong_length() {
        let mut net = FilterNet::init(NetConfig { d_e: 4, l: 2, m: 2, blocks: 1, seed: 1 }).unwrap();
        let buf = vec![0.0; 3];
        assert!(matches!(net.copy_from_flat(&buf), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_degenerate_config() {
        assert!(FilterNet::init(NetConfig { d_e: 0, l: 2, m: 2, blocks: 1, seed: 0 }).is_err());
        assert!(FilterNet::init(NetConfig { d_e: 4, l: 2, m: 2, blocks: 0, seed: 0 }).is_err());
    }

    #[test]
    fn non_finite_observation_is_named() {
        let net = FilterNet::init(NetConfig { d_e: 4, l: 2, m: 2, blocks: 1, seed: 0 }).unwrap();
        let mut ys = vec![DVector::<f64>::zeros(2); 3];
        ys[2][0] = f64::INFINITY;
        let err = net.predict_sequence(&ys).unwrap_err();
        assert!(err.to_string().contains("time 2"), "unexpected message: {err}");
    }
}
