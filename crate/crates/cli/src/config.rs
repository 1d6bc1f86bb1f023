//! Declarative run configuration. One TOML file drives every subcommand;
//! command-line flags may override scalar fields, and the digest is taken
//! after those overrides so it always names the effective run.
//!
//! The digest covers the scientific content: seed, determinism, model,
//! data, train, experiment, and probe sections. Output location and the
//! thread cap are execution plumbing and leave the digest unchanged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssmlab_core::model::NetConfig;
use ssmlab_core::systems::NoiseModel;
use ssmlab_core::train::TrainConfig;
use ssmlab_core::{Error, Result};

/// Environment variable naming the root under which run directories are
/// created when neither the config nor the command line fixes one.
pub const OUT_ROOT_ENV: &str = "SSMLAB_OUT_ROOT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed: network initialization, dataset generation, and shuffle
    /// streams all derive from it.
    pub seed: u64,
    /// Zeroes wall-clock fields in artifacts so reruns are byte-identical.
    pub deterministic: bool,
    /// Worker-thread cap; one thread forces deterministic mode.
    pub threads: usize,
    /// Fixed output directory; when unset, a digest-named directory is
    /// created under the output root.
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            deterministic: true,
            threads: 1,
            out_dir: None,
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            experiment: ExperimentSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_e: usize,
    pub l: usize,
    pub m: usize,
    pub blocks: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d_e: 64, l: 32, m: 3, blocks: 2 }
    }
}

impl ModelSection {
    pub fn net_config(&self, seed: u64) -> NetConfig {
        NetConfig { d_e: self.d_e, l: self.l, m: self.m, blocks: self.blocks, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_systems: usize,
    pub t_len: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub target_radius: f64,
    pub noise: NoiseSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_systems: 500,
            t_len: 50,
            state_dim: 5,
            obs_dim: 3,
            target_radius: 0.95,
            noise: NoiseSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Colored,
}

/// Noise parameters. `sigma_w2` is the marginal process-noise variance in
/// both kinds (the moving-average base variance for colored noise),
/// `sigma_v2` the measurement-noise variance; `window` only matters for
/// colored noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub sigma_w2: f64,
    pub sigma_v2: f64,
    pub window: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { kind: NoiseKind::White, sigma_w2: 0.01, sigma_v2: 0.01, window: 15 }
    }
}

impl NoiseSection {
    pub fn to_model(self) -> NoiseModel {
        match self.kind {
            NoiseKind::White => NoiseModel::white(self.sigma_w2, self.sigma_v2),
            NoiseKind::Colored => NoiseModel::Colored {
                window: self.window,
                sigma_eta2: self.sigma_w2,
                sigma_nu2: self.sigma_v2,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 64,
            epochs: 50,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(self, seed: u64, deterministic: bool) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            deterministic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub n_systems: usize,
    /// Number of scored predictions per test system.
    pub t_len: usize,
    /// Seed of the test-system pool; must differ from the global seed so
    /// test systems never repeat training draws.
    pub eval_seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { n_systems: 200, t_len: 50, eval_seed: 900 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub n_samples: usize,
    pub min_samples: usize,
    pub t_read: usize,
    pub max_lag: usize,
    pub state_dim: usize,
    pub target_radius: f64,
    pub sigma_w2: f64,
    pub sigma_v2: f64,
    /// Confidence level of the generalization-bound evaluation.
    pub delta: f64,
    /// Covering radius of the generalization-bound evaluation.
    pub epsilon: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            n_samples: 2000,
            min_samples: 100,
            t_read: 45,
            max_lag: 30,
            state_dim: 5,
            target_radius: 0.8,
            sigma_w2: 0.01,
            sigma_v2: 0.01,
            delta: 0.05,
            epsilon: 0.01,
        }
    }
}

/// Reads and parses a config file. Parse failures carry the file's own
/// line and column in the message.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
        Error::contract(format!("{}: {e}", path.display()))
    })?;
    Ok(cfg)
}

impl RunConfig {
    /// Cross-field coherence checks; the core modules re-validate their own
    /// arguments, this catches what only the whole file can show.
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::contract("threads must be at least 1"));
        }
        if self.model.d_e == 0 || self.model.l == 0 || self.model.m == 0 || self.model.blocks == 0
        {
            return Err(Error::contract("model dimensions must all be positive"));
        }
        if self.data.n_systems == 0
            || self.data.t_len == 0
            || self.data.state_dim == 0
            || self.data.obs_dim == 0
        {
            return Err(Error::contract("data dimensions must all be positive"));
        }
        if self.data.obs_dim != self.model.m {
            return Err(Error::contract(format!(
                "data.obs_dim = {} but model.m = {}; the network consumes what the systems emit",
                self.data.obs_dim, self.model.m
            )));
        }
        if !(self.data.target_radius > 0.0 && self.data.target_radius < 1.0) {
            return Err(Error::contract("data.target_radius must lie in (0, 1)"));
        }
        if self.data.noise.window == 0 {
            return Err(Error::contract("noise window must be at least 1"));
        }
        if !(self.data.noise.sigma_w2 > 0.0 && self.data.noise.sigma_v2 > 0.0) {
            return Err(Error::contract("noise variances must be positive"));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::contract("train.epochs and train.batch_size must be positive"));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::contract("train.lr must be positive"));
        }
        if self.experiment.eval_seed == self.seed {
            return Err(Error::contract(format!(
                "experiment.eval_seed = {} equals the global seed; test systems would repeat \
                 training draws",
                self.seed
            )));
        }
        if self.experiment.n_systems == 0 || self.experiment.t_len == 0 {
            return Err(Error::contract("experiment dimensions must be positive"));
        }
        if self.probe.max_lag == 0 || self.probe.t_read <= self.probe.max_lag {
            return Err(Error::contract(
                "probe.t_read must exceed probe.max_lag, which must be positive",
            ));
        }
        if !(self.probe.delta > 0.0 && self.probe.delta < 1.0) {
            return Err(Error::contract("probe.delta must lie in (0, 1)"));
        }
        if !(self.probe.epsilon > 0.0) {
            return Err(Error::contract("probe.epsilon must be positive"));
        }
        Ok(())
    }

    /// The effective deterministic flag: a single-thread cap forces it.
    pub fn effective_deterministic(&self) -> bool {
        self.deterministic || self.threads == 1
    }

    /// Canonical serialization used for the digest: plumbing fields are
    /// normalized away so relocating output or changing the thread cap does
    /// not rename the run.
    pub fn canonical_toml(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.threads = 1;
        toml::to_string(&c).expect("config serialization cannot fail")
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_toml().as_bytes());
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    /// Short digest prefix used in directory names and log lines.
    pub fn digest8(&self) -> String {
        self.digest_hex()[..8].to_string()
    }

    /// Output directory precedence: command-line flag, then the config's
    /// own `out_dir`, then `{out root}/{digest prefix}-{unix time}`.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(dir) = flag {
            return dir.to_path_buf();
        }
        if let Some(dir) = &self.out_dir {
            return dir.clone();
        }
        let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| DEFAULT_OUT_ROOT.to_string());
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from(root).join(format!("{}-{ts}", self.digest8()))
    }
}

/// Zero-padded tool version embedded in binary artifacts.
pub fn tool_version() -> [u8; 16] {
    let mut out = [0u8; 16];
    let v = env!("CARGO_PKG_VERSION").as_bytes();
    let n = v.len().min(16);
    out[..n].copy_from_slice(&v[..n]);
    out
}

/// Renders a stored tool-version field back into text.
pub fn tool_version_str(raw: &[u8; 16]) -> String {
    let end = raw.iter().position(|b| *b == 0).unwrap_or(16);
    String::from_utf8_lossy(&raw[..end]).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_an_empty_file() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = toml::from_str::<RunConfig>("soid = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("soid"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");

        let nested = "[model]\nd_e = 8\nwidth = 9\n";
        let err = toml::from_str::<RunConfig>(nested).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn digest_ignores_plumbing_but_not_science() {
        let base = RunConfig::default();
        let mut moved = base.clone();
        moved.out_dir = Some(PathBuf::from("/elsewhere"));
        moved.threads = 8;
        assert_eq!(base.digest(), moved.digest());

        let mut reseeded = base.clone();
        reseeded.seed = 43;
        assert_ne!(base.digest(), reseeded.digest());

        let mut retrained = base;
        retrained.train.epochs = 51;
        assert_ne!(retrained.digest(), reseeded.digest());
    }

    #[test]
    fn validation_catches_cross_section_mismatches() {
        let mut cfg = RunConfig::default();
        cfg.data.obs_dim = 4;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.experiment.eval_seed = cfg.seed;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.probe.t_read = cfg.probe.max_lag;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn colored_section_maps_to_the_moving_average_model() {
        let mut n = NoiseSection::default();
        n.kind = NoiseKind::Colored;
        n.sigma_w2 = 0.04;
        match n.to_model() {
            NoiseModel::Colored { window, sigma_eta2, sigma_nu2 } => {
                assert_eq!(window, 15);
                assert_eq!(sigma_eta2, 0.04);
                assert_eq!(sigma_nu2, 0.01);
            }
            other => panic!("expected colored noise, got {other:?}"),
        }
    }
}
