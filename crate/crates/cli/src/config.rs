//! Line-oriented key=value configuration.
//!
//! Blank lines and `#` comments are allowed; unknown keys are rejected
//! with their line number. Every key has a documented default, shown by
//! `Config::echo()`, which serializes the effective configuration in a
//! canonical key order (also used as the checkpoint config echo).

use anyhow::{bail, Context, Result};
use dr1mask_core::heads::HeadKind;
use dr1mask_core::pyramid::UpsampleMode;
use dr1mask_core::train::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Basis channel width C_b; 0 picks the mode default (32 for
    /// instance-only, 64 for panoptic).
    pub basis_width: usize,
    /// Dense embedding width; 0 derives it from the head kind.
    pub emb_dim: usize,
    pub head_kind: HeadKind,
    /// RoI crop resolution for instance masks.
    pub crop_size: usize,
    /// Input padding divisibility (4 with aligned upsampling).
    pub divisibility: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: u64,
    /// Linear learning-rate warm-up iterations (0 disables).
    pub warmup: u64,
    /// Basis output stride: 4 or 8.
    pub emit_stride: usize,
    pub upsample_mode: UpsampleMode,
    pub tower_depth: usize,
    pub tower_width: usize,
    /// panoptic or instance.
    pub mode: Mode,
    pub stuff_classes: u16,
    pub thing_classes: u16,
    pub aux_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Panoptic,
    Instance,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            basis_width: 0,
            emb_dim: 0,
            head_kind: HeadKind::Vector,
            crop_size: 28,
            divisibility: 4,
            seed: 0,
            lr: 0.02,
            momentum: 0.9,
            iterations: 500,
            warmup: 100,
            emit_stride: 4,
            upsample_mode: UpsampleMode::Nearest,
            tower_depth: 4,
            tower_width: 64,
            mode: Mode::Instance,
            stuff_classes: 3,
            thing_classes: 3,
            aux_weight: 0.3,
        }
    }
}

impl Config {
    /// C_b with the 0 = auto rule applied.
    pub fn effective_basis_width(&self) -> usize {
        if self.basis_width != 0 {
            self.basis_width
        } else if self.mode == Mode::Panoptic {
            64
        } else {
            32
        }
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value, got '{raw}'", ln + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = |what: &str| format!("line {}: bad {what} value '{value}'", ln + 1);
            match key {
                "basis_width" => cfg.basis_width = value.parse().with_context(|| ctx(key))?,
                "emb_dim" => cfg.emb_dim = value.parse().with_context(|| ctx(key))?,
                "head_kind" => {
                    cfg.head_kind = HeadKind::parse(value)
                        .map_err(|e| anyhow::anyhow!("line {}: {e}", ln + 1))?
                }
                "crop_size" => cfg.crop_size = value.parse().with_context(|| ctx(key))?,
                "divisibility" => cfg.divisibility = value.parse().with_context(|| ctx(key))?,
                "seed" => cfg.seed = value.parse().with_context(|| ctx(key))?,
                "lr" => cfg.lr = value.parse().with_context(|| ctx(key))?,
                "momentum" => cfg.momentum = value.parse().with_context(|| ctx(key))?,
                "iterations" => cfg.iterations = value.parse().with_context(|| ctx(key))?,
                "warmup" => cfg.warmup = value.parse().with_context(|| ctx(key))?,
                "emit_stride" => cfg.emit_stride = value.parse().with_context(|| ctx(key))?,
                "upsample_mode" => {
                    cfg.upsample_mode = match value {
                        "nearest" => UpsampleMode::Nearest,
                        "bilinear" => UpsampleMode::Bilinear,
                        other => bail!("line {}: unknown upsample_mode '{other}'", ln + 1),
                    }
                }
                "tower_depth" => cfg.tower_depth = value.parse().with_context(|| ctx(key))?,
                "tower_width" => cfg.tower_width = value.parse().with_context(|| ctx(key))?,
                "mode" => {
                    cfg.mode = match value {
                        "panoptic" => Mode::Panoptic,
                        "instance" => Mode::Instance,
                        other => bail!("line {}: unknown mode '{other}'", ln + 1),
                    }
                }
                "stuff_classes" => cfg.stuff_classes = value.parse().with_context(|| ctx(key))?,
                "thing_classes" => cfg.thing_classes = value.parse().with_context(|| ctx(key))?,
                "aux_weight" => cfg.aux_weight = value.parse().with_context(|| ctx(key))?,
                other => bail!("line {}: unknown key '{other}'", ln + 1),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Config::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Canonical serialization of the effective configuration.
    pub fn echo(&self) -> String {
        let mode = match self.mode {
            Mode::Panoptic => "panoptic",
            Mode::Instance => "instance",
        };
        let upsample = match self.upsample_mode {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        };
        format!(
            "basis_width={}\nemb_dim={}\nhead_kind={}\ncrop_size={}\ndivisibility={}\nseed={}\nlr={}\nmomentum={}\niterations={}\nwarmup={}\nemit_stride={}\nupsample_mode={}\ntower_depth={}\ntower_width={}\nmode={}\nstuff_classes={}\nthing_classes={}\naux_weight={}\n",
            self.effective_basis_width(),
            self.emb_dim,
            self.head_kind.name(),
            self.crop_size,
            self.divisibility,
            self.seed,
            self.lr,
            self.momentum,
            self.iterations,
            self.warmup,
            self.emit_stride,
            upsample,
            self.tower_depth,
            self.tower_width,
            mode,
            self.stuff_classes,
            self.thing_classes,
            self.aux_weight,
        )
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            basis_width: self.effective_basis_width(),
            tower_width: self.tower_width,
            tower_depth: self.tower_depth,
            head: self.head_kind,
            panoptic: self.mode == Mode::Panoptic,
            crop_size: self.crop_size,
            divisibility: self.divisibility,
            emit_stride: self.emit_stride,
            upsample: self.upsample_mode,
            n_stuff: self.stuff_classes,
            n_thing: self.thing_classes,
            aux_weight: self.aux_weight,
            emb_dim_override: self.emb_dim,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, threads: usize) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            lr: self.lr,
            momentum: self.momentum,
            iterations: self.iterations,
            warmup: self.warmup,
            threads,
        }
    }
}
