//! Training configuration: flat key=value text with dotted prefixes,
//! every key overridable individually.

use crate::codec::{EncoderConfig, MixtureDecoderConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::slot::{GradientRegime, InitKind, SlotAttentionConfig};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelScale {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub max_steps: u64,
    pub n_sigma: u64,
    pub seed: u64,
    /// global-norm gradient clipping; 0 disables (the default)
    pub grad_clip: f64,
    pub log_every: u64,
    /// 0 means max_steps / 10
    pub checkpoint_every: u64,

    pub scale: ModelScale,
    pub slots: usize,
    pub image_size: usize,
    pub iterations: usize,
    pub d_slots: usize,
    pub mlp_hidden: usize,
    pub enc_channels: usize,
    pub dec_channels: usize,
    pub eps: f64,
    pub init: InitKind,
    pub regime: GradientRegime,
}

impl TrainConfig {
    /// Desk-scale preset for 32px sprite scenes.
    pub fn desk(slots: usize) -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 4e-4,
            warmup_steps: 200,
            decay_steps: 2000,
            max_steps: 8000,
            n_sigma: 1000,
            seed: 1,
            grad_clip: 0.0,
            log_every: 200,
            checkpoint_every: 0,
            scale: ModelScale::Desk,
            slots,
            image_size: 32,
            iterations: 3,
            d_slots: 24,
            mlp_hidden: 128,
            enc_channels: 8,
            dec_channels: 10,
            eps: 1e-8,
            init: InitKind::LearnableQuery,
            regime: GradientRegime::BiLevelStraightThrough,
        }
    }

    /// Full-scale preset (128px scenes): batch 128, lr 4e-4, warmup 5k,
    /// decay 50k, max 250k, sigma annealing 30k.
    pub fn paper(slots: usize) -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 4e-4,
            warmup_steps: 5_000,
            decay_steps: 50_000,
            max_steps: 250_000,
            n_sigma: 30_000,
            seed: 1,
            grad_clip: 0.0,
            log_every: 1000,
            checkpoint_every: 0,
            scale: ModelScale::Paper,
            slots,
            image_size: 128,
            iterations: 3,
            d_slots: 64,
            mlp_hidden: 128,
            enc_channels: 64,
            dec_channels: 64,
            eps: 1e-8,
            init: InitKind::LearnableQuery,
            regime: GradientRegime::BiLevelStraightThrough,
        }
    }

    pub fn checkpoint_cadence(&self) -> u64 {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (self.max_steps / 10).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.max_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if self.batch_size == 0 || self.lr <= 0.0 || self.decay_steps == 0 {
            return Err(Error::Config(
                "batch_size, lr and decay_steps must be positive".into(),
            ));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let encoder = match self.scale {
            ModelScale::Desk => EncoderConfig::desk(self.image_size, self.enc_channels),
            ModelScale::Paper => EncoderConfig {
                image_size: self.image_size,
                channels: self.enc_channels,
                first_stride: 2,
                feature_mlp: true,
            },
        };
        let decoder = match self.scale {
            ModelScale::Desk => {
                MixtureDecoderConfig::desk(self.image_size, self.d_slots, self.dec_channels)
            }
            ModelScale::Paper => {
                if self.image_size == 64 {
                    MixtureDecoderConfig::paper_64(self.d_slots)
                } else {
                    MixtureDecoderConfig::paper_128(self.d_slots)
                }
            }
        };
        ModelConfig {
            slot: SlotAttentionConfig {
                slots: self.slots,
                d_slots: self.d_slots,
                d_input: encoder.d_input(),
                iterations: self.iterations,
                eps: self.eps,
                mlp_hidden: self.mlp_hidden,
                init: self.init,
                regime: self.regime,
                n_sigma: self.n_sigma,
            },
            encoder,
            decoder,
        }
    }

    pub fn cell_name(&self) -> &'static str {
        crate::slot::cell_name(self.init, self.regime)
    }

    /// Flat key=value serialization; the checkpoint config echo.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "train.batch_size={}", self.batch_size);
        let _ = writeln!(s, "train.lr={}", self.lr);
        let _ = writeln!(s, "train.warmup_steps={}", self.warmup_steps);
        let _ = writeln!(s, "train.decay_steps={}", self.decay_steps);
        let _ = writeln!(s, "train.max_steps={}", self.max_steps);
        let _ = writeln!(s, "train.n_sigma={}", self.n_sigma);
        let _ = writeln!(s, "train.seed={}", self.seed);
        let _ = writeln!(s, "train.grad_clip={}", self.grad_clip);
        let _ = writeln!(s, "train.log_every={}", self.log_every);
        let _ = writeln!(s, "train.checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(
            s,
            "model.scale={}",
            match self.scale {
                ModelScale::Desk => "desk",
                ModelScale::Paper => "paper",
            }
        );
        let _ = writeln!(s, "model.slots={}", self.slots);
        let _ = writeln!(s, "model.image_size={}", self.image_size);
        let _ = writeln!(s, "model.iterations={}", self.iterations);
        let _ = writeln!(s, "model.d_slots={}", self.d_slots);
        let _ = writeln!(s, "model.mlp_hidden={}", self.mlp_hidden);
        let _ = writeln!(s, "model.enc_channels={}", self.enc_channels);
        let _ = writeln!(s, "model.dec_channels={}", self.dec_channels);
        let _ = writeln!(s, "model.eps={}", self.eps);
        let _ = writeln!(
            s,
            "model.init={}",
            match self.init {
                InitKind::GaussianSample => "gaussian",
                InitKind::LearnableQuery => "query",
            }
        );
        let _ = writeln!(
            s,
            "model.regime={}",
            match self.regime {
                GradientRegime::FullUnroll => "full",
                GradientRegime::DetachedInner => "detached",
                GradientRegime::BiLevelStraightThrough => "bilevel",
            }
        );
        s
    }

    /// Applies a single `key=value` override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad(key))?
            };
        }
        match key {
            "train.batch_size" => self.batch_size = num!(),
            "train.lr" => self.lr = num!(),
            "train.warmup_steps" => self.warmup_steps = num!(),
            "train.decay_steps" => self.decay_steps = num!(),
            "train.max_steps" => self.max_steps = num!(),
            "train.n_sigma" => self.n_sigma = num!(),
            "train.seed" => self.seed = num!(),
            "train.grad_clip" => self.grad_clip = num!(),
            "train.log_every" => self.log_every = num!(),
            "train.checkpoint_every" => self.checkpoint_every = num!(),
            "model.scale" => {
                self.scale = match value {
                    "desk" => ModelScale::Desk,
                    "paper" => ModelScale::Paper,
                    _ => return Err(bad(key)),
                }
            }
            "model.slots" => self.slots = num!(),
            "model.image_size" => self.image_size = num!(),
            "model.iterations" => self.iterations = num!(),
            "model.d_slots" => self.d_slots = num!(),
            "model.mlp_hidden" => self.mlp_hidden = num!(),
            "model.enc_channels" => self.enc_channels = num!(),
            "model.dec_channels" => self.dec_channels = num!(),
            "model.eps" => self.eps = num!(),
            "model.init" => {
                self.init = match value {
                    "gaussian" => InitKind::GaussianSample,
                    "query" => InitKind::LearnableQuery,
                    _ => return Err(bad(key)),
                }
            }
            "model.regime" => {
                self.regime = match value {
                    "full" => GradientRegime::FullUnroll,
                    "detached" => GradientRegime::DetachedInner,
                    "bilevel" => GradientRegime::BiLevelStraightThrough,
                    _ => return Err(bad(key)),
                }
            }
            "model.cell" => {
                let (init, regime) = crate::slot::parse_cell(value)?;
                self.init = init;
                self.regime = regime;
            }
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line {line:?}")))?;
            self.apply_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_kv_text(&text)
    }
}

/// Linear warmup to `lr`, then exponential decay with half-life
/// `decay_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.lr * 0.5f64.powf((step - cfg.warmup_steps) as f64 / cfg.decay_steps as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_anchors() {
        let cfg = TrainConfig::desk(5);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(cfg.warmup_steps, &cfg), cfg.lr);
        let half = lr_at(cfg.warmup_steps + cfg.decay_steps, &cfg);
        assert!((half - cfg.lr / 2.0).abs() < 1e-12);
        // nonincreasing after warmup
        let mut prev = f64::INFINITY;
        for s in (cfg.warmup_steps..cfg.max_steps).step_by(500) {
            let v = lr_at(s, &cfg);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn kv_round_trip() {
        let mut a = TrainConfig::desk(5);
        a.seed = 42;
        a.regime = GradientRegime::DetachedInner;
        a.init = InitKind::GaussianSample;
        let text = a.to_kv();
        let mut b = TrainConfig::desk(3);
        b.apply_kv_text(&text).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut cfg = TrainConfig::desk(5);
        assert!(cfg.apply_kv("train.nope", "1").is_err());
        assert!(cfg.apply_kv("model.regime", "sideways").is_err());
    }

    #[test]
    fn cell_override_sets_both_fields() {
        let mut cfg = TrainConfig::desk(5);
        cfg.apply_kv("model.cell", "I-SA").unwrap();
        assert_eq!(cfg.init, InitKind::GaussianSample);
        assert_eq!(cfg.regime, GradientRegime::DetachedInner);
        assert_eq!(cfg.cell_name(), "I-SA");
    }

    #[test]
    fn paper_preset_matches_training_table() {
        let cfg = TrainConfig::paper(8);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.lr, 4e-4);
        assert_eq!(cfg.d_slots, 64);
        assert_eq!(cfg.mlp_hidden, 128);
        assert_eq!(cfg.warmup_steps, 5_000);
        assert_eq!(cfg.decay_steps, 50_000);
        assert_eq!(cfg.max_steps, 250_000);
        assert_eq!(cfg.n_sigma, 30_000);
        assert!(cfg.model_config().validate().is_ok());
    }

    #[test]
    fn desk_preset_validates() {
        assert!(TrainConfig::desk(5).validate().is_ok());
        let mut bad = TrainConfig::desk(5);
        bad.warmup_steps = bad.max_steps + 1;
        assert!(bad.validate().is_err());
    }
}
