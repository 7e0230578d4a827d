//! Full scene model: encoder -> slot attention -> mixture decoder, the
//! reconstruction objective, and the end-to-end finite-difference check.

use crate::codec::{
    reconstruction_loss, DecodeOutput, Encoder, EncoderConfig, MixtureDecoder,
    MixtureDecoderConfig,
};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::rng::derive_rng;
use crate::slot::{
    GradientRegime, InitKind, RunMode, SlotAttention, SlotAttentionConfig, SlotState,
};
use crate::tensor::{gradcheck, no_grad, Element, Tensor};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub slot: SlotAttentionConfig,
    pub encoder: EncoderConfig,
    pub decoder: MixtureDecoderConfig,
}

impl ModelConfig {
    /// Small configuration sized for 32px sprite scenes on CPU.
    pub fn desk(k: usize, image_size: usize) -> Self {
        let encoder = EncoderConfig::desk(image_size, 8);
        let d_slots = 24;
        ModelConfig {
            slot: SlotAttentionConfig {
                slots: k,
                d_slots,
                d_input: encoder.d_input(),
                iterations: 3,
                eps: 1e-8,
                mlp_hidden: 128,
                init: InitKind::LearnableQuery,
                regime: GradientRegime::BiLevelStraightThrough,
                n_sigma: 1000,
            },
            decoder: MixtureDecoderConfig::desk(image_size, d_slots, 10),
            encoder,
        }
    }

    /// Full-scale configuration for 128px scenes (stride-2 encoder, 64
    /// channels, 8 slots).
    pub fn paper_128(k: usize) -> Self {
        let encoder = EncoderConfig::paper_stride2(128);
        ModelConfig {
            slot: SlotAttentionConfig {
                slots: k,
                d_slots: 64,
                d_input: encoder.d_input(),
                iterations: 3,
                eps: 1e-8,
                mlp_hidden: 128,
                init: InitKind::LearnableQuery,
                regime: GradientRegime::BiLevelStraightThrough,
                n_sigma: 30_000,
            },
            decoder: MixtureDecoderConfig::paper_128(64),
            encoder,
        }
    }

    /// Tiny 8px configuration used by the end-to-end gradcheck.
    pub fn micro(k: usize) -> Self {
        let encoder = EncoderConfig::desk(8, 4);
        let d_slots = 8;
        ModelConfig {
            slot: SlotAttentionConfig {
                slots: k,
                d_slots,
                d_input: encoder.d_input(),
                iterations: 1,
                eps: 1e-8,
                mlp_hidden: 16,
                init: InitKind::LearnableQuery,
                regime: GradientRegime::FullUnroll,
                n_sigma: 0,
            },
            decoder: MixtureDecoderConfig::desk(8, d_slots, 4),
            encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.slot.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.slot.d_input != self.encoder.d_input() {
            return Err(Error::Config(format!(
                "slot d_input {} disagrees with encoder channels {}",
                self.slot.d_input,
                self.encoder.d_input()
            )));
        }
        if self.decoder.d_slots != self.slot.d_slots {
            return Err(Error::Config(format!(
                "decoder d_slots {} disagrees with slot d_slots {}",
                self.decoder.d_slots, self.slot.d_slots
            )));
        }
        if self.decoder.image_size != self.encoder.image_size {
            return Err(Error::Config(format!(
                "decoder image size {} disagrees with encoder image size {}",
                self.decoder.image_size, self.encoder.image_size
            )));
        }
        Ok(())
    }
}

pub struct SceneModel<E: Element> {
    pub config: ModelConfig,
    pub encoder: Encoder<E>,
    pub slot_attn: SlotAttention<E>,
    pub decoder: MixtureDecoder<E>,
}

pub struct TrainForward<E: Element> {
    pub loss: Tensor<E>,
    pub state: SlotState<E>,
    pub decoded: DecodeOutput<E>,
}

impl<E: Element> SceneModel<E> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(SceneModel {
            encoder: Encoder::new(config.encoder.clone(), rng)?,
            slot_attn: SlotAttention::new(config.slot.clone(), rng)?,
            decoder: MixtureDecoder::new(config.decoder.clone(), rng)?,
            config,
        })
    }

    pub fn params(&self) -> Params<E> {
        let mut p = Params::new();
        self.encoder.collect_params("encoder", &mut p);
        self.slot_attn.collect_params("slot", &mut p);
        self.decoder.collect_params("decoder", &mut p);
        p
    }

    /// Training forward pass under the configured gradient regime.
    pub fn train_forward(
        &self,
        images: &Tensor<E>,
        step: u64,
        rng: &mut impl Rng,
    ) -> Result<TrainForward<E>> {
        let features = self.encoder.forward(images)?;
        let state = self.slot_attn.run(&features, step, rng, RunMode::Train, None)?;
        let decoded = self.decoder.forward(&state.slots)?;
        let loss = reconstruction_loss(&decoded.recon, images)?;
        Ok(TrainForward {
            loss,
            state,
            decoded,
        })
    }

    /// Inference without gradient recording; `t_override` substitutes the
    /// refinement count.
    pub fn infer(
        &self,
        images: &Tensor<E>,
        t_override: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<(SlotState<E>, DecodeOutput<E>)> {
        no_grad(|| {
            let features = self.encoder.forward(images)?;
            let state =
                self.slot_attn
                    .run(&features, u64::MAX, rng, RunMode::Inference, t_override)?;
            let decoded = self.decoder.forward(&state.slots)?;
            Ok((state, decoded))
        })
    }
}

/// End-to-end gradcheck: an 8px micro model at T=1, sampling a fraction of
/// the parameters and comparing against central finite differences on the
/// reconstruction loss.
pub fn e2e_gradcheck(seed: u64, sample_frac: f64, tol: f64) -> Result<gradcheck::Report> {
    let mut report = gradcheck::Report::default();
    for (name, init) in [
        ("e2e_full_unroll_query", InitKind::LearnableQuery),
        ("e2e_full_unroll_gaussian", InitKind::GaussianSample),
    ] {
        let mut cfg = ModelConfig::micro(2);
        cfg.slot.init = init;
        let mut rng = derive_rng(seed, "e2e-init", 0);
        let model = SceneModel::<f64>::new(cfg, &mut rng)?;
        let mut img_rng = derive_rng(seed, "e2e-img", 0);
        let images = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut img_rng);

        let params = model.params();
        // Zero-initialized biases put ReLU pre-activations exactly at the
        // kink (zero receptive fields in the sparse decoder maps), where
        // central differences are invalid. Evaluate at a generic point.
        let mut jostle = derive_rng(seed, "e2e-jostle", 0);
        for (_, t) in params.iter() {
            let nudged: Vec<f64> = t
                .to_vec()
                .iter()
                .map(|v| {
                    let eps: f64 = jostle.gen_range(0.005..0.02);
                    let sign = if jostle.gen_bool(0.5) { 1.0 } else { -1.0 };
                    v + sign * eps
                })
                .collect();
            t.set_data(&nudged)?;
        }
        let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        // the forward redraws the same init noise each evaluation
        let f = move |_: &[Tensor<f64>]| {
            let mut rng = derive_rng(seed, "e2e-noise", 1);
            Ok(model.train_forward(&images, 0, &mut rng)?.loss)
        };
        let mut check_rng = derive_rng(seed, "e2e-check", 2);
        let res = gradcheck::check_fn_sampled(
            name,
            &tensors,
            &f,
            gradcheck::DEFAULT_H,
            tol,
            &mut check_rng,
            sample_frac,
            2,
        )?;
        report.cases.push(res);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_and_paper_configs_validate() {
        assert!(ModelConfig::desk(5, 32).validate().is_ok());
        assert!(ModelConfig::desk(3, 32).validate().is_ok());
        assert!(ModelConfig::paper_128(8).validate().is_ok());
        assert!(ModelConfig::micro(2).validate().is_ok());
    }

    #[test]
    fn train_forward_reaches_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = ModelConfig::micro(3);
        cfg.slot.regime = GradientRegime::BiLevelStraightThrough;
        let model = SceneModel::<f64>::new(cfg, &mut rng).unwrap();
        let images = Tensor::rand_uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let out = model.train_forward(&images, 0, &mut rng).unwrap();
        assert!(out.loss.item().is_finite());
        backward(&out.loss).unwrap();
        let params = model.params();
        for (name, t) in params.iter() {
            assert!(t.grad().is_some(), "{name} received no gradient");
        }
    }

    #[test]
    fn infer_builds_no_graph_and_matches_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = SceneModel::<f32>::new(ModelConfig::micro(2), &mut rng).unwrap();
        let images = Tensor::rand_uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let (state, decoded) = model.infer(&images, Some(2), &mut rng).unwrap();
        assert!(!decoded.recon.requires_grad());
        assert_eq!(state.slots.dims(), &[2, 2, 8]);
        assert_eq!(decoded.masks.dims(), &[2, 2, 1, 8, 8]);
    }

    #[test]
    fn e2e_micro_gradcheck_passes() {
        let report = e2e_gradcheck(7, 0.02, 1e-3).unwrap();
        for line in report.lines() {
            if line.starts_with("FAIL") {
                panic!("{line}");
            }
        }
        assert!(report.all_pass());
    }
}



