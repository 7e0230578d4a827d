//! Image codec: a 4-layer CNN encoder producing position-embedded feature
//! vectors, and the spatial-broadcast mixture decoder producing per-slot
//! RGB images and mask logits that are softmax-combined into the
//! reconstruction.

use crate::error::{Error, Result};
use crate::nn::{
    Conv2dLayer, ConvTranspose2dLayer, LayerNorm, Mlp, Params, PositionalEmbedding,
};
use crate::tensor::{conv_out_extent, Element, Tensor};
use rand::Rng;

/// Four conv layers, kernel 5, padding 2, ReLU; only the first layer's
/// stride is configurable (1 or 2).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub first_stride: usize,
    /// per-position layernorm + 2-layer MLP after the positional embedding
    pub feature_mlp: bool,
}

impl EncoderConfig {
    /// Full-scale configuration: 64 channels, stride 1.
    pub fn paper(image_size: usize) -> Self {
        EncoderConfig {
            image_size,
            channels: 64,
            first_stride: 1,
            feature_mlp: true,
        }
    }

    /// Full-scale variant with a stride-2 first layer (used for the larger
    /// 128px datasets).
    pub fn paper_stride2(image_size: usize) -> Self {
        EncoderConfig {
            first_stride: 2,
            ..Self::paper(image_size)
        }
    }

    pub fn desk(image_size: usize, channels: usize) -> Self {
        EncoderConfig {
            image_size,
            channels,
            first_stride: 2,
            feature_mlp: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.first_stride == 1 || self.first_stride == 2) {
            return Err(Error::Config(format!(
                "encoder first_stride must be 1 or 2, got {}",
                self.first_stride
            )));
        }
        if self.feature_grid() == 0 {
            return Err(Error::Config(format!(
                "encoder feature grid is empty for image size {}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Spatial extent of the feature grid after the conv stack.
    pub fn feature_grid(&self) -> usize {
        conv_out_extent(self.image_size, 5, self.first_stride, 2).unwrap_or(0)
    }

    pub fn n_positions(&self) -> usize {
        let g = self.feature_grid();
        g * g
    }

    pub fn d_input(&self) -> usize {
        self.channels
    }
}

pub struct Encoder<E: Element> {
    pub config: EncoderConfig,
    pub convs: Vec<Conv2dLayer<E>>,
    pub pos: PositionalEmbedding<E>,
    pub norm: LayerNorm<E>,
    pub mlp: Mlp<E>,
}

impl<E: Element> Encoder<E> {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let convs = vec![
            Conv2dLayer::new(3, c, 5, config.first_stride, 2, rng),
            Conv2dLayer::new(c, c, 5, 1, 2, rng),
            Conv2dLayer::new(c, c, 5, 1, 2, rng),
            Conv2dLayer::new(c, c, 5, 1, 2, rng),
        ];
        Ok(Encoder {
            pos: PositionalEmbedding::new(c, rng),
            norm: LayerNorm::new(c),
            mlp: Mlp::new(c, c, c, rng),
            convs,
            config,
        })
    }

    /// `[B, 3, H, W]` -> `[B, N, D_input]` with N = H' * W'.
    pub fn forward(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let s = self.config.image_size;
        if image.rank() != 4 || image.dims()[1] != 3 || image.dims()[2] != s || image.dims()[3] != s
        {
            return Err(Error::DimMismatch {
                op: "encode",
                lhs: image.dims().to_vec(),
                rhs: vec![image.dims()[0], 3, s, s],
            });
        }
        let mut h = image.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu();
        }
        let b = h.dims()[0];
        let c = h.dims()[1];
        let g = h.dims()[2];
        let n = g * g;
        let flat = h.reshape(vec![b, c, n])?.transpose(1, 2)?;
        let mut feats = flat.add(&self.pos.forward(g, g)?)?;
        if self.config.feature_mlp {
            feats = self.mlp.forward(&self.norm.forward(&feats)?)?;
        }
        Ok(feats)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect_params(&format!("{prefix}.conv{i}"), out);
        }
        self.pos.collect_params(&format!("{prefix}.pos"), out);
        self.norm.collect_params(&format!("{prefix}.norm"), out);
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeconvSpec {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub channels: usize,
    pub relu: bool,
}

/// Spatial-broadcast mixture decoder: slots are tiled over a small grid,
/// position-embedded, and upsampled by a transposed-conv stack whose final
/// 4 channels split into RGB (sigmoid) and a mask logit (softmax over
/// slots).
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDecoderConfig {
    pub image_size: usize,
    pub d_slots: usize,
    pub grid: usize,
    pub layers: Vec<DeconvSpec>,
}

impl MixtureDecoderConfig {
    /// Full-scale stack for 128px inputs: grid 8, five 5x5 transposed
    /// convs (stride 2,2,2,2,1) at 64 channels and a 3x3 head.
    pub fn paper_128(d_slots: usize) -> Self {
        let mut layers = vec![
            DeconvSpec { k: 5, stride: 2, pad: 2, out_pad: 1, channels: 64, relu: true };
            4
        ];
        layers.push(DeconvSpec {
            k: 5,
            stride: 1,
            pad: 2,
            out_pad: 0,
            channels: 64,
            relu: true,
        });
        layers.push(DeconvSpec {
            k: 3,
            stride: 1,
            pad: 1,
            out_pad: 0,
            channels: 4,
            relu: false,
        });
        MixtureDecoderConfig {
            image_size: 128,
            d_slots,
            grid: 8,
            layers,
        }
    }

    /// Full-scale stack for 64px inputs: as [`Self::paper_128`] with the
    /// fourth layer at stride 1.
    pub fn paper_64(d_slots: usize) -> Self {
        let mut cfg = Self::paper_128(d_slots);
        cfg.image_size = 64;
        cfg.layers[3].stride = 1;
        cfg.layers[3].out_pad = 0;
        cfg
    }

    /// Small stack for desk-scale inputs: grid H/4 and two stride-2
    /// layers, the second emitting the 4 output channels directly.
    pub fn desk(image_size: usize, d_slots: usize, channels: usize) -> Self {
        MixtureDecoderConfig {
            image_size,
            d_slots,
            grid: image_size / 4,
            layers: vec![
                DeconvSpec {
                    k: 5,
                    stride: 2,
                    pad: 2,
                    out_pad: 1,
                    channels,
                    relu: true,
                },
                DeconvSpec {
                    k: 5,
                    stride: 2,
                    pad: 2,
                    out_pad: 1,
                    channels: 4,
                    relu: false,
                },
            ],
        }
    }

    /// Spatial extent produced by the stack from the broadcast grid.
    pub fn output_size(&self) -> usize {
        let mut s = self.grid;
        for l in &self.layers {
            s = (s - 1) * l.stride + l.k - 2 * l.pad + l.out_pad;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        match self.layers.last() {
            Some(last) if last.channels == 4 && !last.relu => {}
            _ => {
                return Err(Error::Config(
                    "decoder stack must end with a linear 4-channel layer".into(),
                ))
            }
        }
        if self.output_size() != self.image_size {
            return Err(Error::Config(format!(
                "decoder produces {}px from grid {} but the image size is {}",
                self.output_size(),
                self.grid,
                self.image_size
            )));
        }
        Ok(())
    }
}

pub struct DecodeOutput<E: Element> {
    /// `[B, 3, H, W]`
    pub recon: Tensor<E>,
    /// `[B, K, 1, H, W]`, per-pixel simplex over K
    pub masks: Tensor<E>,
    /// `[B, K, 3, H, W]`
    pub rgb: Tensor<E>,
}

pub struct MixtureDecoder<E: Element> {
    pub config: MixtureDecoderConfig,
    pub pos: PositionalEmbedding<E>,
    pub layers: Vec<ConvTranspose2dLayer<E>>,
}

impl<E: Element> MixtureDecoder<E> {
    pub fn new(config: MixtureDecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut c_in = config.d_slots;
        for spec in &config.layers {
            layers.push(ConvTranspose2dLayer::new(
                c_in,
                spec.channels,
                spec.k,
                spec.stride,
                spec.pad,
                spec.out_pad,
                rng,
            ));
            c_in = spec.channels;
        }
        Ok(MixtureDecoder {
            pos: PositionalEmbedding::new(config.d_slots, rng),
            layers,
            config,
        })
    }

    /// Decodes each slot independently and alpha-composites the per-slot
    /// images with softmax masks.
    pub fn forward(&self, slots: &Tensor<E>) -> Result<DecodeOutput<E>> {
        let dims = slots.dims();
        if slots.rank() != 3 || dims[2] != self.config.d_slots {
            return Err(Error::DimMismatch {
                op: "decode_mixture",
                lhs: dims.to_vec(),
                rhs: vec![dims[0], dims[1], self.config.d_slots],
            });
        }
        let (b, k, d) = (dims[0], dims[1], dims[2]);
        let g = self.config.grid;
        let s = self.config.image_size;

        // broadcast each slot over the grid and add the positional embedding
        let z = slots
            .reshape(vec![b * k, d, 1, 1])?
            .broadcast_to(vec![b * k, d, g, g])?;
        let pos = self
            .pos
            .forward(g, g)? // [g*g, d]
            .transpose(0, 1)?
            .reshape(vec![d, g, g])?;
        let mut h = z.add(&pos)?;
        for (layer, spec) in self.layers.iter().zip(&self.config.layers) {
            h = layer.forward(&h)?;
            if spec.relu {
                h = h.relu();
            }
        }

        let rgb = h
            .slice(1, 0, 3)?
            .sigmoid()
            .reshape(vec![b, k, 3, s, s])?;
        let logits = h.slice(1, 3, 1)?.reshape(vec![b, k, s * s])?;
        let masks = logits.softmax(1)?.reshape(vec![b, k, 1, s, s])?;
        let recon = masks.mul(&rgb)?.sum_axis(1, false)?;
        Ok(DecodeOutput { recon, masks, rgb })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        self.pos.collect_params(&format!("{prefix}.pos"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&format!("{prefix}.deconv{i}"), out);
        }
    }
}

/// Mean squared error between reconstruction and target, the training
/// objective. Reporting conventions (per-pixel vs total) live in the
/// metrics module.
pub fn reconstruction_loss<E: Element>(recon: &Tensor<E>, image: &Tensor<E>) -> Result<Tensor<E>> {
    recon.mse_loss(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn stride1_encoder_keeps_resolution() {
        let cfg = EncoderConfig {
            image_size: 8,
            channels: 6,
            first_stride: 1,
            feature_mlp: true,
        };
        assert_eq!(cfg.n_positions(), 64);
        let mut r = rng(0);
        let enc = Encoder::<f64>::new(cfg, &mut r).unwrap();
        let img = Tensor::randn([2, 3, 8, 8], &mut r);
        let out = enc.forward(&img).unwrap();
        assert_eq!(out.dims(), &[2, 64, 6]);
    }

    #[test]
    fn encoder_is_pure() {
        let mut r = rng(1);
        let enc = Encoder::<f64>::new(EncoderConfig::desk(8, 4), &mut r).unwrap();
        let img = Tensor::randn([1, 3, 8, 8], &mut r);
        let a = enc.forward(&img).unwrap().to_vec();
        let b = enc.forward(&img).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_rejects_wrong_size() {
        let mut r = rng(2);
        let enc = Encoder::<f64>::new(EncoderConfig::desk(8, 4), &mut r).unwrap();
        let img = Tensor::<f64>::zeros([1, 3, 16, 16]);
        assert!(enc.forward(&img).is_err());
    }

    #[test]
    fn encoder_conv_gradients_match_finite_differences() {
        let mut r = rng(3);
        let enc = Encoder::<f64>::new(EncoderConfig::desk(8, 3), &mut r).unwrap();
        let img = Tensor::randn([1, 3, 8, 8], &mut r);
        let inputs = vec![enc.convs[0].weight.clone(), enc.convs[2].weight.clone()];
        let res = gradcheck::check_fn(
            "encoder_conv_weights",
            &inputs,
            &|_| enc.forward(&img),
            1e-4,
            1e-3,
            &mut r,
        )
        .unwrap();
        assert!(res.pass(), "max rel err {}", res.max_rel_err);
    }

    #[test]
    fn paper_decoder_geometry_matches_image_sizes() {
        assert_eq!(MixtureDecoderConfig::paper_128(64).output_size(), 128);
        assert_eq!(MixtureDecoderConfig::paper_64(64).output_size(), 64);
        assert_eq!(MixtureDecoderConfig::desk(32, 32, 16).output_size(), 32);
        assert!(MixtureDecoderConfig::paper_128(64).validate().is_ok());
        assert!(MixtureDecoderConfig::paper_64(64).validate().is_ok());
    }

    #[test]
    fn single_slot_mask_is_identity() {
        let mut r = rng(4);
        let dec = MixtureDecoder::<f64>::new(MixtureDecoderConfig::desk(8, 6, 5), &mut r).unwrap();
        let slots = Tensor::randn([2, 1, 6], &mut r);
        let out = dec.forward(&slots).unwrap();
        assert!(out.masks.to_vec().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let recon = out.recon.to_vec();
        let rgb = out.rgb.to_vec();
        assert_eq!(recon, rgb);
    }

    #[test]
    fn masks_form_a_simplex_and_recon_is_weighted_sum() {
        let mut r = rng(5);
        let dec = MixtureDecoder::<f64>::new(MixtureDecoderConfig::desk(8, 6, 5), &mut r).unwrap();
        let (b, k) = (2usize, 4usize);
        let slots = Tensor::randn([b, k, 6], &mut r);
        let out = dec.forward(&slots).unwrap();
        let masks = out.masks.to_vec();
        let rgb = out.rgb.to_vec();
        let recon = out.recon.to_vec();
        let hw = 64usize;
        for bi in 0..b {
            for p in 0..hw {
                let mut sum = 0.0;
                for ki in 0..k {
                    let m = masks[(bi * k + ki) * hw + p];
                    assert!(m >= 0.0);
                    sum += m;
                }
                assert!((sum - 1.0).abs() < 1e-5, "pixel simplex violated: {sum}");
                // brute-force per-pixel weighted sum over slots
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        let m = masks[(bi * k + ki) * hw + p];
                        let c = rgb[((bi * k + ki) * 3 + ch) * hw + p];
                        acc += m * c;
                    }
                    let got = recon[(bi * 3 + ch) * hw + p];
                    assert!((acc - got).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn permuting_slots_permutes_outputs_and_keeps_recon() {
        let mut r = rng(6);
        let dec = MixtureDecoder::<f64>::new(MixtureDecoderConfig::desk(8, 6, 5), &mut r).unwrap();
        let slots = Tensor::randn([1, 3, 6], &mut r);
        let sd = slots.to_vec();
        let perm = [2usize, 0, 1];
        let mut pd = vec![0.0; sd.len()];
        for (dst, &src) in perm.iter().enumerate() {
            pd[dst * 6..(dst + 1) * 6].copy_from_slice(&sd[src * 6..(src + 1) * 6]);
        }
        let permuted = Tensor::from_vec(pd, [1, 3, 6]).unwrap();

        let a = dec.forward(&slots).unwrap();
        let b = dec.forward(&permuted).unwrap();
        let hw = 64usize;
        for (dst, &src) in perm.iter().enumerate() {
            let ma = &a.masks.to_vec()[src * hw..(src + 1) * hw];
            let mb = &b.masks.to_vec()[dst * hw..(dst + 1) * hw];
            for (x, y) in ma.iter().zip(mb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        for (x, y) in a.recon.to_vec().iter().zip(b.recon.to_vec()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut r = rng(7);
        let img = Tensor::<f64>::randn([1, 3, 4, 4], &mut r);
        assert_eq!(reconstruction_loss(&img, &img).unwrap().item(), 0.0);

        let zeros = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let ones = Tensor::<f64>::ones([1, 3, 4, 4]);
        assert!((reconstruction_loss(&zeros, &ones).unwrap().item() - 1.0).abs() < 1e-12);

        let a = Tensor::<f64>::randn([2, 3, 4, 4], &mut r);
        let b = Tensor::<f64>::randn([2, 3, 4, 4], &mut r);
        let got = reconstruction_loss(&a, &b).unwrap().item();
        let av = a.to_vec();
        let bv = b.to_vec();
        let want: f64 =
            av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        assert!((got - want).abs() < 1e-9);

        let wrong = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert!(reconstruction_loss(&a, &wrong).is_err());
    }
}
