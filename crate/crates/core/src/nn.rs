//! Parameterized building blocks: linear projections, a GRU cell, the
//! residual MLP, positional embeddings, and the named-parameter registry
//! used by the optimizer and checkpoints.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use rand::Rng;

/// Ordered collection of named variables. Iteration order is registration
/// order, which keeps optimizer updates and checkpoints deterministic.
pub struct Params<E: Element> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Element> Default for Params<E> {
    fn default() -> Self {
        Params {
            entries: Vec::new(),
        }
    }
}

impl<E: Element> Params<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor<E>) {
        let name = name.into();
        debug_assert!(t.is_var(), "parameter {name} must be a variable");
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t.clone()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Xavier-uniform initialization over the given fan pair.
pub fn xavier_uniform<E: Element>(
    dims: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<E> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::var(data, dims.to_vec()).unwrap()
}

/// Layers clone shallowly: the copy shares parameter storage with the
/// original.
pub struct Linear<E: Element> {
    /// `[out, in]`
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Element> Clone for Linear<E> {
    fn clone(&self) -> Self {
        Linear {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
    }
}

impl<E: Element> Linear<E> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: xavier_uniform(&[d_out, d_in], d_in, d_out, rng),
            bias: bias.then(|| Tensor::var(vec![E::zero(); d_out], [d_out]).unwrap()),
        }
    }

    /// Identity weights, no bias; requires `d_in == d_out`. Test hook for
    /// oracle checks that hand-set the attention projections.
    pub fn identity(d: usize) -> Self {
        let mut w = vec![E::zero(); d * d];
        for i in 0..d {
            w[i * d + i] = E::one();
        }
        Linear {
            weight: Tensor::var(w, [d, d]).unwrap(),
            bias: None,
        }
    }

    /// Applies to the last axis of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let d_in = self.weight.dims()[1];
        let rank = x.rank();
        if rank < 2 || x.dims()[rank - 1] != d_in {
            return Err(Error::DimMismatch {
                op: "linear",
                lhs: x.dims().to_vec(),
                rhs: self.weight.dims().to_vec(),
            });
        }
        let flat = if rank == 3 {
            let dims = x.dims().to_vec();
            x.reshape(vec![dims[0] * dims[1], dims[2]])?
        } else {
            x.clone()
        };
        let wt = self.weight.transpose(0, 1)?;
        let mut y = flat.matmul(&wt)?;
        if let Some(b) = &self.bias {
            y = y.add(b)?;
        }
        if rank == 3 {
            let dims = x.dims();
            y = y.reshape(vec![dims[0], dims[1], self.weight.dims()[0]])?;
        }
        Ok(y)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        out.push(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            out.push(format!("{prefix}.bias"), b);
        }
    }
}

pub struct LayerNorm<E: Element> {
    pub gain: Tensor<E>,
    pub bias: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> Clone for LayerNorm<E> {
    fn clone(&self) -> Self {
        LayerNorm {
            gain: self.gain.clone(),
            bias: self.bias.clone(),
            eps: self.eps,
        }
    }
}

impl<E: Element> LayerNorm<E> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::var(vec![E::one(); d], [d]).unwrap(),
            bias: Tensor::var(vec![E::zero(); d], [d]).unwrap(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layernorm(&self.gain, &self.bias, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        out.push(format!("{prefix}.gain"), &self.gain);
        out.push(format!("{prefix}.bias"), &self.bias);
    }
}

/// GRU cell over matching input and hidden width, applied row-wise with
/// shared weights. Gate layout follows the standard formulation with
/// separate input- and hidden-side biases:
///
/// r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
pub struct GruCell<E: Element> {
    pub w_ir: Linear<E>,
    pub w_iz: Linear<E>,
    pub w_in: Linear<E>,
    pub w_hr: Linear<E>,
    pub w_hz: Linear<E>,
    pub w_hn: Linear<E>,
}

impl<E: Element> Clone for GruCell<E> {
    fn clone(&self) -> Self {
        GruCell {
            w_ir: self.w_ir.clone(),
            w_iz: self.w_iz.clone(),
            w_in: self.w_in.clone(),
            w_hr: self.w_hr.clone(),
            w_hz: self.w_hz.clone(),
            w_hn: self.w_hn.clone(),
        }
    }
}

impl<E: Element> GruCell<E> {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        GruCell {
            w_ir: Linear::new(d, d, true, rng),
            w_iz: Linear::new(d, d, true, rng),
            w_in: Linear::new(d, d, true, rng),
            w_hr: Linear::new(d, d, true, rng),
            w_hz: Linear::new(d, d, true, rng),
            w_hn: Linear::new(d, d, true, rng),
        }
    }

    pub fn zeroed(d: usize) -> Self {
        let zero_lin = || Linear {
            weight: Tensor::var(vec![E::zero(); d * d], [d, d]).unwrap(),
            bias: Some(Tensor::var(vec![E::zero(); d], [d]).unwrap()),
        };
        GruCell {
            w_ir: zero_lin(),
            w_iz: zero_lin(),
            w_in: zero_lin(),
            w_hr: zero_lin(),
            w_hz: zero_lin(),
            w_hn: zero_lin(),
        }
    }

    pub fn step(&self, h: &Tensor<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.step_impl(h, x, None)
    }

    /// Test hook: clamps the update gate z to a constant. z = 1 must return
    /// h unchanged.
    pub fn step_forced_update(&self, h: &Tensor<E>, x: &Tensor<E>, z: f64) -> Result<Tensor<E>> {
        self.step_impl(h, x, Some(z))
    }

    fn step_impl(&self, h: &Tensor<E>, x: &Tensor<E>, force_z: Option<f64>) -> Result<Tensor<E>> {
        if h.dims() != x.dims() {
            return Err(Error::DimMismatch {
                op: "gru_step",
                lhs: h.dims().to_vec(),
                rhs: x.dims().to_vec(),
            });
        }
        let r = self.w_ir.forward(x)?.add(&self.w_hr.forward(h)?)?.sigmoid();
        let z = match force_z {
            Some(v) => Tensor::full(h.dims().to_vec(), E::from_f64(v)),
            None => self.w_iz.forward(x)?.add(&self.w_hz.forward(h)?)?.sigmoid(),
        };
        let n = self
            .w_in
            .forward(x)?
            .add(&r.mul(&self.w_hn.forward(h)?)?)?
            .tanh();
        // h' = (1 - z) * n + z * h
        let one_minus_z = z.neg().add_scalar(1.0);
        one_minus_z.mul(&n)?.add(&z.mul(h)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        self.w_ir.collect_params(&format!("{prefix}.w_ir"), out);
        self.w_iz.collect_params(&format!("{prefix}.w_iz"), out);
        self.w_in.collect_params(&format!("{prefix}.w_in"), out);
        self.w_hr.collect_params(&format!("{prefix}.w_hr"), out);
        self.w_hz.collect_params(&format!("{prefix}.w_hz"), out);
        self.w_hn.collect_params(&format!("{prefix}.w_hn"), out);
    }
}

/// Two linear layers with a ReLU between.
pub struct Mlp<E: Element> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Element> Clone for Mlp<E> {
    fn clone(&self) -> Self {
        Mlp {
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
        }
    }
}

impl<E: Element> Mlp<E> {
    pub fn new(d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(d_in, hidden, true, rng),
            fc2: Linear::new(hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

/// Four complementary linear ramps over a spatial grid, channel order
/// (left, right, top, bottom); corner (0,0) reads (0, 1, 0, 1).
pub fn positional_grid<E: Element>(h: usize, w: usize) -> Tensor<E> {
    assert!(h >= 1 && w >= 1);
    let mut data = vec![E::zero(); 4 * h * w];
    let plane = h * w;
    for i in 0..h {
        let top = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
        for j in 0..w {
            let left = if w > 1 { j as f64 / (w - 1) as f64 } else { 0.0 };
            let p = i * w + j;
            data[p] = E::from_f64(left);
            data[plane + p] = E::from_f64(1.0 - left);
            data[2 * plane + p] = E::from_f64(top);
            data[3 * plane + p] = E::from_f64(1.0 - top);
        }
    }
    Tensor::from_vec(data, [4, h, w]).unwrap()
}

/// Learnable projection of the 4-ramp coordinate grid, added to features.
pub struct PositionalEmbedding<E: Element> {
    pub proj: Linear<E>,
}

impl<E: Element> Clone for PositionalEmbedding<E> {
    fn clone(&self) -> Self {
        PositionalEmbedding {
            proj: self.proj.clone(),
        }
    }
}

impl<E: Element> PositionalEmbedding<E> {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        PositionalEmbedding {
            proj: Linear::new(4, d, true, rng),
        }
    }

    /// Embedding for an h x w grid, shaped `[h*w, d]`.
    pub fn forward(&self, h: usize, w: usize) -> Result<Tensor<E>> {
        let grid = positional_grid::<E>(h, w);
        let flat = grid.reshape(vec![4, h * w])?.transpose(0, 1)?;
        self.proj.forward(&flat)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        self.proj.collect_params(&format!("{prefix}.proj"), out);
    }
}

/// Convolution layer with bias, used by the encoder.
pub struct Conv2dLayer<E: Element> {
    /// `[out, in, k, k]`
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Element> Conv2dLayer<E> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        Conv2dLayer {
            weight: xavier_uniform(&[c_out, c_in, k, k], fan_in, fan_out, rng),
            bias: Tensor::var(vec![E::zero(); c_out], [c_out]).unwrap(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv2d_bias(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        out.push(format!("{prefix}.weight"), &self.weight);
        out.push(format!("{prefix}.bias"), &self.bias);
    }
}

/// Transposed-convolution layer with bias, used by the mixture decoder.
pub struct ConvTranspose2dLayer<E: Element> {
    /// `[in, out, k, k]`
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl<E: Element> ConvTranspose2dLayer<E> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        ConvTranspose2dLayer {
            weight: xavier_uniform(&[c_in, c_out, k, k], fan_in, fan_out, rng),
            bias: Tensor::var(vec![E::zero(); c_out], [c_out]).unwrap(),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv_transpose2d_bias(
            &self.weight,
            Some(&self.bias),
            self.stride,
            self.pad,
            self.out_pad,
        )
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Params<E>) {
        out.push(format!("{prefix}.weight"), &self.weight);
        out.push(format!("{prefix}.bias"), &self.bias);
    }
}
