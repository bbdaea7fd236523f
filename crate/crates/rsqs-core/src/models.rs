//! Neural networks used by the training loop and the few-shot evaluator.
//!
//! All four networks operate on grayscale images stored as rank-2 `(H, W)`
//! tensors with values in `[0, 1]`:
//!
//! * [`EmbeddingNet`] — three stride-2 conv/tanh stages plus a linear head
//!   mapping an image to a rank-1 feature vector.
//! * [`ClassifierHead`] — an affine map from feature space to class
//!   probabilities (softmax output).
//! * [`Generator`] — an encoder-decoder that adds a norm-bounded residual to
//!   its input; the residual is rescaled so the squared pixel distance between
//!   input and output never exceeds the budget `eps`, no matter the weights.
//! * [`Repairer`] — an encoder-decoder with a residual skip whose final layer
//!   is zero-initialised, so it is exactly the identity map until trained.
//!
//! Convolutions are recorded on the [`Tape`] as a gather (im2col with zero
//! padding) followed by a matmul, so gradients come from the existing op set.
//! Feature maps are channels-last rank-2 tensors of shape `(H·W, C)`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

/// Default squared-norm perturbation budget for a generator on `h`×`w`
/// images: five percent of the pixel count.
pub fn default_eps(height: usize, width: usize) -> f64 {
    0.05 * height as f64 * width as f64
}

/// Anything with an ordered list of trainable tensors.
///
/// The ordering of [`params`](Network::params), [`params_mut`](Network::params_mut)
/// and the node ids returned by [`register`] all agree, so optimizer steps can
/// zip gradients against parameters positionally.
pub trait Network {
    /// Parameters in a fixed, documented order.
    fn params(&self) -> Vec<&Tensor>;
    /// The same parameters, mutably, in the same order.
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Copy a network's parameters onto a tape as leaves and return their node
/// ids, in [`Network::params`] order. `trainable` controls whether gradients
/// are accumulated for them — registering with `false` freezes the network
/// for that tape.
pub fn register(tape: &mut Tape, net: &dyn Network, trainable: bool) -> Vec<NodeId> {
    net.params()
        .into_iter()
        .map(|p| tape.leaf(p.clone(), trainable))
        .collect()
}

/// Flat-index gather plan for a 3×3 convolution with zero padding.
///
/// The returned indices map an output of shape `(h_out·w_out, 9·c_in)` back
/// into a channels-last `(h·w, c_in)` input; `-1` marks padded positions.
/// Column order within a row is tap-major: tap `(dy, dx)` scans row-major
/// over the 3×3 window, and channels vary fastest.
fn conv_plan(h: usize, w: usize, c_in: usize, stride: usize) -> (Arc<Vec<i64>>, usize, usize) {
    let h_out = h.div_ceil(stride);
    let w_out = w.div_ceil(stride);
    let mut idx = Vec::with_capacity(h_out * w_out * 9 * c_in);
    for oy in 0..h_out {
        for ox in 0..w_out {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let y = (oy * stride) as i64 + dy;
                    let x = (ox * stride) as i64 + dx;
                    let inside = y >= 0 && y < h as i64 && x >= 0 && x < w as i64;
                    for ci in 0..c_in {
                        if inside {
                            idx.push((y * w as i64 + x) * c_in as i64 + ci as i64);
                        } else {
                            idx.push(-1);
                        }
                    }
                }
            }
        }
    }
    (Arc::new(idx), h_out, w_out)
}

/// Row plan for nearest-neighbour 2× upsampling from `(hs, ws)` to the exact
/// target `(ht, wt)`; source coordinates are clamped so odd targets work.
fn upsample_plan(hs: usize, ws: usize, ht: usize, wt: usize) -> Arc<Vec<usize>> {
    let mut rows = Vec::with_capacity(ht * wt);
    for y in 0..ht {
        for x in 0..wt {
            let sy = core::cmp::min(y / 2, hs - 1);
            let sx = core::cmp::min(x / 2, ws - 1);
            rows.push(sy * ws + sx);
        }
    }
    Arc::new(rows)
}

/// Uniform init in `±sqrt(6 / (fan_in + fan_out))`.
fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("finite init values")
}

/// One 3×3 convolution layer (zero padding, stride 1 or 2) with a
/// precomputed gather plan for a fixed input size.
#[derive(Clone)]
pub struct Conv2d {
    /// Weight of shape `(9·c_in, c_out)`, rows in gather-column order.
    pub weight: Tensor,
    /// Bias of shape `(c_out,)`, broadcast over output rows.
    pub bias: Tensor,
    plan: Arc<Vec<i64>>,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    c_in: usize,
}

impl Conv2d {
    /// Build a layer for `(h, w)` inputs with `c_in` → `c_out` channels.
    pub fn new(h: usize, w: usize, c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Result<Conv2d> {
        if h == 0 || w == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!(
                "conv layer dimensions must be positive, got ({h}, {w}) with {c_in}->{c_out} channels"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let (plan, h_out, w_out) = conv_plan(h, w, c_in, stride);
        Ok(Conv2d {
            weight: xavier(&[9 * c_in, c_out], 9 * c_in, 9 * c_out, rng),
            bias: Tensor::zeros(&[c_out]),
            plan,
            h_in: h,
            w_in: w,
            h_out,
            w_out,
            c_in,
        })
    }

    /// Output spatial size.
    pub fn out_size(&self) -> (usize, usize) {
        (self.h_out, self.w_out)
    }

    /// Record the convolution of `input` (shape `(h·w, c_in)`) using the
    /// weight and bias leaves `w_id` / `b_id`.
    pub fn forward(&self, tape: &mut Tape, w_id: NodeId, b_id: NodeId, input: NodeId) -> Result<NodeId> {
        let got = tape.value(input).shape();
        if got != [self.h_in * self.w_in, self.c_in] {
            return Err(Error::Shape(format!(
                "conv input shape {:?} does not match layer built for ({}, {}) with {} channels",
                got, self.h_in, self.w_in, self.c_in
            )));
        }
        let cols = tape.gather_pad(
            input,
            self.plan.clone(),
            &[self.h_out * self.w_out, 9 * self.c_in],
        )?;
        let z = tape.matmul(cols, w_id)?;
        tape.add_row_broadcast(z, b_id)
    }
}

/// Image → feature-vector network: three stride-2 conv/tanh stages
/// (1→8→16→16 channels) followed by a linear map to `dim` features.
#[derive(Clone)]
pub struct EmbeddingNet {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    /// Final linear weight of shape `(h3·w3·16, dim)`.
    pub fc_weight: Tensor,
    /// Final linear bias of shape `(dim,)`.
    pub fc_bias: Tensor,
    flat: usize,
}

impl EmbeddingNet {
    /// Build an embedder for `height`×`width` images (each at least 8) with
    /// `dim`-dimensional output features.
    pub fn new(height: usize, width: usize, dim: usize, rng: &mut Rng) -> Result<EmbeddingNet> {
        if height < 8 || width < 8 {
            return Err(Error::Config(format!(
                "embedder needs images of at least 8x8, got {height}x{width}"
            )));
        }
        if dim < 2 {
            return Err(Error::Config(format!("feature dimension must be at least 2, got {dim}")));
        }
        let conv1 = Conv2d::new(height, width, 1, 8, 2, rng)?;
        let (h1, w1) = conv1.out_size();
        let conv2 = Conv2d::new(h1, w1, 8, 16, 2, rng)?;
        let (h2, w2) = conv2.out_size();
        let conv3 = Conv2d::new(h2, w2, 16, 16, 2, rng)?;
        let (h3, w3) = conv3.out_size();
        let flat = h3 * w3 * 16;
        Ok(EmbeddingNet {
            height,
            width,
            dim,
            conv1,
            conv2,
            conv3,
            fc_weight: xavier(&[flat, dim], flat, dim, rng),
            fc_bias: Tensor::zeros(&[dim]),
            flat,
        })
    }

    /// Record the embedding of one `(height, width)` image node; returns a
    /// rank-1 `(dim,)` node. `ids` must come from [`register`] on this net.
    pub fn forward_image(&self, tape: &mut Tape, ids: &[NodeId], image: NodeId) -> Result<NodeId> {
        check_ids(ids, 8, "embedder")?;
        check_image(tape, image, self.height, self.width, "embedder")?;
        let x = tape.reshape(image, &[self.height * self.width, 1])?;
        let x = self.conv1.forward(tape, ids[0], ids[1], x)?;
        let x = tape.tanh(x)?;
        let x = self.conv2.forward(tape, ids[2], ids[3], x)?;
        let x = tape.tanh(x)?;
        let x = self.conv3.forward(tape, ids[4], ids[5], x)?;
        let x = tape.tanh(x)?;
        let x = tape.reshape(x, &[1, self.flat])?;
        let z = tape.matmul(x, ids[6])?;
        let z = tape.add_row_broadcast(z, ids[7])?;
        tape.reshape(z, &[self.dim])
    }
}

impl Network for EmbeddingNet {
    fn params(&self) -> Vec<&Tensor> {
        alloc::vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.conv3.weight,
            &self.conv3.bias,
            &self.fc_weight,
            &self.fc_bias,
        ]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        alloc::vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
        ]
    }
}

/// Affine map from feature space to a probability vector over classes.
#[derive(Clone)]
pub struct ClassifierHead {
    pub dim: usize,
    pub n_classes: usize,
    /// Weight of shape `(dim, n_classes)`.
    pub weight: Tensor,
    /// Bias of shape `(n_classes,)`.
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn new(dim: usize, n_classes: usize, rng: &mut Rng) -> Result<ClassifierHead> {
        if dim < 1 || n_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs dim >= 1 and at least 2 classes, got dim {dim} over {n_classes} classes"
            )));
        }
        Ok(ClassifierHead {
            dim,
            n_classes,
            weight: xavier(&[dim, n_classes], dim, n_classes, rng),
            bias: Tensor::zeros(&[n_classes]),
        })
    }

    /// Record class probabilities (softmax output, rank-1 `(n_classes,)`)
    /// for one rank-1 `(dim,)` feature node.
    pub fn forward(&self, tape: &mut Tape, ids: &[NodeId], features: NodeId) -> Result<NodeId> {
        check_ids(ids, 2, "classifier")?;
        let got = tape.value(features).shape();
        if got != [self.dim] {
            return Err(Error::Shape(format!(
                "classifier expects rank-1 ({},) features, got {:?}",
                self.dim, got
            )));
        }
        let x = tape.reshape(features, &[1, self.dim])?;
        let z = tape.matmul(x, ids[0])?;
        let z = tape.add_row_broadcast(z, ids[1])?;
        let z = tape.reshape(z, &[self.n_classes])?;
        tape.softmax(z)
    }
}

impl Network for ClassifierHead {
    fn params(&self) -> Vec<&Tensor> {
        alloc::vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        alloc::vec![&mut self.weight, &mut self.bias]
    }
}

/// Shared encoder-decoder topology for [`Generator`] and [`Repairer`]:
/// two stride-2 conv/tanh encoder stages (1→8→16), then two nearest-upsample
/// + conv decoder stages (16→8 with tanh, 8→1 linear) back to full resolution.
#[derive(Clone)]
struct EncDec {
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    up1: Arc<Vec<usize>>,
    up2: Arc<Vec<usize>>,
}

impl EncDec {
    fn new(height: usize, width: usize, rng: &mut Rng) -> Result<EncDec> {
        if height < 8 || width < 8 {
            return Err(Error::Config(format!(
                "encoder-decoder needs images of at least 8x8, got {height}x{width}"
            )));
        }
        let enc1 = Conv2d::new(height, width, 1, 8, 2, rng)?;
        let (h1, w1) = enc1.out_size();
        let enc2 = Conv2d::new(h1, w1, 8, 16, 2, rng)?;
        let (h2, w2) = enc2.out_size();
        let dec1 = Conv2d::new(h1, w1, 16, 8, 1, rng)?;
        let dec2 = Conv2d::new(height, width, 8, 1, 1, rng)?;
        Ok(EncDec {
            enc1,
            enc2,
            dec1,
            dec2,
            up1: upsample_plan(h2, w2, h1, w1),
            up2: upsample_plan(h1, w1, height, width),
        })
    }

    /// Record the raw residual map `(h·w, 1)` for an image already reshaped
    /// to `(h·w, 1)`. `ids` holds the eight conv leaves; `dropout` optionally
    /// applies inverted dropout with the given keep probability after the
    /// second encoder stage and the first decoder stage.
    fn residual(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        x: NodeId,
        dropout: Option<(f64, &mut Rng)>,
    ) -> Result<NodeId> {
        let mut dropout = dropout;
        let e1 = self.enc1.forward(tape, ids[0], ids[1], x)?;
        let e1 = tape.tanh(e1)?;
        let e2 = self.enc2.forward(tape, ids[2], ids[3], e1)?;
        let e2 = tape.tanh(e2)?;
        let e2 = apply_dropout(tape, e2, &mut dropout)?;
        let u1 = tape.row_gather(e2, self.up1.clone())?;
        let d1 = self.dec1.forward(tape, ids[4], ids[5], u1)?;
        let d1 = tape.tanh(d1)?;
        let d1 = apply_dropout(tape, d1, &mut dropout)?;
        let u2 = tape.row_gather(d1, self.up2.clone())?;
        self.dec2.forward(tape, ids[6], ids[7], u2)
    }

    fn params(&self) -> Vec<&Tensor> {
        alloc::vec![
            &self.enc1.weight,
            &self.enc1.bias,
            &self.enc2.weight,
            &self.enc2.bias,
            &self.dec1.weight,
            &self.dec1.bias,
            &self.dec2.weight,
            &self.dec2.bias,
        ]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        alloc::vec![
            &mut self.enc1.weight,
            &mut self.enc1.bias,
            &mut self.enc2.weight,
            &mut self.enc2.bias,
            &mut self.dec1.weight,
            &mut self.dec1.bias,
            &mut self.dec2.weight,
            &mut self.dec2.bias,
        ]
    }
}

/// Multiply `x` by a freshly sampled inverted-dropout mask when an rng is
/// present; identity otherwise. The mask is a constant (non-trainable) leaf.
fn apply_dropout(tape: &mut Tape, x: NodeId, dropout: &mut Option<(f64, &mut Rng)>) -> Result<NodeId> {
    let Some((p, rng)) = dropout else {
        return Ok(x);
    };
    let keep = 1.0 - *p;
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.leaf(Tensor::from_vec(&shape, data)?, false);
    tape.mul(x, mask)
}

/// Perturbation network: adds a residual to the input image whose squared
/// norm is rescaled to stay within the budget `eps`, then clamps to `[0, 1]`.
///
/// The bound holds structurally: the residual `d` is multiplied by
/// `min(1, sqrt(eps) / ||d||)` before being added, and clamping an in-range
/// image can only shrink the per-pixel deviation. So for any weights,
/// `||output - input||^2 <= eps` whenever the input lies in `[0, 1]`.
#[derive(Clone)]
pub struct Generator {
    pub height: usize,
    pub width: usize,
    /// Squared-norm budget for the added residual.
    pub eps: f64,
    /// Dropout probability applied at two decoder-side sites during
    /// stochastic forward passes.
    pub dropout: f64,
    net: EncDec,
}

impl Generator {
    /// Build a generator with the given squared-norm budget
    /// (see [`default_eps`]) and dropout probability 0.1.
    pub fn new(height: usize, width: usize, eps: f64, rng: &mut Rng) -> Result<Generator> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!("perturbation budget must be positive and finite, got {eps}")));
        }
        Ok(Generator {
            height,
            width,
            eps,
            dropout: 0.1,
            net: EncDec::new(height, width, rng)?,
        })
    }

    /// Record the perturbed image for one `(height, width)` image node.
    /// Pass an rng to sample dropout masks (training); `None` gives the
    /// deterministic forward pass.
    pub fn forward_image(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        image: NodeId,
        rng: Option<&mut Rng>,
    ) -> Result<NodeId> {
        check_ids(ids, 8, "generator")?;
        check_image(tape, image, self.height, self.width, "generator")?;
        let hw = self.height * self.width;
        let x = tape.reshape(image, &[hw, 1])?;
        let raw = self.net.residual(tape, ids, x, rng.map(|r| (self.dropout, r)))?;
        let flat = tape.reshape(raw, &[hw])?;
        // Rescale the residual into the sqrt(eps) ball: s = min(1, sqrt(eps)/||d||),
        // with the norm floored away from zero so the reciprocal stays finite.
        let sq = tape.dot(flat, flat)?;
        let floored = tape.max_const(sq, 1e-24)?;
        let norm = tape.pow_const(floored, 0.5)?;
        let inv = tape.pow_const(norm, -1.0)?;
        let s = tape.scale(inv, self.eps.sqrt())?;
        let s = tape.min_const(s, 1.0)?;
        let bounded = tape.mul_scalar(flat, s)?;
        let delta = tape.reshape(bounded, &[self.height, self.width])?;
        let sum = tape.add(image, delta)?;
        tape.clamp01(sum)
    }
}

impl Network for Generator {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

/// Restoration network: encoder-decoder with a residual skip,
/// `output = clamp01(input + residual)`. The final conv layer is
/// zero-initialised, so a fresh repairer maps every in-range image to itself
/// exactly. Deterministic (no dropout).
#[derive(Clone)]
pub struct Repairer {
    pub height: usize,
    pub width: usize,
    net: EncDec,
}

impl Repairer {
    pub fn new(height: usize, width: usize, rng: &mut Rng) -> Result<Repairer> {
        let mut net = EncDec::new(height, width, rng)?;
        // Identity at init: zero the closing layer so the residual starts at 0.
        net.dec2.weight = Tensor::zeros(net.dec2.weight.shape());
        net.dec2.bias = Tensor::zeros(net.dec2.bias.shape());
        Ok(Repairer { height, width, net })
    }

    /// Record the restored image for one `(height, width)` image node.
    pub fn forward_image(&self, tape: &mut Tape, ids: &[NodeId], image: NodeId) -> Result<NodeId> {
        check_ids(ids, 8, "repairer")?;
        check_image(tape, image, self.height, self.width, "repairer")?;
        let hw = self.height * self.width;
        let x = tape.reshape(image, &[hw, 1])?;
        let raw = self.net.residual(tape, ids, x, None)?;
        let res = tape.reshape(raw, &[self.height, self.width])?;
        let sum = tape.add(image, res)?;
        tape.clamp01(sum)
    }
}

impl Network for Repairer {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

/// The four networks trained and evaluated together.
#[derive(Clone)]
pub struct ModelBundle {
    pub embedder: EmbeddingNet,
    pub head: ClassifierHead,
    pub generator: Generator,
    pub repairer: Repairer,
}

impl ModelBundle {
    /// Initialise all four networks for `height`x`width` images, `dim`
    /// features and `n_classes` training classes, drawing weights from `rng`
    /// in a fixed order (embedder, head, generator, repairer).
    pub fn init(
        height: usize,
        width: usize,
        dim: usize,
        n_classes: usize,
        eps: f64,
        rng: &mut Rng,
    ) -> Result<ModelBundle> {
        Ok(ModelBundle {
            embedder: EmbeddingNet::new(height, width, dim, rng)?,
            head: ClassifierHead::new(dim, n_classes, rng)?,
            generator: Generator::new(height, width, eps, rng)?,
            repairer: Repairer::new(height, width, rng)?,
        })
    }

    /// The four networks with stable names, in a fixed order (the order used
    /// for initialisation and serialization).
    pub fn networks(&self) -> [(&'static str, &dyn Network); 4] {
        [
            ("embedder", &self.embedder),
            ("head", &self.head),
            ("generator", &self.generator),
            ("repairer", &self.repairer),
        ]
    }

    /// Mutable variant of [`networks`](ModelBundle::networks).
    pub fn networks_mut(&mut self) -> [(&'static str, &mut dyn Network); 4] {
        [
            ("embedder", &mut self.embedder),
            ("head", &mut self.head),
            ("generator", &mut self.generator),
            ("repairer", &mut self.repairer),
        ]
    }
}

fn check_ids(ids: &[NodeId], want: usize, who: &str) -> Result<()> {
    if ids.len() != want {
        return Err(Error::Shape(format!(
            "{who} forward needs {want} registered parameter nodes, got {}",
            ids.len()
        )));
    }
    Ok(())
}

fn check_image(tape: &Tape, image: NodeId, h: usize, w: usize, who: &str) -> Result<()> {
    let got = tape.value(image).shape();
    if got != [h, w] {
        return Err(Error::Shape(format!(
            "{who} expects a ({h}, {w}) image, got {got:?}"
        )));
    }
    Ok(())
}

/// Embed one image with a throwaway tape (no gradients kept).
pub fn embed(net: &EmbeddingNet, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = register(&mut tape, net, false);
    let x = tape.leaf(image.clone(), false);
    let out = net.forward_image(&mut tape, &ids, x)?;
    Ok(tape.value(out).clone())
}

/// Run the generator on one image with a throwaway tape. Pass an rng for a
/// stochastic (dropout) pass, `None` for the deterministic one.
pub fn generate_perturbed(net: &Generator, image: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = register(&mut tape, net, false);
    let x = tape.leaf(image.clone(), false);
    let out = net.forward_image(&mut tape, &ids, x, rng)?;
    Ok(tape.value(out).clone())
}

/// Run the repairer on one image with a throwaway tape.
pub fn repair(net: &Repairer, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = register(&mut tape, net, false);
    let x = tape.leaf(image.clone(), false);
    let out = net.forward_image(&mut tape, &ids, x)?;
    Ok(tape.value(out).clone())
}
