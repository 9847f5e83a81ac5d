//! Small fully convolutional unary model.
//!
//! A plain stack of same-padded convolutions with ReLU between them and a
//! per-pixel softmax on top. Training uses the class-weighted
//! cross-entropy from [`loss`]. Parameters live in f64 for exact gradient
//! checks but are kept f32-representable after initialisation and every
//! optimiser step, so checkpoints round-trip bit-exactly.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use loss::{
    class_counts, class_weights, weighted_ce_loss, weighted_ce_loss_with_n, ClassWeights, EPS,
};
pub use train::{train, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{LabelSlice2D, ProbVolume, Slice2D, Volume3D};

/// One convolution with optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    /// Square kernel side, odd (1 or 3); padding keeps the size.
    pub kernel: usize,
    pub relu: bool,
    /// `[cout][cin][ky][kx]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(cin: usize, cout: usize, kernel: usize, relu: bool) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(Error::InvalidParameter("layer channels must be > 0".into()));
        }
        if kernel % 2 == 0 {
            return Err(Error::InvalidParameter(format!("kernel {kernel} must be odd")));
        }
        Ok(Self {
            cin,
            cout,
            kernel,
            relu,
            weights: vec![0.0; cout * cin * kernel * kernel],
            bias: vec![0.0; cout],
        })
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        let k = self.kernel;
        self.weights[((o * self.cin + i) * k + ky) * k + kx]
    }

    /// Pre-activation output for a `(cin, h, w)` input.
    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let r = (k / 2) as isize;
        let hw = h * w;
        let mut out = vec![0.0; self.cout * hw];
        for o in 0..self.cout {
            let plane = &mut out[o * hw..(o + 1) * hw];
            plane.fill(self.bias[o]);
            for i in 0..self.cin {
                let src = &input[i * hw..(i + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - r;
                    for kx in 0..k {
                        let dx = kx as isize - r;
                        let wv = self.w(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let (y0, y1) = span(dy, h);
                        let (x0, x1) = span(dx, w);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut plane[y * w..(y + 1) * w];
                            let srow = &src[sy * w..(sy + 1) * w];
                            for x in x0..x1 {
                                drow[x] += wv * srow[(x as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, input: &[f64], d_out: &[f64], h: usize, w: usize, grad: &mut [f64]) -> Vec<f64> {
        let k = self.kernel;
        let r = (k / 2) as isize;
        let hw = h * w;
        let (gw, gb) = grad.split_at_mut(self.weights.len());
        let mut d_in = vec![0.0; self.cin * hw];
        for o in 0..self.cout {
            let dp = &d_out[o * hw..(o + 1) * hw];
            gb[o] += dp.iter().sum::<f64>();
            for i in 0..self.cin {
                let src = &input[i * hw..(i + 1) * hw];
                let di = &mut d_in[i * hw..(i + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - r;
                    for kx in 0..k {
                        let dx = kx as isize - r;
                        let widx = ((o * self.cin + i) * k + ky) * k + kx;
                        let wv = self.weights[widx];
                        let (y0, y1) = span(dy, h);
                        let (x0, x1) = span(dx, w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            for x in x0..x1 {
                                let sx = (x as isize + dx) as usize;
                                let g = dp[y * w + x];
                                acc += g * src[sy * w + sx];
                                di[sy * w + sx] += wv * g;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        d_in
    }
}

/// Output rows/cols whose source at offset `d` stays inside `[0, n)`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(lo as isize) as usize;
    (lo.min(n), hi.min(n))
}

/// Layer stack ending in class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    pub layers: Vec<ConvLayer>,
}

/// Per-pixel class probabilities of one slice, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceProbs {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl SliceProbs {
    pub fn prob(&self, class: usize, x: usize, y: usize) -> f64 {
        self.probs[class * self.width * self.height + y * self.width + x]
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ToyNet {
    /// Validates channel chaining.
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].cout != pair[1].cin {
                return Err(Error::InvalidParameter(format!(
                    "layer outputs {} channels but next expects {}",
                    pair[0].cout, pair[1].cin
                )));
            }
        }
        for l in &layers {
            if l.weights.len() != l.cout * l.cin * l.kernel * l.kernel || l.bias.len() != l.cout {
                return Err(Error::InvalidParameter("layer tensor sizes disagree with dims".into()));
            }
        }
        if layers.last().map(|l| l.cout) < Some(2) {
            return Err(Error::InvalidParameter("need at least 2 output classes".into()));
        }
        Ok(Self { layers })
    }

    /// `depth - 1` 3x3 ReLU convolutions of `width` channels, then a 1x1
    /// convolution to `classes` logits. He-normal weights, zero biases.
    pub fn standard(classes: usize, width: usize, depth: usize, seed: u64) -> Result<Self> {
        if depth < 1 {
            return Err(Error::InvalidParameter("depth must be >= 1".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut cin = 1;
        for _ in 0..depth - 1 {
            layers.push(ConvLayer::zeros(cin, width, 3, true)?);
            cin = width;
        }
        layers.push(ConvLayer::zeros(cin, classes, 1, false)?);
        let mut net = Self::new(layers)?;
        net.init_he(seed);
        Ok(net)
    }

    /// Default unary model: 4 layers, 16 channels.
    pub fn default_for(classes: usize, seed: u64) -> Result<Self> {
        Self::standard(classes, 16, 4, seed)
    }

    pub fn init_he(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut self.layers {
            let fan_in = (l.cin * l.kernel * l.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for w in &mut l.weights {
                *w = round_f32(normal.sample(&mut rng));
            }
            l.bias.fill(0.0);
        }
    }

    /// He-normal weights and N(0, 0.1^2) biases: a generic point for
    /// gradient checks, where zero biases put ReLU kinks exactly at the
    /// evaluation point wherever a layer input is all zero.
    pub fn randomize(&mut self, seed: u64) {
        self.init_he(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, 0.1).expect("positive std");
        for l in &mut self.layers {
            for b in &mut l.bias {
                *b = round_f32(normal.sample(&mut rng));
            }
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].cin
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").cout
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Weights then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a {}-parameter net",
                p.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest f32.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = round_f32(*w));
            l.bias.iter_mut().for_each(|b| *b = round_f32(*b));
        }
    }

    /// Forward pass keeping every layer input and pre-activation.
    fn trace(&self, image: &Slice2D) -> Result<Trace> {
        if self.input_channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, slice has 1",
                self.input_channels()
            )));
        }
        let (h, w) = (image.height, image.width);
        if h == 0 || w == 0 || image.data.len() != h * w {
            return Err(Error::ShapeMismatch("malformed slice".into()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
        for l in &self.layers {
            let z = l.forward(&x, h, w);
            inputs.push(x);
            x = if l.relu { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
        }
        let probs = softmax(&x, self.classes(), h * w);
        Ok(Trace {
            h,
            w,
            inputs,
            pre,
            probs,
        })
    }

    /// Raw class logits, class-major.
    pub fn logits(&self, image: &Slice2D) -> Result<Vec<f64>> {
        let t = self.trace(image)?;
        let last = self.layers.last().expect("non-empty");
        let z = t.pre.last().expect("non-empty");
        Ok(if last.relu { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() })
    }

    /// Loss and its gradient with respect to [`params`](Self::params).
    pub fn loss_and_grad(
        &self,
        image: &Slice2D,
        labels: &LabelSlice2D,
        weights: &ClassWeights,
        n: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let t = self.trace(image)?;
        check_labels(labels, image, self.classes(), weights)?;
        let (loss, d_logits) = loss::categorical_loss(&t.probs, self.classes(), &labels.labels, weights, n);
        let mut grad = vec![0.0; self.param_count()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.param_count();
        }
        let mut d = d_logits;
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.relu {
                for (g, z) in d.iter_mut().zip(&t.pre[li]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let g = &mut grad[offsets[li]..offsets[li] + l.param_count()];
            d = l.backward(&t.inputs[li], &d, t.h, t.w, g);
        }
        Ok((loss, grad))
    }

    /// Loss only.
    pub fn loss(&self, image: &Slice2D, labels: &LabelSlice2D, weights: &ClassWeights, n: f64) -> Result<f64> {
        let t = self.trace(image)?;
        check_labels(labels, image, self.classes(), weights)?;
        Ok(loss::categorical_loss(&t.probs, self.classes(), &labels.labels, weights, n).0)
    }
}

struct Trace {
    h: usize,
    w: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

fn check_labels(labels: &LabelSlice2D, image: &Slice2D, classes: usize, weights: &ClassWeights) -> Result<()> {
    if labels.width != image.width || labels.height != image.height {
        return Err(Error::ShapeMismatch(format!(
            "labels {}x{} vs image {}x{}",
            labels.width, labels.height, image.width, image.height
        )));
    }
    if weights.classes() != classes {
        return Err(Error::ShapeMismatch(format!(
            "{} class weights for {classes} classes",
            weights.classes()
        )));
    }
    if let Some(l) = labels.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidParameter(format!("label {l} outside {classes} classes")));
    }
    Ok(())
}

fn softmax(z: &[f64], classes: usize, px: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for i in 0..px {
        let m = (0..classes).map(|c| z[c * px + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..classes {
            let e = (z[c * px + i] - m).exp();
            out[c * px + i] = e;
            s += e;
        }
        for c in 0..classes {
            out[c * px + i] /= s;
        }
    }
    out
}

/// Per-pixel class probabilities of one slice.
pub fn forward(net: &ToyNet, image: &Slice2D) -> Result<SliceProbs> {
    let t = net.trace(image)?;
    Ok(SliceProbs {
        width: t.w,
        height: t.h,
        classes: net.classes(),
        probs: t.probs,
    })
}

/// Maps intensities to roughly `[0, 1]` before the network sees them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputScaling {
    pub lo: f32,
    pub hi: f32,
}

impl Default for InputScaling {
    fn default() -> Self {
        let (lo, hi) = crate::preprocess::DEFAULT_WINDOW;
        Self { lo, hi }
    }
}

impl InputScaling {
    pub fn apply(&self, s: &Slice2D) -> Slice2D {
        let span = self.hi - self.lo;
        Slice2D {
            width: s.width,
            height: s.height,
            data: s.data.iter().map(|v| (v - self.lo) / span).collect(),
        }
    }
}

/// Runs the net slice by slice over a volume.
pub fn forward_volume(net: &ToyNet, vol: &Volume3D, scaling: &InputScaling) -> Result<ProbVolume> {
    let grid = *vol.grid();
    let [nx, ny, nz] = grid.dims();
    let k = net.classes();
    let slices: Vec<SliceProbs> = (0..nz)
        .into_par_iter()
        .map(|z| forward(net, &scaling.apply(&vol.slice_z(z))))
        .collect::<Result<_>>()?;
    let n = grid.len();
    let plane = nx * ny;
    let mut probs = vec![0f32; n * k];
    for (z, s) in slices.iter().enumerate() {
        for c in 0..k {
            for p in 0..plane {
                probs[c * n + z * plane + p] = s.probs[c * plane + p] as f32;
            }
        }
    }
    ProbVolume::from_scores(grid, k, probs)
}

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    /// Parameters whose gradient magnitude exceeded the floor.
    pub checked: usize,
    /// Parameters whose difference step was shrunk to avoid a ReLU kink.
    pub step_reduced: usize,
}

/// Analytic gradients below this are skipped by the check.
pub const GRAD_FLOOR: f64 = 1e-8;

/// How often [`numeric_gradient`] may halve the step for one parameter.
pub const MAX_STEP_HALVINGS: u32 = 16;

impl ToyNet {
    /// Loss plus the on/off pattern of every ReLU.
    fn loss_and_pattern(
        &self,
        image: &Slice2D,
        labels: &LabelSlice2D,
        weights: &ClassWeights,
        n: f64,
    ) -> Result<(f64, Vec<bool>)> {
        let t = self.trace(image)?;
        check_labels(labels, image, self.classes(), weights)?;
        let loss = loss::categorical_loss(&t.probs, self.classes(), &labels.labels, weights, n).0;
        let pattern = self
            .layers
            .iter()
            .zip(&t.pre)
            .filter(|(l, _)| l.relu)
            .flat_map(|(_, z)| z.iter().map(|v| *v > 0.0))
            .collect();
        Ok((loss, pattern))
    }
}

/// Central finite differences `(L(t + h) - L(t - h)) / 2h` per parameter,
/// with the loss normalised over the slice's pixels.
///
/// The loss is only piecewise smooth: when the `+-h` probes switch any ReLU
/// relative to the unperturbed net the difference quotient straddles a
/// kink and says nothing about the derivative. For such parameters `h` is
/// halved (at most [`MAX_STEP_HALVINGS`] times) until neither probe
/// switches a unit. Returns the gradient and the number of parameters whose
/// step had to shrink.
pub fn numeric_gradient(
    net: &ToyNet,
    image: &Slice2D,
    labels: &LabelSlice2D,
    weights: &ClassWeights,
    h: f64,
) -> Result<(Vec<f64>, usize)> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step {h}")));
    }
    let n = (image.width * image.height) as f64;
    let base = net.params();
    let (_, pattern) = net.loss_and_pattern(image, labels, weights, n)?;
    let per_param: Vec<(f64, bool)> = (0..base.len())
        .into_par_iter()
        .map(|k| {
            let mut probe = net.clone();
            let mut p = base.clone();
            let mut step = h;
            let mut halvings = 0;
            loop {
                p[k] = base[k] + step;
                probe.set_params(&p)?;
                let (up, pu) = probe.loss_and_pattern(image, labels, weights, n)?;
                p[k] = base[k] - step;
                probe.set_params(&p)?;
                let (down, pd) = probe.loss_and_pattern(image, labels, weights, n)?;
                let smooth = pu == pattern && pd == pattern;
                if smooth || halvings == MAX_STEP_HALVINGS {
                    return Ok(((up - down) / (2.0 * step), halvings > 0));
                }
                step *= 0.5;
                halvings += 1;
            }
        })
        .collect::<Result<_>>()?;
    let shrunk = per_param.iter().filter(|(_, s)| *s).count();
    Ok((per_param.into_iter().map(|(g, _)| g).collect(), shrunk))
}

/// Largest `|a - b| / max(|a|, |b|)` over entries with `|a| > GRAD_FLOOR`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> GradientCheck {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (&a, &b) in analytic.iter().zip(numeric) {
        if a.abs() <= GRAD_FLOOR {
            continue;
        }
        checked += 1;
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
    }
    GradientCheck {
        max_rel_error: worst,
        checked,
        step_reduced: 0,
    }
}

/// Largest parameter count [`gradient_check`] accepts.
pub const GRADIENT_CHECK_MAX_PARAMS: usize = 10_000;

/// Compares backprop against central differences with the loss normalised
/// over the slice's pixels.
pub fn gradient_check(
    net: &ToyNet,
    image: &Slice2D,
    labels: &LabelSlice2D,
    weights: &ClassWeights,
    h: f64,
) -> Result<GradientCheck> {
    if net.param_count() > GRADIENT_CHECK_MAX_PARAMS {
        return Err(Error::TooLarge(format!(
            "{} parameters exceed the gradient-check limit {GRADIENT_CHECK_MAX_PARAMS}",
            net.param_count()
        )));
    }
    let n = (image.width * image.height) as f64;
    let (_, analytic) = net.loss_and_grad(image, labels, weights, n)?;
    let (numeric, step_reduced) = numeric_gradient(net, image, labels, weights, h)?;
    Ok(GradientCheck {
        step_reduced,
        ..max_relative_error(&analytic, &numeric)
    })
}
