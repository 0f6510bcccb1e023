//! Small convolutional classifier with hand-derived backpropagation.
//!
//! `conv3x3(16) → ReLU → mean-pool 2 → conv3x3(32) → ReLU → mean-pool 2 → linear`.
//! Inputs are `C × D0 × D1` planes (the grid's `C × W × H` layout).

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use train::{evaluate, train, BatchStats, Classifier, EpochRecord, Sample, TrainConfig, Trainer};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::Adam;

pub const CONV1_FILTERS: usize = 16;
pub const CONV2_FILTERS: usize = 32;

/// Dimensions that fix the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub width: usize,
    pub height: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(in_channels: usize, width: usize, height: usize, classes: usize) -> Result<Self> {
        if !width.is_multiple_of(4) || !height.is_multiple_of(4) || width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "sensor {width}x{height} must be a nonzero multiple of 4 in both axes"
            )));
        }
        if in_channels == 0 || classes < 2 {
            return Err(Error::ShapeMismatch(format!(
                "need input channels and at least two classes, got {in_channels} / {classes}"
            )));
        }
        Ok(Self {
            in_channels,
            width,
            height,
            classes,
        })
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.width * self.height
    }

    fn features(&self) -> usize {
        CONV2_FILTERS * (self.width / 4) * (self.height / 4)
    }

    /// `(name, shape)` of every parameter block, in storage order.
    pub fn blocks(&self) -> [(&'static str, Vec<usize>); 6] {
        [
            ("conv1.weight", vec![CONV1_FILTERS, self.in_channels, 3, 3]),
            ("conv1.bias", vec![CONV1_FILTERS]),
            ("conv2.weight", vec![CONV2_FILTERS, CONV1_FILTERS, 3, 3]),
            ("conv2.bias", vec![CONV2_FILTERS]),
            ("fc.weight", vec![self.classes, self.features()]),
            ("fc.bias", vec![self.classes]),
        ]
    }

    fn offsets(&self) -> [usize; 7] {
        let mut off = [0; 7];
        for (i, (_, shape)) in self.blocks().iter().enumerate() {
            off[i + 1] = off[i] + shape.iter().product::<usize>();
        }
        off
    }

    pub fn param_count(&self) -> usize {
        self.offsets()[6]
    }
}

/// All network parameters in one flat buffer; also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub data: Vec<f32>,
    /// Bumped by every optimizer step so stale caches can be detected.
    pub version: u64,
}

struct Views<'a> {
    conv1_w: &'a [f32],
    conv1_b: &'a [f32],
    conv2_w: &'a [f32],
    conv2_b: &'a [f32],
    fc_w: &'a [f32],
    fc_b: &'a [f32],
}

struct ViewsMut<'a> {
    conv1_w: &'a mut [f32],
    conv1_b: &'a mut [f32],
    conv2_w: &'a mut [f32],
    conv2_b: &'a mut [f32],
    fc_w: &'a mut [f32],
    fc_b: &'a mut [f32],
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            data: vec![0.0; arch.param_count()],
            version: 0,
        }
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights and zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(arch);
        let fans = [
            (arch.in_channels * 9, CONV1_FILTERS * 9),
            (CONV1_FILTERS * 9, CONV2_FILTERS * 9),
            (arch.features(), arch.classes),
        ];
        let off = arch.offsets();
        for (block, (fan_in, fan_out)) in [0, 2, 4].into_iter().zip(fans) {
            let lim = (6.0 / (fan_in + fan_out) as f32).sqrt();
            for w in &mut p.data[off[block]..off[block + 1]] {
                *w = rng.gen_range(-lim..lim);
            }
        }
        p
    }

    fn views(&self) -> Views<'_> {
        let off = self.arch.offsets();
        let d = &self.data;
        Views {
            conv1_w: &d[off[0]..off[1]],
            conv1_b: &d[off[1]..off[2]],
            conv2_w: &d[off[2]..off[3]],
            conv2_b: &d[off[3]..off[4]],
            fc_w: &d[off[4]..off[5]],
            fc_b: &d[off[5]..off[6]],
        }
    }

    fn views_mut(&mut self) -> ViewsMut<'_> {
        let off = self.arch.offsets();
        let (conv1_w, rest) = self.data.split_at_mut(off[1]);
        let (conv1_b, rest) = rest.split_at_mut(off[2] - off[1]);
        let (conv2_w, rest) = rest.split_at_mut(off[3] - off[2]);
        let (conv2_b, rest) = rest.split_at_mut(off[4] - off[3]);
        let (fc_w, fc_b) = rest.split_at_mut(off[5] - off[4]);
        ViewsMut {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            fc_w,
            fc_b,
        }
    }

    /// Mutable access to one named block (see [`Architecture::blocks`]).
    pub fn block_mut(&mut self, index: usize) -> &mut [f32] {
        let off = self.arch.offsets();
        &mut self.data[off[index]..off[index + 1]]
    }

    pub fn block(&self, index: usize) -> &[f32] {
        let off = self.arch.offsets();
        &self.data[off[index]..off[index + 1]]
    }

    fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    arch: Architecture,
    input: Vec<f32>,
    act1: Vec<f32>,
    pool1: Vec<f32>,
    act2: Vec<f32>,
    pool2: Vec<f32>,
    pub logits: Vec<f32>,
}

/// `out[o] = b[o] + Σ_c w[o, c] ⋆ in[c]` with a 3×3 window and zero padding 1.
fn conv3x3_forward(input: &[f32], cin: usize, d0: usize, d1: usize, w: &[f32], b: &[f32], out: &mut [f32]) {
    let plane = d0 * d1;
    for (o, out_plane) in out.chunks_exact_mut(plane).enumerate() {
        out_plane.fill(b[o]);
        for c in 0..cin {
            let in_plane = &input[c * plane..(c + 1) * plane];
            let kernel = &w[(o * cin + c) * 9..(o * cin + c + 1) * 9];
            for ki in 0..3 {
                for kj in 0..3 {
                    let wv = kernel[ki * 3 + kj];
                    let (i0, i1) = valid_range(ki, d0);
                    let (j0, j1) = valid_range(kj, d1);
                    for i in i0..i1 {
                        let src = &in_plane[(i + ki - 1) * d1 + j0 + kj - 1..(i + ki - 1) * d1 + j1 + kj - 1];
                        let dst = &mut out_plane[i * d1 + j0..i * d1 + j1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Output rows `i` for which `i + k - 1` is a valid input row.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

/// Accumulates weight/bias gradients and (optionally) the input gradient of a conv layer.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f32],
    cin: usize,
    d0: usize,
    d1: usize,
    w: &[f32],
    dout: &[f32],
    mut dw: Option<(&mut [f32], &mut [f32])>,
    mut din: Option<&mut [f32]>,
) {
    let plane = d0 * d1;
    for (o, g_plane) in dout.chunks_exact(plane).enumerate() {
        if let Some((_, db)) = dw.as_mut() {
            db[o] += g_plane.iter().sum::<f32>();
        }
        for c in 0..cin {
            let in_plane = &input[c * plane..(c + 1) * plane];
            for ki in 0..3 {
                for kj in 0..3 {
                    let widx = (o * cin + c) * 9 + ki * 3 + kj;
                    let (i0, i1) = valid_range(ki, d0);
                    let (j0, j1) = valid_range(kj, d1);
                    if let Some((dwv, _)) = dw.as_mut() {
                        let mut acc = 0.0f32;
                        for i in i0..i1 {
                            let src = &in_plane[(i + ki - 1) * d1 + j0 + kj - 1..(i + ki - 1) * d1 + j1 + kj - 1];
                            let g = &g_plane[i * d1 + j0..i * d1 + j1];
                            acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f32>();
                        }
                        dwv[widx] += acc;
                    }
                    if let Some(din) = din.as_mut() {
                        let wv = w[widx];
                        let din_plane = &mut din[c * plane..(c + 1) * plane];
                        for i in i0..i1 {
                            let dst = &mut din_plane[(i + ki - 1) * d1 + j0 + kj - 1..(i + ki - 1) * d1 + j1 + kj - 1];
                            let g = &g_plane[i * d1 + j0..i * d1 + j1];
                            for (d, s) in dst.iter_mut().zip(g) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn relu_inplace(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn mean_pool2(input: &[f32], channels: usize, d0: usize, d1: usize) -> Vec<f32> {
    let (h0, h1) = (d0 / 2, d1 / 2);
    let mut out = vec![0.0; channels * h0 * h1];
    for c in 0..channels {
        let src = &input[c * d0 * d1..(c + 1) * d0 * d1];
        let dst = &mut out[c * h0 * h1..(c + 1) * h0 * h1];
        for i in 0..h0 {
            for j in 0..h1 {
                let a = src[2 * i * d1 + 2 * j] + src[2 * i * d1 + 2 * j + 1];
                let b = src[(2 * i + 1) * d1 + 2 * j] + src[(2 * i + 1) * d1 + 2 * j + 1];
                dst[i * h1 + j] = 0.25 * (a + b);
            }
        }
    }
    out
}

/// Gradient of [`mean_pool2`] masked by the ReLU that fed it.
fn mean_pool2_relu_backward(dout: &[f32], act: &[f32], channels: usize, d0: usize, d1: usize) -> Vec<f32> {
    let (h0, h1) = (d0 / 2, d1 / 2);
    let mut din = vec![0.0; channels * d0 * d1];
    for c in 0..channels {
        for i in 0..d0 {
            for j in 0..d1 {
                let idx = c * d0 * d1 + i * d1 + j;
                if act[idx] > 0.0 {
                    din[idx] = 0.25 * dout[c * h0 * h1 + (i / 2) * h1 + j / 2];
                }
            }
        }
    }
    din
}

pub fn forward(model: &ModelParams, input: &[f32]) -> Result<(Vec<f32>, ForwardCache)> {
    let arch = model.arch;
    if input.len() != arch.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, model expects {}",
            input.len(),
            arch.input_len()
        )));
    }
    let v = model.views();
    let (d0, d1) = (arch.width, arch.height);
    let mut act1 = vec![0.0; CONV1_FILTERS * d0 * d1];
    conv3x3_forward(input, arch.in_channels, d0, d1, v.conv1_w, v.conv1_b, &mut act1);
    relu_inplace(&mut act1);
    let pool1 = mean_pool2(&act1, CONV1_FILTERS, d0, d1);

    let (e0, e1) = (d0 / 2, d1 / 2);
    let mut act2 = vec![0.0; CONV2_FILTERS * e0 * e1];
    conv3x3_forward(&pool1, CONV1_FILTERS, e0, e1, v.conv2_w, v.conv2_b, &mut act2);
    relu_inplace(&mut act2);
    let pool2 = mean_pool2(&act2, CONV2_FILTERS, e0, e1);

    let logits: Vec<f32> = v
        .fc_w
        .chunks_exact(pool2.len())
        .zip(v.fc_b)
        .map(|(row, b)| b + row.iter().zip(&pool2).map(|(w, x)| w * x).sum::<f32>())
        .collect();
    Ok((
        logits.clone(),
        ForwardCache {
            version: model.version,
            arch,
            input: input.to_vec(),
            act1,
            pool1,
            act2,
            pool2,
            logits,
        },
    ))
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy `−log softmax(logits)[y]`, evaluated with max subtraction.
pub fn loss(logits: &[f32], y: usize) -> f64 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&z| (z as f64 - m).exp()).sum::<f64>().ln() + m;
    lse - logits[y] as f64
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Which gradients [`backward_with`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wanted {
    pub params: bool,
    pub input: bool,
}

/// Gradients of the cross-entropy at label `y` with respect to every parameter
/// and to the input tensor.
pub fn backward(model: &ModelParams, cache: &ForwardCache, y: usize) -> Result<(ModelParams, Vec<f32>)> {
    let (g, din) = backward_with(model, cache, y, Wanted { params: true, input: true })?;
    Ok((g.expect("params requested"), din.expect("input requested")))
}

pub fn backward_with(
    model: &ModelParams,
    cache: &ForwardCache,
    y: usize,
    wanted: Wanted,
) -> Result<(Option<ModelParams>, Option<Vec<f32>>)> {
    if cache.version != model.version || cache.arch != model.arch {
        return Err(Error::StaleCache);
    }
    let arch = model.arch;
    if y >= arch.classes {
        return Err(Error::ShapeMismatch(format!("label {y} >= {} classes", arch.classes)));
    }
    let probs = softmax(&cache.logits);
    let dlogits: Vec<f32> = probs
        .iter()
        .enumerate()
        .map(|(k, p)| (p - if k == y { 1.0 } else { 0.0 }) as f32)
        .collect();

    let v = model.views();
    let mut grads = wanted.params.then(|| ModelParams::zeros(arch));
    let (d0, d1) = (arch.width, arch.height);
    let (e0, e1) = (d0 / 2, d1 / 2);

    let n_feat = cache.pool2.len();
    let mut dpool2 = vec![0.0f32; n_feat];
    for (k, &g) in dlogits.iter().enumerate() {
        let row = &v.fc_w[k * n_feat..(k + 1) * n_feat];
        for (d, w) in dpool2.iter_mut().zip(row) {
            *d += g * w;
        }
    }
    if let Some(gr) = grads.as_mut() {
        let gv = gr.views_mut();
        for (k, &g) in dlogits.iter().enumerate() {
            gv.fc_b[k] = g;
            for (d, x) in gv.fc_w[k * n_feat..(k + 1) * n_feat].iter_mut().zip(&cache.pool2) {
                *d = g * x;
            }
        }
    }

    let dact2 = mean_pool2_relu_backward(&dpool2, &cache.act2, CONV2_FILTERS, e0, e1);
    let mut dpool1 = vec![0.0f32; cache.pool1.len()];
    {
        let dw = grads.as_mut().map(|gr| {
            let gv = gr.views_mut();
            (gv.conv2_w, gv.conv2_b)
        });
        conv3x3_backward(&cache.pool1, CONV1_FILTERS, e0, e1, v.conv2_w, &dact2, dw, Some(&mut dpool1));
    }

    let dact1 = mean_pool2_relu_backward(&dpool1, &cache.act1, CONV1_FILTERS, d0, d1);
    let mut dinput = wanted.input.then(|| vec![0.0f32; cache.input.len()]);
    if wanted.params || wanted.input {
        let dw = grads.as_mut().map(|gr| {
            let gv = gr.views_mut();
            (gv.conv1_w, gv.conv1_b)
        });
        conv3x3_backward(&cache.input, arch.in_channels, d0, d1, v.conv1_w, &dact1, dw, dinput.as_deref_mut());
    }
    Ok((grads, dinput))
}

/// Applies one Adam update and bumps the model version.
pub fn adam_step(model: &mut ModelParams, grads: &ModelParams, state: &mut Adam<f32>) -> Result<()> {
    if grads.arch != model.arch {
        return Err(Error::ShapeMismatch("gradient architecture differs from model".into()));
    }
    state.try_step(&mut model.data, &grads.data)?;
    model.version += 1;
    Ok(())
}
