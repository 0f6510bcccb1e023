//! Event spike tensors: kernel-weighted timestamps scattered into temporal bins,
//! their gradients with respect to event times, and the derived projections.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{Event, EventStream};
use crate::kernel::{KernelKind, KernelParams, MLP_PARAM_COUNT};

pub const TENSOR_MAGIC: u32 = u32::from_le_bytes(*b"EST1");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Projection {
    /// Full EST, `2·B` channels.
    None,
    /// Voxel grid: mean over polarities, `B` channels.
    PolarityAvg,
    /// Two-channel: mean over temporal bins, `2` channels.
    TemporalAvg,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::None => "est",
            Projection::PolarityAvg => "voxel",
            Projection::TemporalAvg => "two-channel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "est" | "none" => Some(Projection::None),
            "voxel" | "voxel-grid" | "polarity_avg" => Some(Projection::PolarityAvg),
            "two-channel" | "two_channel" | "temporal_avg" => Some(Projection::TemporalAvg),
            _ => None,
        }
    }
}

/// Recipe for turning a stream into a network input.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub width: u16,
    pub height: u16,
    pub bins: usize,
    pub kernel: KernelParams,
    pub projection: Projection,
}

impl GridSpec {
    /// EST with a trilinear kernel whose support is one bin width.
    pub fn est(width: u16, height: u16, bins: usize) -> Self {
        Self {
            width,
            height,
            bins,
            kernel: KernelParams::trilinear(1.0 / bins as f64),
            projection: Projection::None,
        }
    }

    pub fn with_kernel(mut self, kernel: KernelParams) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_projection(mut self, projection: Projection) -> Self {
        self.projection = projection;
        self
    }

    /// Temporal scale of one bin, `1 / B`.
    pub fn bin_width(&self) -> f64 {
        1.0 / self.bins as f64
    }

    pub fn est_channels(&self) -> usize {
        2 * self.bins
    }

    /// Channel count after projection.
    pub fn channels(&self) -> usize {
        match self.projection {
            Projection::None => 2 * self.bins,
            Projection::PolarityAvg => self.bins,
            Projection::TemporalAvg => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::InvalidConfig("grid needs at least one temporal bin".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("grid needs a nonempty sensor".into()));
        }
        self.kernel.validate()
    }

    /// Short identifier such as `est5-trilinear`.
    pub fn id(&self) -> String {
        let rep = match self.projection {
            Projection::None => format!("est{}", self.bins),
            Projection::PolarityAvg => format!("voxel{}", self.bins),
            Projection::TemporalAvg => format!("twochannel{}", self.bins),
        };
        format!("{rep}-{}", self.kernel.kind.name())
    }

    fn check_stream(&self, stream: &EventStream) -> Result<()> {
        stream.require_normalized()?;
        if stream.width != self.width || stream.height != self.height {
            return Err(Error::GeometryMismatch(format!(
                "stream is {}x{}, grid expects {}x{}",
                stream.width, stream.height, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Flat index of EST channel for `(event polarity, bin)` at a pixel.
    #[inline]
    fn est_index(&self, e: &Event, bin: usize) -> usize {
        let channel = e.p.channel_block() * self.bins + bin;
        (channel * usize::from(self.width) + usize::from(e.x)) * usize::from(self.height)
            + usize::from(e.y)
    }
}

/// Dense `C × W × H` tensor; element `(c, x, y)` lives at `(c·W + x)·H + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    pub channels: usize,
    pub width: u16,
    pub height: u16,
    pub projection: Projection,
    pub values: Vec<f64>,
}

impl GridTensor {
    pub fn zeros(channels: usize, width: u16, height: u16, projection: Projection) -> Self {
        Self {
            channels,
            width,
            height,
            projection,
            values: vec![0.0; channels * usize::from(width) * usize::from(height)],
        }
    }

    pub fn index(&self, c: usize, x: usize, y: usize) -> usize {
        (c * usize::from(self.width) + x) * usize::from(self.height) + y
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.values[self.index(c, x, y)]
    }

    pub fn plane_len(&self) -> usize {
        usize::from(self.width) * usize::from(self.height)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    fn same_shape(&self, other: &GridTensor) -> bool {
        self.channels == other.channels && self.width == other.width && self.height == other.height
    }
}

fn canonical_order(stream: &EventStream) -> Option<Vec<usize>> {
    let sorted = stream
        .events
        .windows(2)
        .all(|w| w[0].canonical_cmp(&w[1]).is_le());
    if sorted {
        return None;
    }
    let mut idx: Vec<usize> = (0..stream.len()).collect();
    idx.sort_by(|&a, &b| stream.events[a].canonical_cmp(&stream.events[b]));
    Some(idx)
}

/// Builds the (unprojected) EST of a normalized stream.
///
/// Each event adds `t · k(t_n − t)` to bin `n` of its polarity block at its
/// pixel, with nominal bin times `t_n = n / B`. Null events contribute nothing.
/// Accumulation runs in canonical event order, so the result does not depend
/// on how the event list was permuted.
pub fn build_est(stream: &EventStream, spec: &GridSpec) -> Result<GridTensor> {
    spec.check_stream(stream)?;
    let mut tensor = GridTensor::zeros(spec.est_channels(), spec.width, spec.height, Projection::None);
    let order = canonical_order(stream);
    let dt = spec.bin_width();
    let mut add = |e: &Event| {
        if e.is_null() {
            return;
        }
        for n in 0..spec.bins {
            let k = spec.kernel.eval(n as f64 * dt - e.t);
            if k != 0.0 {
                tensor.values[spec.est_index(e, n)] += e.t * k;
            }
        }
    };
    match order {
        None => stream.events.iter().for_each(&mut add),
        Some(idx) => idx.iter().for_each(|&i| add(&stream.events[i])),
    }
    Ok(tensor)
}

fn check_est_grad(spec: &GridSpec, grad: &GridTensor) -> Result<()> {
    if grad.channels != spec.est_channels()
        || grad.width != spec.width
        || grad.height != spec.height
    {
        return Err(Error::GeometryMismatch(format!(
            "gradient is {}x{}x{}, EST is {}x{}x{}",
            grad.channels,
            grad.width,
            grad.height,
            spec.est_channels(),
            spec.width,
            spec.height
        )));
    }
    Ok(())
}

/// Gradient of `⟨grad, build_est(stream)⟩` with respect to each event time,
/// in `stream.events` order.
///
/// `d/dt [t · k(t_n − t)] = k(t_n − t) − t · k'(t_n − t)`; at a null event this
/// is just `k(t_n)`, which is what lets a null event learn where to appear.
pub fn est_backward(stream: &EventStream, spec: &GridSpec, grad: &GridTensor) -> Result<Vec<f64>> {
    spec.check_stream(stream)?;
    check_est_grad(spec, grad)?;
    let dt = spec.bin_width();
    Ok(stream
        .events
        .iter()
        .map(|e| {
            let mut g = 0.0;
            for n in 0..spec.bins {
                let upstream = grad.values[spec.est_index(e, n)];
                if upstream == 0.0 {
                    continue;
                }
                let (k, slope) = spec.kernel.value_and_slope(n as f64 * dt - e.t);
                g += upstream * (k - e.t * slope);
            }
            g
        })
        .collect())
}

/// Gradient of `⟨grad, build_est(stream)⟩` with respect to the MLP kernel weights.
pub fn est_backward_kernel(stream: &EventStream, spec: &GridSpec, grad: &GridTensor) -> Result<Vec<f64>> {
    spec.check_stream(stream)?;
    check_est_grad(spec, grad)?;
    let KernelKind::Mlp(mlp) = &spec.kernel.kind else {
        return Err(Error::NotLearnable);
    };
    let dt = spec.bin_width();
    let mut out = vec![0.0; MLP_PARAM_COUNT];
    for e in stream.events.iter().filter(|e| !e.is_null()) {
        for n in 0..spec.bins {
            let upstream = grad.values[spec.est_index(e, n)];
            if upstream != 0.0 {
                mlp.accumulate_param_grad((n as f64 * dt - e.t) / spec.kernel.tau, upstream * e.t, &mut out);
            }
        }
    }
    Ok(out)
}

/// Averages an EST over polarities (voxel grid) or over bins (two-channel).
pub fn project(tensor: &GridTensor, mode: Projection) -> Result<GridTensor> {
    if tensor.projection != Projection::None {
        return Err(Error::AlreadyProjected);
    }
    if !tensor.channels.is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!(
            "EST needs an even channel count, got {}",
            tensor.channels
        )));
    }
    let bins = tensor.channels / 2;
    let plane = tensor.plane_len();
    let src = |c: usize| &tensor.values[c * plane..(c + 1) * plane];
    match mode {
        Projection::None => Ok(tensor.clone()),
        Projection::PolarityAvg => {
            let mut out = GridTensor::zeros(bins, tensor.width, tensor.height, mode);
            for n in 0..bins {
                let (pos, neg) = (src(n), src(bins + n));
                for (i, o) in out.values[n * plane..(n + 1) * plane].iter_mut().enumerate() {
                    *o = 0.5 * (pos[i] + neg[i]);
                }
            }
            Ok(out)
        }
        Projection::TemporalAvg => {
            let mut out = GridTensor::zeros(2, tensor.width, tensor.height, mode);
            for block in 0..2 {
                let dst = &mut out.values[block * plane..(block + 1) * plane];
                for n in 0..bins {
                    for (o, v) in dst.iter_mut().zip(src(block * bins + n)) {
                        *o += v;
                    }
                }
                dst.iter_mut().for_each(|o| *o /= bins as f64);
            }
            Ok(out)
        }
    }
}

/// Pulls a gradient on a projected tensor back onto the `2·B`-channel EST.
pub fn project_backward(grad: &GridTensor, bins: usize) -> Result<GridTensor> {
    let plane = grad.plane_len();
    let mut out = GridTensor::zeros(2 * bins, grad.width, grad.height, Projection::None);
    let expected = match grad.projection {
        Projection::None => 2 * bins,
        Projection::PolarityAvg => bins,
        Projection::TemporalAvg => 2,
    };
    if grad.channels != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient has {} channels, expected {expected}",
            grad.projection.name(),
            grad.channels
        )));
    }
    match grad.projection {
        Projection::None => out.values.copy_from_slice(&grad.values),
        Projection::PolarityAvg => {
            for n in 0..bins {
                let g = &grad.values[n * plane..(n + 1) * plane];
                for block in [n, bins + n] {
                    for (o, v) in out.values[block * plane..(block + 1) * plane].iter_mut().zip(g) {
                        *o = 0.5 * v;
                    }
                }
            }
        }
        Projection::TemporalAvg => {
            for block in 0..2 {
                let g = &grad.values[block * plane..(block + 1) * plane];
                for n in 0..bins {
                    let c = block * bins + n;
                    for (o, v) in out.values[c * plane..(c + 1) * plane].iter_mut().zip(g) {
                        *o = v / bins as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// EST followed by the configured projection: the tensor the network sees.
pub fn represent(stream: &EventStream, spec: &GridSpec) -> Result<GridTensor> {
    let est = build_est(stream, spec)?;
    match spec.projection {
        Projection::None => Ok(est),
        mode => project(&est, mode),
    }
}

/// Per-event time gradient for a gradient on the (possibly projected) representation.
pub fn represent_backward(stream: &EventStream, spec: &GridSpec, grad: &GridTensor) -> Result<Vec<f64>> {
    if grad.projection != spec.projection
        || grad.channels != spec.channels()
        || grad.width != spec.width
        || grad.height != spec.height
    {
        return Err(Error::GeometryMismatch(format!(
            "gradient has {} {} channels, representation has {} {}",
            grad.channels,
            grad.projection.name(),
            spec.channels(),
            spec.projection.name()
        )));
    }
    let est_grad = project_backward(grad, spec.bins)?;
    est_backward(stream, spec, &est_grad)
}

/// Kernel-weight gradient for a gradient on the (possibly projected) representation.
pub fn represent_backward_kernel(stream: &EventStream, spec: &GridSpec, grad: &GridTensor) -> Result<Vec<f64>> {
    let est_grad = project_backward(grad, spec.bins)?;
    est_backward_kernel(stream, spec, &est_grad)
}

/// Polarity blocks shown in the left and right panels of a rendering.
fn render_blocks(tensor: &GridTensor) -> [(usize, usize); 2] {
    match tensor.projection {
        Projection::None | Projection::TemporalAvg => {
            let b = tensor.channels / 2;
            [(0, b.max(1)), (b, b.max(1))]
        }
        Projection::PolarityAvg => [(0, tensor.channels), (0, tensor.channels)],
    }
}

/// Encodes a tensor as a binary PPM: temporal bins of each polarity are summed
/// into three groups (RGB), min-max scaled to `0..=255`, and the positive and
/// negative panels are placed side by side (`2W × H`).
pub fn render_ppm(tensor: &GridTensor) -> Vec<u8> {
    let (w, h) = (usize::from(tensor.width), usize::from(tensor.height));
    // rgb[panel][group][x][y]
    let mut rgb = vec![0.0; 2 * 3 * w * h];
    for (panel, (start, len)) in render_blocks(tensor).into_iter().enumerate() {
        for n in 0..len {
            let c = start + n;
            if c >= tensor.channels {
                continue;
            }
            let group = n * 3 / len;
            for x in 0..w {
                for y in 0..h {
                    rgb[((panel * 3 + group) * w + x) * h + y] += tensor.get(c, x, y);
                }
            }
        }
    }
    let lo = rgb.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rgb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let scale = |v: f64| -> u8 {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    };
    let mut out = format!("P6\n{} {}\n255\n", 2 * w, h).into_bytes();
    for y in 0..h {
        for panel in 0..2 {
            for x in 0..w {
                for group in 0..3 {
                    out.push(scale(rgb[((panel * 3 + group) * w + x) * h + y]));
                }
            }
        }
    }
    out
}

pub fn render_image(tensor: &GridTensor, path: &Path) -> Result<()> {
    std::fs::write(path, render_ppm(tensor))?;
    Ok(())
}

/// Writes the debugging tensor format: `C, W, H, magic` as little-endian u32,
/// then the values as little-endian f32.
pub fn write_tensor(tensor: &GridTensor, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for word in [
        tensor.channels as u32,
        u32::from(tensor.width),
        u32::from(tensor.height),
        TENSOR_MAGIC,
    ] {
        out.write_all(&word.to_le_bytes())?;
    }
    for &v in &tensor.values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor`]. The file does not record the
/// projection, so the result is tagged as an unprojected tensor.
pub fn read_tensor(path: &Path) -> Result<GridTensor> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Format("tensor header truncated".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(3) != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let (c, w, h) = (word(0) as usize, word(1), word(2));
    let (Ok(w), Ok(h)) = (u16::try_from(w), u16::try_from(h)) else {
        return Err(Error::Format("tensor dimensions too large".into()));
    };
    let n = c * usize::from(w) * usize::from(h);
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Format(format!("expected {n} values")));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Ok(GridTensor {
        channels: c,
        width: w,
        height: h,
        projection: Projection::None,
        values,
    })
}

impl GridTensor {
    /// True when the two tensors have the same shape and bit-identical values.
    pub fn bit_eq(&self, other: &GridTensor) -> bool {
        self.same_shape(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
