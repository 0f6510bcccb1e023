//! Synthetic event streams from an orbiting shape seen by an idealized
//! event sensor.
//!
//! Each pixel keeps the log brightness at which it last fired. Whenever the
//! rendered log brightness drifts from that reference by at least the contrast
//! threshold, the pixel emits one event per threshold crossed, with polarity
//! equal to the sign of the change.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity, TimeState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Bar,
    Cross,
    Disc,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Bar,
        ShapeClass::Cross,
        ShapeClass::Disc,
        ShapeClass::Ring,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: u16,
    pub height: u16,
    /// Log-brightness change that triggers one event.
    pub contrast_threshold: f64,
    /// Full orbits of the shape per capture window.
    pub motion_frequency: f64,
    /// Orbit radius in pixels; `0` gives a static scene.
    pub amplitude: f64,
    pub shape_class: ShapeClass,
    /// Capture window in seconds.
    pub duration: f64,
    /// Simulation time steps across the capture window.
    pub steps: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            contrast_threshold: 0.15,
            motion_frequency: 2.0,
            amplitude: 4.0,
            shape_class: ShapeClass::Bar,
            duration: 0.3,
            steps: 600,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.contrast_threshold > 0.0) {
            return bad(format!("contrast threshold {} must be > 0", self.contrast_threshold));
        }
        if !(self.motion_frequency >= 1.0) {
            return bad(format!("motion frequency {} must be >= 1", self.motion_frequency));
        }
        if !(self.amplitude >= 0.0) {
            return bad(format!("amplitude {} must be >= 0", self.amplitude));
        }
        if self.width == 0 || self.height == 0 || self.width > 256 || self.height > 256 {
            return bad(format!("sensor {}x{} outside 1..=256", self.width, self.height));
        }
        if self.steps < 2 {
            return bad("need at least two simulation steps".into());
        }
        let duration_us = self.duration * 1e6;
        if !(duration_us >= f64::from(self.steps)) || duration_us > f64::from(crate::codec::MAX_TIMESTAMP_US) {
            return bad(format!(
                "duration {} s must cover one microsecond per step and fit 23-bit timestamps",
                self.duration
            ));
        }
        Ok(())
    }
}

/// Randomized geometry of one rendered shape.
struct Scene {
    class: ShapeClass,
    center: (f64, f64),
    direction: (f64, f64),
    orientation: (f64, f64),
    phase: f64,
    /// Primary size parameter (length or outer radius), pixels.
    size: f64,
    /// Secondary size parameter (bar width or ring thickness), pixels.
    thickness: f64,
    /// Log-brightness offset of the shape against the background.
    log_contrast: f64,
}

impl Scene {
    fn sample(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let unit = f64::from(cfg.width.min(cfg.height)) / 32.0;
        let (size, thickness) = match cfg.shape_class {
            ShapeClass::Bar => (rng.gen_range(14.0..20.0), rng.gen_range(3.0..5.0)),
            ShapeClass::Cross => (rng.gen_range(12.0..18.0), rng.gen_range(3.0..4.5)),
            ShapeClass::Disc => (rng.gen_range(4.5..7.0), 0.0),
            ShapeClass::Ring => (rng.gen_range(6.5..9.0), rng.gen_range(2.0..3.0)),
        };
        let theta: f64 = rng.gen_range(0.0..PI);
        let heading: f64 = rng.gen_range(0.0..2.0 * PI);
        let jitter = 3.0 * unit;
        let center = (
            f64::from(cfg.width) / 2.0 - 0.5 + rng.gen_range(-jitter..jitter),
            f64::from(cfg.height) / 2.0 - 0.5 + rng.gen_range(-jitter..jitter),
        );
        let magnitude = rng.gen_range(1.2..2.5) * cfg.contrast_threshold;
        let log_contrast = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
        Self {
            class: cfg.shape_class,
            center,
            direction: (heading.cos(), heading.sin()),
            orientation: (theta.cos(), theta.sin()),
            phase: rng.gen_range(0.0..2.0 * PI),
            size: size * unit,
            thickness: thickness * unit,
            log_contrast,
        }
    }

    fn contains(&self, dx: f64, dy: f64) -> bool {
        let (c, s) = self.orientation;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let in_bar = |u: f64, v: f64| u.abs() <= self.size / 2.0 && v.abs() <= self.thickness / 2.0;
        match self.class {
            ShapeClass::Bar => in_bar(u, v),
            ShapeClass::Cross => in_bar(u, v) || in_bar(v, u),
            ShapeClass::Disc => u * u + v * v <= self.size * self.size,
            ShapeClass::Ring => {
                let r2 = u * u + v * v;
                let inner = self.size - self.thickness;
                r2 <= self.size * self.size && r2 >= inner * inner
            }
        }
    }

    /// Shape center at normalized time `s ∈ [0, 1]`: a circular orbit of
    /// radius `amplitude` starting from `center`, so edges of every
    /// orientation cross pixels.
    fn position(&self, cfg: &SceneConfig, s: f64) -> (f64, f64) {
        let angle = 2.0 * PI * cfg.motion_frequency * s + self.phase;
        let along = cfg.amplitude * (angle.sin() - self.phase.sin());
        let across = cfg.amplitude * (angle.cos() - self.phase.cos());
        let (dx, dy) = self.direction;
        (
            self.center.0 + along * dx - across * dy,
            self.center.1 + along * dy + across * dx,
        )
    }

    fn render(&self, cfg: &SceneConfig, s: f64, out: &mut [f64]) {
        let (cx, cy) = self.position(cfg, s);
        let w = usize::from(cfg.width);
        for (idx, l) in out.iter_mut().enumerate() {
            let x = (idx % w) as f64;
            let y = (idx / w) as f64;
            *l = if self.contains(x - cx, y - cy) {
                self.log_contrast
            } else {
                0.0
            };
        }
    }
}

/// Renders one sample and returns it with its class label. Timestamps are raw
/// microseconds.
pub fn synth_sample(cfg: &SceneConfig, seed: u64) -> Result<(EventStream, usize)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::sample(cfg, &mut rng);
    let w = usize::from(cfg.width);
    let n_pixels = w * usize::from(cfg.height);
    let step_us = cfg.duration * 1e6 / f64::from(cfg.steps);

    let mut brightness = vec![0.0; n_pixels];
    scene.render(cfg, 0.0, &mut brightness);
    // Log brightness at each pixel's last event.
    let mut reference = brightness.clone();
    let mut events = Vec::new();

    for step in 1..=cfg.steps {
        let s = f64::from(step) / f64::from(cfg.steps);
        scene.render(cfg, s, &mut brightness);
        for (idx, (&l, r)) in brightness.iter().zip(reference.iter_mut()).enumerate() {
            let delta = l - *r;
            let crossings = (delta.abs() / cfg.contrast_threshold + 1e-9).floor();
            if crossings < 1.0 {
                continue;
            }
            let n = crossings as u32;
            let p = Polarity::from_sign(delta);
            *r += p.sign() * f64::from(n) * cfg.contrast_threshold;
            let t_prev = f64::from(step - 1) * step_us;
            for k in 1..=n {
                let t = (t_prev + f64::from(k) / f64::from(n) * step_us).round().max(1.0);
                events.push(Event::new((idx % w) as u16, (idx / w) as u16, t, p));
            }
        }
    }
    Ok((
        EventStream::new(cfg.width, cfg.height, events, TimeState::Raw),
        cfg.shape_class.label(),
    ))
}
