//! Temporal kernels used to spread an event's timestamp over the temporal bins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::Adam;

pub const MLP_HIDDEN: usize = 30;

// Flat parameter layout: w1[H], b1[H], w2[H*H] (row = output unit), b2[H], w3[H], b3.
const W1: usize = 0;
const B1: usize = W1 + MLP_HIDDEN;
const W2: usize = B1 + MLP_HIDDEN;
const B2: usize = W2 + MLP_HIDDEN * MLP_HIDDEN;
const W3: usize = B2 + MLP_HIDDEN;
const B3: usize = W3 + MLP_HIDDEN;
pub const MLP_PARAM_COUNT: usize = B3 + 1;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    /// `max(0, 1 - |dt| / τ)`
    Trilinear,
    /// `exp(-dt / τ) / τ` for `dt >= 0`, zero before the event.
    Exponential,
    /// 1 → 30 → 30 → 1 tanh network evaluated on `dt / τ`.
    Mlp(MlpKernel),
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Trilinear => "trilinear",
            KernelKind::Exponential => "exponential",
            KernelKind::Mlp(_) => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub tau: f64,
    pub kind: KernelKind,
}

impl KernelParams {
    pub fn trilinear(tau: f64) -> Self {
        Self {
            tau,
            kind: KernelKind::Trilinear,
        }
    }

    pub fn exponential(tau: f64) -> Self {
        Self {
            tau,
            kind: KernelKind::Exponential,
        }
    }

    pub fn mlp(tau: f64, weights: MlpKernel) -> Self {
        Self {
            tau,
            kind: KernelKind::Mlp(weights),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("kernel tau {} must be > 0", self.tau)));
        }
        if let KernelKind::Mlp(m) = &self.kind {
            if m.weights.len() != MLP_PARAM_COUNT || m.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::InvalidConfig("mlp kernel weights malformed".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, dt: f64) -> f64 {
        let tau = self.tau;
        match &self.kind {
            KernelKind::Trilinear => (1.0 - dt.abs() / tau).max(0.0),
            KernelKind::Exponential => {
                if dt >= 0.0 {
                    (-dt / tau).exp() / tau
                } else {
                    0.0
                }
            }
            KernelKind::Mlp(m) => m.forward(dt / tau).out,
        }
    }

    /// Exact `dk/d(dt)`. Trilinear kinks at `0, ±τ` take the subgradient `0`.
    pub fn grad_t(&self, dt: f64) -> f64 {
        self.value_and_slope(dt).1
    }

    /// `(k(dt), dk/d(dt))` in one pass.
    pub fn value_and_slope(&self, dt: f64) -> (f64, f64) {
        let tau = self.tau;
        match &self.kind {
            KernelKind::Trilinear => {
                let a = dt.abs();
                if a >= tau {
                    (0.0, 0.0)
                } else if dt == 0.0 {
                    (1.0, 0.0)
                } else {
                    (1.0 - a / tau, -dt.signum() / tau)
                }
            }
            KernelKind::Exponential => {
                if dt >= 0.0 {
                    let k = (-dt / tau).exp() / tau;
                    (k, -k / tau)
                } else {
                    (0.0, 0.0)
                }
            }
            KernelKind::Mlp(m) => {
                let (out, ds) = m.value_and_slope(dt / tau);
                (out, ds / tau)
            }
        }
    }

    /// Gradient of `k(dt)` with respect to the MLP weights.
    pub fn grad_params(&self, dt: f64) -> Result<Vec<f64>> {
        let KernelKind::Mlp(m) = &self.kind else {
            return Err(Error::NotLearnable);
        };
        let mut g = vec![0.0; MLP_PARAM_COUNT];
        m.accumulate_param_grad(dt / self.tau, 1.0, &mut g);
        Ok(g)
    }
}

/// Weights of the learnable kernel network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpKernel {
    pub weights: Vec<f64>,
}

struct MlpActivations {
    h1: [f64; MLP_HIDDEN],
    h2: [f64; MLP_HIDDEN],
    out: f64,
}

impl MlpKernel {
    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; MLP_PARAM_COUNT],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != MLP_PARAM_COUNT {
            return Err(Error::ShapeMismatch(format!(
                "mlp kernel expects {MLP_PARAM_COUNT} weights, got {}",
                weights.len()
            )));
        }
        Ok(Self { weights })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; MLP_PARAM_COUNT];
        let mut fill = |range: std::ops::Range<usize>, fan_in: f64, fan_out: f64| {
            let lim = (6.0 / (fan_in + fan_out)).sqrt();
            for v in &mut w[range] {
                *v = rng.gen_range(-lim..lim);
            }
        };
        let h = MLP_HIDDEN as f64;
        fill(W1..B1, 1.0, h);
        fill(W2..B2, h, h);
        fill(W3..B3, h, 1.0);
        Self { weights: w }
    }

    /// Random weights regressed onto the trilinear hat, the usual warm start
    /// for a learnable kernel.
    pub fn fitted_trilinear(seed: u64) -> Self {
        let mut m = Self::random(seed);
        let samples: Vec<f64> = (0..=80).map(|i| -2.0 + 4.0 * f64::from(i) / 80.0).collect();
        let mut adam = Adam::new(MLP_PARAM_COUNT, 1e-2);
        let mut grad = vec![0.0; MLP_PARAM_COUNT];
        for it in 0..1500 {
            if it == 1000 {
                adam.lr = 2e-3;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &s in &samples {
                let target = (1.0 - s.abs()).max(0.0);
                let err = m.forward(s).out - target;
                m.accumulate_param_grad(s, 2.0 * err / samples.len() as f64, &mut grad);
            }
            adam.step(&mut m.weights, &grad);
        }
        m
    }

    fn forward(&self, s: f64) -> MlpActivations {
        let w = &self.weights;
        let mut h1 = [0.0; MLP_HIDDEN];
        for j in 0..MLP_HIDDEN {
            h1[j] = (w[W1 + j] * s + w[B1 + j]).tanh();
        }
        let mut h2 = [0.0; MLP_HIDDEN];
        let mut out = w[B3];
        for i in 0..MLP_HIDDEN {
            let row = &w[W2 + i * MLP_HIDDEN..W2 + (i + 1) * MLP_HIDDEN];
            let z: f64 = row.iter().zip(&h1).map(|(a, b)| a * b).sum::<f64>() + w[B2 + i];
            h2[i] = z.tanh();
            out += w[W3 + i] * h2[i];
        }
        MlpActivations { h1, h2, out }
    }

    /// Output and derivative with respect to the scaled input `s`.
    fn value_and_slope(&self, s: f64) -> (f64, f64) {
        let w = &self.weights;
        let act = self.forward(s);
        let mut dh1 = [0.0; MLP_HIDDEN];
        for j in 0..MLP_HIDDEN {
            dh1[j] = (1.0 - act.h1[j] * act.h1[j]) * w[W1 + j];
        }
        let mut slope = 0.0;
        for i in 0..MLP_HIDDEN {
            let row = &w[W2 + i * MLP_HIDDEN..W2 + (i + 1) * MLP_HIDDEN];
            let dz: f64 = row.iter().zip(&dh1).map(|(a, b)| a * b).sum();
            slope += w[W3 + i] * (1.0 - act.h2[i] * act.h2[i]) * dz;
        }
        (act.out, slope)
    }

    /// Adds `scale * d out / d weights` at input `s` into `grad`.
    pub(crate) fn accumulate_param_grad(&self, s: f64, scale: f64, grad: &mut [f64]) {
        let w = &self.weights;
        let act = self.forward(s);
        grad[B3] += scale;
        let mut delta1 = [0.0; MLP_HIDDEN];
        for i in 0..MLP_HIDDEN {
            grad[W3 + i] += scale * act.h2[i];
            let d2 = scale * w[W3 + i] * (1.0 - act.h2[i] * act.h2[i]);
            grad[B2 + i] += d2;
            let base = W2 + i * MLP_HIDDEN;
            for j in 0..MLP_HIDDEN {
                grad[base + j] += d2 * act.h1[j];
                delta1[j] += d2 * w[base + j];
            }
        }
        for j in 0..MLP_HIDDEN {
            let d1 = delta1[j] * (1.0 - act.h1[j] * act.h1[j]);
            grad[B1 + j] += d1;
            grad[W1 + j] += d1 * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn trilinear_values() {
        let k = KernelParams::trilinear(0.5);
        assert_eq!(k.eval(0.0), 1.0);
        assert_eq!(k.eval(0.25), 0.5);
        assert_eq!(k.eval(-0.25), 0.5);
        assert_eq!(k.eval(0.5), 0.0);
        assert_eq!(k.eval(-0.5), 0.0);
        assert_eq!(k.eval(0.7), 0.0);
    }

    #[test]
    fn trilinear_slopes() {
        let k = KernelParams::trilinear(0.5);
        assert_eq!(k.grad_t(0.25), -2.0);
        assert_eq!(k.grad_t(-0.25), 2.0);
        assert_eq!(k.grad_t(0.7), 0.0);
        for kink in [-0.5, 0.0, 0.5] {
            assert_eq!(k.grad_t(kink), 0.0);
        }
    }

    #[test]
    fn exponential_values() {
        let k = KernelParams::exponential(0.5);
        assert_eq!(k.eval(0.0), 2.0);
        assert_eq!(k.eval(-0.1), 0.0);
        assert!((k.eval(0.5) - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let v = k.eval(f64::from(i) * 0.01);
            assert!(v >= 0.0 && v <= prev);
            prev = v;
        }
    }

    #[test]
    fn exponential_integrates_to_one() {
        // Composite Simpson on [0, 40τ]; the tail beyond is e^-40.
        let tau = 0.3;
        let k = KernelParams::exponential(tau);
        let n = 200_000;
        let b = 40.0 * tau;
        let h = b / n as f64;
        let mut acc = k.eval(0.0) + k.eval(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * k.eval(i as f64 * h);
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn slopes_match_finite_differences() {
        let kernels = [
            KernelParams::trilinear(0.2),
            KernelParams::exponential(0.2),
            KernelParams::mlp(0.2, MlpKernel::random(4)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for k in &kernels {
            for _ in 0..200 {
                let dt: f64 = rng.gen_range(-0.6..0.6);
                let near_kink = [-0.2, 0.0, 0.2].iter().any(|c| (dt - c).abs() < 1e-3);
                if near_kink {
                    continue;
                }
                let fd = central(|x| k.eval(x), dt, 1e-6);
                let an = k.grad_t(dt);
                let rel = (fd - an).abs() / an.abs().max(1e-8);
                assert!(rel <= 1e-4 || (fd - an).abs() < 1e-9, "{} dt={dt}: {an} vs {fd}", k.kind.name());
            }
        }
    }

    #[test]
    fn mlp_slope_at_reference_point() {
        let k = KernelParams::mlp(0.5, MlpKernel::random(21));
        let fd = central(|x| k.eval(x), 0.3, 1e-6);
        let an = k.grad_t(0.3);
        assert!((fd - an).abs() / an.abs() <= 1e-5, "{an} vs {fd}");
    }

    #[test]
    fn mlp_param_gradient() {
        let k = KernelParams::mlp(0.5, MlpKernel::random(8));
        let dt = 0.37;
        let g = k.grad_params(dt).unwrap();
        assert_eq!(g, k.grad_params(dt).unwrap());
        let KernelKind::Mlp(m) = &k.kind else { unreachable!() };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..MLP_PARAM_COUNT {
            let mut plus = m.clone();
            plus.weights[i] += h;
            let mut minus = m.clone();
            minus.weights[i] -= h;
            let fd = (KernelParams::mlp(0.5, plus).eval(dt) - KernelParams::mlp(0.5, minus).eval(dt)) / (2.0 * h);
            if g[i].abs() > 1e-6 {
                worst = worst.max((fd - g[i]).abs() / g[i].abs());
            } else {
                assert!((fd - g[i]).abs() < 1e-9);
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn zero_mlp_bias_gradient_is_one() {
        let k = KernelParams::mlp(0.1, MlpKernel::zeros());
        for dt in [-0.3, 0.0, 0.05, 1.0] {
            let g = k.grad_params(dt).unwrap();
            assert_eq!(g[B3], 1.0);
            assert_eq!(k.eval(dt), 0.0);
        }
    }

    #[test]
    fn fixed_kernels_are_not_learnable() {
        assert!(matches!(KernelParams::trilinear(0.1).grad_params(0.0), Err(Error::NotLearnable)));
        assert!(matches!(KernelParams::exponential(0.1).grad_params(0.0), Err(Error::NotLearnable)));
    }

    #[test]
    fn fitted_mlp_approximates_hat() {
        let k = KernelParams::mlp(0.25, MlpKernel::fitted_trilinear(1));
        let tri = KernelParams::trilinear(0.25);
        for i in -20..=20 {
            let dt = f64::from(i) * 0.025;
            assert!((k.eval(dt) - tri.eval(dt)).abs() < 0.08, "dt={dt}");
        }
    }

    #[test]
    fn validation() {
        assert!(KernelParams::trilinear(0.0).validate().is_err());
        assert!(KernelParams::mlp(0.1, MlpKernel { weights: vec![0.0; 3] }).validate().is_err());
        assert!(KernelParams::mlp(0.1, MlpKernel::zeros()).validate().is_ok());
    }
}
