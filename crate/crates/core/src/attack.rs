//! Gradient attacks on event timestamps: shifting original events with scaled
//! PGD, generating additional events from null-event gradients, and both
//! combined.
//!
//! Every attack result is checked against its contract (time budget per
//! event, range `(0, 1]`, untouched coordinates, λ-separation) before it is
//! returned; a violation is reported as [`Error::ContractViolation`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{separate_in_place, Event, EventStream, Polarity};
use crate::net::Classifier;

/// Slack allowed when checking time budgets after floating-point arithmetic.
pub const CONTRACT_TOLERANCE: f64 = 1e-9;

/// What the attacker optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Ascend the loss of the true label.
    Untargeted { label: usize },
    /// Descend the loss of a chosen class.
    Targeted { target: usize },
}

impl Objective {
    /// Class whose loss is differentiated.
    pub fn class(self) -> usize {
        match self {
            Objective::Untargeted { label } => label,
            Objective::Targeted { target } => target,
        }
    }

    /// `+1` when the loss is ascended, `-1` when it is descended.
    pub fn direction(self) -> f64 {
        match self {
            Objective::Untargeted { .. } => 1.0,
            Objective::Targeted { .. } => -1.0,
        }
    }

    /// Whether `prediction` counts as a success for this objective.
    pub fn achieved(self, prediction: usize) -> bool {
        match self {
            Objective::Untargeted { label } => prediction != label,
            Objective::Targeted { target } => prediction == target,
        }
    }
}

/// Picks a uniformly random class different from `label`.
pub fn random_target(label: usize, classes: usize, rng: &mut impl Rng) -> usize {
    assert!(classes >= 2 && label < classes);
    let k = rng.gen_range(0..classes - 1);
    if k >= label {
        k + 1
    } else {
        k
    }
}

/// Which of the three attacks to run, or none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    None,
    Shift,
    Generate,
    Combined,
}

impl AttackMode {
    pub const ALL: [AttackMode; 4] = [AttackMode::None, AttackMode::Shift, AttackMode::Generate, AttackMode::Combined];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::None => "none",
            AttackMode::Shift => "shift",
            AttackMode::Generate => "generate",
            AttackMode::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Settings of the timestamp-shifting attack.
///
/// `epsilon` and `alpha` are base sizes; the effective sizes divide them by
/// the victim's bin count and the data's relative frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// Base perturbation size; `None` derives the bound as twice the effective step.
    pub epsilon: Option<f64>,
    pub alpha: f64,
    pub iterations: usize,
    /// Relative motion frequency of the data (1 normally, 0.5 for halved data).
    pub frequency: f64,
    /// Upper limit on the effective step size.
    pub cap: f64,
    /// Minimum time gap between events at one location.
    pub lambda: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            alpha: 0.5,
            iterations: 3,
            frequency: 1.0,
            cap: 0.1,
            lambda: 1e-5,
        }
    }
}

impl AttackConfig {
    /// Sweep configuration: bound `epsilon`, step `epsilon / 2`.
    pub fn with_budget(epsilon: f64) -> Self {
        Self {
            epsilon: Some(epsilon),
            alpha: epsilon / 2.0,
            ..Self::default()
        }
    }

    fn scale(&self, bins: usize) -> f64 {
        bins as f64 * self.frequency
    }

    pub fn effective_alpha(&self, bins: usize) -> f64 {
        (self.alpha / self.scale(bins)).min(self.cap)
    }

    pub fn effective_epsilon(&self, bins: usize) -> f64 {
        match self.epsilon {
            Some(eps) => eps / self.scale(bins),
            None => 2.0 * self.effective_alpha(bins),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.alpha));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return bad(format!("frequency must be positive, got {}", self.frequency));
        }
        if !(self.cap > 0.0) {
            return bad(format!("step cap must be positive, got {}", self.cap));
        }
        if let Some(eps) = self.epsilon {
            if !(eps >= 0.0 && eps.is_finite()) {
                return bad(format!("perturbation size must be non-negative, got {eps}"));
            }
        }
        if !(self.lambda > 0.0) {
            return bad(format!("minimum time resolution must be positive, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Settings of the event-generation attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullConfig {
    /// Null events placed at every empty `(x, y, p)` location.
    pub copies: usize,
    /// Fraction of null events turned into real ones.
    pub top_fraction: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub lambda: f64,
}

impl Default for NullConfig {
    fn default() -> Self {
        Self {
            copies: 5,
            top_fraction: 0.01,
            epsilon: 0.1,
            alpha: 0.01,
            iterations: 10,
            lambda: 1e-5,
        }
    }
}

impl NullConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.copies == 0 {
            return bad("at least one null event per location is required".into());
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return bad(format!("kept fraction must be in (0, 1], got {}", self.top_fraction));
        }
        if !(self.epsilon >= 0.0 && self.alpha > 0.0) {
            return bad(format!("invalid generation sizes ε={} α={}", self.epsilon, self.alpha));
        }
        if !(self.lambda > 0.0) {
            return bad(format!("minimum time resolution must be positive, got {}", self.lambda));
        }
        Ok(())
    }

    /// Number of null events kept out of `pool`.
    pub fn kept(&self, pool: usize) -> usize {
        let k = (self.top_fraction * pool as f64 - 1e-9).ceil() as usize;
        k.clamp(1, pool.max(1))
    }
}

/// Where an output event came from and the time window it was allowed to move in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Origin {
    /// Index into the input stream, or `None` for an added event.
    pub source: Option<usize>,
    /// Reference time of the budget: the original time or the initialization.
    pub anchor: f64,
    pub radius: f64,
}

/// An attacked stream with per-event provenance (`origins[i]` describes `stream.events[i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSample {
    pub stream: EventStream,
    pub origins: Vec<Origin>,
}

impl AdversarialSample {
    /// The input stream unchanged.
    pub fn unchanged(stream: &EventStream) -> Self {
        Self {
            stream: stream.clone(),
            origins: stream
                .events
                .iter()
                .enumerate()
                .map(|(i, e)| Origin {
                    source: Some(i),
                    anchor: e.t,
                    radius: 0.0,
                })
                .collect(),
        }
    }

    pub fn added_count(&self) -> usize {
        self.origins.iter().filter(|o| o.source.is_none()).count()
    }

    /// Largest time change of an original event.
    pub fn linf_shift(&self) -> f64 {
        self.stream
            .events
            .iter()
            .zip(&self.origins)
            .filter(|(_, o)| o.source.is_some())
            .map(|(e, o)| (e.t - o.anchor).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-event gradient of the objective's loss with respect to event times.
pub fn grad_wrt_times(clf: &Classifier, stream: &EventStream, objective: Objective) -> Result<Vec<f64>> {
    Ok(clf.time_gradient(stream, objective.class())?.1)
}

/// `m` null events at every `(x, y, p)` location the stream never fires at,
/// in `(y, x, p)` order.
pub fn make_null_events(stream: &EventStream, copies: usize) -> Vec<Event> {
    let (w, h) = (usize::from(stream.width), usize::from(stream.height));
    let slot = |x: u16, y: u16, p: Polarity| (usize::from(y) * w + usize::from(x)) * 2 + p.channel_block();
    let mut occupied = vec![false; 2 * w * h];
    for e in &stream.events {
        if usize::from(e.x) < w && usize::from(e.y) < h {
            occupied[slot(e.x, e.y, e.p)] = true;
        }
    }
    let mut nulls = Vec::new();
    for y in 0..stream.height {
        for x in 0..stream.width {
            for p in [Polarity::Positive, Polarity::Negative] {
                if !occupied[slot(x, y, p)] {
                    nulls.extend(std::iter::repeat_n(Event::new(x, y, 0.0, p), copies));
                }
            }
        }
    }
    nulls
}

/// Working state of one attack: events in an arbitrary (stable) order, each
/// with provenance and the box its PGD updates are projected onto.
struct Tracked {
    events: Vec<Event>,
    origins: Vec<Origin>,
    boxes: Vec<(f64, f64)>,
    width: u16,
    height: u16,
    time_state: crate::events::TimeState,
}

impl Tracked {
    fn from_stream(stream: &EventStream, radius: f64, lambda: f64) -> Self {
        let origins: Vec<Origin> = stream
            .events
            .iter()
            .enumerate()
            .map(|(i, e)| Origin {
                source: Some(i),
                anchor: e.t,
                radius,
            })
            .collect();
        let boxes = origins.iter().map(|o| time_box(o.anchor, o.radius, lambda)).collect();
        Self {
            events: stream.events.clone(),
            origins,
            boxes,
            width: stream.width,
            height: stream.height,
            time_state: stream.time_state,
        }
    }

    fn from_sample(sample: &AdversarialSample, lambda: f64) -> Self {
        Self {
            events: sample.stream.events.clone(),
            origins: sample.origins.clone(),
            boxes: sample.origins.iter().map(|o| time_box(o.anchor, o.radius, lambda)).collect(),
            width: sample.stream.width,
            height: sample.stream.height,
            time_state: sample.stream.time_state,
        }
    }

    /// The events as a stream in working order (not canonically sorted, so
    /// gradients line up with `self.events`).
    fn view(&self) -> EventStream {
        EventStream {
            events: self.events.clone(),
            width: self.width,
            height: self.height,
            time_state: self.time_state,
        }
    }

    /// `iterations` signed-gradient steps of size `step` on the events in
    /// `active`, each followed by projection onto the event's box.
    fn pgd(&mut self, clf: &Classifier, objective: Objective, active: &[usize], step: f64, iterations: usize) -> Result<()> {
        for _ in 0..iterations {
            let grad = grad_wrt_times(clf, &self.view(), objective)?;
            for &i in active {
                self.events[i].t = pgd_update(self.events[i].t, grad[i] * objective.direction(), step, self.boxes[i]);
            }
        }
        Ok(())
    }

    /// λ-separation, canonical ordering, and the contract check.
    fn finish(mut self, input: &EventStream, lambda: f64) -> Result<AdversarialSample> {
        separate_in_place(&mut self.events, Some(&self.boxes), lambda)?;
        let mut order: Vec<usize> = (0..self.events.len()).collect();
        order.sort_by(|&a, &b| self.events[a].canonical_cmp(&self.events[b]).then(a.cmp(&b)));
        let sample = AdversarialSample {
            stream: EventStream {
                events: order.iter().map(|&i| self.events[i]).collect(),
                width: self.width,
                height: self.height,
                time_state: self.time_state,
            },
            origins: order.iter().map(|&i| self.origins[i]).collect(),
        };
        verify_contract(input, &sample, lambda)?;
        Ok(sample)
    }
}

/// One projected signed-gradient step; a zero gradient leaves `t` untouched.
pub(crate) fn pgd_update(t: f64, ascent: f64, step: f64, (lo, hi): (f64, f64)) -> f64 {
    if ascent == 0.0 {
        return t;
    }
    (t + step * ascent.signum()).clamp(lo, hi)
}

/// Admissible times for an event anchored at `anchor` with budget `radius`:
/// the ball intersected with `[λ, 1]`. The lower edge never exceeds the
/// anchor, so an event that does not move is never pushed.
fn time_box(anchor: f64, radius: f64, lambda: f64) -> (f64, f64) {
    let floor = anchor.min(lambda);
    ((anchor - radius).max(floor), (anchor + radius).min(1.0))
}

/// Shifts the times of original events by scaled PGD within the effective budget.
pub fn shift_attack(clf: &Classifier, stream: &EventStream, cfg: &AttackConfig, objective: Objective) -> Result<AdversarialSample> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Err(Error::InvalidConfig("the shift attack needs at least one iteration".into()));
    }
    stream.require_normalized()?;
    let bins = clf.spec.bins;
    let mut work = Tracked::from_stream(stream, cfg.effective_epsilon(bins), cfg.lambda);
    let active: Vec<usize> = (0..work.events.len()).collect();
    work.pgd(clf, objective, &active, cfg.effective_alpha(bins), cfg.iterations)?;
    work.finish(stream, cfg.lambda)
}

/// Adds events chosen through null-event gradients and optimizes their times
/// while the original events stay frozen. `seed` drives the random
/// initialization of the added times.
pub fn generate_attack(
    clf: &Classifier,
    stream: &EventStream,
    cfg: &NullConfig,
    objective: Objective,
    seed: u64,
) -> Result<AdversarialSample> {
    cfg.validate()?;
    stream.require_normalized()?;
    let nulls = make_null_events(stream, cfg.copies);
    if nulls.is_empty() {
        return Err(Error::NoCandidates);
    }
    let n = stream.len();
    let mut joint = EventStream {
        events: [stream.events.as_slice(), &nulls].concat(),
        ..stream.clone()
    };
    let grad = grad_wrt_times(clf, &joint, objective)?;
    let mut ranked: Vec<usize> = (0..nulls.len()).collect();
    ranked.sort_by(|&a, &b| {
        let (ga, gb) = (grad[n + a] * objective.direction(), grad[n + b] * objective.direction());
        gb.total_cmp(&ga).then(a.cmp(&b))
    });
    ranked.truncate(cfg.kept(nulls.len()));
    ranked.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    joint.events.truncate(n);
    let mut work = Tracked::from_stream(&joint, 0.0, cfg.lambda);
    for &k in &ranked {
        // Uniform on (0, 1].
        let init = 1.0 - rng.gen::<f64>();
        work.events.push(Event { t: init, ..nulls[k] });
        let origin = Origin {
            source: None,
            anchor: init,
            radius: cfg.epsilon,
        };
        work.boxes.push(time_box(origin.anchor, origin.radius, cfg.lambda));
        work.origins.push(origin);
    }
    let active: Vec<usize> = (n..work.events.len()).collect();
    work.pgd(clf, objective, &active, cfg.alpha, cfg.iterations)?;
    work.finish(stream, cfg.lambda)
}

/// Generation followed by shifting over the union: originals move within the
/// shift budget of their true times, added events within the generation
/// budget of both their initialization and their generated time.
pub fn combined_attack(
    clf: &Classifier,
    stream: &EventStream,
    cfg: &AttackConfig,
    null_cfg: &NullConfig,
    objective: Objective,
    seed: u64,
) -> Result<AdversarialSample> {
    cfg.validate()?;
    let generated = match generate_attack(clf, stream, null_cfg, objective, seed) {
        Ok(g) => g,
        Err(Error::NoCandidates) => return shift_attack(clf, stream, cfg, objective),
        Err(e) => return Err(e),
    };
    if cfg.iterations == 0 {
        return Ok(generated);
    }
    let bins = clf.spec.bins;
    let lambda = cfg.lambda.max(null_cfg.lambda);
    let mut work = Tracked::from_sample(&generated, lambda);
    let eps = cfg.effective_epsilon(bins);
    for i in 0..work.events.len() {
        let origin = &mut work.origins[i];
        if origin.source.is_some() {
            origin.radius = eps;
            work.boxes[i] = time_box(origin.anchor, eps, lambda);
        } else {
            let (lo, hi) = time_box(origin.anchor, origin.radius, lambda);
            let (lo2, hi2) = time_box(work.events[i].t, origin.radius, lambda);
            work.boxes[i] = (lo.max(lo2), hi.min(hi2));
        }
    }
    let active: Vec<usize> = (0..work.events.len()).collect();
    work.pgd(clf, objective, &active, cfg.effective_alpha(bins), cfg.iterations)?;
    work.finish(stream, lambda)
}

/// Runs `mode` on one stream. `seed` only matters for modes that generate events.
pub fn run_attack(
    clf: &Classifier,
    stream: &EventStream,
    mode: AttackMode,
    cfg: &AttackConfig,
    null_cfg: &NullConfig,
    objective: Objective,
    seed: u64,
) -> Result<AdversarialSample> {
    match mode {
        AttackMode::None => Ok(AdversarialSample::unchanged(stream)),
        AttackMode::Shift => shift_attack(clf, stream, cfg, objective),
        AttackMode::Generate => generate_attack(clf, stream, null_cfg, objective, seed),
        AttackMode::Combined => combined_attack(clf, stream, cfg, null_cfg, objective, seed),
    }
}

/// Checks an attack result against its input: every original event appears
/// once with unchanged coordinates and polarity, every time is in `(0, 1]`
/// and within its budget, and same-location events are `lambda` apart.
pub fn verify_contract(input: &EventStream, sample: &AdversarialSample, lambda: f64) -> Result<()> {
    let fail = |msg: String| Err(Error::ContractViolation(msg));
    let out = &sample.stream;
    if out.events.len() != sample.origins.len() {
        return fail("provenance does not cover every event".into());
    }
    if (out.width, out.height) != (input.width, input.height) {
        return fail("sensor geometry changed".into());
    }
    let mut seen = vec![false; input.len()];
    for (e, o) in out.events.iter().zip(&sample.origins) {
        if !(e.t > 0.0 && e.t <= 1.0) {
            return fail(format!("time {} outside (0, 1]", e.t));
        }
        if (e.t - o.anchor).abs() > o.radius + CONTRACT_TOLERANCE {
            return fail(format!(
                "event moved {} from {}, budget {}",
                (e.t - o.anchor).abs(),
                o.anchor,
                o.radius
            ));
        }
        if let Some(i) = o.source {
            let Some(orig) = input.events.get(i) else {
                return fail(format!("unknown source event {i}"));
            };
            if std::mem::replace(&mut seen[i], true) {
                return fail(format!("source event {i} duplicated"));
            }
            if orig.location() != e.location() || orig.t != o.anchor {
                return fail(format!("source event {i} changed identity"));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return fail(format!("source event {i} deleted"));
    }
    let mut by_location: Vec<(u16, u16, Polarity, f64)> = out.events.iter().map(|e| (e.y, e.x, e.p, e.t)).collect();
    by_location.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)).then(a.3.total_cmp(&b.3)));
    for w in by_location.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.0, a.1, a.2) == (b.0, b.1, b.2) && b.3 - a.3 < lambda * (1.0 - 1e-9) {
            return fail(format!("events at ({}, {}) only {} apart", a.1, a.0, b.3 - a.3));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
