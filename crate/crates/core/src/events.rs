//! Event records, streams, and the timestamp hygiene applied to them.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Sign of the log-brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn from_sign(sign: f64) -> Self {
        if sign >= 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    /// Index of this polarity's block of channels in an EST (positive first).
    pub fn channel_block(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

/// One brightness-change record.
///
/// `t` is in microseconds for raw streams and in `(0, 1]` for normalized
/// ones. A normalized time of exactly `0.0` marks a null event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: f64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: f64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }

    pub fn is_null(&self) -> bool {
        self.t == 0.0
    }

    /// Canonical ordering: `(t, y, x, p)` lexicographic.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.y.cmp(&other.y))
            .then(self.x.cmp(&other.x))
            .then(self.p.cmp(&other.p))
    }

    pub fn location(&self) -> (u16, u16, Polarity) {
        (self.x, self.y, self.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeState {
    /// Microsecond timestamps as recorded.
    Raw,
    /// Unitless times in `(0, 1]`; `scale` microseconds map to `1.0`.
    Normalized { scale: f64 },
}

impl TimeState {
    fn name(&self) -> &'static str {
        match self {
            TimeState::Raw => "raw",
            TimeState::Normalized { .. } => "normalized",
        }
    }
}

/// The events of one sample together with the sensor geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    pub time_state: TimeState,
}

impl EventStream {
    /// Builds a stream and sorts its events canonically.
    pub fn new(width: u16, height: u16, mut events: Vec<Event>, time_state: TimeState) -> Self {
        events.sort_by(Event::canonical_cmp);
        Self {
            events,
            width,
            height,
            time_state,
        }
    }

    pub fn empty(width: u16, height: u16, time_state: TimeState) -> Self {
        Self::new(width, height, Vec::new(), time_state)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        matches!(self.time_state, TimeState::Normalized { .. })
    }

    pub(crate) fn require_normalized(&self) -> Result<()> {
        if self.is_normalized() {
            Ok(())
        } else {
            Err(Error::TimeState {
                expected: "normalized",
                actual: self.time_state.name(),
            })
        }
    }

    pub(crate) fn require_raw(&self) -> Result<()> {
        if self.is_normalized() {
            Err(Error::TimeState {
                expected: "raw",
                actual: self.time_state.name(),
            })
        } else {
            Ok(())
        }
    }

    pub fn check_bounds(&self) -> Result<()> {
        for e in &self.events {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::CoordOutOfRange {
                    x: e.x.into(),
                    y: e.y.into(),
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }

    /// Returns a copy with `extra` merged in, canonically re-sorted.
    pub fn with_events(&self, extra: &[Event]) -> Self {
        let mut events = self.events.clone();
        events.extend_from_slice(extra);
        Self::new(self.width, self.height, events, self.time_state)
    }

    /// Converts a normalized stream back to integer microseconds.
    pub fn denormalize(&self) -> Result<Self> {
        let TimeState::Normalized { scale } = self.time_state else {
            return Ok(self.clone());
        };
        let events = self
            .events
            .iter()
            .map(|e| Event {
                t: (e.t * scale).round().max(0.0),
                ..*e
            })
            .collect();
        Ok(Self::new(self.width, self.height, events, TimeState::Raw))
    }
}

/// Divides every timestamp by the stream's maximum so times land in `(0, 1]`.
///
/// Raw timestamps are clamped to at least one microsecond first, so no
/// recorded event can normalize to the null time `0`. Already normalized
/// streams are returned unchanged.
pub fn normalize_times(stream: &EventStream) -> Result<EventStream> {
    if stream.is_normalized() {
        return Ok(stream.clone());
    }
    let t_max = stream
        .events
        .iter()
        .map(|e| e.t)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
        .ok_or(Error::EmptyStream)?;
    let scale = t_max.max(1.0);
    let events = stream
        .events
        .iter()
        .map(|e| Event {
            t: e.t.max(1.0) / scale,
            ..*e
        })
        .collect();
    Ok(EventStream::new(
        stream.width,
        stream.height,
        events,
        TimeState::Normalized { scale },
    ))
}

/// Keeps the first half of the capture window and stretches it back to `(0, 1]`,
/// halving the relative motion frequency.
pub fn halve_frequency(stream: &EventStream) -> Result<EventStream> {
    let TimeState::Normalized { scale } = stream.time_state else {
        return Err(Error::TimeState {
            expected: "normalized",
            actual: "raw",
        });
    };
    let kept: Vec<Event> = stream
        .events
        .iter()
        .filter(|e| e.t > 0.0 && e.t <= 0.5)
        .copied()
        .collect();
    let t_max = kept.iter().map(|e| e.t).fold(0.0, f64::max);
    if kept.is_empty() {
        return Err(Error::EmptyStream);
    }
    let events = kept
        .into_iter()
        .map(|e| Event { t: e.t / t_max, ..e })
        .collect();
    Ok(EventStream::new(
        stream.width,
        stream.height,
        events,
        TimeState::Normalized {
            scale: scale * t_max,
        },
    ))
}

/// Separates events sharing an `(x, y, p)` location so that consecutive times
/// differ by at least `lambda`, keeping every time in `(0, 1]`.
///
/// Colliding events are pushed forward (`t, t + λ, t + 2λ, ...`); a run that
/// would pass `1.0` is stacked downward from `1.0` instead.
pub fn enforce_min_resolution(stream: &EventStream, lambda: f64) -> Result<EventStream> {
    stream.require_normalized()?;
    let mut events = stream.events.clone();
    separate_in_place(&mut events, None, lambda)?;
    Ok(EventStream::new(
        stream.width,
        stream.height,
        events,
        stream.time_state,
    ))
}

/// In-place λ-separation that leaves the slice order untouched.
///
/// With `bounds`, each event also carries an admissible `[lo, hi]` window;
/// exact ties are ordered so the event with less headroom keeps its time, and
/// a run is stacked down from its upper limits whenever the forward pass
/// overshoots some event's ceiling.
pub(crate) fn separate_in_place(events: &mut [Event], bounds: Option<&[(f64, f64)]>, lambda: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "minimum time resolution must be positive, got {lambda}"
        )));
    }
    let ceiling = |i: usize| bounds.map_or(1.0, |b| b[i].1.min(1.0));
    let floor = |i: usize| bounds.map_or(0.0, |b| b[i].0.max(0.0));
    for e in events.iter_mut() {
        e.t = e.t.min(1.0);
        if e.t <= 0.0 {
            e.t = lambda;
        }
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&events[a], &events[b]);
        (ea.y, ea.x, ea.p)
            .cmp(&(eb.y, eb.x, eb.p))
            .then(ea.t.total_cmp(&eb.t))
            .then(ceiling(a).total_cmp(&ceiling(b)))
            .then(a.cmp(&b))
    });

    let mut start = 0;
    while start < order.len() {
        let loc = events[order[start]].location();
        let mut end = start + 1;
        while end < order.len() && events[order[end]].location() == loc {
            end += 1;
        }
        let run = &order[start..end];
        if run.len() > 1 {
            separate_run(events, run, &ceiling, &floor, lambda)?;
        }
        start = end;
    }
    Ok(())
}

fn separate_run(
    events: &mut [Event],
    run: &[usize],
    ceiling: &dyn Fn(usize) -> f64,
    floor: &dyn Fn(usize) -> f64,
    lambda: f64,
) -> Result<()> {
    // Within each cluster of events closer than λ, the event with the lowest
    // ceiling goes first so that those with headroom are the ones pushed up.
    let mut run = run.to_vec();
    let mut start = 0;
    while start < run.len() {
        let mut end = start + 1;
        while end < run.len() && events[run[end]].t - events[run[end - 1]].t < lambda {
            end += 1;
        }
        if end - start > 1 {
            run[start..end].sort_by(|&a, &b| {
                ceiling(a)
                    .total_cmp(&ceiling(b))
                    .then(floor(a).total_cmp(&floor(b)))
                    .then(events[a].t.total_cmp(&events[b].t))
                    .then(a.cmp(&b))
            });
        }
        start = end;
    }
    let run = run.as_slice();
    let mut overshoot = false;
    for w in 1..run.len() {
        let min_t = events[run[w - 1]].t + lambda;
        let e = &mut events[run[w]];
        if e.t < min_t {
            e.t = min_t;
            overshoot |= e.t > ceiling(run[w]);
        }
    }
    if !overshoot {
        return Ok(());
    }
    let last = run[run.len() - 1];
    events[last].t = events[last].t.min(ceiling(last));
    for w in (0..run.len() - 1).rev() {
        let max_t = (events[run[w + 1]].t - lambda).min(ceiling(run[w]));
        let e = &mut events[run[w]];
        if e.t > max_t {
            e.t = max_t;
        }
    }
    let first = run[0];
    if events[first].t <= 0.0 || events[first].t < floor(first) {
        return Err(Error::ResolutionInfeasible(run.len(), lambda));
    }
    Ok(())
}
