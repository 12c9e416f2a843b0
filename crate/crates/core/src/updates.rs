//! Reproducible update streams (J, U, T) and single-site update rules.
//!
//! Each site carries an independent rate-1 Poisson clock. Events are drawn
//! per site from a ChaCha stream keyed by (seed, site), walking backward
//! from the top of the window, so extending a window to earlier times is
//! append-only: the events already generated are reproduced bit-identically.
//! That property is what lets coupling-from-the-past reuse one randomness
//! source across doubled depths.

use crate::lattice::{neighbor_multiset, NeighborTable, Site, TorusShape};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Which Glauber flavor drives the chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateRule {
    HeatBath,
    Metropolis,
}

impl std::fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UpdateRule::HeatBath => write!(f, "heat-bath"),
            UpdateRule::Metropolis => write!(f, "metropolis"),
        }
    }
}

/// Model and dynamics parameters. `beta >= 0` (ferromagnetic).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: f64,
    pub h: f64,
    pub shape: TorusShape,
    pub rule: UpdateRule,
}

impl ModelParams {
    pub fn new(beta: f64, h: f64, shape: TorusShape, rule: UpdateRule) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::InvalidParam(format!(
                "beta must be finite and >= 0, got {beta}"
            )));
        }
        if !h.is_finite() {
            return Err(Error::InvalidParam("external field must be finite".into()));
        }
        Ok(ModelParams {
            beta,
            h,
            shape,
            rule,
        })
    }

    pub fn heat_bath(beta: f64, shape: TorusShape) -> Result<Self> {
        Self::new(beta, 0.0, shape, UpdateRule::HeatBath)
    }

    /// Oblivious-update probability: `1 - tanh(2d*beta + |h|)`.
    ///
    /// The |h| makes this the worst case over neighbor sums and field sign,
    /// so both oblivious spins stay legal for either sign of the field.
    pub fn theta(&self) -> f64 {
        theta(self)
    }
}

/// `theta = 1 - tanh(2d*beta + |h|)`, the probability mass of the unit
/// interval on which an update writes a fair coin independent of neighbors.
pub fn theta(params: &ModelParams) -> f64 {
    1.0 - (2.0 * params.shape.d() as f64 * params.beta + params.h.abs()).tanh()
}

/// One update tuple (J, U, T).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateEvent {
    pub site: Site,
    pub time: f64,
    pub unit: f64,
}

/// Packed event as stored in streams; `site` fits u32 at desk scales.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamEvent {
    pub time: f64,
    pub unit: f64,
    pub site: u32,
}

impl StreamEvent {
    pub fn site(&self) -> Site {
        Site(self.site as usize)
    }

    pub fn to_update_event(self) -> UpdateEvent {
        UpdateEvent {
            site: self.site(),
            time: self.time,
            unit: self.unit,
        }
    }
}

/// Seeded, time-ordered log of update tuples over a window `(t0, t1]`.
#[derive(Clone, Debug)]
pub struct UpdateStream {
    shape: TorusShape,
    window: (f64, f64),
    seed: u64,
    events: Vec<StreamEvent>,
    /// indices into `events` per site, ascending in time
    per_site: Vec<Vec<u32>>,
}

/// SplitMix64 step; the standard 64-bit finalizer mix.
#[inline]
pub fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    *state = z ^ (z >> 31);
}

/// Deterministic seed derivation for sub-streams (replicas, probes, pairs).
pub fn derive_seed(root: u64, salt: u64, index: u64) -> u64 {
    let mut s = root ^ salt.rotate_left(17) ^ index.wrapping_mul(0xa24baed4963ee407);
    splitmix64(&mut s);
    splitmix64(&mut s);
    s
}

fn site_rng(seed: u64, site: u64) -> ChaCha8Rng {
    let mut s = seed ^ site.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(31);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        splitmix64(&mut s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Generate the update stream for `shape` over `window = (t0, t1]`.
///
/// Deterministic in (shape, window top, seed); windows sharing the same top
/// t1 agree bit-identically on their common range.
pub fn generate_stream(shape: TorusShape, window: (f64, f64), seed: u64) -> Result<UpdateStream> {
    let (t0, t1) = window;
    if !(t0.is_finite() && t1.is_finite()) || t0 > t1 {
        return Err(Error::InvalidParam(format!(
            "bad stream window ({t0}, {t1}]"
        )));
    }
    let n_sites = shape.num_sites();
    let mut events: Vec<StreamEvent> = Vec::new();
    for v in 0..n_sites {
        let mut rng = site_rng(seed, v as u64);
        let mut t = t1;
        loop {
            // exponential gap and unit drawn as a pair so deeper windows
            // consume the identical prefix of the per-site sequence
            let g: f64 = rng.gen();
            let unit: f64 = rng.gen();
            let mut gap = -(1.0 - g).ln();
            if gap <= 0.0 {
                gap = f64::MIN_POSITIVE;
            }
            t -= gap;
            if t <= t0 {
                break;
            }
            events.push(StreamEvent {
                time: t,
                unit,
                site: v as u32,
            });
        }
    }
    events.sort_unstable_by(|a, b| {
        a.time
            .partial_cmp(&b.time)
            .unwrap()
            .then(a.site.cmp(&b.site))
    });
    let mut per_site = vec![Vec::new(); n_sites];
    for (i, e) in events.iter().enumerate() {
        per_site[e.site as usize].push(i as u32);
    }
    Ok(UpdateStream {
        shape,
        window,
        seed,
        events,
        per_site,
    })
}

impl UpdateStream {
    pub fn shape(&self) -> TorusShape {
        self.shape
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All events, ascending by (time, site).
    pub fn events(&self) -> &[StreamEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Event indices at one site, ascending in time.
    pub fn site_event_indices(&self, v: Site) -> &[u32] {
        &self.per_site[v.0]
    }

    /// Time of the last update to `v` in `(lo, hi]`, if any.
    pub fn last_update_in(&self, v: Site, lo: f64, hi: f64) -> Option<f64> {
        self.per_site[v.0]
            .iter()
            .rev()
            .map(|&i| self.events[i as usize].time)
            .find(|&t| t > lo && t <= hi)
    }

    /// Number of events with time in `(lo, hi]`.
    pub fn count_in(&self, lo: f64, hi: f64) -> usize {
        self.events
            .iter()
            .filter(|e| e.time > lo && e.time <= hi)
            .count()
    }

    /// New stream over `(new_t0, t1]`; events above the old bottom are
    /// reproduced bit-identically (append-only backward extension).
    pub fn extend_back(&self, new_t0: f64) -> Result<UpdateStream> {
        if new_t0 > self.window.0 {
            return Err(Error::InvalidParam(
                "extend_back requires new_t0 <= current t0".into(),
            ));
        }
        generate_stream(self.shape, (new_t0, self.window.1), self.seed)
    }
}

/// Oblivious classification of a single update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObliviousClass {
    ObliviousMinus,
    ObliviousPlus,
    Dependent,
}

/// Classify a heat-bath update by its unit variable.
///
/// Minus iff `U <= theta/2`, plus iff `U >= 1 - theta/2`: the unique
/// thresholds compatible with "minus iff U <= (1 - tanh(beta*s + h))/2",
/// since that threshold ranges over [theta/2, 1 - theta/2].
pub fn classify_oblivious(unit: f64, params: &ModelParams) -> Result<ObliviousClass> {
    if params.rule != UpdateRule::HeatBath {
        return Err(Error::UnsupportedRule);
    }
    let half = theta(params) / 2.0;
    Ok(if unit <= half {
        ObliviousClass::ObliviousMinus
    } else if unit >= 1.0 - half {
        ObliviousClass::ObliviousPlus
    } else {
        ObliviousClass::Dependent
    })
}

/// New spin at a site given the neighbor-spin sum `s` (multiset sum, 2d
/// terms) and the update's unit variable.
#[inline]
pub fn heat_bath_spin(unit: f64, neighbor_sum: f64, params: &ModelParams) -> i8 {
    if unit <= 0.5 * (1.0 - (params.beta * neighbor_sum + params.h).tanh()) {
        -1
    } else {
        1
    }
}

/// Metropolis: flip with probability `min(1, pi(flipped)/pi(current))`.
#[inline]
pub fn metropolis_spin(unit: f64, current: i8, neighbor_sum: f64, params: &ModelParams) -> i8 {
    let cur = current as f64;
    let accept = (-2.0 * cur * (params.beta * neighbor_sum + params.h)).exp();
    if unit <= accept.min(1.0) {
        -current
    } else {
        current
    }
}

/// Apply one update to a spin assignment, returning the new spin at the
/// event's site. `spins` must cover the neighbors of the site.
pub fn apply_update(spins: &[i8], e: &UpdateEvent, params: &ModelParams) -> i8 {
    let mut s = 0.0;
    for w in neighbor_multiset(&params.shape, e.site) {
        s += spins[w.0] as f64;
    }
    match params.rule {
        UpdateRule::HeatBath => heat_bath_spin(e.unit, s, params),
        UpdateRule::Metropolis => metropolis_spin(e.unit, spins[e.site.0], s, params),
    }
}

/// Hot-path variant with a precomputed neighbor table.
#[inline]
pub fn apply_update_with(
    spins: &[i8],
    site: u32,
    unit: f64,
    params: &ModelParams,
    nbrs: &NeighborTable,
) -> i8 {
    let mut s = 0i32;
    for &w in nbrs.of(Site(site as usize)) {
        s += spins[w as usize] as i32;
    }
    match params.rule {
        UpdateRule::HeatBath => heat_bath_spin(unit, s as f64, params),
        UpdateRule::Metropolis => metropolis_spin(unit, spins[site as usize], s as f64, params),
    }
}

const EVENT_LOG_MAGIC: &[u8; 8] = b"ISOPERC1";

/// Dump a stream as little-endian binary: a 32-byte header (magic, shape,
/// window, seed) followed by (site: u64, time: f64, unit: f64) records
/// sorted by time.
pub fn write_event_log<W: Write>(stream: &UpdateStream, mut w: W) -> Result<()> {
    let mut header = [0u8; 32];
    header[..8].copy_from_slice(EVENT_LOG_MAGIC);
    header[8..10].copy_from_slice(&(stream.shape.d() as u16).to_le_bytes());
    header[10..12].copy_from_slice(&(stream.shape.n() as u16).to_le_bytes());
    header[12..20].copy_from_slice(&stream.seed.to_le_bytes());
    header[20..24].copy_from_slice(&(stream.window.0 as f32).to_le_bytes());
    header[24..28].copy_from_slice(&(stream.window.1 as f32).to_le_bytes());
    w.write_all(&header)?;
    for e in &stream.events {
        w.write_all(&(e.site as u64).to_le_bytes())?;
        w.write_all(&e.time.to_le_bytes())?;
        w.write_all(&e.unit.to_le_bytes())?;
    }
    Ok(())
}

/// Parsed event-log contents.
pub struct EventLog {
    pub d: u16,
    pub n: u16,
    pub seed: u64,
    pub window: (f32, f32),
    pub records: Vec<(u64, f64, f64)>,
}

pub fn read_event_log<R: Read>(mut r: R) -> Result<EventLog> {
    let mut header = [0u8; 32];
    r.read_exact(&mut header)?;
    if &header[..8] != EVENT_LOG_MAGIC {
        return Err(Error::InvalidParam("bad event-log magic".into()));
    }
    let d = u16::from_le_bytes(header[8..10].try_into().unwrap());
    let n = u16::from_le_bytes(header[10..12].try_into().unwrap());
    let seed = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let t0 = f32::from_le_bytes(header[20..24].try_into().unwrap());
    let t1 = f32::from_le_bytes(header[24..28].try_into().unwrap());
    let mut records = Vec::new();
    let mut rec = [0u8; 24];
    loop {
        match r.read_exact(&mut rec) {
            Ok(()) => records.push((
                u64::from_le_bytes(rec[..8].try_into().unwrap()),
                f64::from_le_bytes(rec[8..16].try_into().unwrap()),
                f64::from_le_bytes(rec[16..24].try_into().unwrap()),
            )),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(EventLog {
        d,
        n,
        seed,
        window: (t0, t1),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::TorusShape;

    fn shape1(n: usize) -> TorusShape {
        TorusShape::new(1, n).unwrap()
    }

    #[test]
    fn theta_values() {
        let p = ModelParams::heat_bath(0.0, shape1(8)).unwrap();
        assert_eq!(theta(&p), 1.0);
        let p = ModelParams::heat_bath(0.4, shape1(8)).unwrap();
        assert!((theta(&p) - (1.0 - 0.8f64.tanh())).abs() < 1e-15);
        assert!((theta(&p) - 0.336).abs() < 5e-4); // ~0.34
        let p2 = ModelParams::heat_bath(0.2, TorusShape::new(2, 8).unwrap()).unwrap();
        assert!((theta(&p2) - (1.0 - 0.8f64.tanh())).abs() < 1e-15);
    }

    #[test]
    fn theta_with_field_uses_absolute_value() {
        let shape = shape1(8);
        let plus = ModelParams::new(0.3, 0.7, shape, UpdateRule::HeatBath).unwrap();
        let minus = ModelParams::new(0.3, -0.7, shape, UpdateRule::HeatBath).unwrap();
        assert_eq!(theta(&plus), theta(&minus));
        assert!((theta(&plus) - (1.0 - (0.6 + 0.7f64).tanh())).abs() < 1e-15);
    }

    #[test]
    fn empty_window_stream() {
        let s = generate_stream(shape1(16), (2.0, 2.0), 1).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn stream_is_deterministic() {
        let shape = shape1(32);
        let a = generate_stream(shape, (0.0, 5.0), 42).unwrap();
        let b = generate_stream(shape, (0.0, 5.0), 42).unwrap();
        assert_eq!(a.events(), b.events());
        let c = generate_stream(shape, (0.0, 5.0), 43).unwrap();
        assert_ne!(a.events(), c.events());
    }

    #[test]
    fn backward_extension_is_append_only() {
        let shape = shape1(24);
        let short = generate_stream(shape, (-4.0, 0.0), 7).unwrap();
        let long = short.extend_back(-16.0).unwrap();
        let tail: Vec<_> = long
            .events()
            .iter()
            .copied()
            .filter(|e| e.time > -4.0)
            .collect();
        assert_eq!(short.events(), tail.as_slice());
        assert!(long.len() > short.len());
    }

    #[test]
    fn poisson_mean_count() {
        // mean event count over (0, T] is |Λ|·T within 3 sigma over seeds
        let shape = shape1(64);
        let t = 2.0;
        let reps = 100;
        let mut total = 0usize;
        for seed in 0..reps {
            total += generate_stream(shape, (0.0, t), seed).unwrap().len();
        }
        let mean = total as f64 / reps as f64;
        let expect = shape.num_sites() as f64 * t;
        let sigma = (expect / reps as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * sigma,
            "mean {mean} vs {expect} (sigma {sigma})"
        );
    }

    #[test]
    fn per_site_times_ascend() {
        let shape = shape1(16);
        let s = generate_stream(shape, (0.0, 6.0), 3).unwrap();
        for v in shape.sites() {
            let times: Vec<f64> = s
                .site_event_indices(v)
                .iter()
                .map(|&i| s.events()[i as usize].time)
                .collect();
            assert!(times.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn classify_matches_band() {
        let p = ModelParams::heat_bath(0.4, shape1(8)).unwrap();
        let th = theta(&p);
        assert_eq!(
            classify_oblivious(0.1, &p).unwrap(),
            ObliviousClass::ObliviousMinus // 0.1 <= θ/2 ≈ 0.168
        );
        assert_eq!(
            classify_oblivious(0.5, &p).unwrap(),
            ObliviousClass::Dependent
        );
        assert_eq!(
            classify_oblivious(1.0 - th / 2.0, &p).unwrap(),
            ObliviousClass::ObliviousPlus
        );
        let p0 = ModelParams::heat_bath(0.0, shape1(8)).unwrap();
        for u in [0.0, 0.3, 0.49999, 0.5, 0.7, 0.999] {
            assert_ne!(
                classify_oblivious(u, &p0).unwrap(),
                ObliviousClass::Dependent
            );
        }
    }

    #[test]
    fn classify_rejects_metropolis() {
        let p = ModelParams::new(0.4, 0.0, shape1(8), UpdateRule::Metropolis).unwrap();
        assert!(matches!(
            classify_oblivious(0.2, &p),
            Err(Error::UnsupportedRule)
        ));
    }

    #[test]
    fn heat_bath_thresholds() {
        let p = ModelParams::heat_bath(0.4, shape1(8)).unwrap();
        // both neighbors +1: P(minus) = (1 - tanh(0.8))/2 ≈ 0.168
        let thr = 0.5 * (1.0 - 0.8f64.tanh());
        assert_eq!(heat_bath_spin(thr - 1e-12, 2.0, &p), -1);
        assert_eq!(heat_bath_spin(thr + 1e-12, 2.0, &p), 1);
        // s = 0: fair coin at 1/2 regardless of beta
        assert_eq!(heat_bath_spin(0.5, 0.0, &p), -1);
        assert_eq!(heat_bath_spin(0.5 + 1e-12, 0.0, &p), 1);
    }

    #[test]
    fn oblivious_implies_constant_spin() {
        let shape = shape1(8);
        let p = ModelParams::heat_bath(0.35, shape).unwrap();
        for unit in [0.01, 0.12, 0.91, 0.999] {
            let class = classify_oblivious(unit, &p).unwrap();
            if class == ObliviousClass::Dependent {
                continue;
            }
            let want = if class == ObliviousClass::ObliviousMinus {
                -1
            } else {
                1
            };
            for s in [-2.0, 0.0, 2.0] {
                assert_eq!(heat_bath_spin(unit, s, &p), want);
            }
        }
    }

    #[test]
    fn event_log_roundtrip() {
        let shape = shape1(10);
        let s = generate_stream(shape, (-1.0, 3.0), 99).unwrap();
        let mut buf = Vec::new();
        write_event_log(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 24 * s.len());
        let log = read_event_log(buf.as_slice()).unwrap();
        assert_eq!(log.d, 1);
        assert_eq!(log.n, 10);
        assert_eq!(log.seed, 99);
        assert_eq!(log.records.len(), s.len());
        for (rec, e) in log.records.iter().zip(s.events()) {
            assert_eq!(rec.0, e.site as u64);
            assert_eq!(rec.1, e.time);
            assert_eq!(rec.2, e.unit);
        }
        assert!(log.records.windows(2).all(|w| w[0].1 <= w[1].1));
    }
}
