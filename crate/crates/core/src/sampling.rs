//! Exact small-system oracles (stationary measure, transient distributions
//! via uniformization), monotone coupling-from-the-past sampling, the 1D
//! walk kernel, and a numeric check of the product-measure L² lemma.

use crate::dynamics::{simulate, SpinConfig};
use crate::lattice::{NeighborTable, Site, TorusShape};
use crate::updates::{generate_stream, ModelParams, UpdateRule};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXACT_PI_MAX_SITES: usize = 20;
const EXACT_TV_MAX_SITES: usize = 12;
const UNIFORMIZATION_TAIL: f64 = 1e-10;
pub const CFTP_DEFAULT_T_MAX: f64 = (1u64 << 20) as f64;

/// Exact Ising measure over all `2^N` configurations (N = n^d <= 20).
/// Configuration index bit i is the spin of site i (1 = +1).
#[derive(Clone, Debug)]
pub struct ExactMeasure {
    pub shape: TorusShape,
    pub probs: Vec<f64>,
    pub log_z: f64,
}

impl ExactMeasure {
    pub fn num_states(&self) -> usize {
        self.probs.len()
    }

    pub fn index_of(&self, config: &SpinConfig) -> usize {
        config
            .spins()
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, &s)| acc | (usize::from(s > 0) << i))
    }

    /// Total-variation distance to another distribution on the same space.
    pub fn tv_to(&self, dist: &[f64]) -> f64 {
        tv_distance(&self.probs, dist)
    }
}

pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
}

/// Directed edge list (u, v) enumerated as (site, +axis neighbor) per axis;
/// on the 2-cycle this yields the double edge, matching the heat-bath
/// convention of counting that neighbor twice.
fn edge_list(shape: &TorusShape) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(shape.d() * shape.num_sites());
    for v in shape.sites() {
        for axis in 0..shape.d() {
            edges.push((v.0, shape.step(v, axis, 1).0));
        }
    }
    edges
}

/// Enumerate the Gibbs measure with log-sum-exp normalization.
pub fn exact_pi(params: &ModelParams) -> Result<ExactMeasure> {
    let n = params.shape.num_sites();
    if n > EXACT_PI_MAX_SITES {
        return Err(Error::TooLarge {
            what: "sites for exact measure",
            got: n as u64,
            limit: EXACT_PI_MAX_SITES as u64,
        });
    }
    let edges = edge_list(&params.shape);
    let states = 1usize << n;
    let spin = |state: usize, i: usize| -> f64 {
        if state >> i & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    };
    let mut logw = Vec::with_capacity(states);
    for state in 0..states {
        let mut e = 0.0;
        for &(u, v) in &edges {
            e += spin(state, u) * spin(state, v);
        }
        let mag: f64 = (0..n).map(|i| spin(state, i)).sum();
        logw.push(params.beta * e + params.h * mag);
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logw.iter().map(|&w| (w - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    let probs = logw.iter().map(|&w| (w - log_z).exp()).collect();
    Ok(ExactMeasure {
        shape: params.shape,
        probs,
        log_z,
    })
}

/// Flip rate of site `u` in `state` (the generator's off-diagonal entry).
pub fn flip_rate(params: &ModelParams, nbrs: &NeighborTable, state: usize, u: usize) -> f64 {
    let spin = |i: usize| -> f64 {
        if state >> i & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    };
    let s: f64 = nbrs.of(Site(u)).iter().map(|&w| spin(w as usize)).sum();
    let cur = spin(u);
    match params.rule {
        // P(resampled spin != current)
        UpdateRule::HeatBath => 0.5 * (1.0 - (cur * (params.beta * s + params.h)).tanh()),
        UpdateRule::Metropolis => (-2.0 * cur * (params.beta * s + params.h)).exp().min(1.0),
    }
}

/// Exact transient distributions at each grid time via uniformization
/// (rate bound N, Poisson truncation error < 1e-10).
pub fn transient_distributions(
    params: &ModelParams,
    x0: &SpinConfig,
    grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let n = params.shape.num_sites();
    if n > EXACT_TV_MAX_SITES {
        return Err(Error::TooLarge {
            what: "sites for uniformization",
            got: n as u64,
            limit: EXACT_TV_MAX_SITES as u64,
        });
    }
    let states = 1usize << n;
    let nbrs = NeighborTable::new(&params.shape);
    // sparse uniformized kernel: P = I + Q / rate, rate = N
    let rate = n as f64;
    let mut row_stay = vec![0.0f64; states];
    let mut flips = vec![0.0f64; states * n];
    for state in 0..states {
        let mut total = 0.0;
        for u in 0..n {
            let r = flip_rate(params, &nbrs, state, u);
            flips[state * n + u] = r / rate;
            total += r;
        }
        row_stay[state] = 1.0 - total / rate;
    }
    let step = |p: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0f64; states];
        for state in 0..states {
            let mass = p[state];
            if mass == 0.0 {
                continue;
            }
            out[state] += mass * row_stay[state];
            for u in 0..n {
                out[state ^ (1 << u)] += mass * flips[state * n + u];
            }
        }
        out
    };
    let mut sorted: Vec<(usize, f64)> = grid.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let mut results = vec![Vec::new(); grid.len()];
    for &(gi, t) in &sorted {
        if t < 0.0 {
            return Err(Error::InvalidParam("grid times must be >= 0".into()));
        }
        let lam = rate * t;
        let mut p = vec![0.0f64; states];
        let start = x0
            .spins()
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, &s)| acc | (usize::from(s > 0) << i));
        p[start] = 1.0;
        let mut out = vec![0.0f64; states];
        let mut ln_w = -lam;
        let mut cum = 0.0f64;
        let mut k = 0usize;
        loop {
            let w = ln_w.exp();
            cum += w;
            for (o, &x) in out.iter_mut().zip(&p) {
                *o += w * x;
            }
            if 1.0 - cum < UNIFORMIZATION_TAIL && k as f64 >= lam {
                break;
            }
            p = step(&p);
            k += 1;
            ln_w += lam.ln() - (k as f64).ln();
            if k > 100_000 {
                return Err(Error::InvalidParam(
                    "uniformization truncation failed to converge".into(),
                ));
            }
        }
        // renormalize the truncation remainder
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= total);
        results[gi] = out;
    }
    Ok(results)
}

#[derive(Clone, Copy, Debug)]
pub struct TvPoint {
    pub t: f64,
    pub tv: f64,
}

/// Exact TV(P_{x0}(X_t ∈ ·), π) on a time grid.
pub fn exact_tv_curve(params: &ModelParams, x0: &SpinConfig, grid: &[f64]) -> Result<Vec<TvPoint>> {
    let pi = exact_pi(params)?;
    let dists = transient_distributions(params, x0, grid)?;
    Ok(grid
        .iter()
        .zip(dists)
        .map(|(&t, p)| TvPoint {
            t,
            tv: pi.tv_to(&p),
        })
        .collect())
}

/// An exactly stationary sample produced by monotone coupling from the past.
#[derive(Clone, Debug)]
pub struct CftpSample {
    pub config: SpinConfig,
    /// time extent of randomness consumed (the final doubling depth)
    pub depth: f64,
    pub seed: u64,
}

/// Propp-Wilson with the doubling scheme T = 1, 2, 4, ...: run the all-plus
/// and all-minus chains from -T to 0 on one stream anchored at time 0, so
/// deeper windows replay the identical events; return the common value at
/// time 0 once the sandwich coalesces. Failure to coalesce by `t_max` is an
/// error, never a truncated sample.
pub fn cftp_sample_with_max(params: &ModelParams, seed: u64, t_max: f64) -> Result<CftpSample> {
    if params.rule != UpdateRule::HeatBath {
        return Err(Error::UnsupportedRule);
    }
    let shape = params.shape;
    let mut depth = 1.0;
    loop {
        let stream = generate_stream(shape, (-depth, 0.0), seed)?;
        let top = simulate(&SpinConfig::all_plus(shape), &stream, params, 0.0)?;
        let bottom = simulate(&SpinConfig::all_minus(shape), &stream, params, 0.0)?;
        debug_assert!(bottom.leq(&top), "monotone sandwich");
        if top == bottom {
            return Ok(CftpSample {
                config: top,
                depth,
                seed,
            });
        }
        depth *= 2.0;
        if depth > t_max {
            return Err(Error::CftpExhausted { t_max });
        }
    }
}

pub fn cftp_sample(params: &ModelParams, seed: u64) -> Result<CftpSample> {
    cftp_sample_with_max(params, seed, CFTP_DEFAULT_T_MAX)
}

/// Transition row of the continuous-time walk on the n-cycle that jumps
/// ±1 at rate `1 - theta`, by Poissonization of the two-point step kernel.
#[derive(Clone, Debug)]
pub struct WalkKernel {
    /// `row[j] = P_t(0, j)`; shift by the start vertex for other rows
    pub row: Vec<f64>,
    pub truncation_k: usize,
    pub tail_bound: f64,
}

impl WalkKernel {
    /// `P_t(u, v)` by translation invariance.
    pub fn prob(&self, n: usize, u: usize, v: usize) -> f64 {
        self.row[(v + n - u) % n]
    }
}

pub fn walk_kernel_1d(theta: f64, t: f64, n: usize) -> Result<WalkKernel> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidParam("theta must lie in [0, 1]".into()));
    }
    if t < 0.0 || !t.is_finite() {
        return Err(Error::InvalidParam("time must be finite and >= 0".into()));
    }
    if n < 2 {
        return Err(Error::InvalidParam("cycle length must be >= 2".into()));
    }
    let lam = (1.0 - theta) * t;
    // Poisson tail < 1e-12 for all lam <= 1e6 with this truncation
    let k_max = (lam + 12.0 * (lam + 1.0).sqrt() + 30.0).ceil() as usize;
    let mut row = vec![0.0f64; n];
    let mut dist = vec![0.0f64; n];
    dist[0] = 1.0;
    let mut next = vec![0.0f64; n];
    let mut ln_w = -lam;
    let mut cum = 0.0;
    for k in 0..=k_max {
        if k > 0 {
            ln_w += lam.ln() - (k as f64).ln();
            // one ±1 step with probability 1/2 each, circular
            next.iter_mut().for_each(|x| *x = 0.0);
            for (j, &m) in dist.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                next[(j + 1) % n] += 0.5 * m;
                next[(j + n - 1) % n] += 0.5 * m;
            }
            std::mem::swap(&mut dist, &mut next);
        }
        let w = ln_w.exp();
        cum += w;
        for (r, &m) in row.iter_mut().zip(&dist) {
            *r += w * m;
        }
    }
    Ok(WalkKernel {
        row,
        truncation_k: k_max,
        tail_bound: (1.0 - cum).max(0.0),
    })
}

/// Result of the exhaustive product-measure L² inequality check.
#[derive(Clone, Debug)]
pub struct MpCheckReport {
    pub trials: usize,
    pub passes: usize,
    pub pass_rate: f64,
    /// most negative observed slack (rhs - lhs); stays >= ~-1e-9 when the
    /// inequality holds numerically
    pub worst_slack: f64,
}

/// Exhaustively evaluate both sides of the L² bound
/// `||mu - nu||^2_{L2(nu)} <= [sum_{S,S'} (prod_{i in S∩S'} min nu_i)^{-1}
/// mu~(S) mu~(S')] - 1` on random instances with |Λ| <= 6 sites: random
/// partitions, random positive part measures nu_i, random sparse mu~ over
/// part subsets, and random phi_S on the covered spins.
pub fn mp_inequality_check(n_sites: usize, trials: usize, seed: u64) -> Result<MpCheckReport> {
    if n_sites == 0 || n_sites > 6 {
        return Err(Error::TooLarge {
            what: "sites for exhaustive L2 check",
            got: n_sites as u64,
            limit: 6,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passes = 0usize;
    let mut worst_slack = f64::INFINITY;
    for _ in 0..trials {
        // random partition of the sites
        let mut sites: Vec<usize> = (0..n_sites).collect();
        for i in (1..sites.len()).rev() {
            let j = rng.gen_range(0..=i);
            sites.swap(i, j);
        }
        let mut parts: Vec<Vec<usize>> = Vec::new();
        let mut i = 0;
        while i < n_sites {
            let take = rng.gen_range(1..=(n_sites - i).min(3));
            parts.push(sites[i..i + take].to_vec());
            i += take;
        }
        let np = parts.len();
        // random positive nu_i on {±1}^{Λ_i}
        let nus: Vec<Vec<f64>> = parts
            .iter()
            .map(|p| random_dist(&mut rng, 1 << p.len(), 0.05))
            .collect();
        // random sparse mu~ over subsets S of part indices
        let n_subsets = 1usize << np;
        let support_count = rng.gen_range(1..=n_subsets.min(6));
        let mut mu_tilde = vec![0.0f64; n_subsets];
        let picks: Vec<usize> = (0..support_count)
            .map(|_| rng.gen_range(0..n_subsets))
            .collect();
        let weights = random_dist(&mut rng, support_count, 0.0);
        for (s, w) in picks.iter().zip(&weights) {
            mu_tilde[*s] += w;
        }
        // random phi_S over the sites covered by S
        let phis: Vec<Option<Vec<f64>>> = (0..n_subsets)
            .map(|s| {
                (mu_tilde[s] > 0.0).then(|| {
                    let covered: usize = (0..np)
                        .filter(|&i| s >> i & 1 == 1)
                        .map(|i| parts[i].len())
                        .sum();
                    random_dist(&mut rng, 1 << covered, 0.0)
                })
            })
            .collect();
        // assemble mu and nu over {±1}^{n_sites}; state bit = spin of site
        let states = 1usize << n_sites;
        let part_projection = |state: usize, part: &[usize]| -> usize {
            part.iter()
                .enumerate()
                .fold(0, |acc, (k, &site)| acc | (((state >> site) & 1) << k))
        };
        let nu_of = |state: usize| -> f64 {
            parts
                .iter()
                .zip(&nus)
                .map(|(p, nu)| nu[part_projection(state, p)])
                .product()
        };
        let mut mu = vec![0.0f64; states];
        for s in 0..n_subsets {
            if mu_tilde[s] == 0.0 {
                continue;
            }
            let phi = phis[s].as_ref().unwrap();
            let in_s: Vec<usize> = (0..np).filter(|&i| s >> i & 1 == 1).collect();
            for (state, m) in mu.iter_mut().enumerate() {
                let mut idx = 0usize;
                let mut off = 0usize;
                for &i in &in_s {
                    idx |= part_projection(state, &parts[i]) << off;
                    off += parts[i].len();
                }
                let mut weight = mu_tilde[s] * phi[idx];
                for (i, (p, nu)) in parts.iter().zip(&nus).enumerate() {
                    if s >> i & 1 == 0 {
                        weight *= nu[part_projection(state, p)];
                    }
                }
                *m += weight;
            }
        }
        let norm: f64 = mu.iter().sum();
        debug_assert!((norm - 1.0).abs() < 1e-9, "mu normalized ({norm})");
        // lhs = sum (mu - nu)^2 / nu
        let lhs: f64 = (0..states)
            .map(|st| {
                let nv = nu_of(st);
                (mu[st] - nv).powi(2) / nv
            })
            .sum();
        // rhs = sum_{S,S'} (prod_{i in S∩S'} min_x nu_i(x))^{-1} mu(S) mu(S') - 1
        let nu_mins: Vec<f64> = nus
            .iter()
            .map(|nu| nu.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        let mut rhs = -1.0f64;
        for s in 0..n_subsets {
            if mu_tilde[s] == 0.0 {
                continue;
            }
            for sp in 0..n_subsets {
                if mu_tilde[sp] == 0.0 {
                    continue;
                }
                let inter = s & sp;
                let inv: f64 = (0..np)
                    .filter(|&i| inter >> i & 1 == 1)
                    .map(|i| 1.0 / nu_mins[i])
                    .product();
                rhs += inv * mu_tilde[s] * mu_tilde[sp];
            }
        }
        let slack = rhs - lhs;
        worst_slack = worst_slack.min(slack);
        if slack >= -1e-9 * (1.0 + rhs.abs()) {
            passes += 1;
        }
    }
    Ok(MpCheckReport {
        trials,
        passes,
        pass_rate: passes as f64 / trials.max(1) as f64,
        worst_slack,
    })
}

fn random_dist<R: Rng>(rng: &mut R, len: usize, floor: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| floor + rng.gen::<f64>()).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Empirical distribution over the full state space from repeated sampling.
pub fn empirical_distribution(
    configs: impl Iterator<Item = SpinConfig>,
    n_sites: usize,
) -> Vec<f64> {
    let mut counts = vec![0.0f64; 1 << n_sites];
    let mut total = 0.0f64;
    for c in configs {
        let idx = c
            .spins()
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, &s)| acc | (usize::from(s > 0) << i));
        counts[idx] += 1.0;
        total += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}
