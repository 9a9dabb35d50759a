//! Lévy market model: discounted price simulation and self-financed wealth.
//!
//! The price follows a multiplicative Euler discretization of
//! `dS = S_-(b dt + sigma dW + \int v(t,z) dN~)` with finite-activity jumps
//! sampled from exact exponential clocks per atom. Wealth paths reuse the
//! realized step factors, so full investment replicates the stock bitwise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{draw_exponential, draw_normal, Channel};

/// Maximum recursive halvings of a step whose factor comes out non-positive.
const MAX_SUBDIVISION_DEPTH: u32 = 20;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid market spec: {0}")]
    InvalidSpec(String),
    #[error("non-positive step factor persisted to subdivision depth {depth} (path {path}, step {step})")]
    Discretization { path: usize, step: usize, depth: u32 },
    #[error("strategy inadmissible at step {step}: beta {beta} gives wealth factor {factor}")]
    Inadmissible { step: usize, beta: f64, factor: f64 },
    #[error("ensemble i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic time function, constant or piecewise-constant
/// (value on `[times[i], times[i+1])`, last value held beyond).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum TimeFn {
    Constant(f64),
    Piecewise { times: Vec<f64>, values: Vec<f64> },
}

impl TimeFn {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            TimeFn::Constant(v) => *v,
            TimeFn::Piecewise { times, values } => {
                let mut idx = 0;
                for (i, &edge) in times.iter().enumerate() {
                    if t >= edge {
                        idx = i;
                    } else {
                        break;
                    }
                }
                values[idx]
            }
        }
    }

    fn validate(&self, name: &str) -> Result<(), MarketError> {
        if let TimeFn::Piecewise { times, values } = self {
            if times.is_empty() || times.len() != values.len() {
                return Err(MarketError::InvalidSpec(format!(
                    "{name}: piecewise times/values must be equal-length and non-empty"
                )));
            }
            if times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MarketError::InvalidSpec(format!(
                    "{name}: piecewise times must be strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

/// One jump atom with its own relative-jump coefficient `v(t, z)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JumpAtom {
    pub z: f64,
    pub intensity: f64,
    pub coeff: TimeFn,
}

/// One atom of the base measure in the multiplicative case `v(t,z) = zeta_t * theta(z)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThetaAtom {
    pub z: f64,
    pub intensity: f64,
    pub theta: f64,
}

/// Jump structure of the driving Lévy measure (finite activity).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum JumpSpec {
    /// Atomic measure with per-atom coefficients (case of finitely many atoms).
    FiniteAtoms { atoms: Vec<JumpAtom> },
    /// Multiplicative structure `v(t,z) = zeta_t * theta(z)` on an atomic base measure.
    Multiplicative { zeta: TimeFn, atoms: Vec<ThetaAtom> },
}

impl JumpSpec {
    pub fn n_atoms(&self) -> usize {
        match self {
            JumpSpec::FiniteAtoms { atoms } => atoms.len(),
            JumpSpec::Multiplicative { atoms, .. } => atoms.len(),
        }
    }

    pub fn intensity(&self, atom: usize) -> f64 {
        match self {
            JumpSpec::FiniteAtoms { atoms } => atoms[atom].intensity,
            JumpSpec::Multiplicative { atoms, .. } => atoms[atom].intensity,
        }
    }

    /// Relative jump size `v(t, z_atom)` of the price.
    pub fn v(&self, atom: usize, t: f64) -> f64 {
        match self {
            JumpSpec::FiniteAtoms { atoms } => atoms[atom].coeff.at(t),
            JumpSpec::Multiplicative { zeta, atoms } => zeta.at(t) * atoms[atom].theta,
        }
    }

    /// Range `(min_i v(t,z_i), max_i v(t,z_i))`; `(inf, -inf)` when empty.
    pub fn v_range(&self, t: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.n_atoms() {
            let v = self.v(i, t);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Coefficients of the price SDE together with the initial condition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevyMarketSpec {
    pub b: TimeFn,
    pub sigma: TimeFn,
    pub jumps: JumpSpec,
    pub s0: f64,
    pub horizon: f64,
}

impl LevyMarketSpec {
    /// Validates the structural invariants: positivity of `S`, strictly
    /// positive intensities, `v > -1`, nonzero `zeta`/`theta`.
    pub fn validate(&self) -> Result<(), MarketError> {
        let fail = |m: String| Err(MarketError::InvalidSpec(m));
        if !(self.s0 > 0.0) {
            return fail(format!("s0 must be > 0, got {}", self.s0));
        }
        if !(self.horizon > 0.0) {
            return fail(format!("horizon must be > 0, got {}", self.horizon));
        }
        self.b.validate("b")?;
        self.sigma.validate("sigma")?;
        for &t in &self.sample_times() {
            if self.sigma.at(t) < 0.0 {
                return fail(format!("sigma must be >= 0, got {} at t={t}", self.sigma.at(t)));
            }
        }
        match &self.jumps {
            JumpSpec::FiniteAtoms { atoms } => {
                for (i, a) in atoms.iter().enumerate() {
                    if !(a.intensity > 0.0) {
                        return fail(format!("atom {i}: intensity must be > 0"));
                    }
                    a.coeff.validate(&format!("atom {i} coeff"))?;
                    for &t in &self.sample_times() {
                        if a.coeff.at(t) <= -1.0 {
                            return fail(format!("atom {i}: v(t,z) must be > -1 at t={t}"));
                        }
                    }
                }
            }
            JumpSpec::Multiplicative { zeta, atoms } => {
                zeta.validate("zeta")?;
                for &t in &self.sample_times() {
                    if zeta.at(t) == 0.0 {
                        return fail(format!("zeta must be nonzero, got 0 at t={t}"));
                    }
                }
                for (i, a) in atoms.iter().enumerate() {
                    if !(a.intensity > 0.0) {
                        return fail(format!("atom {i}: intensity must be > 0"));
                    }
                    if a.theta == 0.0 {
                        return fail(format!("atom {i}: theta must be nonzero"));
                    }
                    for &t in &self.sample_times() {
                        if zeta.at(t) * a.theta <= -1.0 {
                            return fail(format!("atom {i}: zeta*theta must be > -1 at t={t}"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Time points where piecewise coefficients are probed during validation.
    fn sample_times(&self) -> Vec<f64> {
        let mut ts = vec![0.0, self.horizon / 2.0, self.horizon];
        let mut push_fn = |f: &TimeFn| {
            if let TimeFn::Piecewise { times, .. } = f {
                ts.extend_from_slice(times);
            }
        };
        push_fn(&self.b);
        push_fn(&self.sigma);
        match &self.jumps {
            JumpSpec::FiniteAtoms { atoms } => atoms.iter().for_each(|a| push_fn(&a.coeff)),
            JumpSpec::Multiplicative { zeta, .. } => push_fn(zeta),
        }
        ts.retain(|&t| (0.0..=self.horizon).contains(&t));
        ts
    }

    /// Sum over atoms of `lambda_i * v(t, z_i)`, the jump compensator rate.
    pub fn jump_compensator(&self, t: f64) -> f64 {
        (0..self.jumps.n_atoms())
            .map(|i| self.jumps.intensity(i) * self.jumps.v(i, t))
            .sum()
    }
}

/// One realized jump: which atom fired, in which grid step, at what time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct JumpEvent {
    pub step: u32,
    pub atom: u32,
    pub time: f64,
}

/// Immutable batch of simulated paths with cached increments.
///
/// Layout is path-major: `prices[path * (n_steps+1) + k]`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub spec: LevyMarketSpec,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    times: Vec<f64>,
    prices: Vec<f64>,
    factors: Vec<f64>,
    dw: Vec<f64>,
    jumps: Vec<Vec<JumpEvent>>,
}

impl PathEnsemble {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }

    pub fn price(&self, path: usize, k: usize) -> f64 {
        self.prices[path * (self.n_steps + 1) + k]
    }

    pub fn prices_of(&self, path: usize) -> &[f64] {
        &self.prices[path * (self.n_steps + 1)..(path + 1) * (self.n_steps + 1)]
    }

    /// Realized multiplicative step factor `S_{k+1}/S_k` (exact as simulated).
    pub fn factor(&self, path: usize, k: usize) -> f64 {
        self.factors[path * self.n_steps + k]
    }

    pub fn dw(&self, path: usize, k: usize) -> f64 {
        self.dw[path * self.n_steps + k]
    }

    pub fn jumps_of(&self, path: usize) -> &[JumpEvent] {
        &self.jumps[path]
    }

    /// Jump events of `path` that fall into grid step `k`, in time order.
    pub fn jumps_in_step(&self, path: usize, k: usize) -> &[JumpEvent] {
        let events = &self.jumps[path];
        let lo = events.partition_point(|e| (e.step as usize) < k);
        let hi = events.partition_point(|e| (e.step as usize) <= k);
        &events[lo..hi]
    }

    /// Columnar CSV export: `path_id,step,t,S,dW,jump_atom`, path-major rows,
    /// floats at 17 significant digits, LF endings. Multiple jumps in one
    /// step are joined with `;`.
    pub fn export_csv<W: std::io::Write>(&self, mut out: W) -> Result<(), MarketError> {
        out.write_all(b"path_id,step,t,S,dW,jump_atom\n")?;
        for p in 0..self.n_paths {
            for k in 0..self.n_steps {
                let atoms: Vec<String> = self
                    .jumps_in_step(p, k)
                    .iter()
                    .map(|e| e.atom.to_string())
                    .collect();
                writeln!(
                    out,
                    "{p},{k},{},{},{},{}",
                    fmt17(self.times[k + 1]),
                    fmt17(self.price(p, k + 1)),
                    fmt17(self.dw(p, k)),
                    atoms.join(";")
                )?;
            }
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Simulates `n_paths` price paths on a uniform grid with `n_steps` steps.
pub fn simulate_paths(
    spec: &LevyMarketSpec,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble, MarketError> {
    spec.validate()?;
    if n_steps == 0 {
        return Err(MarketError::InvalidSpec("n_steps must be >= 1".into()));
    }
    if n_paths == 0 {
        return Err(MarketError::InvalidSpec("n_paths must be >= 1".into()));
    }
    let dt = spec.horizon / n_steps as f64;
    let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();

    let results: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<JumpEvent>), MarketError>> =
        (0..n_paths)
            .into_par_iter()
            .map(|p| simulate_one_path(spec, &times, p, seed))
            .collect();

    let mut prices = Vec::with_capacity(n_paths * (n_steps + 1));
    let mut factors = Vec::with_capacity(n_paths * n_steps);
    let mut dw = Vec::with_capacity(n_paths * n_steps);
    let mut jumps = Vec::with_capacity(n_paths);
    for r in results {
        let (pr, fc, d, j) = r?;
        prices.extend_from_slice(&pr);
        factors.extend_from_slice(&fc);
        dw.extend_from_slice(&d);
        jumps.push(j);
    }
    Ok(PathEnsemble {
        spec: spec.clone(),
        n_paths,
        n_steps,
        seed,
        times,
        prices,
        factors,
        dw,
        jumps,
    })
}

type PathData = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<JumpEvent>);

fn simulate_one_path(
    spec: &LevyMarketSpec,
    times: &[f64],
    path: usize,
    seed: u64,
) -> Result<PathData, MarketError> {
    let n_steps = times.len() - 1;
    let horizon = times[n_steps];
    let p64 = path as u64;

    // Exact exponential clocks per atom; events carry their grid step.
    let mut events: Vec<JumpEvent> = Vec::new();
    for atom in 0..spec.jumps.n_atoms() {
        let rate = spec.jumps.intensity(atom);
        let mut t = 0.0;
        let mut counter = 0u64;
        loop {
            t += draw_exponential(seed, p64, Channel::JumpClock, atom as u64, counter, rate);
            counter += 1;
            if t >= horizon {
                break;
            }
            let step = ((t / horizon) * n_steps as f64).floor().min(n_steps as f64 - 1.0);
            events.push(JumpEvent {
                step: step as u32,
                atom: atom as u32,
                time: t,
            });
        }
    }
    events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());

    let mut prices = Vec::with_capacity(n_steps + 1);
    let mut factors = Vec::with_capacity(n_steps);
    let mut dws = Vec::with_capacity(n_steps);
    let mut s = spec.s0;
    prices.push(s);
    for k in 0..n_steps {
        let dt = times[k + 1] - times[k];
        let dw = draw_normal(seed, p64, Channel::Brownian, k as u64, 0) * dt.sqrt();
        dws.push(dw);
        let step_jumps: Vec<(f64, f64)> = events
            .iter()
            .filter(|e| e.step as usize == k)
            .map(|e| (e.time, spec.jumps.v(e.atom as usize, times[k])))
            .collect();
        let factor = step_factor(
            spec,
            times[k],
            dt,
            dw,
            &step_jumps,
            seed,
            p64,
            k,
            1, // heap index of this step's subdivision root
            0,
        )
        .map_err(|depth| MarketError::Discretization { path, step: k, depth })?;
        factors.push(factor);
        s *= factor;
        prices.push(s);
    }
    Ok((prices, factors, dws, events))
}

/// Multiplicative factor of one (possibly subdivided) step.
///
/// The compensator term `dt * sum_i lambda_i v(t,z_i)` implements the
/// compensated jump integral. A non-positive factor triggers a Brownian
/// bridge refinement: the increment is split at the midpoint and the two
/// halves are resolved recursively, so jump timing stays exact.
#[allow(clippy::too_many_arguments)]
fn step_factor(
    spec: &LevyMarketSpec,
    t0: f64,
    dt: f64,
    dw: f64,
    jumps: &[(f64, f64)],
    seed: u64,
    path: u64,
    step: usize,
    heap: u64,
    depth: u32,
) -> Result<f64, u32> {
    let b = spec.b.at(t0);
    let sigma = spec.sigma.at(t0);
    let comp = spec.jump_compensator(t0);
    let jump_sum: f64 = jumps.iter().map(|&(_, v)| v).sum();
    let factor = 1.0 + b * dt + sigma * dw + jump_sum - dt * comp;
    if factor > 0.0 {
        return Ok(factor);
    }
    if depth >= MAX_SUBDIVISION_DEPTH {
        return Err(depth);
    }
    // Midpoint of the increment conditioned on the endpoints.
    let z = draw_normal(seed, path, Channel::Bridge, step as u64, heap);
    let dw_left = dw / 2.0 + (dt.sqrt() / 2.0) * z;
    let dw_right = dw - dw_left;
    let mid = t0 + dt / 2.0;
    let (left_jumps, right_jumps): (Vec<_>, Vec<_>) = jumps.iter().partition(|&&(t, _)| t < mid);
    let f_left = step_factor(
        spec, t0, dt / 2.0, dw_left, &left_jumps, seed, path, step, 2 * heap, depth + 1,
    )?;
    let f_right = step_factor(
        spec, mid, dt / 2.0, dw_right, &right_jumps, seed, path, step, 2 * heap + 1, depth + 1,
    )?;
    Ok(f_left * f_right)
}

/// Proportion of wealth invested in the stock.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Strategy {
    Constant(f64),
    PiecewiseConstant(TimeFn),
    /// Piecewise-constant table over time buckets x log-price buckets.
    Tabulated {
        times: Vec<f64>,
        log_prices: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl Strategy {
    pub fn beta(&self, t: f64, log_price: f64) -> f64 {
        match self {
            Strategy::Constant(b) => *b,
            Strategy::PiecewiseConstant(f) => f.at(t),
            Strategy::Tabulated { times, log_prices, values } => {
                let ti = bucket_index(times, t);
                let xi = bucket_index(log_prices, log_price);
                values[ti][xi]
            }
        }
    }
}

fn bucket_index(edges: &[f64], x: f64) -> usize {
    let mut idx = 0;
    for (i, &e) in edges.iter().enumerate() {
        if x >= e {
            idx = i;
        } else {
            break;
        }
    }
    idx
}

/// Self-financed wealth along one simulated path:
/// `V_{k+1} = V_k (1 + beta_k * dS_k/S_k)`, `V_0 = w`.
pub fn wealth_path(
    ensemble: &PathEnsemble,
    path: usize,
    strategy: &Strategy,
    w: f64,
) -> Result<Vec<f64>, MarketError> {
    let mut v = Vec::with_capacity(ensemble.n_steps + 1);
    let mut cur = w;
    v.push(cur);
    for k in 0..ensemble.n_steps {
        let t = ensemble.times()[k];
        let x = ensemble.price(path, k).ln();
        let beta = strategy.beta(t, x);
        // factor - 1.0 is exact for factors below 2^53, so beta = 1 tracks the stock bitwise
        let step_return = ensemble.factor(path, k) - 1.0;
        let factor = 1.0 + beta * step_return;
        if factor < 0.0 {
            return Err(MarketError::Inadmissible { step: k, beta, factor });
        }
        cur *= factor;
        v.push(cur);
    }
    Ok(v)
}

/// Closed admissibility interval for the wealth proportion at time `t`,
/// endpoints possibly infinite. Convention `1/0 = inf`: a vanishing
/// denominator leaves that side unbounded.
pub fn admissible_bounds(spec: &LevyMarketSpec, t: f64) -> (f64, f64) {
    match &spec.jumps {
        JumpSpec::FiniteAtoms { .. } => {
            let (vmin, vmax) = spec.jumps.v_range(t);
            bounds_from_extremes(vmin.min(0.0), vmax.max(0.0))
        }
        JumpSpec::Multiplicative { zeta, atoms } => {
            let tmin = atoms.iter().map(|a| a.theta).fold(f64::INFINITY, f64::min);
            let tmax = atoms.iter().map(|a| a.theta).fold(f64::NEG_INFINITY, f64::max);
            let (g_lo, g_hi) = bounds_from_extremes(tmin.min(0.0), tmax.max(0.0));
            let z = zeta.at(t);
            if z > 0.0 {
                (g_lo / z, g_hi / z)
            } else {
                (g_hi / z, g_lo / z)
            }
        }
    }
}

/// `[-1/(vmax v 0), -1/(vmin ^ 0)]` given the already-clamped extremes.
fn bounds_from_extremes(vmin_neg: f64, vmax_pos: f64) -> (f64, f64) {
    let lo = if vmax_pos > 0.0 { -1.0 / vmax_pos } else { f64::NEG_INFINITY };
    let hi = if vmin_neg < 0.0 { -1.0 / vmin_neg } else { f64::INFINITY };
    (lo, hi)
}
