//! Dual domain: exponential supermartingale deflators `xi = xi0 E(X - A)`
//! parametrized by controls `(G, F, a)` on a finite basis.
//!
//! Feasibility (membership in the dual class) reduces to the hard constraint
//! `F >= -1` plus the drift condition `hat_h <= a` at every node, where
//! `h = b + sigma G + sum_i lambda_i v_i F_i` and `hat_h` is the smallest
//! admissible compensation rate given the strategy constraints. The
//! martingale lift moves the compensation into extra jump mass `D` on the
//! extreme atoms, turning the deflator into a local martingale that
//! dominates the original pathwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{JumpSpec, LevyMarketSpec, PathEnsemble};

/// Absolute tolerance for the drift condition `hat_h <= a`.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// Jumps with `F` within this margin of -1 absorb the deflator at zero.
const SINK_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DualError {
    #[error("invalid dual element: {0}")]
    Validation(String),
    #[error("deflator step factor went negative (path {path}, step {step})")]
    Discretization { path: usize, step: usize },
    #[error("unsupported jump structure: {0}")]
    UnsupportedStructure(String),
    #[error("no equivalent risk-neutral density exists: {0}")]
    NoEquivalentMeasure(String),
}

/// Piecewise-constant-in-time basis; each bucket carries affine state
/// coefficients `[intercept, slope]` in `x = ln S`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisSpec {
    pub bucket_edges: Vec<f64>,
}

impl BasisSpec {
    pub fn uniform(horizon: f64, n_buckets: usize) -> Self {
        let edges = (0..=n_buckets)
            .map(|i| horizon * i as f64 / n_buckets as f64)
            .collect();
        BasisSpec { bucket_edges: edges }
    }

    pub fn n_buckets(&self) -> usize {
        self.bucket_edges.len() - 1
    }

    /// Bucket containing `t`, or `None` for `t >= T` (controls vanish there).
    pub fn bucket(&self, t: f64) -> Option<usize> {
        let horizon = *self.bucket_edges.last().unwrap();
        if t < 0.0 || t >= horizon {
            return None;
        }
        let mut idx = 0;
        for (i, &e) in self.bucket_edges[..self.bucket_edges.len() - 1].iter().enumerate() {
            if t >= e {
                idx = i;
            } else {
                break;
            }
        }
        Some(idx)
    }
}

/// Per-bucket affine coefficients in `x = ln S`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Coeffs(pub Vec<[f64; 2]>);

impl Coeffs {
    pub fn zeros(n_buckets: usize) -> Self {
        Coeffs(vec![[0.0, 0.0]; n_buckets])
    }

    pub fn constant(n_buckets: usize, value: f64) -> Self {
        Coeffs(vec![[value, 0.0]; n_buckets])
    }

    pub fn at(&self, bucket: usize, x: f64) -> f64 {
        let [c0, c1] = self.0[bucket];
        c0 + c1 * x
    }
}

/// The compensation rate `a >= 0`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum RateControl {
    /// Basis expansion, clamped at zero on evaluation.
    Basis(Coeffs),
    /// The minimal feasible rate `a = hat_h(t, x)`, feasible by construction.
    HatEnvelope,
}

/// Basis-expanded control triple.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasisControls {
    pub g: Coeffs,
    pub f: Vec<Coeffs>,
    pub a: RateControl,
}

impl BasisControls {
    pub fn zeros(n_buckets: usize, n_atoms: usize) -> Self {
        BasisControls {
            g: Coeffs::zeros(n_buckets),
            f: (0..n_atoms).map(|_| Coeffs::zeros(n_buckets)).collect(),
            a: RateControl::Basis(Coeffs::zeros(n_buckets)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Controls {
    Basis(BasisControls),
    /// Martingale lift of a base element: `F~ = F + D`, `a = 0`,
    /// with `D >= 0` supported on the extreme atoms so the drift cancels.
    Lifted(BasisControls),
}

/// A parametrized dual element `xi = xi0 E(X - A)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DualElement {
    pub xi0: f64,
    pub basis: BasisSpec,
    pub controls: Controls,
}

impl DualElement {
    pub fn zero_controls(spec: &LevyMarketSpec, basis: BasisSpec) -> Self {
        let n = basis.n_buckets();
        DualElement {
            xi0: 1.0,
            basis,
            controls: Controls::Basis(BasisControls::zeros(n, spec.jumps.n_atoms())),
        }
    }

    fn base(&self) -> &BasisControls {
        match &self.controls {
            Controls::Basis(b) | Controls::Lifted(b) => b,
        }
    }

    pub fn base_mut(&mut self) -> &mut BasisControls {
        match &mut self.controls {
            Controls::Basis(b) | Controls::Lifted(b) => b,
        }
    }

    /// Diffusion control `G(t, x)`; zero beyond the horizon.
    pub fn g_at(&self, t: f64, x: f64) -> f64 {
        match self.basis.bucket(t) {
            Some(j) => self.base().g.at(j, x),
            None => 0.0,
        }
    }

    /// Jump control `F(t, z_atom, x)`, including the lift field `D` when present.
    pub fn f_at(&self, spec: &LevyMarketSpec, t: f64, x: f64, atom: usize) -> f64 {
        let Some(j) = self.basis.bucket(t) else { return 0.0 };
        let base = self.base().f[atom].at(j, x);
        match &self.controls {
            Controls::Basis(_) => base,
            Controls::Lifted(_) => base + self.lift_field(spec, t, x, atom),
        }
    }

    /// Compensation rate `a(t, x) >= 0`.
    pub fn a_at(&self, spec: &LevyMarketSpec, t: f64, x: f64) -> f64 {
        if self.basis.bucket(t).is_none() {
            return 0.0;
        }
        match &self.controls {
            Controls::Lifted(_) => 0.0,
            Controls::Basis(b) => match &b.a {
                RateControl::Basis(c) => {
                    let j = self.basis.bucket(t).unwrap();
                    c.at(j, x).max(0.0)
                }
                RateControl::HatEnvelope => hat_h(spec, self, t, x),
            },
        }
    }

    /// Drift of the base controls, before any lift:
    /// `h = b + sigma G + sum_i lambda_i v_i F_i` (exact finite sum).
    fn base_drift(&self, spec: &LevyMarketSpec, t: f64, x: f64) -> f64 {
        let Some(j) = self.basis.bucket(t) else {
            return spec.b.at(t) + spec.jump_compensator(t) * 0.0;
        };
        let base = self.base();
        let mut h = spec.b.at(t) + spec.sigma.at(t) * base.g.at(j, x);
        for i in 0..spec.jumps.n_atoms() {
            h += spec.jumps.intensity(i) * spec.jumps.v(i, t) * base.f[i].at(j, x);
        }
        h
    }

    /// The lift mass at one atom, `D(t, x, atom) >= 0`.
    fn lift_field(&self, spec: &LevyMarketSpec, t: f64, x: f64, atom: usize) -> f64 {
        let h = self.base_drift(spec, t, x);
        lift_mass(spec, t, h).map_or(0.0, |m| m.at(atom))
    }
}

/// Where the lift puts its mass: either spread over a level set (case of a
/// multiplicative structure) or on a single selected atom.
struct LiftMass {
    atoms: Vec<usize>,
    per_atom: Vec<f64>,
}

impl LiftMass {
    fn at(&self, atom: usize) -> f64 {
        self.atoms
            .iter()
            .position(|&a| a == atom)
            .map_or(0.0, |k| self.per_atom[k])
    }
}

/// Computes the lift field `D(t, .)` cancelling drift `h` at time `t`,
/// or `None` when `h = 0` or no atom of the needed sign exists.
fn lift_mass(spec: &LevyMarketSpec, t: f64, h: f64) -> Option<LiftMass> {
    if h == 0.0 {
        return None;
    }
    match &spec.jumps {
        JumpSpec::FiniteAtoms { atoms } => {
            // Predictable selector: the extreme atom matching the sign of h,
            // ties broken by lowest atom index.
            let mut sel: Option<(usize, f64)> = None;
            for (i, a) in atoms.iter().enumerate() {
                let v = a.coeff.at(t);
                let better = match sel {
                    None => true,
                    Some((_, best)) => {
                        if h > 0.0 {
                            v < best
                        } else {
                            v > best
                        }
                    }
                };
                if better {
                    sel = Some((i, v));
                }
            }
            let (idx, v) = sel?;
            if (h > 0.0 && v >= 0.0) || (h < 0.0 && v <= 0.0) {
                return None; // no atom can cancel this drift sign
            }
            let d = -h / (v * atoms[idx].intensity);
            Some(LiftMass { atoms: vec![idx], per_atom: vec![d] })
        }
        JumpSpec::Multiplicative { zeta, atoms } => {
            let z = zeta.at(t);
            let hz = h / z;
            let theta_max = atoms.iter().map(|a| a.theta).fold(f64::NEG_INFINITY, f64::max);
            let theta_min = atoms.iter().map(|a| a.theta).fold(f64::INFINITY, f64::min);
            let (level, denom) = if hz < 0.0 {
                if theta_max <= 0.0 {
                    return None;
                }
                (theta_max, theta_max)
            } else {
                if theta_min >= 0.0 {
                    return None;
                }
                (theta_min, theta_min)
            };
            let members: Vec<usize> = atoms
                .iter()
                .enumerate()
                .filter(|(_, a)| a.theta == level)
                .map(|(i, _)| i)
                .collect();
            let mass: f64 = members.iter().map(|&i| atoms[i].intensity).sum();
            let d = -hz / (denom * mass);
            let per_atom = vec![d; members.len()];
            Some(LiftMass { atoms: members, per_atom })
        }
    }
}

/// Drift `h_t = b_t + sigma_t G(t,x) + sum_i lambda_i v(t,z_i) F(t,z_i,x)`.
///
/// For lifted elements the cancellation is algebraic, so the drift is
/// exactly zero wherever the lift is active.
pub fn drift_h(spec: &LevyMarketSpec, d: &DualElement, t: f64, x: f64) -> f64 {
    let h = d.base_drift(spec, t, x);
    match &d.controls {
        Controls::Basis(_) => h,
        Controls::Lifted(_) => {
            if lift_mass(spec, t, h).is_some() || h == 0.0 {
                0.0
            } else {
                h
            }
        }
    }
}

/// Smallest admissible compensation rate `hat_h >= 0`; `+inf` when the jump
/// structure cannot compensate the drift sign (the `0 * inf = 0` convention
/// keeps the matching-sign term at zero).
pub fn hat_h(spec: &LevyMarketSpec, d: &DualElement, t: f64, x: f64) -> f64 {
    let h = drift_h(spec, d, t, x);
    match &spec.jumps {
        JumpSpec::FiniteAtoms { .. } => {
            let (vmin, vmax) = spec.jumps.v_range(t);
            hat_from_extremes(h, vmin.min(0.0), vmax.max(0.0))
        }
        JumpSpec::Multiplicative { zeta, atoms } => {
            let theta_max = atoms.iter().map(|a| a.theta).fold(f64::NEG_INFINITY, f64::max);
            let theta_min = atoms.iter().map(|a| a.theta).fold(f64::INFINITY, f64::min);
            let hz = h / zeta.at(t);
            hat_from_extremes(hz, theta_min.min(0.0), theta_max.max(0.0))
        }
    }
}

fn hat_from_extremes(h: f64, ext_neg: f64, ext_pos: f64) -> f64 {
    if h == 0.0 {
        0.0
    } else if h > 0.0 {
        if ext_neg < 0.0 {
            -h / ext_neg
        } else {
            f64::INFINITY
        }
    } else if ext_pos > 0.0 {
        -h / ext_pos
    } else {
        f64::INFINITY
    }
}

/// Deflator samples along one path: multiplicative Euler update of
/// `xi_{k+1} = xi_k (1 + G dW + sum_jumps F - dt sum_i lambda_i F_i - a dt)`,
/// absorbing at zero once a jump with `F = -1` fires (the sinking time).
pub fn stochastic_exponential(
    ensemble: &PathEnsemble,
    path: usize,
    d: &DualElement,
) -> Result<Vec<f64>, DualError> {
    let spec = &ensemble.spec;
    validate_element(d)?;
    let n = ensemble.n_steps;
    let mut out = Vec::with_capacity(n + 1);
    let mut xi = d.xi0;
    out.push(xi);
    for k in 0..n {
        if xi == 0.0 {
            out.push(0.0);
            continue;
        }
        let t = ensemble.times()[k];
        let dt = ensemble.dt(k);
        let x = ensemble.price(path, k).ln();

        let mut jump_sum = 0.0;
        let mut sunk = false;
        for e in ensemble.jumps_in_step(path, k) {
            let f = d.f_at(spec, t, x, e.atom as usize);
            if f < -1.0 - SINK_EPS {
                return Err(DualError::Validation(format!(
                    "F = {f} < -1 at t={t}, atom {}",
                    e.atom
                )));
            }
            if f <= -1.0 + SINK_EPS {
                sunk = true;
            }
            jump_sum += f;
        }
        if sunk {
            xi = 0.0;
            out.push(0.0);
            continue;
        }

        let mut comp = 0.0;
        for i in 0..spec.jumps.n_atoms() {
            let f = d.f_at(spec, t, x, i);
            if f < -1.0 - SINK_EPS {
                return Err(DualError::Validation(format!("F = {f} < -1 at t={t}, atom {i}")));
            }
            comp += spec.jumps.intensity(i) * f;
        }
        let factor = 1.0 + d.g_at(t, x) * ensemble.dw(path, k) + jump_sum
            - dt * comp
            - d.a_at(spec, t, x) * dt;
        if factor < 0.0 {
            return Err(DualError::Discretization { path, step: k });
        }
        xi *= factor;
        out.push(xi);
    }
    Ok(out)
}

fn validate_element(d: &DualElement) -> Result<(), DualError> {
    if !(d.xi0 > 0.0 && d.xi0 <= 1.0) {
        return Err(DualError::Validation(format!("xi0 = {} not in (0, 1]", d.xi0)));
    }
    Ok(())
}

/// Feasibility diagnosis of a dual element over an ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Largest positive `hat_h - a` over visited nodes (up to sinking times).
    pub max_violation: f64,
    /// `(path, step)` of the largest drift violation.
    pub location: Option<(usize, usize)>,
    /// Set when some `F(t, z_i) < -1` was seen; `(path, step, atom)`.
    pub hard_violation: Option<(usize, usize, usize)>,
}

/// Verifies `F >= -1` and `hat_h <= a + tol` at every grid node visited by
/// the ensemble, up to each path's sinking time. Diagnostic: never fails.
pub fn feasibility_check(
    spec: &LevyMarketSpec,
    d: &DualElement,
    ensemble: &PathEnsemble,
) -> FeasibilityReport {
    let mut max_violation = f64::NEG_INFINITY;
    let mut location = None;
    let mut hard_violation = None;
    for p in 0..ensemble.n_paths {
        let mut xi = d.xi0;
        for k in 0..ensemble.n_steps {
            if xi == 0.0 {
                break; // past the sinking time
            }
            let t = ensemble.times()[k];
            let dt = ensemble.dt(k);
            let x = ensemble.price(p, k).ln();

            for i in 0..spec.jumps.n_atoms() {
                if d.f_at(spec, t, x, i) < -1.0 - SINK_EPS && hard_violation.is_none() {
                    hard_violation = Some((p, k, i));
                }
            }
            let viol = hat_h(spec, d, t, x) - d.a_at(spec, t, x);
            if viol > max_violation {
                max_violation = viol;
                location = Some((p, k));
            }

            // advance xi to track the sinking time
            let mut jump_sum = 0.0;
            let mut sunk = false;
            for e in ensemble.jumps_in_step(p, k) {
                let f = d.f_at(spec, t, x, e.atom as usize);
                if f <= -1.0 + SINK_EPS {
                    sunk = true;
                }
                jump_sum += f;
            }
            if sunk {
                xi = 0.0;
                continue;
            }
            let comp: f64 = (0..spec.jumps.n_atoms())
                .map(|i| spec.jumps.intensity(i) * d.f_at(spec, t, x, i))
                .sum();
            let factor = 1.0 + d.g_at(t, x) * ensemble.dw(p, k) + jump_sum
                - dt * comp
                - d.a_at(spec, t, x) * dt;
            if factor <= 0.0 {
                xi = 0.0; // treat as sunk for diagnostic purposes
            } else {
                xi *= factor;
            }
        }
    }
    let max_violation = if max_violation == f64::NEG_INFINITY { 0.0 } else { max_violation };
    FeasibilityReport {
        feasible: max_violation <= FEASIBILITY_TOL && hard_violation.is_none(),
        max_violation,
        location,
        hard_violation,
    }
}

/// Martingale lift: replaces `(F, a)` by `(F + D, 0)` with `D >= 0` supported
/// on the extreme jump atoms, so the drift vanishes identically and the
/// lifted deflator dominates the input pathwise.
pub fn martingale_lift(spec: &LevyMarketSpec, d: &DualElement) -> Result<DualElement, DualError> {
    if let Controls::Lifted(_) = d.controls {
        return Ok(d.clone()); // already a lift; D would be zero
    }
    if spec.jumps.n_atoms() == 0 {
        // Without atoms no jump mass exists to absorb a drift; the lift is
        // only the identity on elements that are already driftless.
        let probe_ts: Vec<f64> = d.basis.bucket_edges[..d.basis.n_buckets()].to_vec();
        for t in probe_ts {
            if d.base_drift(spec, t, spec.s0.ln()).abs() > 1e-12 {
                return Err(DualError::UnsupportedStructure(
                    "no jump atoms available to cancel a nonzero drift".into(),
                ));
            }
        }
    }
    Ok(DualElement {
        xi0: d.xi0,
        basis: d.basis.clone(),
        controls: Controls::Lifted(d.base().clone()),
    })
}

/// A distinguished dual element: the density of an equivalent risk-neutral
/// measure, with `a = 0` and `h = 0`.
///
/// Selection rule: when `sigma > 0`, `G = -b/sigma` and `F = 0`; otherwise
/// the drift is absorbed by the atoms with the least-squares-in-`F` solution
/// `F_i = -b v_i / sum_j lambda_j v_j^2`, kept strictly above -1 by an
/// active-set pass.
pub fn risk_neutral_density(spec: &LevyMarketSpec) -> Result<DualElement, DualError> {
    risk_neutral_density_on(spec, BasisSpec::uniform(spec.horizon, 1))
}

/// As [`risk_neutral_density`], on a caller-chosen basis.
pub fn risk_neutral_density_on(
    spec: &LevyMarketSpec,
    basis: BasisSpec,
) -> Result<DualElement, DualError> {
    const F_FLOOR: f64 = -1.0 + 1e-6;
    let nb = basis.n_buckets();
    let k = spec.jumps.n_atoms();
    let mut g = Coeffs::zeros(nb);
    let mut f: Vec<Coeffs> = (0..k).map(|_| Coeffs::zeros(nb)).collect();

    for j in 0..nb {
        let t = basis.bucket_edges[j];
        let b = spec.b.at(t);
        let sigma = spec.sigma.at(t);
        if sigma > 0.0 {
            g.0[j] = [-b / sigma, 0.0];
            continue;
        }
        if b == 0.0 {
            continue;
        }
        // sigma = 0: distribute the drift over atoms, least squares in F.
        let mut fixed: Vec<Option<f64>> = vec![None; k];
        loop {
            let residual: f64 = b
                + (0..k)
                    .filter_map(|i| {
                        fixed[i].map(|fi| spec.jumps.intensity(i) * spec.jumps.v(i, t) * fi)
                    })
                    .sum::<f64>();
            let weight: f64 = (0..k)
                .filter(|&i| fixed[i].is_none())
                .map(|i| spec.jumps.intensity(i) * spec.jumps.v(i, t).powi(2))
                .sum();
            if weight == 0.0 {
                if residual.abs() <= 1e-14 {
                    break;
                }
                return Err(DualError::NoEquivalentMeasure(format!(
                    "sigma = 0 and atoms cannot absorb drift {residual} at t={t} with F > -1"
                )));
            }
            let mut clipped = false;
            for i in 0..k {
                if fixed[i].is_some() {
                    continue;
                }
                let fi = -residual * spec.jumps.v(i, t) / weight;
                if fi < F_FLOOR {
                    fixed[i] = Some(F_FLOOR);
                    clipped = true;
                }
            }
            if !clipped {
                for i in 0..k {
                    let fi = match fixed[i] {
                        Some(v) => v,
                        None => -residual * spec.jumps.v(i, t) / weight,
                    };
                    f[i].0[j] = [fi, 0.0];
                }
                break;
            }
        }
        // verify the drift actually closed
        let h: f64 = b
            + (0..k)
                .map(|i| spec.jumps.intensity(i) * spec.jumps.v(i, t) * f[i].0[j][0])
                .sum::<f64>();
        if h.abs() > 1e-10 {
            return Err(DualError::NoEquivalentMeasure(format!(
                "sigma = 0 leaves drift {h} at t={t} even with F at the -1 boundary"
            )));
        }
    }

    Ok(DualElement {
        xi0: 1.0,
        basis,
        controls: Controls::Basis(BasisControls {
            g,
            f,
            a: RateControl::Basis(Coeffs::zeros(nb)),
        }),
    })
}

/// Stable flat view of the coefficients, ordered by
/// (control, time bucket, state feature). Lift masses are implicit.
pub fn coefficient_table(d: &DualElement) -> Vec<(String, f64)> {
    let base = match &d.controls {
        Controls::Basis(b) | Controls::Lifted(b) => b,
    };
    let mut rows = Vec::new();
    for (j, c) in base.g.0.iter().enumerate() {
        rows.push((format!("g[{j}].1"), c[0]));
        rows.push((format!("g[{j}].logS"), c[1]));
    }
    for (i, fc) in base.f.iter().enumerate() {
        for (j, c) in fc.0.iter().enumerate() {
            rows.push((format!("f{i}[{j}].1"), c[0]));
            rows.push((format!("f{i}[{j}].logS"), c[1]));
        }
    }
    if let RateControl::Basis(ac) = &base.a {
        for (j, c) in ac.0.iter().enumerate() {
            rows.push((format!("a[{j}].1"), c[0]));
            rows.push((format!("a[{j}].logS"), c[1]));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{simulate_paths, JumpAtom, Strategy, TimeFn};

    fn atom(v: f64, lambda: f64) -> JumpAtom {
        JumpAtom { z: v, intensity: lambda, coeff: TimeFn::Constant(v) }
    }

    fn spec_with(b: f64, sigma: f64, atoms: Vec<JumpAtom>) -> LevyMarketSpec {
        LevyMarketSpec {
            b: TimeFn::Constant(b),
            sigma: TimeFn::Constant(sigma),
            jumps: JumpSpec::FiniteAtoms { atoms },
            s0: 1.0,
            horizon: 1.0,
        }
    }

    fn element(spec: &LevyMarketSpec) -> DualElement {
        DualElement::zero_controls(spec, BasisSpec::uniform(spec.horizon, 1))
    }

    #[test]
    fn zero_controls_give_constant_deflator() {
        let spec = spec_with(0.0, 0.2, vec![atom(0.5, 1.0)]);
        let ens = simulate_paths(&spec, 10, 20, 3).unwrap();
        let mut d = element(&spec);
        d.xi0 = 0.8;
        for p in 0..ens.n_paths {
            let xi = stochastic_exponential(&ens, p, &d).unwrap();
            assert!(xi.iter().all(|&v| v == 0.8));
        }
    }

    #[test]
    fn pure_rate_decay_single_step() {
        let spec = spec_with(0.0, 0.0, vec![]);
        let ens = simulate_paths(&spec, 1, 1, 5).unwrap();
        let mut d = element(&spec);
        d.base_mut().a = RateControl::Basis(Coeffs::constant(1, 0.1));
        let xi = stochastic_exponential(&ens, 0, &d).unwrap();
        assert_eq!(xi[1], 0.9);
    }

    #[test]
    fn f_minus_one_jump_sinks_the_deflator() {
        let spec = spec_with(0.0, 0.0, vec![atom(0.5, 3.0)]);
        let ens = simulate_paths(&spec, 8, 200, 9).unwrap();
        let mut d = element(&spec);
        d.base_mut().f[0] = Coeffs::constant(1, -1.0);
        let mut saw_sink = false;
        for p in 0..ens.n_paths {
            let xi = stochastic_exponential(&ens, p, &d).unwrap();
            if let Some(e) = ens.jumps_of(p).first() {
                saw_sink = true;
                for k in 0..=ens.n_steps {
                    if k > e.step as usize {
                        assert_eq!(xi[k], 0.0, "absorbed from the jump step onward");
                    } else if k <= e.step as usize {
                        assert!(xi[k] > 0.0);
                    }
                }
            }
        }
        assert!(saw_sink);
    }

    #[test]
    fn f_below_minus_one_is_rejected() {
        let spec = spec_with(0.0, 0.0, vec![atom(0.5, 1.0)]);
        let ens = simulate_paths(&spec, 2, 5, 1).unwrap();
        let mut d = element(&spec);
        d.base_mut().f[0] = Coeffs::constant(1, -1.5);
        assert!(matches!(
            stochastic_exponential(&ens, 0, &d),
            Err(DualError::Validation(_))
        ));
    }

    #[test]
    fn drift_examples() {
        // G = -b/sigma, no atoms -> h = 0.
        let spec = spec_with(0.1, 0.2, vec![]);
        let mut d = element(&spec);
        d.base_mut().g = Coeffs::constant(1, -0.5);
        assert_eq!(drift_h(&spec, &d, 0.0, 0.0), 0.0);
        // b=0.1, sigma=0, atom v=0.5 lambda=2, F=-0.1 -> h = 0.
        let spec = spec_with(0.1, 0.0, vec![atom(0.5, 2.0)]);
        let mut d = element(&spec);
        d.base_mut().f[0] = Coeffs::constant(1, -0.1);
        assert!(drift_h(&spec, &d, 0.0, 0.0).abs() < 1e-16);
        // no controls -> h = b.
        let spec = spec_with(0.05, 0.2, vec![]);
        let d = element(&spec);
        assert_eq!(drift_h(&spec, &d, 0.0, 0.0), 0.05);
    }

    #[test]
    fn hat_h_examples() {
        // h = 0 -> hat 0.
        let spec = spec_with(0.0, 0.0, vec![atom(-0.5, 1.0)]);
        let d = element(&spec);
        assert_eq!(hat_h(&spec, &d, 0.0, 0.0), 0.0);
        // case (i): h = 0.6 > 0, min v = -0.5 -> hat = 1.2.
        let spec = spec_with(0.6, 0.0, vec![atom(-0.5, 1.0), atom(1.0, 1.0)]);
        let d = element(&spec);
        assert!((hat_h(&spec, &d, 0.0, 0.0) - 1.2).abs() < 1e-12);
        // case (ii): zeta=1, thetas {2, 0.5}: h=-0.4 -> hat = 0.4/2 = 0.2
        // (the negative-extreme term is zero under the 0*inf convention).
        let spec = LevyMarketSpec {
            b: TimeFn::Constant(-0.4),
            sigma: TimeFn::Constant(0.0),
            jumps: JumpSpec::Multiplicative {
                zeta: TimeFn::Constant(1.0),
                atoms: vec![
                    crate::market::ThetaAtom { z: 2.0, intensity: 1.0, theta: 2.0 },
                    crate::market::ThetaAtom { z: 0.5, intensity: 1.0, theta: 0.5 },
                ],
            },
            s0: 1.0,
            horizon: 1.0,
        };
        let d = DualElement::zero_controls(&spec, BasisSpec::uniform(1.0, 1));
        assert!((hat_h(&spec, &d, 0.0, 0.0) - 0.2).abs() < 1e-12);
        // positive drift with no negative extreme is uncompensable.
        let spec = spec_with(0.3, 0.0, vec![atom(0.5, 1.0)]);
        let d = element(&spec);
        assert_eq!(hat_h(&spec, &d, 0.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn feasibility_of_risk_neutral_and_violations() {
        let spec = spec_with(0.05, 0.2, vec![atom(-0.5, 1.0), atom(1.0, 1.0)]);
        let ens = simulate_paths(&spec, 10, 50, 21).unwrap();
        let rn = risk_neutral_density(&spec).unwrap();
        let report = feasibility_check(&spec, &rn, &ens);
        assert!(report.feasible, "{report:?}");
        assert!(report.max_violation <= FEASIBILITY_TOL);

        // Zero controls with positive b violate by hat_h = b / |min v| > 0.
        let d = element(&spec);
        let report = feasibility_check(&spec, &d, &ens);
        assert!(!report.feasible);
        assert!((report.max_violation - 0.05 / 0.5).abs() < 1e-12);

        // Hard constraint: F < -1 flags a validation violation.
        let mut bad = element(&spec);
        bad.base_mut().f[0] = Coeffs::constant(1, -1.2);
        bad.base_mut().a = RateControl::HatEnvelope;
        let report = feasibility_check(&spec, &bad, &ens);
        assert!(!report.feasible);
        assert!(report.hard_violation.is_some());
    }

    #[test]
    fn risk_neutral_selection_rules() {
        // sigma > 0: G = -b/sigma = -0.25, F = 0.
        let spec = spec_with(0.05, 0.2, vec![atom(0.3, 1.0)]);
        let rn = risk_neutral_density(&spec).unwrap();
        match &rn.controls {
            Controls::Basis(b) => {
                assert!((b.g.0[0][0] + 0.25).abs() < 1e-15);
                assert_eq!(b.f[0].0[0], [0.0, 0.0]);
            }
            _ => panic!(),
        }
        // b = 0, sigma = 0: zero controls.
        let spec = spec_with(0.0, 0.0, vec![atom(0.3, 1.0)]);
        let rn = risk_neutral_density(&spec).unwrap();
        assert_eq!(drift_h(&spec, &rn, 0.0, 0.0), 0.0);
        // b=0.1, sigma=0, one atom v=0.5 lambda=2 -> F = -0.1.
        let spec = spec_with(0.1, 0.0, vec![atom(0.5, 2.0)]);
        let rn = risk_neutral_density(&spec).unwrap();
        match &rn.controls {
            Controls::Basis(b) => assert!((b.f[0].0[0][0] + 0.1).abs() < 1e-15),
            _ => panic!(),
        }
        // sigma = 0, single positive atom, drift too large to absorb.
        let spec = spec_with(2.0, 0.0, vec![atom(0.5, 1.0)]);
        assert!(matches!(
            risk_neutral_density(&spec),
            Err(DualError::NoEquivalentMeasure(_))
        ));
    }

    #[test]
    fn risk_neutral_deflates_the_stock() {
        // E[xi_T S_T] = s0 within 3 standard errors.
        let spec = spec_with(0.08, 0.25, vec![atom(-0.3, 0.6)]);
        let n = 20_000;
        let ens = simulate_paths(&spec, 25, n, 77).unwrap();
        let rn = risk_neutral_density(&spec).unwrap();
        let mut vals = Vec::with_capacity(n);
        for p in 0..n {
            let xi = stochastic_exponential(&ens, p, &rn).unwrap();
            vals.push(xi[ens.n_steps] * ens.price(p, ens.n_steps));
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn martingale_lift_formula_and_dominance() {
        // atoms {-0.5, 1.0}, lambda 1 each, b = 0.1, G=F=0, a = hat envelope:
        // D at the v=-0.5 atom is -0.1/(-0.5 * 1) = 0.2 and the new drift is 0.
        let spec = spec_with(0.1, 0.0, vec![atom(-0.5, 1.0), atom(1.0, 1.0)]);
        let mut d = element(&spec);
        d.base_mut().a = RateControl::HatEnvelope;
        let lifted = martingale_lift(&spec, &d).unwrap();
        assert!((lifted.f_at(&spec, 0.0, 0.0, 0) - 0.2).abs() < 1e-15);
        assert_eq!(lifted.f_at(&spec, 0.0, 0.0, 1), 0.0);
        assert_eq!(drift_h(&spec, &lifted, 0.0, 0.0), 0.0);
        assert_eq!(lifted.a_at(&spec, 0.0, 0.0), 0.0);

        // Pathwise dominance and E[xi~_T] = xi0 within 3 se.
        let n = 10_000;
        let ens = simulate_paths(&spec, 20, n, 13).unwrap();
        let mut terminal = Vec::with_capacity(n);
        for p in 0..n {
            let base = stochastic_exponential(&ens, p, &d).unwrap();
            let lift = stochastic_exponential(&ens, p, &lifted).unwrap();
            for k in 0..=ens.n_steps {
                assert!(
                    lift[k] >= base[k] - 1e-15,
                    "path {p} step {k}: {} < {}",
                    lift[k],
                    base[k]
                );
            }
            terminal.push(lift[ens.n_steps]);
        }
        let mean = terminal.iter().sum::<f64>() / n as f64;
        let var = terminal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn lift_of_driftless_element_is_identity() {
        let spec = spec_with(0.0, 0.2, vec![atom(0.5, 1.0)]);
        let rn = risk_neutral_density(&spec).unwrap();
        let lifted = martingale_lift(&spec, &rn).unwrap();
        let ens = simulate_paths(&spec, 10, 30, 2).unwrap();
        for p in 0..ens.n_paths {
            let a = stochastic_exponential(&ens, p, &rn).unwrap();
            let b = stochastic_exponential(&ens, p, &lifted).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lift_without_atoms_rejects_nonzero_drift() {
        let spec = spec_with(0.1, 0.2, vec![]);
        let d = element(&spec); // h = b = 0.1, no atoms
        assert!(matches!(
            martingale_lift(&spec, &d),
            Err(DualError::UnsupportedStructure(_))
        ));
    }

    /// Statistical supermartingale drift: for a feasible element and an
    /// admissible constant strategy, per-step increments of xi V have
    /// non-positive pooled sample mean within 3 standard errors.
    fn pooled_drift_z(spec: &LevyMarketSpec, xi_paths: &[Vec<f64>], beta: f64, seed_tag: u64) -> f64 {
        let n = xi_paths.len();
        let ens = simulate_paths(spec, 20, n, 41 + seed_tag).unwrap();
        let mut increments = Vec::new();
        for (p, xi) in xi_paths.iter().enumerate() {
            let v = crate::market::wealth_path(&ens, p, &Strategy::Constant(beta), 1.0).unwrap();
            for k in 0..ens.n_steps {
                increments.push(xi[k + 1] * v[k + 1] - xi[k] * v[k]);
            }
        }
        let m = increments.len() as f64;
        let mean = increments.iter().sum::<f64>() / m;
        let var = increments.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
        mean / (var / m).sqrt()
    }

    #[test]
    fn supermartingale_drift_and_convex_mixture() {
        let spec = spec_with(0.05, 0.2, vec![atom(-0.4, 0.8), atom(0.6, 0.5)]);
        let n = 10_000;
        let ens = simulate_paths(&spec, 20, n, 41).unwrap();

        let mut d1 = element(&spec);
        d1.base_mut().g = Coeffs::constant(1, -0.1);
        d1.base_mut().f[0] = Coeffs::constant(1, 0.2);
        d1.base_mut().a = RateControl::HatEnvelope;
        let d2 = risk_neutral_density(&spec).unwrap();

        let xi1: Vec<Vec<f64>> =
            (0..n).map(|p| stochastic_exponential(&ens, p, &d1).unwrap()).collect();
        let xi2: Vec<Vec<f64>> =
            (0..n).map(|p| stochastic_exponential(&ens, p, &d2).unwrap()).collect();
        let beta = 0.8; // inside the admissible interval [-1/0.6, 1/0.4]

        let z1 = pooled_drift_z(&spec, &xi1, beta, 0);
        let z2 = pooled_drift_z(&spec, &xi2, beta, 0);
        assert!(z1 <= 3.0, "d1 drift z = {z1}");
        assert!(z2 <= 3.0, "d2 drift z = {z2}");

        // Pathwise convex mixture stays in the class (closure property).
        let lam = 0.35;
        let mix: Vec<Vec<f64>> = xi1
            .iter()
            .zip(&xi2)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| lam * x + (1.0 - lam) * y).collect())
            .collect();
        let zm = pooled_drift_z(&spec, &mix, beta, 0);
        assert!(zm <= 3.0, "mixture drift z = {zm}");
    }

    #[test]
    fn coefficient_table_is_stably_ordered() {
        let spec = spec_with(0.0, 0.2, vec![atom(0.5, 1.0)]);
        let d = element(&spec);
        let table = coefficient_table(&d);
        let ids: Vec<&str> = table.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(ids, vec!["g[0].1", "g[0].logS", "f0[0].1", "f0[0].logS", "a[0].1", "a[0].logS"]);
    }
}
