//! Exact finite-state multi-period market used as an oracle.
//!
//! Branch returns are shared across levels, so states recombine on branch
//! counts. Each node carries the same one-step risk-neutral polytope, whose
//! vertices drive the super-hedging recursion. The primal is solved by a
//! projected subgradient method with Polyak steps and a Lagrangian gap
//! certificate; the dual by a fully corrective Frank-Wolfe over the
//! martingale-flow polytope scaled by a supermartingale slack `s in [0,1]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{JumpSpec, LevyMarketSpec};
use crate::utility::StateUtility;

const MAX_DEPTH: usize = 20;
const MAX_BRANCHES: usize = 4;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tree construction failed: {0}")]
    Construction(String),
    #[error("arbitrage at a node: all returns on one side of 1 ({0})")]
    Arbitrage(String),
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("tree i/o: {0}")]
    Io(String),
}

/// One branch of a node: objective probability and gross return factor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Branch {
    pub prob: f64,
    pub ret: f64,
}

#[derive(Debug, Clone)]
struct Node {
    price: f64,
    prob: f64,
    children: Vec<usize>,
}

/// JSON-facing description for regression fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDescription {
    pub s0: f64,
    pub depth: usize,
    pub branches: Vec<Branch>,
}

/// Finite-state multi-period market with its risk-neutral vertex set.
#[derive(Debug, Clone)]
pub struct TreeMarket {
    pub s0: f64,
    pub depth: usize,
    pub branches: Vec<Branch>,
    levels: Vec<Vec<Node>>,
    vertices: Vec<Vec<f64>>,
}

impl TreeMarket {
    pub fn new(s0: f64, depth: usize, branches: Vec<Branch>) -> Result<Self, TreeError> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(TreeError::Construction(format!(
                "depth {depth} outside 1..={MAX_DEPTH}"
            )));
        }
        if branches.is_empty() || branches.len() > MAX_BRANCHES {
            return Err(TreeError::Construction(format!(
                "branch count {} outside 1..={MAX_BRANCHES}",
                branches.len()
            )));
        }
        let psum: f64 = branches.iter().map(|b| b.prob).sum();
        if (psum - 1.0).abs() > 1e-9 {
            return Err(TreeError::Construction(format!("probabilities sum to {psum}, not 1")));
        }
        for (i, b) in branches.iter().enumerate() {
            if !(b.prob > 0.0) {
                return Err(TreeError::Construction(format!("branch {i}: prob must be > 0")));
            }
            if !(b.ret > 0.0) {
                return Err(TreeError::Construction(format!("branch {i}: return must be > 0")));
            }
        }
        let vertices = risk_neutral_vertices(&branches)?;

        // Recombining lattice keyed by branch counts.
        let k = branches.len();
        let mut levels: Vec<Vec<Node>> = Vec::with_capacity(depth + 1);
        let mut keys: Vec<Vec<u16>> = vec![vec![0; k]];
        levels.push(vec![Node { price: s0, prob: 1.0, children: vec![] }]);
        for _level in 0..depth {
            let mut next_index: HashMap<Vec<u16>, usize> = HashMap::new();
            let mut next_keys: Vec<Vec<u16>> = Vec::new();
            let mut next_nodes: Vec<Node> = Vec::new();
            let cur_len = levels.last().unwrap().len();
            for ni in 0..cur_len {
                let mut children = Vec::with_capacity(k);
                let parent_prob = levels.last().unwrap()[ni].prob;
                for b in 0..k {
                    let mut key = keys[ni].clone();
                    key[b] += 1;
                    let idx = *next_index.entry(key.clone()).or_insert_with(|| {
                        let price = price_from_counts(s0, &branches, &key);
                        next_keys.push(key.clone());
                        next_nodes.push(Node { price, prob: 0.0, children: vec![] });
                        next_nodes.len() - 1
                    });
                    children.push(idx);
                    next_nodes[idx].prob += parent_prob * branches[b].prob;
                }
                levels.last_mut().unwrap()[ni].children = children;
            }
            keys = next_keys;
            levels.push(next_nodes);
        }
        Ok(TreeMarket { s0, depth, branches, levels, vertices })
    }

    pub fn from_description(d: &TreeDescription) -> Result<Self, TreeError> {
        TreeMarket::new(d.s0, d.depth, d.branches.clone())
    }

    pub fn description(&self) -> TreeDescription {
        TreeDescription { s0: self.s0, depth: self.depth, branches: self.branches.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.description()).expect("tree description serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let d: TreeDescription =
            serde_json::from_str(text).map_err(|e| TreeError::Io(e.to_string()))?;
        TreeMarket::from_description(&d)
    }

    /// Vertices of the one-step risk-neutral polytope `{q >= 0, sum q = 1, sum q r = 1}`.
    pub fn risk_neutral_vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn n_terminal(&self) -> usize {
        self.levels[self.depth].len()
    }

    pub fn terminal_prices(&self) -> Vec<f64> {
        self.levels[self.depth].iter().map(|n| n.price).collect()
    }

    pub fn terminal_probs(&self) -> Vec<f64> {
        self.levels[self.depth].iter().map(|n| n.prob).collect()
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn node_price(&self, level: usize, node: usize) -> f64 {
        self.levels[level][node].price
    }

    /// Backward extremal recursion over per-node vertex choices.
    fn backward_extreme(&self, leaf_values: &[f64], maximize: bool) -> BackwardPass {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.depth + 1);
        let mut choices: Vec<Vec<usize>> = Vec::with_capacity(self.depth);
        values.push(leaf_values.to_vec());
        for l in (0..self.depth).rev() {
            let child_vals = &values[0];
            let mut vals = Vec::with_capacity(self.levels[l].len());
            let mut chs = Vec::with_capacity(self.levels[l].len());
            for node in &self.levels[l] {
                let mut best = if maximize { f64::NEG_INFINITY } else { f64::INFINITY };
                let mut best_v = 0;
                for (vi, q) in self.vertices.iter().enumerate() {
                    let e: f64 = q
                        .iter()
                        .zip(&node.children)
                        .map(|(&qb, &c)| qb * child_vals[c])
                        .sum();
                    let better = if maximize { e > best } else { e < best };
                    if better {
                        best = e;
                        best_v = vi;
                    }
                }
                vals.push(best);
                chs.push(best_v);
            }
            values.insert(0, vals);
            choices.insert(0, chs);
        }
        BackwardPass { root: values[0][0], values, choices }
    }

    /// Leaf masses of the measure given per-node vertex choices.
    fn measure_from_choices(&self, choices: &[Vec<usize>]) -> Vec<f64> {
        let mut mass = vec![0.0; self.levels[0].len()];
        mass[0] = 1.0;
        for l in 0..self.depth {
            let mut next = vec![0.0; self.levels[l + 1].len()];
            for (ni, node) in self.levels[l].iter().enumerate() {
                if mass[ni] == 0.0 {
                    continue;
                }
                let q = &self.vertices[choices[l][ni]];
                for (b, &c) in node.children.iter().enumerate() {
                    next[c] += mass[ni] * q[b];
                }
            }
            mass = next;
        }
        mass
    }

    /// `sup_Q E_Q[claim]` with the achieving measure's leaf masses.
    pub fn superhedge_cost(&self, claim: &[f64]) -> (f64, Vec<f64>) {
        let pass = self.backward_extreme(claim, true);
        let q = self.measure_from_choices(&pass.choices);
        (pass.root, q)
    }
}

struct BackwardPass {
    root: f64,
    values: Vec<Vec<f64>>,
    choices: Vec<Vec<usize>>,
}

fn price_from_counts(s0: f64, branches: &[Branch], counts: &[u16]) -> f64 {
    let mut p = s0;
    for (b, &c) in counts.iter().enumerate() {
        p *= branches[b].ret.powi(c as i32);
    }
    p
}

/// Enumerates the vertices of `{q >= 0, sum q = 1, sum q r = 1}`: singleton
/// vertices at branches with `r = 1` plus two-point combinations pairing a
/// below-1 with an above-1 return.
fn risk_neutral_vertices(branches: &[Branch]) -> Result<Vec<Vec<f64>>, TreeError> {
    let k = branches.len();
    let rets: Vec<f64> = branches.iter().map(|b| b.ret).collect();
    let mut verts: Vec<Vec<f64>> = Vec::new();
    for i in 0..k {
        if (rets[i] - 1.0).abs() < 1e-14 {
            let mut q = vec![0.0; k];
            q[i] = 1.0;
            verts.push(q);
        }
    }
    for i in 0..k {
        if rets[i] >= 1.0 {
            continue;
        }
        for j in 0..k {
            if rets[j] <= 1.0 {
                continue;
            }
            let mut q = vec![0.0; k];
            q[i] = (rets[j] - 1.0) / (rets[j] - rets[i]);
            q[j] = (1.0 - rets[i]) / (rets[j] - rets[i]);
            verts.push(q);
        }
    }
    let mut unique: Vec<Vec<f64>> = Vec::new();
    for v in verts {
        if !unique
            .iter()
            .any(|u| u.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-14))
        {
            unique.push(v);
        }
    }
    if unique.is_empty() {
        let lo = rets.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return Err(TreeError::Arbitrage(format!("returns span [{lo}, {hi}], missing 1")));
    }
    Ok(unique)
}

/// Builds a tree oracle from a finite-atom market spec: two moment-matched
/// diffusion branches plus one branch per atom with probability
/// `lambda_i dt` and return `1 + v_i` (compensator folded into the drift).
pub fn build_tree(spec: &LevyMarketSpec, n_steps: usize) -> Result<TreeMarket, TreeError> {
    spec.validate().map_err(|e| TreeError::Construction(e.to_string()))?;
    match &spec.jumps {
        JumpSpec::FiniteAtoms { .. } => {}
        JumpSpec::Multiplicative { .. } => {
            return Err(TreeError::Construction(
                "tree oracle requires the finite-atom representation".into(),
            ))
        }
    }
    let constant = |f: &crate::market::TimeFn| matches!(f, crate::market::TimeFn::Constant(_));
    if !constant(&spec.b) || !constant(&spec.sigma) {
        return Err(TreeError::Construction(
            "tree oracle requires constant-in-time coefficients".into(),
        ));
    }
    let dt = spec.horizon / n_steps as f64;
    let b = spec.b.at(0.0);
    let sigma = spec.sigma.at(0.0);
    let k = spec.jumps.n_atoms();
    let mut jump_prob_total = 0.0;
    for i in 0..k {
        let p = spec.jumps.intensity(i) * dt;
        if p >= 1.0 {
            return Err(TreeError::Construction(format!(
                "lambda_{i} * dt = {p} >= 1; refine the grid"
            )));
        }
        jump_prob_total += p;
    }
    if jump_prob_total >= 1.0 {
        return Err(TreeError::Construction(format!(
            "total jump probability {jump_prob_total} >= 1; refine the grid"
        )));
    }
    // Compensated drift so the per-step mean return stays 1 + b dt.
    let b_tilde = b - spec.jump_compensator(0.0);
    let mut branches = Vec::new();
    let diff_prob = 1.0 - jump_prob_total;
    if sigma > 0.0 {
        branches.push(Branch { prob: diff_prob / 2.0, ret: 1.0 + b_tilde * dt + sigma * dt.sqrt() });
        branches.push(Branch { prob: diff_prob / 2.0, ret: 1.0 + b_tilde * dt - sigma * dt.sqrt() });
    } else {
        branches.push(Branch { prob: diff_prob, ret: 1.0 + b_tilde * dt });
    }
    for i in 0..k {
        branches.push(Branch {
            prob: spec.jumps.intensity(i) * dt,
            ret: 1.0 + b_tilde * dt + spec.jumps.v(i, 0.0),
        });
    }
    for (i, br) in branches.iter().enumerate() {
        if br.ret <= 0.0 {
            return Err(TreeError::Construction(format!(
                "branch {i} return {} <= 0; refine the grid",
                br.ret
            )));
        }
    }
    TreeMarket::new(spec.s0, n_steps, branches)
}

/// Exact super-hedge of a claim: cost, per-node value function, per-node
/// strategy, and the wealth the strategy generates at every node.
#[derive(Debug, Clone)]
pub struct SuperHedge {
    pub cost: f64,
    pub node_values: Vec<Vec<f64>>,
    pub strategy: Vec<Vec<f64>>,
    pub wealth: Vec<Vec<f64>>,
}

/// Backward recursion `cost(node) = max_q sum_j q_j cost(child_j)` over the
/// polytope vertices; the strategy comes from the supporting hyperplane at
/// each node and its wealth dominates the claim at every terminal node.
pub fn super_hedge_exact(tree: &TreeMarket, claim: &[f64]) -> Result<SuperHedge, TreeError> {
    if claim.len() != tree.n_terminal() {
        return Err(TreeError::Construction(format!(
            "claim has {} values for {} terminal states",
            claim.len(),
            tree.n_terminal()
        )));
    }
    if claim.iter().any(|&c| c < 0.0) {
        return Err(TreeError::Construction("claim must be nonnegative".into()));
    }
    let pass = tree.backward_extreme(claim, true);
    let (strategy, wealth) = recover_strategy(tree, &pass.values, pass.root);
    Ok(SuperHedge { cost: pass.root, node_values: pass.values, strategy, wealth })
}

/// Picks beta per node so the propagated wealth dominates the child targets.
fn recover_strategy(
    tree: &TreeMarket,
    targets: &[Vec<f64>],
    w_root: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut strategy: Vec<Vec<f64>> = Vec::with_capacity(tree.depth);
    let mut wealth: Vec<Vec<f64>> = Vec::with_capacity(tree.depth + 1);
    wealth.push(vec![w_root]);
    for l in 0..tree.depth {
        let mut betas = Vec::with_capacity(tree.levels[l].len());
        let mut next_wealth = vec![f64::NEG_INFINITY; tree.levels[l + 1].len()];
        for (ni, node) in tree.levels[l].iter().enumerate() {
            let w = wealth[l][ni];
            let beta = if w <= 0.0 {
                0.0
            } else {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for (b, &c) in node.children.iter().enumerate() {
                    let r = tree.branches[b].ret - 1.0;
                    let bound = (targets[l + 1][c] - w) / (w * r);
                    if r > 0.0 {
                        lo = lo.max(bound);
                    } else if r < 0.0 {
                        hi = hi.min(bound);
                    }
                }
                match (lo.is_finite(), hi.is_finite()) {
                    (true, true) => 0.5 * (lo + hi),
                    (true, false) => lo,
                    (false, true) => hi,
                    (false, false) => 0.0,
                }
            };
            betas.push(beta);
            for (b, &c) in node.children.iter().enumerate() {
                let r = tree.branches[b].ret - 1.0;
                let w_child = w * (1.0 + beta * r);
                // recombining children keep the weakest incoming wealth
                if next_wealth[c] == f64::NEG_INFINITY || w_child < next_wealth[c] {
                    next_wealth[c] = w_child;
                }
            }
        }
        strategy.push(betas);
        wealth.push(next_wealth);
    }
    (strategy, wealth)
}

/// Exact primal solution on the tree.
#[derive(Debug, Clone)]
pub struct TreePrimalSolution {
    pub u_value: f64,
    pub terminal_wealth: Vec<f64>,
    pub strategy: Vec<Vec<f64>>,
    /// `z` met or exceeded the super-hedge cost of `H`.
    pub superhedged: bool,
    pub certificate_gap: f64,
    pub iterations: usize,
}

/// Maximizes `sum_s p_s U(V_s)` over terminal profiles `V >= 0` with
/// `E_Q[V] <= z` for every risk-neutral measure, by projected subgradient
/// with Polyak steps and a Lagrangian gap certificate.
pub fn solve_primal_exact(
    tree: &TreeMarket,
    u: &StateUtility,
    z: f64,
) -> Result<TreePrimalSolution, TreeError> {
    if !(z > 0.0) {
        return Err(TreeError::InvalidBudget(format!("z = {z} must be > 0")));
    }
    let p = tree.terminal_probs();
    let caps: Vec<f64> = tree.terminal_prices().iter().map(|&s| u.cap(s)).collect();
    let hedge_h = super_hedge_exact(tree, &caps)?;
    let eu_cap: f64 = p.iter().zip(&caps).map(|(&pp, &h)| pp * u.u(h, h)).sum();
    if z >= hedge_h.cost {
        let (strategy, _) = recover_strategy(tree, &hedge_h.node_values, z);
        return Ok(TreePrimalSolution {
            u_value: eu_cap,
            terminal_wealth: caps,
            strategy,
            superhedged: true,
            certificate_gap: 0.0,
            iterations: 0,
        });
    }

    let objective = |v: &[f64]| -> f64 {
        v.iter().zip(&p).zip(&caps).map(|((&vs, &pp), &h)| pp * u.u(vs, h)).sum()
    };
    let scale = eu_cap.abs().max(1.0);
    let tol = 1e-9 * scale;
    let max_iters = 1_000_000usize;

    let mut v: Vec<f64> = caps.iter().map(|&h| h.min(z)).collect();
    let mut v_best = v.clone();
    let mut f_best = f64::NEG_INFINITY;
    let mut u_upper = f64::INFINITY;
    let mut flow = FlowOptimizer::new(tree, u, &p, &caps);
    let mut y_cert = 1.0;
    let mut iterations = 0;

    for it in 0..max_iters {
        iterations = it + 1;
        let (cost, qhat) = tree.superhedge_cost(&v);

        if cost <= z * (1.0 + 1e-14) + 1e-16 {
            let f = objective(&v);
            if f > f_best {
                f_best = f;
                v_best = v.clone();
            }
            let g: Vec<f64> =
                v.iter().zip(&p).zip(&caps).map(|((&vs, &pp), &h)| pp * u.u_prime(vs, h)).collect();
            let gnorm2: f64 = g.iter().map(|x| x * x).sum();
            if gnorm2 == 0.0 {
                break;
            }
            let target = if u_upper.is_finite() { u_upper } else { f + 0.5 * scale };
            let step = ((target - f) / gnorm2).max(0.0);
            if step == 0.0 {
                break;
            }
            for ((vs, &gs), &h) in v.iter_mut().zip(&g).zip(&caps) {
                *vs = (*vs + step * gs).clamp(0.0, h);
            }
        } else {
            let qnorm2: f64 = qhat.iter().map(|x| x * x).sum();
            let step = (cost - z) / qnorm2;
            for ((vs, &qs), &h) in v.iter_mut().zip(&qhat).zip(&caps) {
                *vs = (*vs - step * qs).clamp(0.0, h);
            }
        }

        // Lagrangian certificate: for any flow w and y >= 0,
        // u(z) <= sum_s p_s U~(y w_s/p_s) + z y.
        if it % 16 == 0 || it + 1 == max_iters {
            for _ in 0..20 {
                let gap = flow.fw_step(y_cert);
                if gap <= 0.1 * tol {
                    break;
                }
            }
            let wfix = flow.w.clone();
            let y_hi = cert_y_hi(u, &caps);
            let (y_new, cert_val) =
                golden_min(|y| flow.value_of(&wfix, y) + z * y, 0.0, y_hi, 1e-11 * y_hi, 240);
            y_cert = y_new;
            if cert_val < u_upper {
                u_upper = cert_val;
            }
            // Lagrangian rounding at the certificate shadow price.
            let cand = candidate_from_measure(u, &p, &caps, &wfix, y_cert);
            consider_candidate(tree, &objective, cand, z, &mut f_best, &mut v_best);
            // Budget-tightened variant: scale y until the cost meets z.
            if let Some(y_budget) = bisect_budget(tree, u, &p, &caps, &wfix, z) {
                let cand = candidate_from_measure(u, &p, &caps, &wfix, y_budget);
                consider_candidate(tree, &objective, cand, z, &mut f_best, &mut v_best);
            }
            if u_upper - f_best <= tol {
                break;
            }
        }
    }

    // Exact feasibility of the reported profile (cost is positively homogeneous).
    let (c_best, _) = tree.superhedge_cost(&v_best);
    if c_best > z {
        let s = z / c_best;
        v_best.iter_mut().for_each(|x| *x *= s);
        f_best = objective(&v_best);
    }

    let pass = tree.backward_extreme(&v_best, true);
    let (strategy, _) = recover_strategy(tree, &pass.values, z.max(pass.root));
    Ok(TreePrimalSolution {
        u_value: f_best,
        terminal_wealth: v_best,
        strategy,
        superhedged: false,
        certificate_gap: u_upper - f_best,
        iterations,
    })
}

fn cert_y_hi(u: &StateUtility, caps: &[f64]) -> f64 {
    caps.iter().map(|&h| u.u_prime(0.0, h)).fold(0.0f64, f64::max).max(1.0) * 4.0
}

fn consider_candidate(
    tree: &TreeMarket,
    objective: &impl Fn(&[f64]) -> f64,
    mut cand: Vec<f64>,
    z: f64,
    f_best: &mut f64,
    v_best: &mut Vec<f64>,
) {
    let (c, _) = tree.superhedge_cost(&cand);
    if c > z {
        let s = z / c;
        cand.iter_mut().for_each(|x| *x *= s);
    }
    let f = objective(&cand);
    if f > *f_best {
        *f_best = f;
        *v_best = cand;
    }
}

fn candidate_from_measure(
    u: &StateUtility,
    p: &[f64],
    caps: &[f64],
    q: &[f64],
    y: f64,
) -> Vec<f64> {
    p.iter()
        .zip(caps)
        .zip(q)
        .map(|((&pp, &h), &qs)| {
            let arg = y * qs / pp;
            if arg <= 0.0 {
                h
            } else {
                u.inverse_marginal(arg, h).min(h)
            }
        })
        .collect()
}

/// Finds `y` with `cost(I(y q/p) ^ H) = z`; the cost decreases in `y`.
fn bisect_budget(
    tree: &TreeMarket,
    u: &StateUtility,
    p: &[f64],
    caps: &[f64],
    q: &[f64],
    z: f64,
) -> Option<f64> {
    let cost_at = |y: f64| tree.superhedge_cost(&candidate_from_measure(u, p, caps, q, y)).0;
    let lo = 1e-12;
    let mut hi = 1.0;
    if cost_at(lo) < z {
        return None; // even minute prices under-spend; nothing to tighten
    }
    let mut grow = 0;
    while cost_at(hi) > z {
        hi *= 2.0;
        grow += 1;
        if grow > 60 {
            return None;
        }
    }
    let mut lo = lo;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cost_at(mid) > z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}

fn golden_min(
    mut f: impl FnMut(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..max_iter {
        if hi - lo <= tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let xm = 0.5 * (lo + hi);
    let fm = f(xm);
    if f1 <= f2 && f1 <= fm {
        (x1, f1)
    } else if f2 <= fm {
        (x2, f2)
    } else {
        (xm, fm)
    }
}

/// Exact dual solution on the tree.
#[derive(Debug, Clone)]
pub struct TreeDualSolution {
    pub y_star: f64,
    /// Deflator value per terminal state, `xi_s = w_s / p_s`.
    pub deflator: Vec<f64>,
    pub v_value: f64,
    pub bound: f64,
    /// `|min_y {v(y) + z y} - u(z)|` against the exact primal.
    pub gap: f64,
}

/// Minimizes `E[U~(y xi_T)]` over deflators `xi_T = s dQ/dP` with `Q` in the
/// risk-neutral polytope and slack `s in [0,1]`, then minimizes over `y`.
pub fn solve_dual_exact(
    tree: &TreeMarket,
    u: &StateUtility,
    z: f64,
) -> Result<TreeDualSolution, TreeError> {
    let p = tree.terminal_probs();
    let caps: Vec<f64> = tree.terminal_prices().iter().map(|&s| u.cap(s)).collect();
    let (w_cost, _) = tree.superhedge_cost(&caps);
    if !(z > 0.0) {
        return Err(TreeError::InvalidBudget(format!("z = {z} must be > 0")));
    }
    if z >= w_cost {
        return Err(TreeError::InvalidBudget(format!(
            "z = {z} >= super-hedge cost {w_cost}; the primal is capped there"
        )));
    }
    let primal = solve_primal_exact(tree, u, z)?;

    let scale = p
        .iter()
        .zip(&caps)
        .map(|(&pp, &h)| pp * u.u(h, h))
        .sum::<f64>()
        .abs()
        .max(1.0);
    let tol_inner = 1e-12 * scale;

    let mut flow = FlowOptimizer::new(tree, u, &p, &caps);

    // Bracket: beyond y_hi the dual value is flat at E[U(0)] = 0.
    let mut y_hi = 1.0;
    while flow_solve(&mut flow, y_hi, tol_inner) > 1e-11 * scale {
        y_hi *= 2.0;
        if y_hi > 1e9 {
            break;
        }
    }
    let (y_star, _) = golden_min(
        |y| flow_solve(&mut flow, y, tol_inner) + z * y,
        0.0,
        y_hi,
        1e-10 * y_hi.max(1.0),
        400,
    );
    let v_value = flow_solve(&mut flow, y_star, tol_inner);
    let bound = v_value + z * y_star;
    let deflator: Vec<f64> = flow.w.iter().zip(&p).map(|(&ws, &pp)| ws / pp).collect();
    Ok(TreeDualSolution { y_star, deflator, v_value, bound, gap: (bound - primal.u_value).abs() })
}

/// Runs corrective FW rounds at fixed `y` until the gap closes.
fn flow_solve(flow: &mut FlowOptimizer, y: f64, tol: f64) -> f64 {
    for _ in 0..400 {
        if flow.fw_step(y) <= tol {
            break;
        }
    }
    flow.value(y)
}

/// Fully corrective Frank-Wolfe state over the martingale-flow polytope
/// (leaf masses of measures scaled by a root mass `s <= 1`).
///
/// Anchors start with the zero flow and the per-level Euclidean projection
/// of the objective branch probabilities onto the one-step risk-neutral
/// polytope (the natural near-optimal guess; exact for driftless trees).
struct FlowOptimizer<'a> {
    tree: &'a TreeMarket,
    u: &'a StateUtility,
    p: &'a [f64],
    caps: &'a [f64],
    anchors: Vec<Vec<f64>>,
    weights: Vec<f64>,
    w: Vec<f64>,
}

impl<'a> FlowOptimizer<'a> {
    fn new(tree: &'a TreeMarket, u: &'a StateUtility, p: &'a [f64], caps: &'a [f64]) -> Self {
        let n = p.len();
        let mut anchors = vec![vec![0.0; n]];
        if let Some(q) = projected_measure(&tree.branches) {
            anchors.push(tree.product_flow(&q));
        }
        let m = anchors.len();
        let weights = vec![1.0 / m as f64; m];
        let mut opt = FlowOptimizer { tree, u, p, caps, anchors, weights, w: vec![0.0; n] };
        opt.w = opt.combine(&opt.weights);
        opt
    }

    fn combine(&self, weights: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.p.len()];
        for (a, &mu) in self.anchors.iter().zip(weights) {
            for (ws, &as_) in w.iter_mut().zip(a) {
                *ws += mu * as_;
            }
        }
        w
    }

    fn value(&self, y: f64) -> f64 {
        self.value_of(&self.w, y)
    }

    fn value_of(&self, w: &[f64], y: f64) -> f64 {
        w.iter()
            .zip(self.p)
            .zip(self.caps)
            .map(|((&ws, &pp), &h)| pp * self.u.convex_dual(y * ws / pp, h))
            .sum()
    }

    fn grad_of(&self, w: &[f64], y: f64) -> Vec<f64> {
        w.iter()
            .zip(self.p)
            .zip(self.caps)
            .map(|((&ws, &pp), &h)| {
                let arg = y * ws / pp;
                let i_cap = if arg <= 0.0 { h } else { self.u.inverse_marginal(arg, h).min(h) };
                -y * i_cap
            })
            .collect()
    }

    /// One corrective round: LMO over the flow polytope, anchor insertion,
    /// master re-solve. Returns the FW gap at the incoming iterate.
    fn fw_step(&mut self, y: f64) -> f64 {
        if y == 0.0 {
            return 0.0; // objective does not depend on w at y = 0
        }
        let g = self.grad_of(&self.w, y);
        let pass = self.tree.backward_extreme(&g, false);
        let candidate = if pass.root < 0.0 {
            self.tree.measure_from_choices(&pass.choices)
        } else {
            vec![0.0; self.p.len()]
        };
        let gap: f64 = g
            .iter()
            .zip(&self.w)
            .zip(&candidate)
            .map(|((&gs, &ws), &cs)| gs * (ws - cs))
            .sum();
        if gap <= 0.0 {
            return gap;
        }
        if !self
            .anchors
            .iter()
            .any(|a| a.iter().zip(&candidate).all(|(x, c)| (x - c).abs() < 1e-15))
        {
            self.anchors.push(candidate);
            self.weights.push(0.0);
        }
        self.master(y);
        gap
    }

    /// Projected gradient on the simplex of anchor weights, with analytic
    /// gradients via the chain rule.
    fn master(&mut self, y: f64) {
        let m = self.anchors.len();
        let mut mu = self.weights.clone();
        let mut w = self.combine(&mu);
        let mut f_cur = self.value_of(&w, y);
        let mut step = 1.0;
        for _ in 0..120 {
            let gw = self.grad_of(&w, y);
            let g_mu: Vec<f64> = self
                .anchors
                .iter()
                .map(|a| a.iter().zip(&gw).map(|(&as_, &gs)| as_ * gs).sum())
                .collect();
            let mut improved = false;
            while step > 1e-18 {
                let raw: Vec<f64> = mu.iter().zip(&g_mu).map(|(&mv, &gs)| mv - step * gs).collect();
                let trial = project_simplex(&raw);
                if trial.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-17) {
                    break;
                }
                let wt = self.combine(&trial);
                let ft = self.value_of(&wt, y);
                if ft < f_cur - 1e-18 {
                    mu = trial;
                    w = wt;
                    f_cur = ft;
                    improved = true;
                    step *= 1.6;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        let _ = m;
        self.weights = mu;
        self.cleanup();
        self.w = self.combine(&self.weights);
    }

    fn cleanup(&mut self) {
        let mut i = 0;
        while i < self.anchors.len() {
            if self.weights[i] < 1e-14 && self.anchors.len() > 1 {
                self.anchors.remove(i);
                self.weights.remove(i);
            } else {
                i += 1;
            }
        }
        let total: f64 = self.weights.iter().sum();
        if total > 0.0 {
            self.weights.iter_mut().for_each(|w| *w /= total);
        } else {
            self.weights[0] = 1.0;
        }
    }
}

impl TreeMarket {
    /// Leaf masses of the product measure using the same one-step measure at
    /// every node.
    fn product_flow(&self, q: &[f64]) -> Vec<f64> {
        let mut mass = vec![0.0; self.levels[0].len()];
        mass[0] = 1.0;
        for l in 0..self.depth {
            let mut next = vec![0.0; self.levels[l + 1].len()];
            for (ni, node) in self.levels[l].iter().enumerate() {
                if mass[ni] == 0.0 {
                    continue;
                }
                for (b, &c) in node.children.iter().enumerate() {
                    next[c] += mass[ni] * q[b];
                }
            }
            mass = next;
        }
        mass
    }
}

/// Euclidean projection of the branch probabilities onto the one-step
/// risk-neutral polytope: the closest product martingale measure to `P`.
fn projected_measure(branches: &[Branch]) -> Option<Vec<f64>> {
    let k = branches.len();
    let p: Vec<f64> = branches.iter().map(|b| b.prob).collect();
    let r: Vec<f64> = branches.iter().map(|b| b.ret).collect();
    let mut support: Vec<bool> = vec![true; k];
    for _ in 0..k {
        // Solve q_i = p_i + alpha + beta r_i on the support, two constraints.
        let s0: f64 = support.iter().filter(|&&s| s).count() as f64;
        let sum_p: f64 = (0..k).filter(|&i| support[i]).map(|i| p[i]).sum();
        let sum_r: f64 = (0..k).filter(|&i| support[i]).map(|i| r[i]).sum();
        let sum_r2: f64 = (0..k).filter(|&i| support[i]).map(|i| r[i] * r[i]).sum();
        let sum_pr: f64 = (0..k).filter(|&i| support[i]).map(|i| p[i] * r[i]).sum();
        let det = s0 * sum_r2 - sum_r * sum_r;
        if det.abs() < 1e-14 {
            return None;
        }
        let rhs1 = 1.0 - sum_p;
        let rhs2 = 1.0 - sum_pr;
        let alpha = (rhs1 * sum_r2 - rhs2 * sum_r) / det;
        let beta = (s0 * rhs2 - sum_r * rhs1) / det;
        let q: Vec<f64> = (0..k)
            .map(|i| if support[i] { p[i] + alpha + beta * r[i] } else { 0.0 })
            .collect();
        match (0..k)
            .filter(|&i| support[i] && q[i] < 0.0)
            .min_by(|&a, &b| q[a].partial_cmp(&q[b]).unwrap())
        {
            None => {
                let m: f64 = q.iter().sum();
                let mr: f64 = q.iter().zip(&r).map(|(&a, &b)| a * b).sum();
                if (m - 1.0).abs() < 1e-10 && (mr - 1.0).abs() < 1e-10 {
                    return Some(q);
                }
                return None;
            }
            Some(worst) => support[worst] = false,
        }
    }
    None
}

fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{JumpAtom, TimeFn};
    use crate::utility::{make_shortfall_utility, Claim, Loss};

    fn binomial(p_up: f64) -> TreeMarket {
        TreeMarket::new(
            1.0,
            1,
            vec![Branch { prob: p_up, ret: 1.2 }, Branch { prob: 1.0 - p_up, ret: 0.9 }],
        )
        .unwrap()
    }

    fn trinomial() -> TreeMarket {
        TreeMarket::new(
            1.0,
            1,
            vec![
                Branch { prob: 1.0 / 3.0, ret: 1.2 },
                Branch { prob: 1.0 / 3.0, ret: 0.9 },
                Branch { prob: 1.0 / 3.0, ret: 1.5 },
            ],
        )
        .unwrap()
    }

    fn quad_h1() -> StateUtility {
        make_shortfall_utility(Loss::Quadratic, Claim::Constant(1.0)).unwrap()
    }

    #[test]
    fn build_tree_shapes() {
        let no_atoms = LevyMarketSpec {
            b: TimeFn::Constant(0.0),
            sigma: TimeFn::Constant(0.2),
            jumps: JumpSpec::FiniteAtoms { atoms: vec![] },
            s0: 1.0,
            horizon: 1.0,
        };
        let t = build_tree(&no_atoms, 5).unwrap();
        assert_eq!(t.branches.len(), 2);
        assert_eq!(t.n_terminal(), 6); // recombining binomial

        let one_atom = LevyMarketSpec {
            b: TimeFn::Constant(0.0),
            sigma: TimeFn::Constant(0.2),
            jumps: JumpSpec::FiniteAtoms {
                atoms: vec![JumpAtom { z: 0.5, intensity: 0.5, coeff: TimeFn::Constant(0.5) }],
            },
            s0: 1.0,
            horizon: 1.0,
        };
        let t = build_tree(&one_atom, 4).unwrap();
        assert_eq!(t.branches.len(), 3); // trinomial
        let probs = t.terminal_probs();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arbitrage_is_rejected() {
        let all_up = TreeMarket::new(
            1.0,
            1,
            vec![Branch { prob: 0.5, ret: 1.2 }, Branch { prob: 0.5, ret: 1.1 }],
        );
        assert!(matches!(all_up, Err(TreeError::Arbitrage(_))));
    }

    #[test]
    fn trinomial_polytope_vertices() {
        let t = trinomial();
        let verts = t.risk_neutral_vertices();
        assert_eq!(verts.len(), 2);
        let expect = [[1.0 / 3.0, 2.0 / 3.0, 0.0], [0.0, 5.0 / 6.0, 1.0 / 6.0]];
        for e in &expect {
            assert!(
                verts
                    .iter()
                    .any(|v| v.iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-12)),
                "missing vertex {e:?} in {verts:?}"
            );
        }
    }

    #[test]
    fn superhedge_binomial_call() {
        let t = binomial(0.5);
        let claim: Vec<f64> = t.terminal_prices().iter().map(|&s| (s - 1.0f64).max(0.0)).collect();
        let sh = super_hedge_exact(&t, &claim).unwrap();
        assert!((sh.cost - 1.0 / 15.0).abs() < 1e-10, "cost {}", sh.cost);
        for (w, c) in sh.wealth[1].iter().zip(&claim) {
            assert!(w >= &(c - 1e-10));
        }
    }

    #[test]
    fn superhedge_trinomial_call() {
        let t = trinomial();
        let claim: Vec<f64> = t.terminal_prices().iter().map(|&s| (s - 1.0f64).max(0.0)).collect();
        let sh = super_hedge_exact(&t, &claim).unwrap();
        assert!((sh.cost - 1.0 / 12.0).abs() < 1e-10, "cost {}", sh.cost);
        for (w, c) in sh.wealth[1].iter().zip(&claim) {
            assert!(w >= &(c - 1e-10));
        }
    }

    #[test]
    fn superhedge_constant_claim() {
        let t = binomial(0.3);
        let claim = vec![0.7; t.n_terminal()];
        let sh = super_hedge_exact(&t, &claim).unwrap();
        assert!((sh.cost - 0.7).abs() < 1e-12);
    }

    #[test]
    fn superhedge_multi_period_dominance() {
        let t = TreeMarket::new(
            1.0,
            6,
            vec![
                Branch { prob: 0.45, ret: 1.1 },
                Branch { prob: 0.35, ret: 0.95 },
                Branch { prob: 0.2, ret: 1.25 },
            ],
        )
        .unwrap();
        let claim: Vec<f64> =
            t.terminal_prices().iter().map(|&s| (s - 1.05f64).max(0.0)).collect();
        let sh = super_hedge_exact(&t, &claim).unwrap();
        let last = sh.wealth.last().unwrap();
        for (w, c) in last.iter().zip(&claim) {
            assert!(w >= &(c - 1e-10), "wealth {w} under claim {c}");
        }
        let (cost2, q) = t.superhedge_cost(&claim);
        assert_eq!(sh.cost, cost2);
        let eq: f64 = q.iter().zip(&claim).map(|(&m, &c)| m * c).sum();
        assert!((eq - sh.cost).abs() < 1e-12);
    }

    #[test]
    fn primal_one_period_binomial_hand_solution() {
        // u(0.5) = 0.775 with V = (0.7, 0.4); unique density (2/3, 4/3).
        let t = binomial(0.5);
        let u = quad_h1();
        let sol = solve_primal_exact(&t, &u, 0.5).unwrap();
        assert!((sol.u_value - 0.775).abs() < 1e-7, "u {}", sol.u_value);
        let mut v = sol.terminal_wealth.clone();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((v[0] - 0.7).abs() < 1e-5, "V {v:?}");
        assert!((v[1] - 0.4).abs() < 1e-5, "V {v:?}");
        assert!(!sol.superhedged);
    }

    #[test]
    fn primal_driftless_closed_form() {
        // p = (1/3, 2/3) makes the market driftless: V = z, u = 1 - (1-z)^2.
        let t = binomial(1.0 / 3.0);
        let u = quad_h1();
        for z in [0.25, 0.5, 0.8] {
            let sol = solve_primal_exact(&t, &u, z).unwrap();
            let expect = 1.0 - (1.0 - z) * (1.0 - z);
            assert!((sol.u_value - expect).abs() < 1e-7, "z={z}: {} vs {expect}", sol.u_value);
            for v in &sol.terminal_wealth {
                assert!((v - z).abs() < 1e-4, "z={z}: V {v}");
            }
        }
    }

    #[test]
    fn primal_superhedged_cap() {
        let t = binomial(0.5);
        let u = quad_h1();
        let sol = solve_primal_exact(&t, &u, 1.5).unwrap();
        assert!(sol.superhedged);
        assert!((sol.u_value - 1.0).abs() < 1e-12); // E[U(H)] = U(1) = 1
        assert!(solve_primal_exact(&t, &u, -0.1).is_err());
    }

    #[test]
    fn dual_one_period_binomial_hand_solution() {
        // y(z) = 0.9, v(0.9) = (0.49 + 0.16)/2 = 0.325, bound = 0.775.
        let t = binomial(0.5);
        let u = quad_h1();
        let sol = solve_dual_exact(&t, &u, 0.5).unwrap();
        assert!((sol.y_star - 0.9).abs() < 1e-4, "y {}", sol.y_star);
        assert!((sol.v_value - 0.325).abs() < 1e-6, "v {}", sol.v_value);
        assert!((sol.bound - 0.775).abs() < 1e-6, "bound {}", sol.bound);
        assert!(sol.gap <= 1e-6, "gap {}", sol.gap);
        let mut xi = sol.deflator.clone();
        xi.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((xi[0] - 2.0 / 3.0).abs() < 1e-6, "{xi:?}");
        assert!((xi[1] - 4.0 / 3.0).abs() < 1e-6, "{xi:?}");
    }

    #[test]
    fn dual_driftless_binomial() {
        let t = binomial(1.0 / 3.0);
        let u = quad_h1();
        let sol = solve_dual_exact(&t, &u, 0.5).unwrap();
        assert!((sol.y_star - 1.0).abs() < 1e-4, "y {}", sol.y_star);
        assert!((sol.bound - 0.75).abs() < 1e-6, "bound {}", sol.bound);
        assert!(sol.gap <= 1e-6);
    }

    #[test]
    fn dual_budget_equality_on_complete_trees() {
        let u = quad_h1();
        for depth in [1, 3, 5] {
            let t = TreeMarket::new(
                1.0,
                depth,
                vec![Branch { prob: 0.55, ret: 1.07 }, Branch { prob: 0.45, ret: 0.94 }],
            )
            .unwrap();
            let z = 0.45;
            let sol = solve_dual_exact(&t, &u, z).unwrap();
            let p = t.terminal_probs();
            let caps: Vec<f64> = t.terminal_prices().iter().map(|&s| u.cap(s)).collect();
            let budget: f64 = p
                .iter()
                .zip(&caps)
                .zip(&sol.deflator)
                .map(|((&pp, &h), &xi)| {
                    let arg = sol.y_star * xi;
                    let v = if arg <= 0.0 { h } else { u.inverse_marginal(arg, h).min(h) };
                    pp * v * xi
                })
                .sum();
            assert!((budget - z).abs() <= 1e-8, "depth {depth}: budget {budget} vs z {z}");
            assert!(sol.gap <= 1e-6, "depth {depth}: gap {}", sol.gap);
        }
    }

    #[test]
    fn strong_duality_on_incomplete_trees() {
        let u = quad_h1();
        for depth in [1, 2, 3] {
            let t = TreeMarket::new(
                1.0,
                depth,
                vec![
                    Branch { prob: 0.4, ret: 1.15 },
                    Branch { prob: 0.4, ret: 0.92 },
                    Branch { prob: 0.2, ret: 1.3 },
                ],
            )
            .unwrap();
            let sol = solve_dual_exact(&t, &u, 0.5).unwrap();
            assert!(sol.gap <= 1e-6, "depth {depth}: gap {}", sol.gap);
        }
    }

    #[test]
    fn dual_value_at_zero_is_expected_cap_utility() {
        let t = binomial(0.5);
        let u = quad_h1();
        let p = t.terminal_probs();
        let caps: Vec<f64> = t.terminal_prices().iter().map(|&s| u.cap(s)).collect();
        let mut flow = FlowOptimizer::new(&t, &u, &p, &caps);
        let v0 = flow_solve(&mut flow, 0.0, 1e-12);
        let expect: f64 = p.iter().zip(&caps).map(|(&pp, &h)| pp * u.u(h, h)).sum();
        assert_eq!(v0, expect);
    }

    #[test]
    fn monotone_concave_value_function() {
        let t = trinomial();
        let u = quad_h1();
        let zs: Vec<f64> = (1..=9).map(|i| i as f64 * 0.1).collect();
        let us: Vec<f64> =
            zs.iter().map(|&z| solve_primal_exact(&t, &u, z).unwrap().u_value).collect();
        for w in us.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "u not monotone: {us:?}");
        }
        for i in 1..us.len() - 1 {
            assert!(
                us[i] >= 0.5 * (us[i - 1] + us[i + 1]) - 1e-8,
                "u not midpoint-concave at {i}: {us:?}"
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let t = trinomial();
        let text = t.to_json();
        let back = TreeMarket::from_json(&text).unwrap();
        assert_eq!(back.branches, t.branches);
        assert_eq!(back.depth, t.depth);
        assert_eq!(back.terminal_prices(), t.terminal_prices());
    }
}
