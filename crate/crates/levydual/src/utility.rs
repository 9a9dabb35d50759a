//! Bounded state-dependent utility built from a loss function and a claim.
//!
//! `U(v, w) = L(H(w)) - L((H(w) - v)^+)` is flat beyond the cap `H(w)`,
//! concave below it, and carries its convex dual and the generalized
//! inverse of the marginal utility. State enters through the cap value,
//! so all evaluators take the per-path cap `h` alongside the argument.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("loss function rejected: {0}")]
    InvalidLoss(String),
    #[error("invalid claim: {0}")]
    InvalidClaim(String),
}

/// Convex increasing loss with `L(0) = 0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum Loss {
    Linear,
    Quadratic,
    Power(f64),
}

impl Loss {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Loss::Linear => x,
            Loss::Quadratic => x * x,
            Loss::Power(p) => x.powf(*p),
        }
    }

    /// Left derivative (the loss functions here are smooth on (0, inf)).
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Loss::Linear => 1.0,
            Loss::Quadratic => 2.0 * x,
            Loss::Power(p) => p * x.powf(p - 1.0),
        }
    }
}

/// Terminal claim defining the utility cap `H`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum Claim {
    Constant(f64),
    Call { strike: f64 },
    Put { strike: f64 },
}

impl Claim {
    pub fn value(&self, terminal_price: f64) -> f64 {
        match self {
            Claim::Constant(c) => *c,
            Claim::Call { strike } => (terminal_price - strike).max(0.0),
            Claim::Put { strike } => (strike - terminal_price).max(0.0),
        }
    }
}

/// Capped state-dependent utility of shortfall form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StateUtility {
    pub loss: Loss,
    pub claim: Claim,
}

/// Builds the shortfall utility after checking the loss is convex,
/// strictly increasing, and null at zero (secant test on a fixed grid).
pub fn make_shortfall_utility(loss: Loss, claim: Claim) -> Result<StateUtility, UtilityError> {
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
    let vals: Vec<f64> = grid.iter().map(|&x| loss.value(x)).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(UtilityError::InvalidLoss("non-finite values on the test grid".into()));
    }
    if vals[0].abs() > 1e-12 {
        return Err(UtilityError::InvalidLoss(format!("L(0) = {} must be 0", vals[0])));
    }
    for w in vals.windows(2) {
        if w[1] <= w[0] {
            return Err(UtilityError::InvalidLoss("not strictly increasing".into()));
        }
    }
    for i in 0..grid.len() - 2 {
        let mid = loss.value((grid[i] + grid[i + 2]) / 2.0);
        if mid > (vals[i] + vals[i + 2]) / 2.0 + 1e-12 {
            return Err(UtilityError::InvalidLoss(format!(
                "secant test failed at x = {}",
                grid[i + 1]
            )));
        }
    }
    match claim {
        Claim::Constant(c) if c < 0.0 => {
            return Err(UtilityError::InvalidClaim(format!("constant claim {c} must be >= 0")))
        }
        Claim::Call { strike } | Claim::Put { strike } if strike < 0.0 => {
            return Err(UtilityError::InvalidClaim(format!("strike {strike} must be >= 0")))
        }
        _ => {}
    }
    Ok(StateUtility { loss, claim })
}

impl StateUtility {
    /// Cap `H(w)` evaluated from the terminal price of a path.
    pub fn cap(&self, terminal_price: f64) -> f64 {
        self.claim.value(terminal_price)
    }

    /// `U(v, w) = L(H) - L((H - v)^+)`, flat at `L(H)` beyond the cap.
    pub fn u(&self, v: f64, h: f64) -> f64 {
        let shortfall = (h - v.max(0.0)).max(0.0);
        self.loss.value(h) - self.loss.value(shortfall)
    }

    /// Marginal utility `U'(v, w) = L'(H - v)` on `(0, H)`; 0 beyond the cap.
    pub fn u_prime(&self, v: f64, h: f64) -> f64 {
        if v >= h {
            return 0.0;
        }
        self.loss.deriv(h - v)
    }

    /// Generalized inverse of the marginal capped at `H`:
    /// `inf{z in (0,H) : U'(z) < y} ^ H`, with `inf {} = inf` capped to `H`.
    ///
    /// Ties resolve to the leftmost point. Computed by bisection to a 1e-12
    /// relative tolerance; equals `-dU~/dy`.
    pub fn inverse_marginal(&self, y: f64, h: f64) -> f64 {
        debug_assert!(y > 0.0);
        if h <= 0.0 {
            return 0.0;
        }
        // U'(z) = L'(h - z) is non-increasing in z.
        if self.loss.deriv(h) < y {
            return 0.0; // marginal already below y at 0+
        }
        if self.u_prime_right_limit(h) >= y {
            return h; // the set is empty
        }
        let mut lo = 0.0; // U'(lo) >= y
        let mut hi = h; // U'(hi) < y
        let tol = 1e-12 * h.max(1.0);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.loss.deriv(h - mid) < y {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// `lim_{z -> H-} U'(z) = L'(0+)`.
    fn u_prime_right_limit(&self, _h: f64) -> f64 {
        match self.loss {
            Loss::Linear => 1.0,
            Loss::Quadratic => 0.0,
            Loss::Power(p) => {
                if p > 1.0 {
                    0.0
                } else {
                    1.0 // p == 1 degenerates to linear
                }
            }
        }
    }

    /// Convex dual `U~(y, w) = sup_{0<=z<=H} {U(z, w) - yz}`, evaluated
    /// through the representation `U~ = U(I ^ H) - y (I ^ H)`.
    pub fn convex_dual(&self, y: f64, h: f64) -> f64 {
        debug_assert!(y >= 0.0);
        if h <= 0.0 {
            return 0.0; // U(., w) is identically U(0, w) = 0
        }
        if y == 0.0 {
            return self.u(h, h);
        }
        let i = self.inverse_marginal(y, h).min(h);
        self.u(i, h) - y * i
    }
}
