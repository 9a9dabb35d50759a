//! Counter-based random number streams for reproducible parallel simulation.
//!
//! Every draw is a pure function of `(seed, path, channel, index, counter)`,
//! so path generation is independent of iteration order and thread schedule,
//! and a given path is byte-identical no matter how many paths surround it.

/// Channel tags keep the independent noise sources of one path from colliding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// Brownian increment for a grid step.
    Brownian,
    /// Exponential inter-arrival clock of one jump atom.
    JumpClock,
    /// Brownian bridge refinement inside a subdivided step.
    Bridge,
    /// Auxiliary draws (optimizer restarts, test batteries).
    Aux,
}

impl Channel {
    fn tag(self) -> u64 {
        match self {
            Channel::Brownian => 0x1,
            Channel::JumpClock => 0x2,
            Channel::Bridge => 0x3,
            Channel::Aux => 0x4,
        }
    }
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Raw 64-bit output at a fully specified counter position.
#[inline]
pub fn draw_u64(seed: u64, path: u64, channel: Channel, index: u64, counter: u64) -> u64 {
    // Chained splitmix rounds; each component perturbs the state before the
    // next finalization so nearby keys decorrelate.
    let mut s = splitmix64(seed ^ 0x5851F42D4C957F2D);
    s = splitmix64(s ^ path.wrapping_mul(0xD1342543DE82EF95));
    s = splitmix64(s ^ channel.tag().wrapping_mul(0xA076_1D64_78BD_642F));
    s = splitmix64(s ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    splitmix64(s ^ counter.wrapping_mul(0x8EBC_6AF0_9C88_C6E3))
}

/// Uniform draw in the open interval (0, 1).
#[inline]
pub fn draw_uniform(seed: u64, path: u64, channel: Channel, index: u64, counter: u64) -> f64 {
    // 53 random bits, then shift into (0,1) strictly.
    let bits = draw_u64(seed, path, channel, index, counter) >> 11;
    (bits as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Standard normal draw via the Acklam inverse-CDF applied to one uniform.
#[inline]
pub fn draw_normal(seed: u64, path: u64, channel: Channel, index: u64, counter: u64) -> f64 {
    inverse_normal_cdf(draw_uniform(seed, path, channel, index, counter))
}

/// Exponential draw with the given rate.
#[inline]
pub fn draw_exponential(
    seed: u64,
    path: u64,
    channel: Channel,
    index: u64,
    counter: u64,
    rate: f64,
) -> f64 {
    let u = draw_uniform(seed, path, channel, index, counter);
    -(1.0 - u).ln() / rate
}

/// Acklam's rational approximation to the standard normal quantile;
/// absolute error about 1.2e-9 over (0,1).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}
