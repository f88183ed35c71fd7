//! Numeric kernels: normal CDF/quantile, truncated-uniform adjustment,
//! Stouffer aggregation, and the two leaf p-value samplers.
//!
//! All functions are pure; the keyed [`StreamRng`] makes every draw a
//! function of (seed, stream, key) so simulations are reproducible
//! independent of iteration order or thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Adjusted p-values are clamped into `[P_CLAMP, 1 - P_CLAMP]` before the
/// normal quantile so aggregation never produces infinities.
pub const P_CLAMP: f64 = 1e-15;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.5066282746310002;
/// 1/sqrt(pi)
const SQRPI: f64 = 5.6418958354775628695e-1;

// Rational Chebyshev coefficients for erf/erfc (W. J. Cody, SPECFUN),
// kept verbatim from the published tables.
#![allow(clippy::excessive_precision)]

const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

/// exp(-y*y) with the argument split to avoid cancellation for large y.
fn exp_neg_sq(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Complementary error function, good to ~1 ulp relative error.
fn erfc(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        let z = if y > 1.11e-16 { y * y } else { 0.0 };
        let mut num = ERF_A[4] * z;
        let mut den = z;
        for i in 0..3 {
            num = (num + ERF_A[i]) * z;
            den = (den + ERF_B[i]) * z;
        }
        return 1.0 - x * (num + ERF_A[3]) / (den + ERF_B[3]);
    }
    let result = if y <= 4.0 {
        let mut num = ERF_C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + ERF_C[i]) * y;
            den = (den + ERF_D[i]) * y;
        }
        exp_neg_sq(y) * (num + ERF_C[7]) / (den + ERF_D[7])
    } else {
        let z = 1.0 / (y * y);
        let mut num = ERF_P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + ERF_P[i]) * z;
            den = (den + ERF_Q[i]) * z;
        }
        let r = z * (num + ERF_P[4]) / (den + ERF_Q[4]);
        exp_neg_sq(y) * (SQRPI - r) / y
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    assert!(!z.is_nan(), "norm_cdf: NaN argument");
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

// Acklam's rational approximation for the normal quantile.
const ACK_A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const ACK_B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const ACK_C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const ACK_D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const ACK_P_LOW: f64 = 0.02425;

fn acklam(p: f64) -> f64 {
    if p < ACK_P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((ACK_C[0] * q + ACK_C[1]) * q + ACK_C[2]) * q + ACK_C[3]) * q + ACK_C[4]) * q
            + ACK_C[5])
            / ((((ACK_D[0] * q + ACK_D[1]) * q + ACK_D[2]) * q + ACK_D[3]) * q + 1.0)
    } else if p <= 1.0 - ACK_P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((ACK_A[0] * r + ACK_A[1]) * r + ACK_A[2]) * r + ACK_A[3]) * r + ACK_A[4]) * r
            + ACK_A[5])
            * q
            / (((((ACK_B[0] * r + ACK_B[1]) * r + ACK_B[2]) * r + ACK_B[3]) * r + ACK_B[4]) * r
                + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((ACK_C[0] * q + ACK_C[1]) * q + ACK_C[2]) * q + ACK_C[3]) * q + ACK_C[4]) * q
            + ACK_C[5])
            / ((((ACK_D[0] * q + ACK_D[1]) * q + ACK_D[2]) * q + ACK_D[3]) * q + 1.0)
    }
}

/// Standard normal quantile: rational approximation plus one Newton step.
///
/// Panics when `p` is outside the open interval (0, 1).
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "norm_quantile: p={p} outside (0,1)");
    let z = acklam(p);
    let pdf = norm_pdf(z);
    if pdf > 0.0 {
        z - (norm_cdf(z) - p) / pdf
    } else {
        z
    }
}

/// Maps a p-value known to lie in `[alpha_cut, 1]` back onto `[0, 1]`.
///
/// Survivors of a step-down test at cut `alpha_cut` are uniform on
/// `[alpha_cut, 1]` under the null; the rescaled value is uniform on
/// `[0, 1]`. Panics when `p < alpha_cut`, which means the caller passed a
/// node that should have been detected.
pub fn adjust_truncated(p: f64, alpha_cut: f64) -> f64 {
    assert!(
        (0.0..1.0).contains(&alpha_cut),
        "adjust_truncated: alpha_cut={alpha_cut} outside [0,1)"
    );
    assert!(
        p >= alpha_cut,
        "adjust_truncated: p={p} below cut {alpha_cut}; detected nodes must not be adjusted"
    );
    if alpha_cut == 0.0 {
        return p;
    }
    ((p - alpha_cut) / (1.0 - alpha_cut)).clamp(0.0, 1.0)
}

/// Combines the adjusted p-values of a parent's undetected offspring into
/// the parent's p-value via Stouffer's Z score.
///
/// Panics on empty input: a parent with no undetected offspring is
/// auto-detected, never tested.
pub fn stouffer_parent_p(adjusted_ps: &[f64]) -> f64 {
    assert!(
        !adjusted_ps.is_empty(),
        "stouffer_parent_p: empty offspring set; auto-detect the parent instead"
    );
    let m = adjusted_ps.len() as f64;
    let z = adjusted_ps
        .iter()
        .map(|&p| {
            let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
            // Phi^{-1}(1 - p) = -Phi^{-1}(p), avoids 1-p cancellation
            -norm_quantile(p)
        })
        .sum::<f64>()
        / m.sqrt();
    norm_cdf(-z)
}

/// Inverse-CDF draw from Beta(1/beta, 1): the non-null p-value model with a
/// heavy right tail. `u` must come from Uniform(0,1).
pub fn beta_p_from_uniform(u: f64, beta: f64) -> f64 {
    assert!(beta >= 1.0, "beta effect size must be >= 1, got {beta}");
    u.powf(beta)
}

/// Gaussian-tailed non-null p-value model: p = 1 - Phi(X) with X ~ N(beta, 1),
/// realized through the inverse CDF so a single uniform drives the draw.
pub fn gaussian_p_from_uniform(u: f64, beta: f64) -> f64 {
    assert!(beta.is_finite(), "gaussian effect size must be finite");
    let u = u.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let x = beta + norm_quantile(u);
    norm_cdf(-x)
}

/// Draw from the beta model.
pub fn sample_beta_p(beta: f64, rng: &mut impl Rng) -> f64 {
    beta_p_from_uniform(rng.gen::<f64>(), beta)
}

/// Draw from the Gaussian-tailed model.
pub fn sample_gaussian_p(beta: f64, rng: &mut impl Rng) -> f64 {
    gaussian_p_from_uniform(rng.gen::<f64>(), beta)
}

/// Parent-test combination rule. Stouffer is the only implemented
/// combiner; the enum is the extension point for alternatives (Fisher's
/// method is deliberately not provided).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[non_exhaustive]
pub enum Combiner {
    #[default]
    Stouffer,
}

impl Combiner {
    pub fn combine(self, adjusted_ps: &[f64]) -> f64 {
        match self {
            Combiner::Stouffer => stouffer_parent_p(adjusted_ps),
        }
    }
}

/// Counter-style generator: every `(seed, stream, key)` triple opens an
/// independent, platform-stable ChaCha8 stream. Simulations key streams by
/// (seed, replicate, node) so results do not depend on evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamRng {
    seed: u64,
    stream: u64,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        StreamRng { seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Open the substream identified by `key`.
    pub fn substream(&self, key: u64) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.stream.to_le_bytes());
        bytes[16..24].copy_from_slice(&key.to_le_bytes());
        bytes[24..32].copy_from_slice(b"bouthrng");
        ChaCha8Rng::from_seed(bytes)
    }
}
