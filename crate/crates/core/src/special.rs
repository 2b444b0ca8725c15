//! Special functions used by the M-step and the Polya-Gamma sampler.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// log Φ(x) for the standard normal CDF, accurate in the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    let p = 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
    if p > 0.0 {
        p.ln()
    } else {
        // Mills-ratio asymptote for x << 0.
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}
