//! Random primitives for the Gibbs sampler and the simulator.
//!
//! All samplers take any `Rng`; in the model code that is always an
//! [`RngStream`](crate::rng::RngStream) so draws are reproducible per unit.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::special::log_norm_cdf;

/// Truncation point of the alternating-series sampler, 2/π rounded.
const PG_TRUNC: f64 = 0.64;

/// Draw from PG(1, c).
///
/// Uses the exact alternating-series rejection sampler for J*(1, z) with
/// z = |c|/2 and returns J*/4. Proposals come from a mixture of a truncated
/// inverse Gaussian on (0, t] and an exponential tail on (t, ∞).
pub fn pg_draw<R: Rng + ?Sized>(rng: &mut R, c: f64) -> Result<f64> {
    if !c.is_finite() {
        return Err(Error::NonFinite(format!("Polya-Gamma tilt {c}")));
    }
    Ok(pg_draw_unchecked(rng, c))
}

pub(crate) fn pg_draw_unchecked<R: Rng + ?Sized>(rng: &mut R, c: f64) -> f64 {
    let z = 0.5 * c.abs();
    let rate = 0.125 * PI * PI + 0.5 * z * z;
    let p_exp = pg_tail_mass(z, rate);
    loop {
        let x = if rng.random::<f64>() < p_exp {
            let e: f64 = Exp1.sample(rng);
            PG_TRUNC + e / rate
        } else {
            truncated_inverse_gaussian(rng, z)
        };
        let mut s = series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// Probability of proposing from the exponential tail, p / (p + q).
fn pg_tail_mass(z: f64, rate: f64) -> f64 {
    let t = PG_TRUNC;
    let b = (t * z - 1.0) / t.sqrt();
    let a = -(t * z + 1.0) / t.sqrt();
    let x0 = rate.ln() + rate * t;
    let xb = x0 - z + log_norm_cdf(b);
    let xa = x0 + z + log_norm_cdf(a);
    let q_over_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_over_p)
}

/// Inverse Gaussian with mean 1/z and shape 1, truncated to (0, t].
fn truncated_inverse_gaussian<R: Rng + ?Sized>(rng: &mut R, z: f64) -> f64 {
    let t = PG_TRUNC;
    if z < 1.0 / t {
        // Mean above the truncation point: accept-reject from the z = 0 case.
        loop {
            let x = loop {
                let e1: f64 = Exp1.sample(rng);
                let e2: f64 = Exp1.sample(rng);
                if e1 * e1 <= 2.0 * e2 / t {
                    let d = 1.0 + e1 * t;
                    break t / (d * d);
                }
            };
            if rng.random::<f64>() <= (-0.5 * z * z * x).exp() {
                return x;
            }
        }
    } else {
        let mu = 1.0 / z;
        loop {
            let n: f64 = StandardNormal.sample(rng);
            let y = n * n;
            let mu_y = mu * y;
            let mut x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x <= t {
                return x;
            }
        }
    }
}

/// n-th coefficient of the alternating series for the J*(1, 0) density,
/// using the left representation below the truncation point.
fn series_coef(n: u32, x: f64) -> f64 {
    let k = (f64::from(n) + 0.5) * PI;
    if x > PG_TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let h = f64::from(n) + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x).exp()
    } else {
        0.0
    }
}

/// Truncated sum-of-gammas representation of PG(1, c), for cross-checking
/// the exact sampler:
/// ω ≈ 1/(2π²) Σ_{k=1}^{terms} g_k / ((k − ½)² + c²/(4π²)), g_k ~ Exp(1).
pub fn pg_draw_truncated<R: Rng + ?Sized>(rng: &mut R, c: f64, terms: usize) -> Result<f64> {
    if !c.is_finite() {
        return Err(Error::NonFinite(format!("Polya-Gamma tilt {c}")));
    }
    let c2 = c * c / (4.0 * PI * PI);
    let mut sum = 0.0;
    for k in 1..=terms {
        let g: f64 = Exp1.sample(rng);
        let h = k as f64 - 0.5;
        sum += g / (h * h + c2);
    }
    Ok(sum / (2.0 * PI * PI))
}

/// E[PG(1, c)] = tanh(c/2) / (2c), with limit 1/4 at c = 0.
pub fn pg_mean(c: f64) -> f64 {
    if c.abs() < 1e-6 {
        0.25 - c * c / 48.0
    } else {
        (0.5 * c).tanh() / (2.0 * c)
    }
}

/// Var[PG(1, c)] = sech²(c/2) (sinh c − c) / (4c³), with limit 1/24 at c = 0.
pub fn pg_variance(c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-3 {
        let c2 = c * c;
        1.0 / 24.0 - c2 / 120.0 + 17.0 * c2 * c2 / 13440.0
    } else {
        let sech = 1.0 / (0.5 * c).cosh();
        sech * sech * (c.sinh() - c) / (4.0 * c * c * c)
    }
}

/// log of a Gamma(shape, 1) draw, stable for small shapes.
fn log_gamma_draw<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("shape checked").sample(rng);
        g.ln()
    } else {
        // G_a = G_{a+1} · U^{1/a}
        let g: f64 = Gamma::new(shape + 1.0, 1.0)
            .expect("shape checked")
            .sample(rng);
        let u: f64 = rng.random::<f64>();
        g.ln() + u.max(f64::MIN_POSITIVE).ln() / shape
    }
}

/// Dirichlet draw returned as (weights, log weights). Working in log space
/// keeps tiny components strictly positive.
pub fn dirichlet_draw_with_log<R: Rng + ?Sized>(
    rng: &mut R,
    params: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if params.is_empty() {
        return Err(Error::InvalidParameter("empty Dirichlet parameter".into()));
    }
    if let Some(a) = params.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "Dirichlet parameter {a} must be positive"
        )));
    }
    let mut logs: Vec<f64> = params.iter().map(|&a| log_gamma_draw(rng, a)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let log_total = total.ln();
    for (w, l) in weights.iter_mut().zip(logs.iter_mut()) {
        *w /= total;
        *l -= max + log_total;
    }
    Ok((weights, logs))
}

pub fn dirichlet_draw<R: Rng + ?Sized>(rng: &mut R, params: &[f64]) -> Result<Vec<f64>> {
    dirichlet_draw_with_log(rng, params).map(|(w, _)| w)
}

/// Multinomial draw by sequential conditional binomials. `weights` need not
/// be normalized; `total` is their sum.
pub(crate) fn multinomial_into<R: Rng + ?Sized>(
    rng: &mut R,
    trials: u64,
    weights: &[f64],
    total: f64,
    out: &mut [u64],
) {
    let mut remaining = trials;
    let mut mass = total;
    let last = weights.len() - 1;
    for (k, (&w, o)) in weights.iter().zip(out.iter_mut()).enumerate() {
        if remaining == 0 {
            *o = 0;
            continue;
        }
        if k == last {
            *o = remaining;
            remaining = 0;
            continue;
        }
        let p = if mass > 0.0 {
            (w / mass).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let draw = if p >= 1.0 {
            remaining
        } else if p <= 0.0 {
            0
        } else {
            Binomial::new(remaining, p).expect("p in (0,1)").sample(rng)
        };
        *o = draw;
        remaining -= draw;
        mass -= w;
    }
}

/// Multinomial(trials, probs). `probs` must be a probability vector (sum 1
/// within 1e-9, entries non-negative).
pub fn multinomial_draw<R: Rng + ?Sized>(
    rng: &mut R,
    trials: i64,
    probs: &[f64],
) -> Result<Vec<u64>> {
    if trials < 0 {
        return Err(Error::InvalidParameter(format!(
            "negative trial count {trials}"
        )));
    }
    if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::InvalidParameter(
            "multinomial probabilities must be non-negative".into(),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "multinomial probabilities sum to {total}"
        )));
    }
    let mut out = vec![0; probs.len()];
    // Put the last non-zero category last so the remainder never lands on a
    // zero-probability category.
    let last_nz = probs.iter().rposition(|&p| p > 0.0).expect("sum is 1");
    multinomial_into(
        rng,
        trials as u64,
        &probs[..=last_nz],
        total,
        &mut out[..=last_nz],
    );
    Ok(out)
}

/// Draw from N(mean, precision⁻¹) for a 2×2 symmetric positive-definite
/// precision matrix.
pub fn mvn2_draw<R: Rng + ?Sized>(
    rng: &mut R,
    mean: [f64; 2],
    precision: [[f64; 2]; 2],
) -> Result<[f64; 2]> {
    let [[p11, p12], [p21, p22]] = precision;
    if (p12 - p21).abs() > 1e-12 * p12.abs().max(p21.abs()).max(1.0) {
        return Err(Error::InvalidParameter(
            "precision matrix is not symmetric".into(),
        ));
    }
    let (l11, l21, l22) = cholesky2(p11, p12, p22)?;
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    // Solve Lᵀ x = z.
    let x2 = z2 / l22;
    let x1 = (z1 - l21 * x2) / l11;
    Ok([mean[0] + x1, mean[1] + x2])
}

/// Cholesky factor (l11, l21, l22) of [[a, b], [b, d]].
pub(crate) fn cholesky2(a: f64, b: f64, d: f64) -> Result<(f64, f64, f64)> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let l11 = a.sqrt();
    let l21 = b / l11;
    let r = d - l21 * l21;
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok((l11, l21, r.sqrt()))
}

#[inline]
pub fn bernoulli_draw<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

pub fn normal_draw<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + sd * z
}

pub fn poisson_draw<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    let x: f64 = Poisson::new(rate).expect("positive rate").sample(rng);
    x as u64
}

/// Negative binomial with mean `mean` and size (dispersion) `size`, drawn as
/// a gamma–Poisson mixture. Variance is mean + mean²/size.
pub fn negative_binomial_draw<R: Rng + ?Sized>(rng: &mut R, mean: f64, size: f64) -> u64 {
    let lambda: f64 = Gamma::new(size, mean / size)
        .expect("positive parameters")
        .sample(rng);
    poisson_draw(rng, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, UnitKind};

    fn rng(index: usize) -> RngStream {
        RngStream::for_unit(2024, UnitKind::Test, index, 0)
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn pg_mean_at_zero_and_two() {
        for (idx, c, expected) in [(0, 0.0, 0.25), (1, 2.0, 1f64.tanh() / 4.0)] {
            let mut r = rng(idx);
            let xs: Vec<f64> = (0..100_000).map(|_| pg_draw(&mut r, c).unwrap()).collect();
            assert!(xs.iter().all(|&x| x > 0.0));
            let (m, se) = mean_and_se(&xs);
            assert!(
                (m - expected).abs() < 3.0 * se,
                "c={c}: {m} vs {expected} (se {se})"
            );
        }
        assert!((pg_mean(2.0) - 0.190_398_538_99).abs() < 1e-9);
    }

    #[test]
    fn pg_is_symmetric_in_tilt_and_reproducible() {
        let a: Vec<f64> = {
            let mut r = rng(5);
            (0..50).map(|_| pg_draw(&mut r, 1.3).unwrap()).collect()
        };
        let b: Vec<f64> = {
            let mut r = rng(5);
            (0..50).map(|_| pg_draw(&mut r, -1.3).unwrap()).collect()
        };
        assert_eq!(a, b);
        assert!(pg_draw(&mut rng(0), f64::NAN).is_err());
    }

    #[test]
    fn truncated_representation_agrees_with_exact_sampler() {
        let c = 1.5;
        let mut r1 = rng(10);
        let mut r2 = rng(11);
        let exact: Vec<f64> = (0..40_000).map(|_| pg_draw(&mut r1, c).unwrap()).collect();
        let approx: Vec<f64> = (0..40_000)
            .map(|_| pg_draw_truncated(&mut r2, c, 200).unwrap())
            .collect();
        let (m1, se1) = mean_and_se(&exact);
        let (m2, se2) = mean_and_se(&approx);
        assert!((m1 - m2).abs() < 4.0 * (se1 * se1 + se2 * se2).sqrt());
        // Truncation drops a tail of mass ~ 1/(2π² · 200).
        assert!((m2 - pg_mean(c)).abs() < 4.0 * se2 + 3e-4);
    }

    #[test]
    fn pg_moment_formulas() {
        assert!((pg_variance(0.0) - 1.0 / 24.0).abs() < 1e-15);
        // Continuity of the series branch.
        assert!((pg_variance(1e-3 - 1e-12) - pg_variance(1e-3 + 1e-12)).abs() < 1e-9);
        assert!((pg_mean(1e-7) - pg_mean(2e-6)).abs() < 1e-10);
    }

    #[test]
    fn dirichlet_means() {
        let mut r = rng(20);
        let n = 100_000;
        let mut draws = vec![[0.0; 3]; n];
        for d in &mut draws {
            let w = dirichlet_draw(&mut r, &[1.0, 1.0, 1.0]).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            d.copy_from_slice(&w);
        }
        for k in 0..3 {
            let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let (m, se) = mean_and_se(&xs);
            assert!((m - 1.0 / 3.0).abs() < 3.0 * se);
        }
        let xs: Vec<f64> = (0..n)
            .map(|_| dirichlet_draw(&mut r, &[4.0, 2.0]).unwrap()[0])
            .collect();
        let (m, se) = mean_and_se(&xs);
        assert!((m - 2.0 / 3.0).abs() < 3.0 * se);
    }

    #[test]
    fn dirichlet_small_parameters_stay_positive() {
        let mut r = rng(21);
        for _ in 0..1000 {
            let (w, l) = dirichlet_draw_with_log(&mut r, &[1e-3, 1e-3, 5.0]).unwrap();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!(l.iter().all(|x| x.is_finite()));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(dirichlet_draw(&mut r, &[1.0, 0.0]).is_err());
        assert!(dirichlet_draw(&mut r, &[1.0, -2.0]).is_err());
    }

    #[test]
    fn multinomial_examples() {
        let mut r = rng(30);
        assert_eq!(
            multinomial_draw(&mut r, 0, &[0.3, 0.7]).unwrap(),
            vec![0, 0]
        );
        assert_eq!(
            multinomial_draw(&mut r, 5, &[1.0, 0.0]).unwrap(),
            vec![5, 0]
        );
        assert_eq!(
            multinomial_draw(&mut r, 5, &[0.0, 1.0, 0.0]).unwrap(),
            vec![0, 5, 0]
        );
        let n = 100_000;
        let d = multinomial_draw(&mut r, n, &[0.2, 0.8]).unwrap();
        assert_eq!(d.iter().sum::<u64>(), n as u64);
        let se = (n as f64 * 0.2 * 0.8).sqrt();
        assert!((d[0] as f64 - 20_000.0).abs() < 3.0 * se);
        assert!(multinomial_draw(&mut r, -1, &[1.0]).is_err());
        assert!(multinomial_draw(&mut r, 3, &[0.5, 0.6]).is_err());
        assert!(multinomial_draw(&mut r, 3, &[1.5, -0.5]).is_err());
    }

    #[test]
    fn mvn2_identity_covariance() {
        let mut r = rng(40);
        let n = 100_000;
        let xs: Vec<[f64; 2]> = (0..n)
            .map(|_| mvn2_draw(&mut r, [0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]).unwrap())
            .collect();
        let nf = n as f64;
        let c00 = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / nf;
        let c11 = xs.iter().map(|x| x[1] * x[1]).sum::<f64>() / nf;
        let c01 = xs.iter().map(|x| x[0] * x[1]).sum::<f64>() / nf;
        // SE of a variance estimate of N(0,1) is sqrt(2/n); of a covariance, sqrt(1/n).
        assert!((c00 - 1.0).abs() < 3.0 * (2.0 / nf).sqrt());
        assert!((c11 - 1.0).abs() < 3.0 * (2.0 / nf).sqrt());
        assert!(c01.abs() < 3.0 * (1.0 / nf).sqrt());
    }

    #[test]
    fn mvn2_mean() {
        let mut r = rng(41);
        let n = 100_000;
        let xs: Vec<[f64; 2]> = (0..n)
            .map(|_| mvn2_draw(&mut r, [1.0 / 6.0, 1.0 / 6.0], [[2.0, 1.0], [1.0, 2.0]]).unwrap())
            .collect();
        // Covariance is the inverse precision: diag 2/3.
        let se = (2.0 / 3.0 / n as f64).sqrt();
        for k in 0..2 {
            let m = xs.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            assert!((m - 1.0 / 6.0).abs() < 3.0 * se);
        }
    }

    #[test]
    fn mvn2_rejects_indefinite() {
        let mut r = rng(42);
        assert!(matches!(
            mvn2_draw(&mut r, [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]]),
            Err(Error::NotPositiveDefinite)
        ));
        assert!(mvn2_draw(&mut r, [0.0, 0.0], [[-1.0, 0.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn negative_binomial_moments() {
        let mut r = rng(50);
        let n = 10_000;
        let mean = 400.0;
        let xs: Vec<f64> = (0..n)
            .map(|_| negative_binomial_draw(&mut r, mean, 2.0) as f64)
            .collect();
        let (m, se) = mean_and_se(&xs);
        assert!((m - mean).abs() < 3.0 * se);
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let expected = mean + mean * mean / 2.0;
        assert!((v - expected).abs() < 0.1 * expected, "{v} vs {expected}");
    }
}
