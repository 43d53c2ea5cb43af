//! Multiplicative gamma speckle: `Y = X · N` with `N ~ Gamma(shape L, rate L)`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{DseError, Result};
use crate::rng::CounterRng;
use crate::tile::{Tile, TileKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeckleParams {
    /// Equivalent number of looks.
    pub looks: f64,
    pub seed: u64,
}

impl SpeckleParams {
    pub fn new(looks: f64, seed: u64) -> Result<Self> {
        let p = Self { looks, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.looks > 0.0) || !self.looks.is_finite() {
            return Err(DseError::config(format!("looks must be positive, got {}", self.looks)));
        }
        Ok(())
    }
}

/// Draws from `Gamma(shape, 1)` with the Marsaglia–Tsang squeeze method.
/// Shapes below one use the `U^(1/shape)` boost.
pub fn sample_gamma_unit<R: RngCore + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.random::<f64>();
        return sample_gamma_unit(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let (mut x, mut v);
        loop {
            x = rng.sample::<f64, _>(StandardNormal);
            v = 1.0 + c * x;
            if v > 0.0 {
                break;
            }
        }
        v = v * v * v;
        let u: f64 = rng.random::<f64>();
        if u < 1.0 - 0.0331 * x * x * x * x || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Unit-mean speckle factor for pixel `index` under `params`.
#[inline]
pub fn speckle_factor(params: &SpeckleParams, index: u64) -> f64 {
    let mut rng = CounterRng::new(params.seed, index);
    sample_gamma_unit(params.looks, &mut rng) / params.looks
}

/// Multiplies every pixel of a clean intensity tile by independent gamma speckle.
///
/// The draw for pixel `i` depends only on `(seed, i)`.
pub fn simulate_speckle(clean: &Tile, params: &SpeckleParams) -> Result<Tile> {
    params.validate()?;
    if clean.kind() != TileKind::SarLinear {
        return Err(DseError::kind(format!(
            "speckle simulation expects SAR_LINEAR, got {:?}",
            clean.kind()
        )));
    }
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (x as f64 * speckle_factor(params, i as u64)) as f32)
        .collect();
    Tile::new(clean.width(), clean.height(), clean.channels(), TileKind::SarLinear, data)
}

/// Gamma speckle density `L^L n^(L-1) e^(-L n) / Γ(L)`.
pub fn speckle_pdf(n: f64, looks: f64) -> Result<f64> {
    if n < 0.0 || n.is_nan() {
        return Err(DseError::Domain(format!("speckle density undefined for n = {n}")));
    }
    if !(looks > 0.0) {
        return Err(DseError::config(format!("looks must be positive, got {looks}")));
    }
    if n == 0.0 {
        return Ok(if looks < 1.0 {
            f64::INFINITY
        } else if looks == 1.0 {
            1.0
        } else {
            0.0
        });
    }
    let log_p = looks * looks.ln() + (looks - 1.0) * n.ln() - looks * n - ln_gamma(looks);
    Ok(log_p.exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LooksEstimate {
    /// `mean² / variance`; `+∞` when the region has zero variance.
    pub looks: f64,
    pub zero_variance: bool,
}

/// Method-of-moments estimate of the equivalent number of looks over a
/// homogeneous region.
pub fn estimate_looks(region: &Tile) -> Result<LooksEstimate> {
    let n = region.data().len();
    if n < 100 {
        return Err(DseError::argument(format!(
            "look estimation needs at least 100 pixels, got {n}"
        )));
    }
    let mean = region.mean();
    if !(mean > 0.0) {
        return Err(DseError::Domain(format!("region mean must be positive, got {mean}")));
    }
    let var = region
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    if var == 0.0 {
        return Ok(LooksEstimate {
            looks: f64::INFINITY,
            zero_variance: true,
        });
    }
    Ok(LooksEstimate {
        looks: mean * mean / var,
        zero_variance: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(side: usize, v: f32) -> Tile {
        Tile::filled(side, side, 1, TileKind::SarLinear, v).unwrap()
    }

    fn moments(t: &Tile) -> (f64, f64) {
        let m = t.mean();
        let v = t.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / t.data().len() as f64;
        (m, v)
    }

    #[test]
    fn zero_clean_stays_zero() {
        let out = simulate_speckle(&constant(16, 0.0), &SpeckleParams::new(4.0, 1).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma4_moments_at_one_million_pixels() {
        let out = simulate_speckle(&constant(1000, 1.0), &SpeckleParams::new(4.0, 9).unwrap()).unwrap();
        let (m, v) = moments(&out);
        assert!((m - 1.0).abs() < 0.005, "mean {m}");
        assert!((v - 0.25).abs() < 0.01, "var {v}");
    }

    #[test]
    fn huge_looks_is_nearly_clean() {
        let out = simulate_speckle(&constant(64, 0.4), &SpeckleParams::new(1e6, 2).unwrap()).unwrap();
        let dev = out.data().iter().map(|&v| ((v - 0.4) / 0.4).abs()).fold(0.0, f32::max);
        assert!(dev < 0.01, "{dev}");
    }

    #[test]
    fn nonpositive_looks_rejected() {
        assert!(matches!(SpeckleParams::new(0.0, 1), Err(DseError::Config(_))));
        let bad = SpeckleParams { looks: -1.0, seed: 0 };
        assert!(matches!(simulate_speckle(&constant(4, 1.0), &bad), Err(DseError::Config(_))));
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let p = SpeckleParams::new(2.0, 77).unwrap();
        let a = simulate_speckle(&constant(32, 0.5), &p).unwrap();
        assert_eq!(a, simulate_speckle(&constant(32, 0.5), &p).unwrap());
    }

    #[test]
    fn pdf_point_values() {
        assert!((speckle_pdf(1.0, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(speckle_pdf(0.0, 1.0).unwrap(), 1.0);
        assert!(matches!(speckle_pdf(-0.5, 2.0), Err(DseError::Domain(_))));
    }

    /// Trapezoid quadrature on [0, 50] with step 1e-3.
    fn trapezoid(looks: f64) -> f64 {
        let h = 1e-3;
        let n = 50_000;
        let f = |x: f64| speckle_pdf(x, looks).unwrap();
        let mut s = 0.5 * (f(0.0) + f(50.0));
        for i in 1..n {
            s += f(i as f64 * h);
        }
        s * h
    }

    #[test]
    fn pdf_integrates_to_one() {
        assert!((trapezoid(4.0) - 1.0).abs() < 1e-4);
        assert!((trapezoid(16.0) - 1.0).abs() < 1e-4);
        assert!((trapezoid(1.0) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn looks_estimation() {
        let est = estimate_looks(&constant(16, 0.3)).unwrap();
        assert!(est.zero_variance && est.looks.is_infinite());

        let l4 = simulate_speckle(&constant(256, 0.8), &SpeckleParams::new(4.0, 5).unwrap()).unwrap();
        let e = estimate_looks(&l4).unwrap().looks;
        assert!((3.8..=4.2).contains(&e), "{e}");

        assert!(estimate_looks(&constant(5, 1.0)).is_err());
    }
}
