//! Frequency-domain evaluation of the harvested power.
//!
//! `J = (W / 2 pi) * integral over the real line of |H(i w)|^2 dw`, evaluated as
//! `(W / pi) * integral over [0, w_max]` since `|H|^2` is even. The integrand is
//! refined around every lightly damped pole; the cutoff `w_max` is pushed out
//! until the `c / w^4` envelope of the rolloff bounds the dropped tail below the
//! tolerance.
//!
//! Two transfer functions are available: the resolvent `C (i w I - A)^-1 B_xi`
//! of the state-space model, and the closed-form cascade `A B D / (1 - C D)` with
//! factors in the "paper" layout (see [`transfer_paper_literal`]). The two do not
//! agree; the state-space route is the one consistent with the covariance route.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{domain, Error, Result};
use crate::model::{eigenvalues, ensure_hurwitz, ControlGains, HarvesterParams, LoopStatus, StateSpaceModel};
use crate::quadrature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    #[default]
    Statespace,
    Paper,
}

/// Tolerances refer to the unit-intensity power `J / W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Subinterval budget before the adaptive scheme gives up.
    pub max_intervals: usize,
    /// The cutoff is never below this multiple of the fastest system frequency.
    pub omega_max_factor: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            max_intervals: 5000,
            omega_max_factor: 10.0,
        }
    }
}

impl QuadratureOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(domain("rel_tol", "must be positive"));
        }
        if !(self.abs_tol > 0.0 && self.abs_tol.is_finite()) {
            return Err(domain("abs_tol", "must be positive"));
        }
        if self.max_intervals == 0 {
            return Err(domain("max_intervals", "must be at least 1"));
        }
        if !(self.omega_max_factor >= 1.0 && self.omega_max_factor.is_finite()) {
            return Err(domain("omega_max_factor", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPower {
    /// Mean power `(W / 2 pi) * integral of |H|^2` over the real line.
    pub j: f64,
    /// The bare integral of `|H|^2` over the real line, without `W / 2 pi`.
    pub unnormalized: f64,
    /// Quadrature error estimate on `j`.
    pub error_estimate: f64,
    pub omega_max: f64,
    /// Envelope bound on the part of `j` beyond `omega_max`.
    pub tail_bound: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralCurve {
    pub omega: Vec<f64>,
    pub gain_sq: Vec<f64>,
}

impl SpectralCurve {
    /// Frequencies of interior grid points that exceed both neighbours.
    pub fn local_maxima(&self) -> Vec<f64> {
        self.gain_sq
            .windows(3)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0] && w[1] > w[2])
            .map(|(i, _)| self.omega[i + 1])
            .collect()
    }
}

fn resolvent_gain(m: &StateSpaceModel, omega: f64) -> Result<Complex64> {
    let n = m.order();
    let mut shifted: DMatrix<Complex64> = m.a.map(|x| Complex64::new(-x, 0.0));
    for i in 0..n {
        shifted[(i, i)] += Complex64::new(0.0, omega);
    }
    let rhs: DMatrix<Complex64> = m.b_xi.map(|x| Complex64::new(x, 0.0));
    let lu = shifted.lu();
    let diag = lu.u().diagonal();
    let max_pivot = diag.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let min_pivot = diag.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-14 * max_pivot) {
        return Err(Error::PoleOnGrid { omega });
    }
    let x = lu.solve(&rhs).ok_or(Error::PoleOnGrid { omega })?;
    let mut h = Complex64::new(0.0, 0.0);
    for i in 0..n {
        h += x[(i, 0)] * m.c[(0, i)];
    }
    Ok(h)
}

/// `C (i w I - A)^-1 B_xi` for a stable model.
pub fn transfer_statespace(m: &StateSpaceModel, omega: f64) -> Result<Complex64> {
    ensure_hurwitz(&m.a)?;
    resolvent_gain(m, omega)
}

/// The closed-form cascade `V / Xi = A B D / (1 - C D)` with
///
/// ```text
/// A(w) = 1 / (lambda^2 - w^2 + 2 zeta_s lambda w i)
/// B(w) = (w^2 - K_m) / (1 + K_m - w^2 + 2 zeta_h w i)
/// C(w) = -kappa^2 / (1 + K_m - w^2 + 2 zeta_h w i)
/// D(w) = w i / (alpha - K_e + w i)
/// ```
///
/// evaluated exactly as written. It differs from the state-space resolvent in
/// the `B` numerator and the `D` denominator.
pub fn transfer_paper_literal(p: &HarvesterParams, g: &ControlGains, omega: f64) -> Result<Complex64> {
    let i = Complex64::i();
    let w = Complex64::new(omega, 0.0);
    let w2 = omega * omega;
    let den_a = Complex64::new(p.lambda * p.lambda - w2, 2.0 * p.zeta_s * p.lambda * omega);
    let den_bc = Complex64::new(1.0 + g.km - w2, 2.0 * p.zeta_h * omega);
    let den_d = Complex64::new(p.alpha - g.ke, omega);
    let scale_a = p.lambda * p.lambda + w2;
    let scale_bc = 1.0 + g.km.abs() + w2;
    let scale_d = p.alpha.abs() + g.ke.abs() + omega.abs();
    for (den, scale) in [(den_a, scale_a), (den_bc, scale_bc), (den_d, scale_d)] {
        if den.norm() <= 4.0 * f64::EPSILON * scale {
            return Err(Error::PoleOnGrid { omega });
        }
    }
    let fa = den_a.inv();
    let fb = Complex64::new(w2 - g.km, 0.0) / den_bc;
    let fc = Complex64::new(-p.kappa * p.kappa, 0.0) / den_bc;
    let fd = i * w / den_d;
    let loop_den = Complex64::new(1.0, 0.0) - fc * fd;
    if loop_den.norm() <= 4.0 * f64::EPSILON * (1.0 + (fc * fd).norm()) {
        return Err(Error::PoleOnGrid { omega });
    }
    Ok(fa * fb * fd / loop_den)
}

/// A resonance (centre, half width) or a corner frequency (half width 0).
#[derive(Debug, Clone, Copy)]
struct Feature {
    center: f64,
    width: f64,
}

fn breakpoints(features: &[Feature], omega_floor: f64) -> Vec<f64> {
    let mut pts = vec![0.0, omega_floor];
    for f in features {
        let c = f.center;
        pts.push(c);
        for k in [1.0, 10.0] {
            pts.push(c - k * f.width);
            pts.push(c + k * f.width);
        }
    }
    pts.retain(|x| x.is_finite() && *x >= 0.0 && *x <= omega_floor);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1e-300));
    pts
}

/// Integrates `|H|^2` over `[0, inf)` and scales by `W / pi`.
fn power_integral<F>(
    gain_sq: F,
    features: &[Feature],
    scale: f64,
    w: f64,
    opts: &QuadratureOptions,
) -> Result<SpectralPower>
where
    F: Fn(f64) -> Result<f64>,
{
    opts.validate()?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(domain("W", format!("must be nonnegative and finite, got {w}")));
    }
    // tolerances are stated on the unit-intensity power J / W, so J scales exactly with W
    let to_j = 1.0 / PI;
    let omega_floor = opts.omega_max_factor * scale;

    let pts = breakpoints(features, omega_floor);
    let core = quadrature::integrate(&gain_sq, &pts, opts.abs_tol / to_j, opts.rel_tol, opts.max_intervals)?;

    // |H|^2 <= c / w^4 beyond the floor; the integral past w_max is at most c / (3 w_max^3)
    let mut envelope: f64 = 0.0;
    for k in 0..4 {
        let x = omega_floor * f64::from(1u32 << k);
        envelope = envelope.max(x.powi(4) * gain_sq(x)?);
    }
    envelope *= 2.0;
    let tail_tol = opts.abs_tol.min(opts.rel_tol * core.value.abs() * to_j) / to_j;
    let mut omega_max = omega_floor;
    if envelope > 0.0 && tail_tol > 0.0 {
        omega_max = omega_max.max((envelope / (1.5 * tail_tol)).cbrt());
    }

    let mut value = core.value;
    let mut error = core.error;
    let mut intervals = core.intervals;
    if omega_max > omega_floor {
        let mut ext_pts = vec![omega_floor];
        let mut x = omega_floor;
        while x * 4.0 < omega_max {
            x *= 4.0;
            ext_pts.push(x);
        }
        ext_pts.push(omega_max);
        let ext_tol = (opts.abs_tol / to_j).max(opts.rel_tol * core.value.abs());
        let ext = quadrature::integrate(&gain_sq, &ext_pts, ext_tol, opts.rel_tol, opts.max_intervals)?;
        value += ext.value;
        error += ext.error;
        intervals += ext.intervals;
    }
    let tail = if envelope > 0.0 {
        envelope / (3.0 * omega_max.powi(3))
    } else {
        0.0
    };

    Ok(SpectralPower {
        j: w / PI * value,
        unnormalized: 2.0 * value,
        error_estimate: w / PI * error,
        omega_max,
        tail_bound: w / PI * tail,
        intervals,
    })
}

fn model_features(m: &StateSpaceModel) -> Result<(Vec<Feature>, f64)> {
    let eig = eigenvalues(&m.a)?;
    let mut scale: f64 = 0.0;
    let mut features = Vec::with_capacity(eig.len());
    for z in &eig {
        scale = scale.max(z.norm());
        if z.im > 0.0 {
            features.push(Feature {
                center: z.im,
                width: z.re.abs(),
            });
        } else if z.im == 0.0 {
            features.push(Feature {
                center: z.re.abs(),
                width: 0.0,
            });
        }
    }
    if !matches!(m.loop_status, LoopStatus::Generic) {
        // lambda^2, 1 + K_m and alpha / (1 + K_e) read back from A
        let lambda = (-m.a[(1, 0)]).sqrt();
        let harvester = (-m.a[(3, 2)]).sqrt();
        let electrical = -m.a[(4, 4)];
        scale = scale.max(lambda).max(harvester).max(electrical);
    }
    Ok((features, scale))
}

/// Mean power from the state-space transfer function.
pub fn harvested_power_spectral(m: &StateSpaceModel, w: f64, opts: &QuadratureOptions) -> Result<SpectralPower> {
    ensure_hurwitz(&m.a)?;
    let (features, scale) = model_features(m)?;
    power_integral(
        |x| resolvent_gain(m, x).map(|h| h.norm_sqr()),
        &features,
        scale,
        w,
        opts,
    )
}

/// Mean power from the closed-form cascade of [`transfer_paper_literal`].
pub fn harvested_power_paper_literal(
    p: &HarvesterParams,
    g: &ControlGains,
    w: f64,
    opts: &QuadratureOptions,
) -> Result<SpectralPower> {
    p.validate()?;
    g.ensure_feasible()?;
    let corner = (p.alpha - g.ke).abs();
    let features = [
        Feature {
            center: p.lambda,
            width: p.zeta_s * p.lambda,
        },
        Feature {
            center: (1.0 + g.km).sqrt(),
            width: p.zeta_h,
        },
        Feature {
            center: g.km.sqrt(),
            width: 0.0,
        },
        Feature {
            center: corner,
            width: 0.0,
        },
    ];
    let scale = p
        .lambda
        .max((1.0 + g.km).sqrt())
        .max(corner)
        .max(p.alpha / (1.0 + g.ke));
    power_integral(
        |x| transfer_paper_literal(p, g, x).map(|h| h.norm_sqr()),
        &features,
        scale,
        w,
        opts,
    )
}

/// `|H(i w)|^2` of the state-space transfer function on a strictly increasing grid.
pub fn spectrum_curve(m: &StateSpaceModel, grid: &[f64]) -> Result<SpectralCurve> {
    if grid.is_empty() {
        return Err(domain("grid", "must be nonempty"));
    }
    if grid.iter().any(|x| !x.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(domain("grid", "must be finite and strictly increasing"));
    }
    ensure_hurwitz(&m.a)?;
    let gain_sq = grid
        .iter()
        .map(|&x| resolvent_gain(m, x).map(|h| h.norm_sqr()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralCurve {
        omega: grid.to_vec(),
        gain_sq,
    })
}

/// As [`spectrum_curve`] but using the closed-form cascade.
pub fn spectrum_curve_paper_literal(p: &HarvesterParams, g: &ControlGains, grid: &[f64]) -> Result<SpectralCurve> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(domain("grid", "must be nonempty and strictly increasing"));
    }
    let gain_sq = grid
        .iter()
        .map(|&x| transfer_paper_literal(p, g, x).map(|h| h.norm_sqr()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralCurve {
        omega: grid.to_vec(),
        gain_sq,
    })
}
