//! Checks against references computed without the library's own numerics.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use veh_core::lyapunov::{mean_power, state_covariance};
use veh_core::model::{build_closed_loop, draw_feasible, is_hurwitz, ControlGains, HarvesterParams, StateSpaceModel};
use veh_core::sim::{discretize, simulate_power, Sampler, Scheme};

/// Characteristic polynomial coefficients `[1, c1, ..., cn]` of `a / |a|_F` by
/// Faddeev-LeVerrier. The positive rescaling leaves root signs unchanged.
fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let a = &(a / a.norm());
    let mut coeffs = vec![1.0];
    let mut m = DMatrix::<f64>::zeros(n, n);
    let eye = DMatrix::<f64>::identity(n, n);
    for k in 1..=n {
        m = a * &m + &eye * coeffs[k - 1];
        let c = -(a * &m).trace() / k as f64;
        coeffs.push(c);
    }
    coeffs
}

/// Routh test: all roots in the open left half plane iff the first column is positive.
fn routh_stable(coeffs: &[f64]) -> bool {
    let n = coeffs.len() - 1;
    let mut rows: Vec<Vec<f64>> = vec![
        coeffs.iter().step_by(2).copied().collect(),
        coeffs.iter().skip(1).step_by(2).copied().collect(),
    ];
    let width = rows[0].len();
    rows[1].resize(width, 0.0);
    for i in 2..=n {
        let (prev2, prev1) = (&rows[i - 2], &rows[i - 1]);
        if prev1[0] <= 0.0 {
            return false;
        }
        let mut row = vec![0.0; width];
        for j in 0..width - 1 {
            row[j] = (prev1[0] * prev2[j + 1] - prev2[0] * prev1[j + 1]) / prev1[0];
        }
        rows.push(row);
    }
    rows.iter().all(|r| r[0] > 0.0)
}

#[test]
fn routh_hurwitz_agrees_on_reference_gains() {
    for km in [0.1, 0.3, 0.5, 24.0] {
        for ke in [-0.9, 0.0, 900.0, 925.0, 950.0] {
            let m = build_closed_loop(&HarvesterParams::REFERENCE, &ControlGains::new(km, ke)).unwrap();
            assert!(routh_stable(&char_poly(&m.a)));
            assert!(is_hurwitz(&m).unwrap().stable);
        }
    }
}

/// Hurwitz test from the factored characteristic polynomial. The structure block
/// gives `s^2 + 2 zeta_s lambda s + lambda^2`; the harvester/circuit block gives
/// `c s^3 + a2 s^2 + a1 s + a0` with `c = 1 + K_e`, whose Routh condition
/// `a2 a1 - c a0 > 0` is expanded into a sum with no cancellation.
fn factored_stable(p: &HarvesterParams, g: &ControlGains) -> bool {
    let quadratic = p.zeta_s * p.lambda > 0.0 && p.lambda * p.lambda > 0.0;
    let c = 1.0 + g.ke;
    let k = 1.0 + g.km;
    let kappa_sq = p.kappa * p.kappa;
    let a2 = 2.0 * p.zeta_h * c + p.alpha;
    let a1 = k * c + 2.0 * p.zeta_h * p.alpha + kappa_sq;
    let a0 = k * p.alpha;
    let routh = 2.0 * p.zeta_h * c * (k * c + 2.0 * p.zeta_h * p.alpha + kappa_sq)
        + p.alpha * (2.0 * p.zeta_h * p.alpha + kappa_sq);
    quadratic && c > 0.0 && a2 > 0.0 && a1 > 0.0 && a0 > 0.0 && routh > 0.0
}

#[test]
fn routh_hurwitz_agrees_on_random_draws() {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let mut numeric = 0;
    for _ in 0..1000 {
        let (p, g) = draw_feasible(&mut rng);
        let m = build_closed_loop(&p, &g).unwrap();
        assert!(is_hurwitz(&m).unwrap().stable, "{p:?} {g:?}");
        assert!(factored_stable(&p, &g), "{p:?} {g:?}");
        // the unfactored Routh array cancels badly when pole magnitudes span many decades
        if g.ke > -0.99 && g.km > 1e-3 {
            assert!(routh_stable(&char_poly(&m.a)), "{p:?} {g:?}");
            numeric += 1;
        }
    }
    assert!(numeric > 300);
}

#[test]
fn factored_polynomial_matches_matrix() {
    let p = HarvesterParams::REFERENCE;
    let g = ControlGains::new(0.3, 925.0);
    let m = build_closed_loop(&p, &g).unwrap();
    let c = 1.0 + g.ke;
    let cubic = [
        1.0,
        (2.0 * p.zeta_h * c + p.alpha) / c,
        ((1.0 + g.km) * c + 2.0 * p.zeta_h * p.alpha + p.kappa * p.kappa) / c,
        (1.0 + g.km) * p.alpha / c,
    ];
    let quadratic = [1.0, 2.0 * p.zeta_s * p.lambda, p.lambda * p.lambda];
    let mut product = [0.0; 6];
    for (i, q) in quadratic.iter().enumerate() {
        for (j, r) in cubic.iter().enumerate() {
            product[i + j] += q * r;
        }
    }
    // the unscaled polynomial of A itself
    let n = 5;
    let mut coeffs = vec![1.0];
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        acc = &m.a * &acc + DMatrix::<f64>::identity(n, n) * coeffs[k - 1];
        coeffs.push(-(&m.a * &acc).trace() / k as f64);
    }
    for (a, b) in coeffs.iter().zip(product) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn routh_hurwitz_flags_negative_damping() {
    let mut a = build_closed_loop(&HarvesterParams::REFERENCE, &ControlGains::new(0.3, 925.0))
        .unwrap()
        .a;
    a[(3, 3)] = 0.05;
    let m = StateSpaceModel::generic(a.clone(), DMatrix::zeros(5, 1), DMatrix::zeros(1, 5)).unwrap();
    assert!(!routh_stable(&char_poly(&a)));
    assert!(!is_hurwitz(&m).unwrap().stable);
}

fn expm_taylor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..40 {
        term = &term * a / k as f64;
        sum += &term;
    }
    sum
}

#[test]
fn discretization_matches_taylor_simpson() {
    let h = 0.01;
    let w = 1.0;
    let m = build_closed_loop(&HarvesterParams::REFERENCE, &ControlGains::new(0.1, 900.0)).unwrap();
    let d = discretize(&m, h, w).unwrap();

    let a_d = expm_taylor(&(&m.a * h));
    assert!((&d.a_d - &a_d).norm() <= 1e-13 * a_d.norm());

    // Q_d = integral over [0, h] of e^{As} Q e^{A^T s} ds, composite Simpson
    let q = &m.b_xi * m.b_xi.transpose() * w;
    let panels = 400;
    let ds = h / panels as f64;
    let mut q_d = DMatrix::<f64>::zeros(5, 5);
    for k in 0..=panels {
        let e = expm_taylor(&(&m.a * (ds * k as f64)));
        let weight = if k == 0 || k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        q_d += (&e * &q * e.transpose()) * (weight * ds / 3.0);
    }
    assert!(
        (&d.q_d - &q_d).norm() <= 1e-10 * q_d.norm(),
        "{}",
        (&d.q_d - &q_d).norm()
    );
}

#[test]
fn sampled_covariance_matches_stationary_solution() {
    let p = HarvesterParams::REFERENCE;
    let m = build_closed_loop(&p, &ControlGains::new(0.3, 925.0)).unwrap();
    let target = state_covariance(&m, p.w).unwrap().p;
    let steps = 4_000_000;
    let burn = steps / 10;
    let batches = 32;
    let per_batch = (steps - burn) / batches;
    let mut sampler = Sampler::new(&m, p.w, 0.01, 99, Scheme::Exact).unwrap();
    for _ in 0..burn + (steps - burn) % batches {
        sampler.advance();
    }
    let mut batch_means = vec![[[0.0f64; 5]; 5]; batches];
    for means in batch_means.iter_mut() {
        for _ in 0..per_batch {
            let x = sampler.advance();
            for i in 0..5 {
                for j in 0..5 {
                    means[i][j] += x[i] * x[j];
                }
            }
        }
        for row in means.iter_mut() {
            for v in row.iter_mut() {
                *v /= per_batch as f64;
            }
        }
    }
    for i in 0..5 {
        for j in i..5 {
            let vals: Vec<f64> = batch_means.iter().map(|b| b[i][j]).collect();
            let mean = vals.iter().sum::<f64>() / batches as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
            let se = (var / batches as f64).sqrt();
            assert!(
                (mean - target[(i, j)]).abs() <= 4.0 * se,
                "P[{i}][{j}]: sampled {mean:e} +/- {se:e}, stationary {:e}",
                target[(i, j)]
            );
        }
    }
}

#[test]
fn halving_step_keeps_estimate() {
    let p = HarvesterParams::REFERENCE;
    let m = build_closed_loop(&p, &ControlGains::new(0.3, 925.0)).unwrap();
    let j = mean_power(&m, p.w).unwrap();
    let coarse = simulate_power(&m, p.w, 0.02, 1_000_000, 5, 0.1).unwrap();
    let fine = simulate_power(&m, p.w, 0.01, 2_000_000, 6, 0.1).unwrap();
    let se = coarse.std_error.hypot(fine.std_error);
    assert!((coarse.mean - fine.mean).abs() <= 3.0 * se, "{coarse:?} {fine:?}");
    assert!((fine.mean - j).abs() <= 3.0 * fine.std_error);
}
