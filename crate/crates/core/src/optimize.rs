//! Gain sweeps and simplex maximization of the mean harvested power.
//!
//! The search runs in `a = ln K_m`, `b = ln(1 + K_e)`, which maps the open
//! feasible set `K_m > 0, K_e > -1` onto the whole plane.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::lyapunov::mean_power;
use crate::model::{build_closed_loop, ControlGains, HarvesterParams};
use crate::spectral::{harvested_power_paper_literal, harvested_power_spectral, QuadratureOptions, TransferMode};

/// K_m values of the K_e-sweep figure.
pub const FIGURE_KM: [f64; 3] = [0.1, 0.3, 0.5];
/// K_e values of the K_m-sweep figure.
pub const FIGURE_KE: [f64; 3] = [900.0, 925.0, 950.0];

/// How a single power value is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Lyapunov,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Evaluator {
    pub method: Method,
    /// Only used by [`Method::Spectral`].
    pub transfer_mode: TransferMode,
    pub quadrature: QuadratureOptions,
}

impl Evaluator {
    pub fn lyapunov() -> Self {
        Self::default()
    }

    pub fn spectral(transfer_mode: TransferMode) -> Self {
        Self {
            method: Method::Spectral,
            transfer_mode,
            quadrature: QuadratureOptions::default(),
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.method, self.transfer_mode) {
            (Method::Lyapunov, _) => "lyapunov",
            (Method::Spectral, TransferMode::Statespace) => "spectral",
            (Method::Spectral, TransferMode::Paper) => "spectral_paper",
        }
    }

    pub fn power(&self, p: &HarvesterParams, g: &ControlGains) -> Result<f64> {
        match (self.method, self.transfer_mode) {
            (Method::Lyapunov, _) => mean_power(&build_closed_loop(p, g)?, p.w),
            (Method::Spectral, TransferMode::Statespace) => {
                Ok(harvested_power_spectral(&build_closed_loop(p, g)?, p.w, &self.quadrature)?.j)
            }
            (Method::Spectral, TransferMode::Paper) => {
                Ok(harvested_power_paper_literal(p, g, p.w, &self.quadrature)?.j)
            }
        }
    }
}

/// `n` points from `lo` to `hi` inclusive, evenly spaced in log.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (l, h) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| {
            if k == n - 1 {
                hi
            } else {
                (l + (h - l) * k as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// K_e axis of the figure sweeps: 200 points log-spaced over [1, 1e4].
pub fn figure_ke_grid() -> Vec<f64> {
    log_grid(1.0, 1e4, 200)
}

/// K_m axis of the figure sweeps: 200 points over (0, 1].
pub fn figure_km_grid() -> Vec<f64> {
    (1..=200).map(|k| k as f64 / 200.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub km_index: usize,
    pub ke_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub km_values: Vec<f64>,
    pub ke_values: Vec<f64>,
    /// `j[i][k]` is the power at `(km_values[i], ke_values[k])`; NaN marks a failed cell.
    pub j: Vec<Vec<f64>>,
    pub method: String,
    pub failures: Vec<CellFailure>,
}

impl SweepResult {
    /// Largest entry; ties go to the smallest `(i, k)` in lexicographic order.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in self.j.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                if v.is_finite() && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, k, v));
                }
            }
        }
        best.map(|(i, k, _)| (i, k))
    }

    /// Index of the best K_e for the K_m row `i`.
    pub fn argmax_over_ke(&self, i: usize) -> Option<usize> {
        first_max(self.j[i].iter().copied())
    }

    /// Index of the best K_m for the K_e column `k`.
    pub fn argmax_over_km(&self, k: usize) -> Option<usize> {
        first_max(self.j.iter().map(|row| row[k]))
    }

    /// Long format: one `K_m,K_e,J,method` row per cell, after `#` metadata lines.
    pub fn write_csv<W: Write>(&self, out: &mut W, params: &HarvesterParams) -> io::Result<()> {
        writeln!(
            out,
            "# params={}",
            serde_json::to_string(params).map_err(io::Error::other)?
        )?;
        writeln!(
            out,
            "# cells={} failures={}",
            self.km_values.len() * self.ke_values.len(),
            self.failures.len()
        )?;
        for f in &self.failures {
            writeln!(out, "# failed K_m[{}] K_e[{}]: {}", f.km_index, f.ke_index, f.message)?;
        }
        writeln!(out, "K_m,K_e,J,method")?;
        for (i, km) in self.km_values.iter().enumerate() {
            for (k, ke) in self.ke_values.iter().enumerate() {
                writeln!(out, "{km:.16e},{ke:.16e},{:.16e},{}", self.j[i][k], self.method)?;
            }
        }
        Ok(())
    }
}

fn first_max(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Evaluates the power on the grid product. Cells that fail are recorded as NaN
/// and listed in `failures`; the rest of the sweep continues.
pub fn sweep(p: &HarvesterParams, km_grid: &[f64], ke_grid: &[f64], evaluator: &Evaluator) -> Result<SweepResult> {
    p.validate()?;
    if km_grid.is_empty() || ke_grid.is_empty() {
        return Err(domain("grid", "sweep grids must be nonempty"));
    }
    for &km in km_grid {
        for &ke in ke_grid {
            ControlGains::new(km, ke).ensure_feasible()?;
        }
    }
    let cols = ke_grid.len();
    let cells: Vec<std::result::Result<f64, String>> = (0..km_grid.len() * cols)
        .into_par_iter()
        .map(|idx| {
            let g = ControlGains::new(km_grid[idx / cols], ke_grid[idx % cols]);
            evaluator.power(p, &g).map_err(|e| e.to_string())
        })
        .collect();
    let mut j = vec![vec![f64::NAN; cols]; km_grid.len()];
    let mut failures = Vec::new();
    for (idx, cell) in cells.into_iter().enumerate() {
        match cell {
            Ok(v) => j[idx / cols][idx % cols] = v,
            Err(message) => failures.push(CellFailure {
                km_index: idx / cols,
                ke_index: idx % cols,
                message,
            }),
        }
    }
    Ok(SweepResult {
        km_values: km_grid.to_vec(),
        ke_values: ke_grid.to_vec(),
        j,
        method: evaluator.label().to_string(),
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerOptions {
    pub max_iterations: usize,
    /// Convergence when the simplex diameter in `(ln K_m, ln(1 + K_e))` drops below this.
    pub tolerance: f64,
    /// Edge length of the starting simplex in transformed coordinates.
    pub initial_step: f64,
    /// Additional lattice starts beyond the supplied initial gains.
    pub lattice_starts: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 1e-6,
            initial_step: 0.5,
            lattice_starts: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub gains: ControlGains,
    #[serde(rename = "J")]
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub init: ControlGains,
    pub gains: ControlGains,
    #[serde(rename = "J")]
    pub j: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub gains_star: ControlGains,
    #[serde(rename = "J_star")]
    pub j_star: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best vertex after each iteration of the winning start.
    pub trace: Vec<TracePoint>,
    pub starts: Vec<StartSummary>,
}

pub fn to_search(g: &ControlGains) -> [f64; 2] {
    [g.km.ln(), g.ke.ln_1p()]
}

pub fn from_search(x: &[f64; 2]) -> ControlGains {
    ControlGains::new(x[0].exp(), x[1].exp_m1())
}

/// Extra starting gains `(K_m, K_e)`, taken in order.
const LATTICE: [(f64, f64); 8] = [
    (0.1, 915.0),
    (10.0, 0.0),
    (1.0, -0.9),
    (30.0, 9.0),
    (0.1, 0.0),
    (10.0, 99.0),
    (100.0, -0.9),
    (1.0, 99.0),
];

/// Single-start Nelder-Mead maximization from `init`.
pub fn maximize_from(p: &HarvesterParams, init: &ControlGains, opts: &OptimizerOptions) -> Result<OptimResult> {
    init.ensure_feasible()?;
    if !(opts.tolerance > 0.0) || !(opts.initial_step > 0.0) {
        return Err(domain("optimizer", "tolerance and initial_step must be positive"));
    }
    let evaluator = Evaluator::lyapunov();
    // infeasible or unstable points are simply worse than anything else
    let objective = |x: &[f64; 2]| -> f64 {
        let g = from_search(x);
        if !g.is_feasible() {
            return f64::NEG_INFINITY;
        }
        evaluator.power(p, &g).unwrap_or(f64::NEG_INFINITY)
    };
    let start = to_search(init);
    // the starting point itself must be valid
    evaluator.power(p, init)?;
    let run = nelder_mead(objective, start, opts);
    let gains_star = from_search(&run.best);
    Ok(OptimResult {
        gains_star,
        j_star: run.best_value,
        iterations: run.iterations,
        converged: run.converged,
        starts: vec![StartSummary {
            init: *init,
            gains: gains_star,
            j: run.best_value,
            iterations: run.iterations,
            converged: run.converged,
        }],
        trace: run.trace,
    })
}

/// Multi-start maximization: `init` plus `opts.lattice_starts` fixed lattice points.
/// Returns the best run; every start is summarized in `starts`.
pub fn maximize_gains(p: &HarvesterParams, init: &ControlGains, opts: &OptimizerOptions) -> Result<OptimResult> {
    let mut inits = vec![*init];
    inits.extend(
        LATTICE
            .iter()
            .take(opts.lattice_starts)
            .map(|&(km, ke)| ControlGains::new(km, ke)),
    );
    let mut best: Option<OptimResult> = None;
    let mut starts = Vec::with_capacity(inits.len());
    for g in &inits {
        let run = maximize_from(p, g, opts)?;
        starts.extend(run.starts.iter().cloned());
        if best.as_ref().is_none_or(|b| run.j_star > b.j_star) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one start");
    best.starts = starts;
    Ok(best)
}

struct SimplexRun {
    best: [f64; 2],
    best_value: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<TracePoint>,
}

fn diameter(simplex: &[[f64; 2]; 3]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..3 {
        for k in i + 1..3 {
            let dx = simplex[i][0] - simplex[k][0];
            let dy = simplex[i][1] - simplex[k][1];
            d = d.max(dx.hypot(dy));
        }
    }
    d
}

/// Maximizes `f` with the standard reflection/expansion/contraction/shrink moves.
fn nelder_mead<F: Fn(&[f64; 2]) -> f64>(f: F, start: [f64; 2], opts: &OptimizerOptions) -> SimplexRun {
    let step = opts.initial_step;
    let mut simplex = [start, [start[0] + step, start[1]], [start[0], start[1] + step]];
    let mut values = simplex.map(|x| f(&x));
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    let lerp = |a: &[f64; 2], b: &[f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];

    loop {
        // order best-first (descending value); stable sort keeps ties deterministic
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &k| values[k].total_cmp(&values[i]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);

        if diameter(&simplex) < opts.tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;

        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let worst = simplex[2];
        let reflected = lerp(&centroid, &worst, -1.0);
        let fr = f(&reflected);
        if fr > values[0] {
            let expanded = lerp(&centroid, &worst, -2.0);
            let fe = f(&expanded);
            if fe > fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr > values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            // outside contraction when the reflection beat the worst vertex, inside otherwise
            let (contracted, accept) = if fr > values[2] {
                let c = lerp(&centroid, &worst, -0.5);
                let fc = f(&c);
                ((c, fc), fc >= fr)
            } else {
                let c = lerp(&centroid, &worst, 0.5);
                let fc = f(&c);
                ((c, fc), fc > values[2])
            };
            if accept {
                simplex[2] = contracted.0;
                values[2] = contracted.1;
            } else {
                for i in 1..3 {
                    simplex[i] = lerp(&simplex[0], &simplex[i], 0.5);
                    values[i] = f(&simplex[i]);
                }
            }
        }
        let (bi, bv) = values.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
        trace.push(TracePoint {
            gains: from_search(&simplex[bi]),
            j: bv,
        });
    }
    SimplexRun {
        best: simplex[0],
        best_value: values[0],
        iterations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: HarvesterParams = HarvesterParams::REFERENCE;

    #[test]
    fn single_cell_sweep_matches_direct_call() {
        let r = sweep(&P, &[0.3], &[925.0], &Evaluator::lyapunov()).unwrap();
        let direct = mean_power(&build_closed_loop(&P, &ControlGains::new(0.3, 925.0)).unwrap(), 1.0).unwrap();
        assert_eq!(r.j[0][0], direct);
        assert_eq!(r.argmax(), Some((0, 0)));
        assert!(r.failures.is_empty());
    }

    #[test]
    fn sweep_rejects_infeasible_grid() {
        assert!(sweep(&P, &[0.0], &[1.0], &Evaluator::lyapunov()).is_err());
        assert!(sweep(&P, &[0.1], &[-1.0], &Evaluator::lyapunov()).is_err());
        assert!(sweep(&P, &[], &[1.0], &Evaluator::lyapunov()).is_err());
    }

    #[test]
    fn argmax_tie_breaks_to_smallest_index() {
        let r = SweepResult {
            km_values: vec![1.0, 2.0],
            ke_values: vec![1.0, 2.0],
            j: vec![vec![0.0, 3.0], vec![3.0, f64::NAN]],
            method: "lyapunov".into(),
            failures: vec![],
        };
        assert_eq!(r.argmax(), Some((0, 1)));
        assert_eq!(r.argmax_over_km(1), Some(0));
    }

    #[test]
    fn failed_cells_are_flagged() {
        // a three-interval budget cannot resolve the lightly damped peaks
        let ev = Evaluator {
            quadrature: QuadratureOptions {
                max_intervals: 3,
                ..QuadratureOptions::default()
            },
            ..Evaluator::spectral(TransferMode::Statespace)
        };
        let r = sweep(&P, &[0.1, 0.3], &[900.0], &ev).unwrap();
        assert_eq!(r.failures.len(), 2);
        assert!(r.j.iter().flatten().all(|v| v.is_nan()));
        assert_eq!(r.argmax(), None);
    }

    #[test]
    fn search_transform_round_trips() {
        for g in [
            ControlGains::new(0.1, 900.0),
            ControlGains::new(24.0, -0.95),
            ControlGains::new(1e-4, -1.0 + 1e-9),
        ] {
            let back = from_search(&to_search(&g));
            assert!((back.km - g.km).abs() <= 1e-14 * g.km);
            assert!((back.ke - g.ke).abs() <= 1e-12 * (1.0 + g.ke.abs()));
        }
    }

    #[test]
    fn simplex_finds_quadratic_peak() {
        let f = |x: &[f64; 2]| -(x[0] - 1.5).powi(2) - 3.0 * (x[1] + 0.5).powi(2) + 2.0;
        let run = nelder_mead(f, [0.0, 0.0], &OptimizerOptions::default());
        assert!(run.converged);
        assert!((run.best[0] - 1.5).abs() < 1e-6 && (run.best[1] + 0.5).abs() < 1e-6);
        assert!(run.trace.windows(2).all(|w| w[1].j >= w[0].j));
    }

    #[test]
    fn stationary_start_stays_put() {
        let first = maximize_from(&P, &ControlGains::new(20.0, -0.9), &OptimizerOptions::default()).unwrap();
        assert!(first.converged);
        let again = maximize_from(
            &P,
            &first.gains_star,
            &OptimizerOptions {
                initial_step: 1e-5,
                ..OptimizerOptions::default()
            },
        )
        .unwrap();
        assert!(again.converged);
        let a = to_search(&first.gains_star);
        let b = to_search(&again.gains_star);
        assert!(
            (a[0] - b[0]).abs() < 1e-5 && (a[1] - b[1]).abs() < 1e-5,
            "{a:?} vs {b:?}"
        );
        assert!(again.j_star >= first.j_star * (1.0 - 1e-12));
        assert!(again.iterations < 60, "{}", again.iterations);
    }

    #[test]
    fn result_invariants() {
        let r = maximize_gains(&P, &ControlGains::new(0.3, 925.0), &OptimizerOptions::default()).unwrap();
        assert!(r.gains_star.is_feasible());
        assert!(r.trace.iter().all(|t| t.j <= r.j_star));
        assert_eq!(r.starts.len(), 5);
        let json = serde_json::to_string(&r).unwrap();
        let back: OptimResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
