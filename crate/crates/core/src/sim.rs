//! Seeded sample paths of the closed-loop system and time-averaged power.
//!
//! The default scheme samples the linear SDE exactly: `x[k+1] = A_d x[k] + w[k]`
//! with `A_d = exp(A h)` and `w[k] ~ N(0, Q_d)`, where `Q_d` is the noise
//! covariance accumulated over one step. Both come from one exponential of the
//! block matrix `[[-A, B W B^T], [0, A^T]] h`.
//!
//! Generator: `ChaCha12Rng` seeded through `SeedableRng::seed_from_u64`, normals
//! from the `StandardNormal` ziggurat sampler. Ensemble members use seeds mixed
//! from a base seed with SplitMix64 (see [`member_seed`]).

use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{ensure_hurwitz, ControlGains, HarvesterParams, LoopStatus, StateSpaceModel};

/// Recorded in every exported trajectory so results can be reproduced elsewhere.
pub const GENERATOR: &str = "rand_chacha 0.9 ChaCha12Rng::seed_from_u64 + rand_distr 0.5 StandardNormal (ziggurat)";

pub const DEFAULT_BURN_IN: f64 = 0.1;
pub const DEFAULT_BATCHES: usize = 32;
pub const MIN_BATCHES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Exact,
    EulerMaruyama,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Exact => "exact",
            Scheme::EulerMaruyama => "euler_maruyama",
        }
    }
}

/// One-step transition and noise covariance of the sampled system.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub a_d: DMatrix<f64>,
    pub q_d: DMatrix<f64>,
}

pub fn discretize(m: &StateSpaceModel, h: f64, w: f64) -> Result<Discretization> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(domain("h", format!("step must be positive and finite, got {h}")));
    }
    if !(w >= 0.0 && w.is_finite()) {
        return Err(domain("W", format!("must be nonnegative and finite, got {w}")));
    }
    ensure_hurwitz(&m.a)?;
    let n = m.order();
    let q = &m.b_xi * m.b_xi.transpose() * w;
    let mut block = DMatrix::<f64>::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-&m.a * h));
    block.view_mut((0, n), (n, n)).copy_from(&(&q * h));
    block.view_mut((n, n), (n, n)).copy_from(&(m.a.transpose() * h));
    let e = block.exp();
    if e.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            context: "discretize: matrix exponential overflowed",
        });
    }
    let a_d = e.view((n, n), (n, n)).transpose();
    let gamma = e.view((0, n), (n, n)).into_owned();
    let q_d = &a_d * gamma;
    let q_d = (&q_d + q_d.transpose()) * 0.5;
    Ok(Discretization { a_d, q_d })
}

/// Lower-triangular factor of `Q + 1e-15 tr(Q) I`.
fn noise_factor(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    let trace = q.trace();
    if trace == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let jittered = q + DMatrix::<f64>::identity(n, n) * (1e-15 * trace);
    let chol = jittered.cholesky().ok_or(Error::Numeric {
        context: "noise covariance is not positive semidefinite",
    })?;
    Ok(chol.l())
}

/// Sequential sampler; yields `x[1], x[2], ...` from `x[0] = 0`.
pub struct Sampler {
    n: usize,
    transition: Vec<f64>,
    /// Exact scheme: lower factor of `Q_d`, row-major. Euler-Maruyama: `B sqrt(W h)`.
    shaping: Vec<f64>,
    scheme: Scheme,
    state: Vec<f64>,
    next: Vec<f64>,
    noise: Vec<f64>,
    rng: ChaCha12Rng,
}

impl Sampler {
    pub fn new(m: &StateSpaceModel, w: f64, h: f64, seed: u64, scheme: Scheme) -> Result<Self> {
        let n = m.order();
        let (transition, shaping) = match scheme {
            Scheme::Exact => {
                let d = discretize(m, h, w)?;
                let l = noise_factor(&d.q_d)?;
                (row_major(&d.a_d), row_major(&l))
            }
            Scheme::EulerMaruyama => {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(domain("h", format!("step must be positive and finite, got {h}")));
                }
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(domain("W", format!("must be nonnegative and finite, got {w}")));
                }
                ensure_hurwitz(&m.a)?;
                let a_d = DMatrix::<f64>::identity(n, n) + &m.a * h;
                let b = &m.b_xi * (w * h).sqrt();
                (row_major(&a_d), b.as_slice().to_vec())
            }
        };
        Ok(Self {
            n,
            transition,
            shaping,
            scheme,
            state: vec![0.0; n],
            next: vec![0.0; n],
            noise: vec![0.0; n],
            rng: ChaCha12Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Advances one step and returns the new state.
    pub fn advance(&mut self) -> &[f64] {
        let n = self.n;
        for i in 0..n {
            let row = &self.transition[i * n..(i + 1) * n];
            self.next[i] = row.iter().zip(&self.state).map(|(a, x)| a * x).sum();
        }
        match self.scheme {
            Scheme::Exact => {
                for z in self.noise.iter_mut() {
                    *z = self.rng.sample(StandardNormal);
                }
                for i in 0..n {
                    let row = &self.shaping[i * n..i * n + i + 1];
                    self.next[i] += row.iter().zip(&self.noise).map(|(l, z)| l * z).sum::<f64>();
                }
            }
            Scheme::EulerMaruyama => {
                let z: f64 = self.rng.sample(StandardNormal);
                for i in 0..n {
                    self.next[i] += self.shaping[i] * z;
                }
            }
        }
        std::mem::swap(&mut self.state, &mut self.next);
        &self.state
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// A sampled path, including the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub step: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub loop_status: LoopStatus,
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    /// Wraps externally produced samples, `states` holding `dim` entries per row.
    pub fn from_states(step: f64, dim: usize, states: Vec<f64>, loop_status: LoopStatus) -> Result<Self> {
        if !(step > 0.0) {
            return Err(domain("step", "must be positive"));
        }
        if dim == 0 || states.is_empty() || !states.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values do not split into rows of {dim}",
                states.len()
            )));
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(domain("states", "non-finite entry"));
        }
        Ok(Self {
            step,
            seed: 0,
            scheme: Scheme::Exact,
            loop_status,
            dim,
            data: states,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Output column (last state), the voltage for harvester models.
    pub fn output(&self) -> impl Iterator<Item = f64> + '_ {
        self.states().map(|x| x[x.len() - 1])
    }

    /// Writes `t, x_s, dx_s, x_h, dx_h, v` rows behind `#` metadata lines.
    pub fn write_csv<W: Write>(&self, out: &mut W, params: Option<&HarvesterParams>) -> io::Result<()> {
        writeln!(out, "# seed={}", self.seed)?;
        writeln!(out, "# h={:.16e}", self.step)?;
        writeln!(out, "# scheme={}", self.scheme.as_str())?;
        writeln!(out, "# generator={GENERATOR}")?;
        if let Some(p) = params {
            writeln!(out, "# params={}", serde_json::to_string(p).map_err(io::Error::other)?)?;
        }
        writeln!(
            out,
            "# loop={}",
            serde_json::to_string(&self.loop_status).map_err(io::Error::other)?
        )?;
        let header = if self.dim == 5 {
            "t,x_s,dx_s,x_h,dx_h,v".to_string()
        } else {
            let cols: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
            format!("t,{}", cols.join(","))
        };
        writeln!(out, "{header}")?;
        for (k, x) in self.states().enumerate() {
            write!(out, "{:.16e}", k as f64 * self.step)?;
            for v in x {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Samples `n_steps` steps from rest; the trajectory holds `n_steps + 1` states.
pub fn simulate(m: &StateSpaceModel, w: f64, h: f64, n_steps: usize, seed: u64) -> Result<Trajectory> {
    simulate_with(m, w, h, n_steps, seed, Scheme::Exact)
}

pub fn simulate_with(
    m: &StateSpaceModel,
    w: f64,
    h: f64,
    n_steps: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(domain("n_steps", "must be at least 1"));
    }
    let mut sampler = Sampler::new(m, w, h, seed, scheme)?;
    let n = m.order();
    let mut data = Vec::with_capacity((n_steps + 1) * n);
    data.extend_from_slice(sampler.state());
    for _ in 0..n_steps {
        data.extend_from_slice(sampler.advance());
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            context: "simulate: trajectory diverged",
        });
    }
    Ok(Trajectory {
        step: h,
        seed,
        scheme,
        loop_status: m.loop_status,
        dim: n,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub mean: f64,
    /// Batch-means standard error of `mean`.
    pub std_error: f64,
    /// Leading samples excluded from the average.
    pub burn_in_steps: usize,
    pub batches: usize,
}

/// Batch-means accumulator over a stream of known length.
struct BatchMeans {
    skip: usize,
    batch_len: usize,
    batches: usize,
    seen: usize,
    current: f64,
    filled: usize,
    means: Vec<f64>,
}

impl BatchMeans {
    fn new(total: usize, burn_in: f64) -> Result<Self> {
        if !(0.0..=0.9).contains(&burn_in) {
            return Err(domain(
                "burn_in",
                format!("fraction must lie in [0, 0.9], got {burn_in}"),
            ));
        }
        let burn = (burn_in * total as f64).floor() as usize;
        let retained = total - burn;
        if retained < MIN_BATCHES {
            return Err(Error::TooShort {
                available: retained,
                required: MIN_BATCHES,
            });
        }
        let batches = DEFAULT_BATCHES.min(retained);
        let batch_len = retained / batches;
        // the remainder is dropped at the front so every batch has equal length
        let skip = total - batches * batch_len;
        Ok(Self {
            skip,
            batch_len,
            batches,
            seen: 0,
            current: 0.0,
            filled: 0,
            means: Vec::with_capacity(batches),
        })
    }

    fn push(&mut self, value: f64) {
        self.seen += 1;
        if self.seen <= self.skip {
            return;
        }
        self.current += value;
        self.filled += 1;
        if self.filled == self.batch_len {
            self.means.push(self.current / self.batch_len as f64);
            self.current = 0.0;
            self.filled = 0;
        }
    }

    fn finish(self) -> PowerEstimate {
        debug_assert_eq!(self.means.len(), self.batches);
        let b = self.batches as f64;
        let mean = self.means.iter().sum::<f64>() / b;
        let var = self.means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1.0);
        PowerEstimate {
            mean,
            std_error: (var / b).sqrt(),
            burn_in_steps: self.skip,
            batches: self.batches,
        }
    }
}

/// Average of `v^2` over the retained samples, with a batch-means standard error.
pub fn estimate_power(t: &Trajectory, burn_in: f64) -> Result<PowerEstimate> {
    let mut acc = BatchMeans::new(t.len(), burn_in)?;
    for v in t.output() {
        acc.push(v * v);
    }
    Ok(acc.finish())
}

/// Same result as `estimate_power(&simulate(..), burn_in)` without storing the path.
pub fn simulate_power(
    m: &StateSpaceModel,
    w: f64,
    h: f64,
    n_steps: usize,
    seed: u64,
    burn_in: f64,
) -> Result<PowerEstimate> {
    if n_steps == 0 {
        return Err(domain("n_steps", "must be at least 1"));
    }
    let mut acc = BatchMeans::new(n_steps + 1, burn_in)?;
    let mut sampler = Sampler::new(m, w, h, seed, Scheme::Exact)?;
    let out = m.order() - 1;
    let v = sampler.state()[out];
    acc.push(v * v);
    for _ in 0..n_steps {
        let v = sampler.advance()[out];
        acc.push(v * v);
    }
    let est = acc.finish();
    if !est.mean.is_finite() {
        return Err(Error::Numeric {
            context: "simulate: trajectory diverged",
        });
    }
    Ok(est)
}

/// SplitMix64 finalizer applied to `base + index * golden gamma`.
pub fn member_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `members` independent power estimates in parallel; results are in member order.
pub fn ensemble_power(
    m: &StateSpaceModel,
    w: f64,
    h: f64,
    n_steps: usize,
    base_seed: u64,
    members: usize,
    burn_in: f64,
) -> Result<Vec<(u64, PowerEstimate)>> {
    (0..members as u64)
        .into_par_iter()
        .map(|i| {
            let seed = member_seed(base_seed, i);
            simulate_power(m, w, h, n_steps, seed, burn_in).map(|e| (seed, e))
        })
        .collect()
}

/// Relative residuals of the lossless-control energy balance along a path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyAudit {
    /// `|integral of u_m dx_h/dt dt + delta(K_m x_h^2 / 2)|` over `integral of |u_m dx_h/dt| dt`.
    pub mech_residual: f64,
    /// `|integral of u_e v dt + delta(K_e v^2 / 2)|` over `integral of |u_e v| dt`.
    pub elec_residual: f64,
    /// Unscaled mechanical balance residual.
    pub mech_absolute: f64,
    /// Unscaled electrical balance residual.
    pub elec_absolute: f64,
}

/// Checks that the spring and capacitor feedback exchange energy without loss,
/// integrating the control power with the trapezoidal rule. `dv/dt` comes from
/// the closed-loop voltage equation, not from differencing samples.
pub fn energy_audit(t: &Trajectory, p: &HarvesterParams, g: &ControlGains) -> Result<EnergyAudit> {
    match t.loop_status {
        LoopStatus::Closed { gains } if gains == *g => {}
        other => {
            return Err(Error::Mismatch(format!(
                "trajectory was generated with {other:?}, audit requested for {g:?}"
            )))
        }
    }
    if t.dim() != 5 {
        return Err(Error::Dimension(format!("audit needs 5-state paths, got {}", t.dim())));
    }
    if t.len() < 2 {
        return Err(Error::TooShort {
            available: t.len(),
            required: 2,
        });
    }
    let h = t.step;
    let vdot = |x: &[f64]| (x[3] - p.alpha * x[4]) / (1.0 + g.ke);
    let mech_power = |x: &[f64]| -g.km * x[2] * x[3];
    let elec_power = |x: &[f64]| -g.ke * vdot(x) * x[4];

    let (mut mech, mut mech_abs, mut elec, mut elec_abs) = (0.0, 0.0, 0.0, 0.0);
    let mut prev = t.state(0);
    for x in t.states().skip(1) {
        let (pm0, pm1) = (mech_power(prev), mech_power(x));
        let (pe0, pe1) = (elec_power(prev), elec_power(x));
        mech += 0.5 * h * (pm0 + pm1);
        mech_abs += 0.5 * h * (pm0.abs() + pm1.abs());
        elec += 0.5 * h * (pe0 + pe1);
        elec_abs += 0.5 * h * (pe0.abs() + pe1.abs());
        prev = x;
    }
    let first = t.state(0);
    let last = t.state(t.len() - 1);
    let mech_storage = 0.5 * g.km * (last[2] * last[2] - first[2] * first[2]);
    let elec_storage = 0.5 * g.ke * (last[4] * last[4] - first[4] * first[4]);
    let relative = |residual: f64, scale: f64| if scale > 0.0 { residual.abs() / scale } else { 0.0 };
    Ok(EnergyAudit {
        mech_residual: relative(mech + mech_storage, mech_abs),
        elec_residual: relative(elec + elec_storage, elec_abs),
        mech_absolute: (mech + mech_storage).abs(),
        elec_absolute: (elec + elec_storage).abs(),
    })
}
