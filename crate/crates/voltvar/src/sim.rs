//! Closed-loop simulation of the incremental volt/var update
//! `q <- (1 - eps) q + eps h(q, v)` against a linear or full AC plant.

use nalgebra::DVector;
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::acpf::{self, SweepOptions};
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::orpf::{self, AdmmOptions, SolveStatus};
use crate::profiles::ProfileSet;
use crate::sensitivity::SensitivityModel;
use crate::surrogate::{certify, Regime, SurrogateSet};
use crate::textio;

/// Voltage feedback source for the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plant {
    /// Linearized voltage map (the model the certificates are stated for).
    Linear,
    /// Full AC power flow by sweep iteration.
    Ac,
}

impl Plant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Plant::Linear => "linear",
            Plant::Ac => "ac",
        }
    }

    pub fn parse(s: &str) -> Result<Plant> {
        match s {
            "linear" => Ok(Plant::Linear),
            "ac" => Ok(Plant::Ac),
            other => Err(Error::ModelInvalid(format!(
                "unknown plant `{other}` (expected `linear` or `ac`)"
            ))),
        }
    }
}

/// One incremental update. Both `q` and `h(q, v)` lie in the capability
/// boxes, so their convex combination does too; the final clamp only scrubs
/// floating-point drift and makes forward invariance exact.
pub fn step(
    set: &SurrogateSet,
    q: &DVector<f64>,
    v: &DVector<f64>,
    eps: f64,
) -> Result<DVector<f64>> {
    if !eps.is_finite() || !(0.0..=1.0).contains(&eps) {
        return Err(Error::EpsOutOfRange(eps));
    }
    let h = set.h_vec(q, v)?;
    let mut out = DVector::zeros(set.c());
    for n in 0..set.c() {
        let node = &set.nodes[n];
        out[n] = ((1.0 - eps) * q[n] + eps * h[n]).clamp(node.q_min, node.q_max);
    }
    Ok(out)
}

/// One update against the linear plant: the closed-loop map the stability
/// certificates talk about.
pub fn g_apply(
    set: &SurrogateSet,
    sens: &SensitivityModel,
    q: &DVector<f64>,
    eps: f64,
) -> Result<DVector<f64>> {
    let v = sens.gen_voltage(q)?;
    step(set, q, &v, eps)
}

#[derive(Debug, Clone)]
pub struct SimulationOptions {
    pub eps: f64,
    pub max_steps: usize,
    /// Stop once the update's infinity norm falls below this.
    pub residual_tol: f64,
    pub plant: Plant,
}

impl Default for SimulationOptions {
    fn default() -> SimulationOptions {
        SimulationOptions {
            eps: 0.5,
            max_steps: 500,
            residual_tol: 1e-8,
            plant: Plant::Linear,
        }
    }
}

/// Dispatch and generator-bus voltage at one time step.
#[derive(Debug, Clone)]
pub struct TraceState {
    pub t: usize,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    /// States 0..=T (the terminal state is included).
    pub states: Vec<TraceState>,
    /// `residuals[t] = ||q[t+1] - q[t]||_inf`; one entry per update.
    pub residuals: Vec<f64>,
}

impl SimulationTrace {
    pub fn final_q(&self) -> &DVector<f64> {
        &self.states.last().expect("trace has a terminal state").q
    }

    /// A run is classified divergent when it performed at least 200 updates
    /// and the residual never dropped below its initial value.
    pub fn is_divergent(&self) -> bool {
        if self.residuals.len() < 200 {
            return false;
        }
        let r0 = self.residuals[0];
        self.residuals.iter().take(200).all(|&r| r >= r0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSummary {
    pub converged: bool,
    /// Number of updates applied.
    pub steps: usize,
    pub final_residual: f64,
    /// Euclidean distance from the terminal dispatch to the reference
    /// dispatch-QP optimum, when one was supplied.
    pub distance_to_orpf: Option<f64>,
    pub eps: f64,
    pub regime: Regime,
}

impl TraceSummary {
    pub fn to_json_string(&self) -> Result<String> {
        textio::to_json_string(self)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Voltage feedback for the current dispatch. For the AC plant, `warm` is
/// the previous full complex profile and is replaced by the new one.
fn plant_voltage(
    model: &FeederModel,
    sens: &SensitivityModel,
    plant: Plant,
    q: &DVector<f64>,
    warm: &mut Vec<Complex<f64>>,
) -> Result<DVector<f64>> {
    match plant {
        Plant::Linear => sens.gen_voltage(q),
        Plant::Ac => {
            let sol = acpf::solve_from(model, q, warm, &SweepOptions::default())?;
            let v = sol.v_mag_at(model.generator_buses());
            *warm = sol.v;
            Ok(v)
        }
    }
}

/// Run the loop from `q0` at a fixed operating point until the residual
/// falls below tolerance or the step budget runs out. `model` and `sens`
/// must describe the same operating point (same injections). `q0` is
/// clamped into the capability boxes first.
pub fn run_closed_loop(
    model: &FeederModel,
    sens: &SensitivityModel,
    set: &SurrogateSet,
    q0: &DVector<f64>,
    q_ref: Option<&DVector<f64>>,
    opts: &SimulationOptions,
) -> Result<(SimulationTrace, TraceSummary)> {
    let c = set.c();
    if sens.c() != c || model.n_generators() != c || q0.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "set has {c} nodes, sensitivity {} generators, feeder {}, q0 {}",
            sens.c(),
            model.n_generators(),
            q0.len()
        )));
    }
    if !eps_ok(opts.eps) {
        return Err(Error::EpsOutOfRange(opts.eps));
    }

    let mut q = DVector::from_fn(c, |i, _| {
        q0[i].clamp(set.nodes[i].q_min, set.nodes[i].q_max)
    });
    let mut warm = vec![Complex::new(1.0, 0.0); model.n_buses()];
    let mut states = Vec::new();
    let mut residuals = Vec::new();
    let mut converged = false;

    for t in 0..opts.max_steps {
        let v = plant_voltage(model, sens, opts.plant, &q, &mut warm)?;
        let q_next = step(set, &q, &v, opts.eps)?;
        let residual = (&q_next - &q).amax();
        states.push(TraceState { t, q: q.clone(), v });
        residuals.push(residual);
        q = q_next;
        if residual < opts.residual_tol {
            converged = true;
            break;
        }
    }

    let v_end = plant_voltage(model, sens, opts.plant, &q, &mut warm)?;
    states.push(TraceState { t: residuals.len(), q: q.clone(), v: v_end });

    let summary = TraceSummary {
        converged,
        steps: residuals.len(),
        final_residual: *residuals.last().expect("at least one update"),
        distance_to_orpf: q_ref.map(|r| (&q - r).norm()),
        eps: opts.eps,
        regime: set.regime,
    };
    Ok((SimulationTrace { states, residuals }, summary))
}

fn eps_ok(eps: f64) -> bool {
    eps.is_finite() && (0.0..=1.0).contains(&eps)
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub q: DVector<f64>,
    /// Step size used for the iteration (99% of the certified maximum).
    pub eps: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Locate the closed-loop equilibrium under the linear plant by iterating
/// the certified update from the box centers. Fails with `Uncertified`
/// when the set admits no positive step size, and `NonContraction` when
/// the iteration refuses to settle within the budget.
pub fn find_fixed_point(set: &SurrogateSet, sens: &SensitivityModel) -> Result<FixedPoint> {
    let cert = certify(set, sens);
    if !cert.satisfied() {
        return Err(Error::Uncertified(format!(
            "no positive certified step size for regime {} (combined slope {:.6}, monotone {})",
            set.regime.as_str(),
            cert.combined_slope,
            cert.monotone_ok
        )));
    }
    let eps = 0.99 * cert.eps_max;
    let tol = 1e-13;
    let max_iter = 200_000;

    let mut q = DVector::from_fn(set.c(), |i, _| {
        0.5 * (set.nodes[i].q_min + set.nodes[i].q_max)
    });
    for it in 1..=max_iter {
        let q_next = g_apply(set, sens, &q, eps)?;
        let residual = (&q_next - &q).amax();
        q = q_next;
        if residual < tol {
            return Ok(FixedPoint { q, eps, iterations: it, residual });
        }
    }
    let residual = {
        let q_next = g_apply(set, sens, &q, eps)?;
        (&q_next - &q).amax()
    };
    Err(Error::NonContraction { residual })
}

// ---------------------------------------------------------------------------
// Time-varying runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TimeVaryingOptions {
    /// Updates applied inside each profile window (no early stopping, so
    /// every window costs the same).
    pub steps_per_window: usize,
    pub eps: f64,
    pub plant: Plant,
}

#[derive(Debug, Clone)]
pub struct TimeVaryingRecord {
    pub window: usize,
    /// Dispatch at the end of the window.
    pub q: DVector<f64>,
    /// Euclidean distance to the window's dispatch-QP optimum.
    pub distance_to_orpf: f64,
    /// Last update's infinity norm inside the window.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct TimeVaryingRun {
    pub records: Vec<TimeVaryingRecord>,
    pub mean_distance: f64,
}

/// Track a changing operating point: the dispatch carries over from one
/// profile window into the next while injections jump between windows.
pub fn time_varying_run(
    model: &FeederModel,
    sens: &SensitivityModel,
    set: &SurrogateSet,
    profiles: &ProfileSet,
    opts: &TimeVaryingOptions,
) -> Result<TimeVaryingRun> {
    if profiles.steps.is_empty() {
        return Err(Error::ModelInvalid("profile set has no steps".into()));
    }
    if opts.steps_per_window == 0 {
        return Err(Error::ModelInvalid("steps_per_window must be positive".into()));
    }
    if !eps_ok(opts.eps) {
        return Err(Error::EpsOutOfRange(opts.eps));
    }
    let c = set.c();
    if sens.c() != c || model.n_generators() != c {
        return Err(Error::DimensionMismatch(format!(
            "set has {c} nodes, sensitivity {} generators, feeder {}",
            sens.c(),
            model.n_generators()
        )));
    }

    let boxes = model.generator_boxes();
    let (v_lo, v_hi) = model.voltage_limits();
    let qp_opts = AdmmOptions::default();

    let mut q = DVector::from_fn(c, |i, _| {
        0.5 * (set.nodes[i].q_min + set.nodes[i].q_max)
    });
    let mut warm = vec![Complex::new(1.0, 0.0); model.n_buses()];
    let mut records = Vec::with_capacity(profiles.steps.len());
    let mut total = 0.0;

    for (w, ps) in profiles.steps.iter().enumerate() {
        let sens_w = sens.with_injections(&ps.p, &ps.q_load)?;
        let model_w = model.with_injections(&ps.p, &ps.q_load)?;

        let mut residual = f64::INFINITY;
        for _ in 0..opts.steps_per_window {
            let v = plant_voltage(&model_w, &sens_w, opts.plant, &q, &mut warm)?;
            let q_next = step(set, &q, &v, opts.eps)?;
            residual = (&q_next - &q).amax();
            q = q_next;
        }

        let prob = orpf::assemble(sens, &ps.p, &ps.q_load, &boxes, (&v_lo, &v_hi))?;
        let sol = orpf::solve_with(&prob, &qp_opts, None);
        match sol.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => return Err(Error::InfeasibleScenario { scenario: w }),
            SolveStatus::MaxIter => {
                return Err(Error::Numerical(format!(
                    "window {w}: dispatch solve stopped at the iteration cap (kkt {:.3e})",
                    sol.kkt_residual
                )))
            }
        }
        let distance = (&q - &sol.q_star).norm();
        total += distance;
        records.push(TimeVaryingRecord { window: w, q: q.clone(), distance_to_orpf: distance, residual });
    }

    let mean_distance = total / records.len() as f64;
    Ok(TimeVaryingRun { records, mean_distance })
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// `t,bus,q_pu,v_pu`, one row per (time step, generator bus).
pub fn write_trace_csv(path: &Path, trace: &SimulationTrace, gen_buses: &[usize]) -> Result<()> {
    let mut out = String::from("t,bus,q_pu,v_pu\n");
    for st in &trace.states {
        for (i, &bus) in gen_buses.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                st.t,
                bus,
                textio::float(st.q[i]),
                textio::float(st.v[i])
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// `window,distance_to_orpf,residual`, one row per profile window.
pub fn write_tracking_csv(path: &Path, run: &TimeVaryingRun) -> Result<()> {
    let mut out = String::from("window,distance_to_orpf,residual\n");
    for rec in &run.records {
        out.push_str(&format!(
            "{},{},{}\n",
            rec.window,
            textio::float(rec.distance_to_orpf),
            textio::float(rec.residual)
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
