//! Learning pipeline: from daily profiles to per-node surrogate fits.
//!
//! Scenarios pair an operating condition (injections) with a random initial
//! generator dispatch; the dispatch QP labels each scenario with its
//! optimal setpoint. Every generator then gets its own regression dataset
//! `(v_n, q_n) -> q*_n`, fitted by full-batch projected gradient descent
//! with momentum. Projection after every step keeps the iterate inside the
//! certificate budget (slope caps, monotone signs), so any returned model
//! is certifiable by construction.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::orpf::{self, AdmmOptions, LabeledSolution, SolveStatus};
use crate::par::{par_map, par_map_idx};
use crate::profiles::ProfileSet;
use crate::sensitivity::SensitivityModel;
use crate::surrogate::{
    Activation, NodeSurrogate, Regime, ScalarShapeFunction, SignMode, SurrogateSet,
};
use crate::textio;

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: usize,
    /// Profile step this scenario's operating condition came from.
    pub step: usize,
    /// Active injections, buses 1..=N in bus order (possibly shrunk from
    /// the profile to restore feasibility).
    pub p: Vec<f64>,
    /// Load reactive injections, load order.
    pub q_load: Vec<f64>,
    /// Random initial generator dispatch inside the capability boxes.
    pub q_init: DVector<f64>,
}

/// Generate `samples_per_step` scenarios per profile step. Every step is
/// probed for dispatch feasibility first; an infeasible operating condition
/// is shrunk toward zero injections (factor 0.8, logged) until the QP
/// admits a solution, and given up after 20 shrinks.
pub fn generate_scenarios(
    model: &FeederModel,
    sens: &SensitivityModel,
    profiles: &ProfileSet,
    samples_per_step: usize,
    seed: u64,
) -> Result<Vec<Scenario>> {
    assert!(samples_per_step >= 1);
    let boxes = model.generator_boxes();
    let (v_lo, v_hi) = model.voltage_limits();
    let opts = AdmmOptions::default();

    // Probe steps in parallel; each probe is independent and pure.
    let probed: Vec<Result<(Vec<f64>, Vec<f64>)>> = par_map_idx(profiles.steps.len(), |t| {
        let step = &profiles.steps[t];
        let mut p = step.p.clone();
        let mut ql = step.q_load.clone();
        for attempt in 0..=20 {
            let prob = orpf::assemble(sens, &p, &ql, &boxes, (&v_lo, &v_hi))?;
            let sol = orpf::solve_with(&prob, &opts, None);
            match sol.status {
                SolveStatus::Infeasible => {
                    if attempt == 20 {
                        return Err(Error::InfeasibleScenario { scenario: t });
                    }
                    log::warn!(
                        "profile step {t}: dispatch infeasible, shrinking injections (attempt {})",
                        attempt + 1
                    );
                    for v in p.iter_mut().chain(ql.iter_mut()) {
                        *v *= 0.8;
                    }
                }
                _ => return Ok((p, ql)),
            }
        }
        unreachable!("loop returns")
    });

    // Initial dispatches are drawn sequentially so the stream is identical
    // regardless of thread count.
    let c = boxes.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(profiles.steps.len() * samples_per_step);
    for (t, probe) in probed.into_iter().enumerate() {
        let (p, ql) = probe?;
        for k in 0..samples_per_step {
            let q_init = DVector::from_fn(c, |i, _| {
                let (lo, hi) = boxes[i];
                rng.gen_range(lo..=hi)
            });
            out.push(Scenario {
                id: t * samples_per_step + k,
                step: t,
                p: p.clone(),
                q_load: ql.clone(),
                q_init,
            });
        }
    }
    Ok(out)
}

/// `id,step,bus,p_pu,q_pu,qinit_pu`, one row per (scenario, bus 1..=N).
/// `q_pu` is blank on generator buses; `qinit_pu` is blank on load buses.
pub fn write_scenarios_csv(path: &Path, scenarios: &[Scenario], model: &FeederModel) -> Result<()> {
    let mut out = String::from("id,step,bus,p_pu,q_pu,qinit_pu\n");
    for sc in scenarios {
        let mut load_idx = 0usize;
        let mut gen_idx = 0usize;
        for bus in 1..=model.n() {
            let is_gen = model.generator_buses().binary_search(&bus).is_ok();
            let (q, qinit) = if is_gen {
                let s = textio::float(sc.q_init[gen_idx]);
                gen_idx += 1;
                (String::new(), s)
            } else {
                let s = textio::float(sc.q_load[load_idx]);
                load_idx += 1;
                (s, String::new())
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                sc.id,
                sc.step,
                bus,
                textio::float(sc.p[bus - 1]),
                q,
                qinit
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_scenarios_csv(path: &Path, model: &FeederModel) -> Result<Vec<Scenario>> {
    let file = std::fs::File::open(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let n = model.n();
    let c = model.n_generators();
    let l = model.load_buses().len();
    let mut map: std::collections::BTreeMap<usize, Scenario> = std::collections::BTreeMap::new();
    let mut lineno = 0usize;
    for raw in BufReader::new(file).lines() {
        let raw = raw?;
        lineno += 1;
        let s = raw.trim_end_matches('\r');
        if lineno == 1 {
            if s != "id,step,bus,p_pu,q_pu,qinit_pu" {
                return Err(perr(1, format!("unexpected header `{s}`")));
            }
            continue;
        }
        if s.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = s.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(perr(lineno, format!("expected 6 fields, got {}", f.len())));
        }
        let id: usize = f[0].parse().map_err(|_| perr(lineno, format!("bad id `{}`", f[0])))?;
        let step: usize =
            f[1].parse().map_err(|_| perr(lineno, format!("bad step `{}`", f[1])))?;
        let bus: usize = f[2].parse().map_err(|_| perr(lineno, format!("bad bus `{}`", f[2])))?;
        if bus == 0 || bus > n {
            return Err(perr(lineno, format!("bus {bus} out of range")));
        }
        let p = textio::parse_float(f[3])
            .ok_or_else(|| perr(lineno, format!("bad p_pu `{}`", f[3])))?;
        let sc = map.entry(id).or_insert_with(|| Scenario {
            id,
            step,
            p: vec![f64::NAN; n],
            q_load: vec![f64::NAN; l],
            q_init: DVector::from_element(c, f64::NAN),
        });
        sc.step = step;
        sc.p[bus - 1] = p;
        if let Ok(gi) = model.generator_buses().binary_search(&bus) {
            let qi = textio::parse_float(f[5])
                .ok_or_else(|| perr(lineno, format!("generator bus {bus} needs qinit_pu")))?;
            sc.q_init[gi] = qi;
        } else {
            let qv = textio::parse_float(f[4])
                .ok_or_else(|| perr(lineno, format!("load bus {bus} needs q_pu")))?;
            let li = model.load_buses().binary_search(&bus).unwrap();
            sc.q_load[li] = qv;
        }
    }
    let out: Vec<Scenario> = map.into_values().collect();
    for sc in &out {
        if sc.p.iter().any(|v| v.is_nan())
            || sc.q_load.iter().any(|v| v.is_nan())
            || sc.q_init.iter().any(|v| v.is_nan())
        {
            return Err(Error::ModelInvalid(format!(
                "scenario {} is missing bus rows",
                sc.id
            )));
        }
    }
    if out.is_empty() {
        return Err(Error::ModelInvalid("no scenarios in file".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DataRow {
    pub v: f64,
    pub q: f64,
    pub q_star: f64,
}

#[derive(Debug, Clone)]
pub struct NodeDataset {
    pub bus: usize,
    pub q_min: f64,
    pub q_max: f64,
    pub rows: Vec<DataRow>,
}

#[derive(Debug)]
pub struct BuildOutput {
    pub datasets: Vec<NodeDataset>,
    /// One label record per scenario (scenarios of the same profile step
    /// share one QP solve).
    pub labels: Vec<LabeledSolution>,
}

/// Solve the dispatch QP for every scenario's operating condition and build
/// the per-node regression datasets. Scenarios sharing a profile step share
/// one solve; voltages come from the linear model at the scenario's initial
/// dispatch.
pub fn build_datasets(
    model: &FeederModel,
    sens: &SensitivityModel,
    scenarios: &[Scenario],
) -> Result<BuildOutput> {
    if scenarios.is_empty() {
        return Err(Error::ModelInvalid("no scenarios to label".into()));
    }
    let boxes = model.generator_boxes();
    let (v_lo, v_hi) = model.voltage_limits();
    let c = boxes.len();

    // Unique steps in first-appearance order.
    let mut step_ids: Vec<usize> = Vec::new();
    let mut step_repr: Vec<&Scenario> = Vec::new();
    {
        let mut seen = std::collections::BTreeMap::new();
        for sc in scenarios {
            seen.entry(sc.step).or_insert_with(|| {
                step_ids.push(sc.step);
                step_repr.push(sc);
            });
        }
    }

    let opts = AdmmOptions::default();
    let solved: Vec<Result<(orpf::OrpfSolution, SensitivityModel)>> =
        par_map(&step_repr, |sc| {
            let prob = orpf::assemble(sens, &sc.p, &sc.q_load, &boxes, (&v_lo, &v_hi))?;
            let sol = orpf::solve_with(&prob, &opts, None);
            match sol.status {
                SolveStatus::Infeasible => Err(Error::InfeasibleScenario { scenario: sc.id }),
                SolveStatus::MaxIter => Err(Error::Numerical(format!(
                    "dispatch for scenario {} stopped at the iteration cap (kkt {:.3e})",
                    sc.id, sol.kkt_residual
                ))),
                SolveStatus::Optimal => {
                    let at_point = sens.with_injections(&sc.p, &sc.q_load)?;
                    Ok((sol, at_point))
                }
            }
        });

    let mut by_step: std::collections::BTreeMap<usize, (orpf::OrpfSolution, SensitivityModel)> =
        std::collections::BTreeMap::new();
    for (k, res) in solved.into_iter().enumerate() {
        by_step.insert(step_ids[k], res?);
    }

    let mut datasets: Vec<NodeDataset> = model
        .generator_buses()
        .iter()
        .enumerate()
        .map(|(i, &bus)| NodeDataset {
            bus,
            q_min: boxes[i].0,
            q_max: boxes[i].1,
            rows: Vec::with_capacity(scenarios.len()),
        })
        .collect();
    let mut labels = Vec::with_capacity(scenarios.len());

    for sc in scenarios {
        let (sol, at_point) = &by_step[&sc.step];
        let v = at_point.gen_voltage(&sc.q_init)?;
        for i in 0..c {
            datasets[i].rows.push(DataRow {
                v: v[i],
                q: sc.q_init[i],
                q_star: sol.q_star[i],
            });
        }
        labels.push(LabeledSolution { scenario_id: sc.id, solution: sol.clone() });
    }

    Ok(BuildOutput { datasets, labels })
}

/// `dataset_<bus>.csv` with header `v_pu,q_pu,qstar_pu`.
pub fn write_dataset_csv(dir: &Path, ds: &NodeDataset) -> Result<()> {
    let mut out = String::from("v_pu,q_pu,qstar_pu\n");
    for r in &ds.rows {
        out.push_str(&format!(
            "{},{},{}\n",
            textio::float(r.v),
            textio::float(r.q),
            textio::float(r.q_star)
        ));
    }
    let path = dir.join(format!("dataset_{}.csv", ds.bus));
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Read every generator's dataset from a directory; capability boxes come
/// from the feeder model.
pub fn read_datasets(dir: &Path, model: &FeederModel) -> Result<Vec<NodeDataset>> {
    let boxes = model.generator_boxes();
    let mut out = Vec::new();
    for (i, &bus) in model.generator_buses().iter().enumerate() {
        let path = dir.join(format!("dataset_{bus}.csv"));
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let file = std::fs::File::open(&path).map_err(|e| {
            Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: format!("cannot open dataset for generator bus {bus}: {e}"),
            }
        })?;
        let mut rows = Vec::new();
        let mut lineno = 0usize;
        for raw in BufReader::new(file).lines() {
            let raw = raw?;
            lineno += 1;
            let s = raw.trim_end_matches('\r');
            if lineno == 1 {
                if s != "v_pu,q_pu,qstar_pu" {
                    return Err(perr(1, format!("unexpected header `{s}`")));
                }
                continue;
            }
            if s.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = s.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(perr(lineno, format!("expected 3 fields, got {}", f.len())));
            }
            let v = textio::parse_float(f[0])
                .ok_or_else(|| perr(lineno, format!("bad v_pu `{}`", f[0])))?;
            let q = textio::parse_float(f[1])
                .ok_or_else(|| perr(lineno, format!("bad q_pu `{}`", f[1])))?;
            let q_star = textio::parse_float(f[2])
                .ok_or_else(|| perr(lineno, format!("bad qstar_pu `{}`", f[2])))?;
            rows.push(DataRow { v, q, q_star });
        }
        if rows.is_empty() {
            return Err(perr(lineno.max(1), "dataset has no rows".into()));
        }
        out.push(NodeDataset { bus, q_min: boxes[i].0, q_max: boxes[i].1, rows });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FitHyper {
    pub hidden_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Lipschitz cap on each psi.
    pub psi_slope_cap: f64,
    /// Lipschitz cap on each phi; `None` leaves phi uncapped.
    pub phi_slope_cap: Option<f64>,
    /// Constrain each phi to be nonincreasing (weight sign pattern).
    pub phi_monotone: bool,
    /// `false` trains the voltage-only baseline: psi frozen at zero.
    pub psi_enabled: bool,
}

impl FitHyper {
    /// Certificate-respecting defaults. Under the contraction regime the
    /// slope budget `L_psi + L_phi ||X|| <= 0.95` is split 0.45 / 0.5; under
    /// the monotone regime phi is uncapped but sign-constrained and psi
    /// stays below 1 with margin.
    pub fn defaults_for(regime: Regime, x_norm: f64, seed: u64) -> FitHyper {
        assert!(x_norm > 0.0);
        let (psi_cap, phi_cap, monotone) = match regime {
            Regime::CvpSc => (0.45, Some(0.5 / x_norm), false),
            Regime::RpSc => (0.9, None, true),
        };
        FitHyper {
            hidden_size: 20,
            epochs: 5000,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed,
            psi_slope_cap: psi_cap,
            phi_slope_cap: phi_cap,
            phi_monotone: monotone,
            psi_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    /// Generator bus id.
    pub node: usize,
    /// Clamped-target mean squared error over the node's dataset.
    pub loss: f64,
    pub lipschitz_psi: f64,
    pub lipschitz_phi: f64,
}

/// Trainable parameter pair for one node. Exposed so gradients can be
/// checked independently of the optimizer.
#[derive(Debug, Clone)]
pub struct PairParams {
    pub psi: ScalarShapeFunction,
    pub phi: ScalarShapeFunction,
}

/// Gradient with the same layout as [`flatten_pair`].
pub type FlatVec = Vec<f64>;

/// Parameter layout: psi (w_in, b, w_out) then phi (w_in, b, w_out, offset).
/// psi's offset is not trainable (one shared offset is identifiable).
pub fn flatten_pair(pair: &PairParams) -> FlatVec {
    let mut out = Vec::new();
    out.extend_from_slice(&pair.psi.input_weights);
    out.extend_from_slice(&pair.psi.biases);
    out.extend_from_slice(&pair.psi.output_weights);
    out.extend_from_slice(&pair.phi.input_weights);
    out.extend_from_slice(&pair.phi.biases);
    out.extend_from_slice(&pair.phi.output_weights);
    out.push(pair.phi.offset);
    out
}

pub fn unflatten_pair(template: &PairParams, flat: &[f64]) -> PairParams {
    let hp = template.psi.hidden_size();
    let hf = template.phi.hidden_size();
    assert_eq!(flat.len(), 3 * hp + 3 * hf + 1);
    let mut pair = template.clone();
    pair.psi.input_weights.copy_from_slice(&flat[0..hp]);
    pair.psi.biases.copy_from_slice(&flat[hp..2 * hp]);
    pair.psi.output_weights.copy_from_slice(&flat[2 * hp..3 * hp]);
    let o = 3 * hp;
    pair.phi.input_weights.copy_from_slice(&flat[o..o + hf]);
    pair.phi.biases.copy_from_slice(&flat[o + hf..o + 2 * hf]);
    pair.phi.output_weights.copy_from_slice(&flat[o + 2 * hf..o + 3 * hf]);
    pair.phi.offset = flat[o + 3 * hf];
    pair
}

/// Raw (unclamped) mean squared error of `psi(q) + phi(v)` against the
/// labels. The optimizer minimizes this smooth objective; reported losses
/// use the clamped target instead.
pub fn raw_loss(pair: &PairParams, rows: &[DataRow]) -> f64 {
    let k = rows.len() as f64;
    rows.iter()
        .map(|r| {
            let e = pair.psi.eval(r.q) + pair.phi.eval(r.v) - r.q_star;
            e * e
        })
        .sum::<f64>()
        / k
}

/// Clamped-target mean squared error (the reported training-loss metric).
fn clamped_loss(pair: &PairParams, q_min: f64, q_max: f64, rows: &[DataRow]) -> f64 {
    let k = rows.len() as f64;
    rows.iter()
        .map(|r| {
            let h = (pair.psi.eval(r.q) + pair.phi.eval(r.v)).clamp(q_min, q_max);
            let e = h - r.q_star;
            e * e
        })
        .sum::<f64>()
        / k
}

/// Raw loss and its gradient in [`flatten_pair`] layout.
pub fn raw_loss_grad(pair: &PairParams, rows: &[DataRow]) -> (f64, FlatVec) {
    let hp = pair.psi.hidden_size();
    let hf = pair.phi.hidden_size();
    let mut grad = vec![0.0; 3 * hp + 3 * hf + 1];
    let kf = rows.len() as f64;
    let mut loss = 0.0;

    for r in rows {
        let up = (r.q + pair.psi.input_shift) * pair.psi.input_scale;
        let uf = (r.v + pair.phi.input_shift) * pair.phi.input_scale;
        let mut h = pair.psi.offset + pair.phi.offset;
        let mut tp = vec![0.0; hp];
        let mut tf = vec![0.0; hf];
        for i in 0..hp {
            tp[i] = (pair.psi.input_weights[i] * up + pair.psi.biases[i]).tanh();
            h += pair.psi.output_weights[i] * tp[i];
        }
        for i in 0..hf {
            tf[i] = (pair.phi.input_weights[i] * uf + pair.phi.biases[i]).tanh();
            h += pair.phi.output_weights[i] * tf[i];
        }
        let e = h - r.q_star;
        loss += e * e;
        let s = 2.0 * e / kf;
        for i in 0..hp {
            let sech2 = 1.0 - tp[i] * tp[i];
            let wder = pair.psi.output_weights[i] * sech2;
            grad[i] += s * wder * up; // d/d w_in
            grad[hp + i] += s * wder; // d/d b
            grad[2 * hp + i] += s * tp[i]; // d/d w_out
        }
        let o = 3 * hp;
        for i in 0..hf {
            let sech2 = 1.0 - tf[i] * tf[i];
            let wder = pair.phi.output_weights[i] * sech2;
            grad[o + i] += s * wder * uf;
            grad[o + hf + i] += s * wder;
            grad[o + 2 * hf + i] += s * tf[i];
        }
        grad[o + 3 * hf] += s; // d/d phi offset
    }
    (loss / kf, grad)
}

fn init_pair(ds: &NodeDataset, hyper: &FitHyper, rng: &mut ChaCha20Rng) -> PairParams {
    let h = hyper.hidden_size;
    let q_abs = ds.q_max.abs().max(ds.q_min.abs()).max(1e-9);
    let q_scale = 1.0 / q_abs;

    // Voltage span from the data, padded; degenerate data falls back to a
    // nominal band.
    let (mut v_lo, mut v_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &ds.rows {
        v_lo = v_lo.min(r.v);
        v_hi = v_hi.max(r.v);
    }
    if !(v_hi - v_lo).is_finite() || v_hi - v_lo < 1e-6 {
        v_lo = 0.9;
        v_hi = 1.1;
    }
    let pad = 0.1 * (v_hi - v_lo);
    let (u_lo_f, u_hi_f) = (v_lo - pad - 1.0, v_hi + pad - 1.0);

    let (mut t_lo, mut t_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &ds.rows {
        t_lo = t_lo.min(r.q_star);
        t_hi = t_hi.max(r.q_star);
    }
    let t_mid = 0.5 * (t_lo + t_hi);
    let t_range = (t_hi - t_lo).max(1e-6);

    // psi: kinks across the normalized box, zero output weights so the
    // full fit and the voltage-only baseline start from the same function.
    let mut psi = ScalarShapeFunction {
        input_weights: Vec::with_capacity(h),
        biases: Vec::with_capacity(h),
        output_weights: vec![0.0; h],
        offset: 0.0,
        input_shift: 0.0,
        input_scale: q_scale,
        activation: Activation::Tanh,
        sign_mode: SignMode::Free,
        slope_cap: Some(hyper.psi_slope_cap),
    };
    for _ in 0..h {
        let u0: f64 = rng.gen_range(-1.1..1.1);
        let mag = rng.gen_range(0.5..1.5);
        let sgn = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let w = sgn * mag;
        psi.input_weights.push(w);
        psi.biases.push(-w * u0);
    }

    // phi: kinks across the observed voltage span.
    let span = (u_hi_f - u_lo_f).max(1e-6);
    let w_base = 2.0 / span;
    let mut phi = ScalarShapeFunction {
        input_weights: Vec::with_capacity(h),
        biases: Vec::with_capacity(h),
        output_weights: Vec::with_capacity(h),
        offset: t_mid,
        input_shift: -1.0,
        input_scale: 1.0,
        activation: Activation::Tanh,
        sign_mode: if hyper.phi_monotone {
            SignMode::Nonincreasing
        } else {
            SignMode::Free
        },
        slope_cap: hyper.phi_slope_cap,
    };
    for _ in 0..h {
        let u0 = rng.gen_range(u_lo_f..u_hi_f);
        let mag = rng.gen_range(0.5..1.5) * w_base;
        let w_in = if hyper.phi_monotone {
            mag
        } else if rng.gen::<bool>() {
            mag
        } else {
            -mag
        };
        let out_mag = rng.gen_range(0.0..(2.0 * t_range / h as f64));
        let w_out = if hyper.phi_monotone {
            -out_mag
        } else if rng.gen::<bool>() {
            out_mag
        } else {
            -out_mag
        };
        phi.input_weights.push(w_in);
        phi.biases.push(-w_in * u0);
        phi.output_weights.push(w_out);
    }

    psi.project_to_constraints();
    phi.project_to_constraints();
    PairParams { psi, phi }
}

fn fit_node(ds: &NodeDataset, hyper: &FitHyper) -> Result<(NodeSurrogate, Vec<TrainLogRow>)> {
    // Derive the node stream from the shared seed and the bus id so the
    // result does not depend on scheduling.
    let node_seed = hyper
        .seed
        .wrapping_add((ds.bus as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha20Rng::seed_from_u64(node_seed);
    let mut pair = init_pair(ds, hyper, &mut rng);
    if !hyper.psi_enabled {
        // Freeze psi at the zero function (weights already zero at init).
        pair.psi.output_weights.iter_mut().for_each(|w| *w = 0.0);
    }

    let dim = flatten_pair(&pair).len();
    let mut velocity = vec![0.0; dim];
    let mut logs = Vec::with_capacity(hyper.epochs + 1);

    let log_epoch = |epoch: usize, pair: &PairParams, logs: &mut Vec<TrainLogRow>| -> f64 {
        let loss = clamped_loss(pair, ds.q_min, ds.q_max, &ds.rows);
        logs.push(TrainLogRow {
            epoch,
            node: ds.bus,
            loss,
            lipschitz_psi: pair.psi.lipschitz_bound(),
            lipschitz_phi: pair.phi.lipschitz_bound(),
        });
        loss
    };

    let mut best_loss = log_epoch(0, &pair, &mut logs);
    let mut best_pair = pair.clone();

    let psi_len = 3 * pair.psi.hidden_size();
    for epoch in 1..=hyper.epochs {
        let (raw, grad) = raw_loss_grad(&pair, &ds.rows);
        if !raw.is_finite() {
            return Err(Error::TrainingDiverged { node: ds.bus, epoch });
        }
        let mut flat = flatten_pair(&pair);
        for i in 0..dim {
            let g = if !hyper.psi_enabled && i < psi_len { 0.0 } else { grad[i] };
            velocity[i] = hyper.momentum * velocity[i] - hyper.learning_rate * g;
            flat[i] += velocity[i];
        }
        pair = unflatten_pair(&pair, &flat);
        pair.psi.project_to_constraints();
        pair.phi.project_to_constraints();

        // Per-epoch audit: the projected iterate must stay certifiable.
        pair.psi.validate()?;
        pair.phi.validate()?;

        let loss = log_epoch(epoch, &pair, &mut logs);
        if loss < best_loss {
            best_loss = loss;
            best_pair = pair.clone();
        }
    }

    Ok((
        NodeSurrogate {
            bus: ds.bus,
            q_min: ds.q_min,
            q_max: ds.q_max,
            psi: best_pair.psi,
            phi: best_pair.phi,
        },
        logs,
    ))
}

/// Fit one surrogate per dataset (in parallel across nodes). Returns the
/// set and the per-node, per-epoch training log (node-major order).
pub fn fit(
    datasets: &[NodeDataset],
    regime: Regime,
    hyper: &FitHyper,
) -> Result<(SurrogateSet, Vec<TrainLogRow>)> {
    if datasets.is_empty() {
        return Err(Error::ModelInvalid("no datasets to fit".into()));
    }
    let fitted: Vec<Result<(NodeSurrogate, Vec<TrainLogRow>)>> =
        par_map(datasets, |ds| fit_node(ds, hyper));
    let mut nodes = Vec::with_capacity(datasets.len());
    let mut logs = Vec::new();
    for r in fitted {
        let (node, mut l) = r?;
        nodes.push(node);
        logs.append(&mut l);
    }
    let set = SurrogateSet { regime, nodes };
    set.validate()?;
    Ok((set, logs))
}

/// Global training-loss metric: mean squared clamped-target error over all
/// nodes and rows.
pub fn training_loss(set: &SurrogateSet, datasets: &[NodeDataset]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (node, ds) in set.nodes.iter().zip(datasets) {
        for r in &ds.rows {
            let e = node.h(r.q, r.v) - r.q_star;
            total += e * e;
            count += 1;
        }
    }
    total / count as f64
}

/// One JSON object per line, in log order.
pub fn write_train_log_jsonl(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&textio::to_json_string(row)?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
