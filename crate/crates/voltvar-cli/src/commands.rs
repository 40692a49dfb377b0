//! One function per pipeline stage. Every command is a pure function of
//! (input files, config, seed): reruns produce byte-identical artifacts.

use clap::Args;
use nalgebra::DVector;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use voltvar::feeder::{synthetic_feeder, FeederModel, SyntheticFeederOptions};
use voltvar::orpf::{self, AdmmOptions, SolveStatus};
use voltvar::profiles::{ProfileSet, SyntheticProfileOptions};
use voltvar::sensitivity::{build_sensitivity, SensitivityModel};
use voltvar::sim::{
    self, Plant, SimulationOptions, TimeVaryingOptions,
};
use voltvar::surrogate::{certify, jacobian_spectral_radius, Regime, StabilityCertificate, SurrogateSet};
use voltvar::train::{self, FitHyper, TrainLogRow};
use voltvar::{format_float, to_json_string, Error, Result};

use crate::config::{
    f64_opt, f64_or, need_path, path_or, positive, str_or, u64_or, usize_or, RunConfig,
};

fn load_model(feeder: Option<PathBuf>, buses: Option<PathBuf>, cfg: &RunConfig) -> Result<FeederModel> {
    let lines_path = need_path(feeder, cfg, "feeder")?;
    let buses_path = need_path(buses, cfg, "buses")?;
    FeederModel::from_csv_files(&lines_path, &buses_path)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for lines.csv, buses.csv, profiles.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generator placement: deep | wide.
    #[arg(long)]
    placement: Option<String>,
    /// Number of daily profile steps.
    #[arg(long)]
    steps: Option<usize>,
}

pub fn cmd_synth(args: SynthArgs, cfg: &RunConfig) -> Result<()> {
    let out = need_path(args.out, cfg, "out")?;
    let seed = u64_or(args.seed, cfg, "seed", 1)?;
    let placement = str_or(args.placement, cfg, "placement", "deep");
    let steps = usize_or(args.steps, cfg, "steps", 1440)?;
    if steps == 0 {
        return Err(Error::ModelInvalid("`steps` must be positive".into()));
    }
    let fopts = match placement.as_str() {
        "deep" => SyntheticFeederOptions::deep(seed),
        "wide" => SyntheticFeederOptions::wide(seed),
        other => {
            return Err(Error::ModelInvalid(format!(
                "unknown placement `{other}` (expected `deep` or `wide`)"
            )))
        }
    };
    let model = synthetic_feeder(&fopts);
    // Offset seed: feeder impedances and day profiles draw from
    // independent streams while staying pinned to one --seed.
    let popts = SyntheticProfileOptions {
        seed: seed.wrapping_add(1),
        steps,
        ..Default::default()
    };
    let profiles = ProfileSet::synthetic_daily(&model, &popts);

    std::fs::create_dir_all(&out)?;
    model.write_lines_csv(&out.join("lines.csv"))?;
    model.write_buses_csv(&out.join("buses.csv"))?;
    profiles.write_csv(&out.join("profiles.csv"), &model)?;
    println!("buses = {}", model.n_buses());
    println!("generators = {}", model.n_generators());
    println!("profile_steps = {steps}");
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct BuildArgs {
    /// Line records CSV (`from,to,r_pu,x_pu`).
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Bus records CSV (`id,kind,p_pu,q_pu,qmin_pu,qmax_pu,vmin_pu,vmax_pu`).
    #[arg(long)]
    buses: Option<PathBuf>,
    /// Output directory for sensitivity.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn cmd_build(args: BuildArgs, cfg: &RunConfig) -> Result<()> {
    let out = need_path(args.out, cfg, "out")?;
    let model = load_model(args.feeder, args.buses, cfg)?;
    let sens = build_sensitivity(&model)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join("sensitivity.json");
    sens.write_json(&path)?;

    let min_r = sens.rtilde().clone().symmetric_eigen().eigenvalues.min();
    let min_x = sens.xtilde().clone().symmetric_eigen().eigenvalues.min();
    println!("x_norm = {}", format_float(sens.x_norm()));
    println!("lambda_min_rtilde = {}", format_float(min_r));
    println!("lambda_min_xtilde = {}", format_float(min_x));
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// label
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct LabelArgs {
    #[arg(long)]
    feeder: Option<PathBuf>,
    #[arg(long)]
    buses: Option<PathBuf>,
    /// Injection profiles CSV (`step,bus,p_pu,q_pu`).
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Output directory for scenarios.csv, labels.csv, dataset_<bus>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenarios sampled per profile step (0 writes empty artifacts).
    #[arg(long)]
    samples: Option<usize>,
}

pub fn cmd_label(args: LabelArgs, cfg: &RunConfig) -> Result<()> {
    let out = need_path(args.out, cfg, "out")?;
    let model = load_model(args.feeder, args.buses, cfg)?;
    let sens = build_sensitivity(&model)?;
    let ppath = need_path(args.profiles, cfg, "profiles")?;
    let profiles = ProfileSet::read_csv(&ppath, &model)?;
    let seed = u64_or(args.seed, cfg, "seed", 1)?;
    let samples = usize_or(args.samples, cfg, "samples", 5)?;

    std::fs::create_dir_all(&out)?;
    let scenarios = if samples == 0 {
        Vec::new()
    } else {
        train::generate_scenarios(&model, &sens, &profiles, samples, seed)?
    };
    train::write_scenarios_csv(&out.join("scenarios.csv"), &scenarios, &model)?;
    if scenarios.is_empty() {
        orpf::write_labels_csv(&out.join("labels.csv"), &[], model.generator_buses())?;
        println!("scenarios = 0");
        println!("wrote {}", out.display());
        return Ok(());
    }
    let built = train::build_datasets(&model, &sens, &scenarios)?;
    orpf::write_labels_csv(&out.join("labels.csv"), &built.labels, model.generator_buses())?;
    for ds in &built.datasets {
        train::write_dataset_csv(&out, ds)?;
    }
    println!("scenarios = {}", scenarios.len());
    println!("labels = {}", built.labels.len());
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    feeder: Option<PathBuf>,
    #[arg(long)]
    buses: Option<PathBuf>,
    /// Directory holding dataset_<bus>.csv files (defaults to --out).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for surrogate JSONs and training logs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Certificate regime: cvpsc | rpsc.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Hidden units per shape function.
    #[arg(long)]
    hidden: Option<usize>,
}

pub fn cmd_train(args: TrainArgs, cfg: &RunConfig) -> Result<()> {
    let out = need_path(args.out, cfg, "out")?;
    let model = load_model(args.feeder, args.buses, cfg)?;
    let sens = build_sensitivity(&model)?;
    let data = path_or(args.data, cfg, "data").unwrap_or_else(|| out.clone());
    let datasets = train::read_datasets(&data, &model)?;
    let regime_str = str_or(args.regime, cfg, "regime", "cvpsc");
    let regime = Regime::parse(&regime_str).ok_or_else(|| {
        Error::ModelInvalid(format!("unknown regime `{regime_str}` (expected `cvpsc` or `rpsc`)"))
    })?;
    let seed = u64_or(args.seed, cfg, "seed", 1)?;

    let mut hyper = FitHyper::defaults_for(regime, sens.x_norm(), seed);
    hyper.epochs = usize_or(args.epochs, cfg, "epochs", hyper.epochs)?;
    hyper.hidden_size = usize_or(args.hidden, cfg, "hidden", hyper.hidden_size)?;
    hyper.learning_rate =
        positive("learning_rate", f64_or(None, cfg, "learning_rate", hyper.learning_rate)?)?;
    hyper.momentum = f64_or(None, cfg, "momentum", hyper.momentum)?;
    if !(0.0..1.0).contains(&hyper.momentum) {
        return Err(Error::ModelInvalid(format!(
            "`momentum` must lie in [0, 1), got {}",
            hyper.momentum
        )));
    }
    hyper.psi_slope_cap =
        positive("psi_slope_cap", f64_or(None, cfg, "psi_slope_cap", hyper.psi_slope_cap)?)?;
    if let Some(cap) = f64_opt(None, cfg, "phi_slope_cap")? {
        hyper.phi_slope_cap = Some(positive("phi_slope_cap", cap)?);
    }
    if hyper.epochs == 0 || hyper.hidden_size == 0 {
        return Err(Error::ModelInvalid("`epochs` and `hidden` must be positive".into()));
    }

    let (set, logs) = train::fit(&datasets, regime, &hyper)?;
    let baseline_hyper = FitHyper { psi_enabled: false, ..hyper.clone() };
    let (baseline, baseline_logs) = train::fit(&datasets, regime, &baseline_hyper)?;

    std::fs::create_dir_all(&out)?;
    set.write_json(&out.join("surrogate.json"))?;
    baseline.write_json(&out.join("surrogate_baseline.json"))?;
    train::write_train_log_jsonl(&out.join("train_log.jsonl"), &logs)?;
    train::write_train_log_jsonl(&out.join("train_log_baseline.jsonl"), &baseline_logs)?;

    let loss_full = train::training_loss(&set, &datasets);
    let loss_baseline = train::training_loss(&baseline, &datasets);
    println!("loss_full = {}", format_float(loss_full));
    println!("loss_baseline = {}", format_float(loss_baseline));
    println!("improvement = {}", format_float((loss_baseline - loss_full) / loss_baseline));
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// certify
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct CertifyArgs {
    /// Trained surrogate set JSON.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Sensitivity model JSON (from `build`).
    #[arg(long)]
    sensitivity: Option<PathBuf>,
    /// Output directory for certificate.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn cmd_certify(args: CertifyArgs, cfg: &RunConfig) -> Result<()> {
    let out = need_path(args.out, cfg, "out")?;
    let spath = need_path(args.surrogate, cfg, "surrogate")?;
    let npath = need_path(args.sensitivity, cfg, "sensitivity")?;
    let set = SurrogateSet::read_json(&spath)?;
    let sens = SensitivityModel::read_json(&npath)?;
    if set.c() != sens.c() {
        return Err(Error::DimensionMismatch(format!(
            "surrogate set has {} nodes, sensitivity model {} generators",
            set.c(),
            sens.c()
        )));
    }

    let mut cert = certify(&set, &sens);
    if cert.satisfied() {
        // Best-effort extra: spectral radius at the certified fixed point.
        match sim::find_fixed_point(&set, &sens) {
            Ok(fp) => match jacobian_spectral_radius(&set, &sens, &fp.q, fp.eps) {
                Ok(r) => cert.jacobian_spectral_radius = Some(r),
                Err(e) => log::warn!("spectral radius not evaluated: {e}"),
            },
            Err(e) => log::warn!("fixed-point search failed: {e}"),
        }
    }

    std::fs::create_dir_all(&out)?;
    let path = out.join("certificate.json");
    cert.write_json(&path)?;
    println!("regime = {}", cert.regime.as_str());
    println!("l_psi_max = {}", format_float(cert.l_psi_max));
    println!("l_phi_max = {}", format_float(cert.l_phi_max));
    println!("x_norm = {}", format_float(cert.x_norm));
    println!("combined_slope = {}", format_float(cert.combined_slope));
    println!("eps_max = {}", format_float(cert.eps_max));
    match cert.jacobian_spectral_radius {
        Some(r) => println!("spectral_radius = {}", format_float(r)),
        None => println!("spectral_radius = none"),
    }
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    feeder: Option<PathBuf>,
    #[arg(long)]
    buses: Option<PathBuf>,
    /// Trained surrogate set JSON.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Output directory for trace.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step size; defaults to 0.9 x the certified maximum.
    #[arg(long)]
    eps: Option<f64>,
    /// Voltage feedback: linear | ac.
    #[arg(long)]
    plant: Option<String>,
    /// Profiles CSV supplying the operating point(s).
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Profile step to simulate at (fixed-point mode).
    #[arg(long)]
    window: Option<usize>,
    /// Track all profile windows instead of settling at one point.
    #[arg(long)]
    track: bool,
    /// Updates per window in tracking mode.
    #[arg(long)]
    steps_per_window: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    residual_tol: Option<f64>,
    /// Initial dispatch: center | zero.
    #[arg(long)]
    q0: Option<String>,
}

#[derive(Serialize)]
struct TrackingSummary {
    windows: usize,
    steps_per_window: usize,
    eps: f64,
    plant: String,
    regime: Regime,
    mean_distance: f64,
    final_distance: f64,
}

pub fn cmd_simulate(args: SimulateArgs, cfg: &RunConfig) -> Result<()> {
    let out = need_path(args.out, cfg, "out")?;
    let model0 = load_model(args.feeder, args.buses, cfg)?;
    let sens0 = build_sensitivity(&model0)?;
    let set = SurrogateSet::read_json(&need_path(args.surrogate, cfg, "surrogate")?)?;
    if set.c() != model0.n_generators() {
        return Err(Error::DimensionMismatch(format!(
            "surrogate set has {} nodes, feeder {} generators",
            set.c(),
            model0.n_generators()
        )));
    }
    let plant = Plant::parse(&str_or(args.plant, cfg, "plant", "linear"))?;
    let eps = match f64_opt(args.eps, cfg, "eps")? {
        Some(e) => e,
        None => {
            let cert = certify(&set, &sens0);
            if !cert.satisfied() {
                return Err(Error::Uncertified(format!(
                    "no certified step size for regime {} (combined slope {}); pass --eps to override",
                    set.regime.as_str(),
                    format_float(cert.combined_slope)
                )));
            }
            0.9 * cert.eps_max
        }
    };
    let kkt_tol = positive("kkt_tol", f64_or(None, cfg, "kkt_tol", 1e-6)?)?;
    let qp_opts = AdmmOptions { kkt_tol, ..Default::default() };
    std::fs::create_dir_all(&out)?;

    if args.track {
        let ppath = need_path(args.profiles, cfg, "profiles")?;
        let profiles = ProfileSet::read_csv(&ppath, &model0)?;
        let spw = usize_or(args.steps_per_window, cfg, "steps_per_window", 30)?;
        let opts = TimeVaryingOptions { steps_per_window: spw, eps, plant };
        let run = sim::time_varying_run(&model0, &sens0, &set, &profiles, &opts)?;
        sim::write_tracking_csv(&out.join("tracking.csv"), &run)?;
        let summary = TrackingSummary {
            windows: run.records.len(),
            steps_per_window: spw,
            eps,
            plant: plant.as_str().to_string(),
            regime: set.regime,
            mean_distance: run.mean_distance,
            final_distance: run.records.last().expect("windows checked nonempty").distance_to_orpf,
        };
        std::fs::write(out.join("tracking_summary.json"), to_json_string(&summary)?)?;
        println!("eps = {}", format_float(eps));
        println!("windows = {}", run.records.len());
        println!("mean_distance = {}", format_float(run.mean_distance));
        println!("wrote {}", out.display());
        return Ok(());
    }

    // Fixed operating point: one profile window, or the feeder's stored
    // injections when no profiles are given.
    let (model, sens, p, ql, window_id) = match path_or(args.profiles, cfg, "profiles") {
        Some(ppath) => {
            let profiles = ProfileSet::read_csv(&ppath, &model0)?;
            let w = usize_or(args.window, cfg, "window", 0)?;
            let st = profiles.steps.get(w).ok_or_else(|| {
                Error::OutOfDomain(format!(
                    "window {w} out of range ({} profile steps)",
                    profiles.steps.len()
                ))
            })?;
            (
                model0.with_injections(&st.p, &st.q_load)?,
                sens0.with_injections(&st.p, &st.q_load)?,
                st.p.clone(),
                st.q_load.clone(),
                w,
            )
        }
        None => {
            let p = model0.p_vector();
            let ql = model0.q_load_vector();
            (model0.clone(), sens0.clone(), p, ql, 0)
        }
    };

    let boxes = model.generator_boxes();
    let (v_lo, v_hi) = model.voltage_limits();
    let prob = orpf::assemble(&sens, &p, &ql, &boxes, (&v_lo, &v_hi))?;
    let sol = orpf::solve_with(&prob, &qp_opts, None);
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(Error::InfeasibleScenario { scenario: window_id }),
        SolveStatus::MaxIter => {
            return Err(Error::Numerical(format!(
                "dispatch reference stopped at the iteration cap (kkt {:.3e})",
                sol.kkt_residual
            )))
        }
    }

    let q0_mode = str_or(args.q0, cfg, "q0", "center");
    let q0 = match q0_mode.as_str() {
        "center" => DVector::from_fn(set.c(), |i, _| {
            0.5 * (set.nodes[i].q_min + set.nodes[i].q_max)
        }),
        "zero" => DVector::zeros(set.c()),
        other => {
            return Err(Error::ModelInvalid(format!(
                "unknown q0 mode `{other}` (expected `center` or `zero`)"
            )))
        }
    };
    let opts = SimulationOptions {
        eps,
        max_steps: usize_or(args.max_steps, cfg, "max_steps", 500)?,
        residual_tol: positive("residual_tol", f64_or(args.residual_tol, cfg, "residual_tol", 1e-8)?)?,
        plant,
    };
    let (trace, summary) = sim::run_closed_loop(&model, &sens, &set, &q0, Some(&sol.q_star), &opts)?;
    sim::write_trace_csv(&out.join("trace.csv"), &trace, model.generator_buses())?;
    summary.write_json(&out.join("summary.json"))?;
    println!("eps = {}", format_float(eps));
    println!("converged = {}", summary.converged);
    println!("steps = {}", summary.steps);
    println!("final_residual = {}", format_float(summary.final_residual));
    println!(
        "distance_to_orpf = {}",
        format_float(summary.distance_to_orpf.expect("reference optimum supplied"))
    );
    println!("wrote {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory holding the artifacts to aggregate.
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn read_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}

/// Best (lowest) recorded loss per node.
fn best_per_node(rows: &[TrainLogRow]) -> BTreeMap<usize, f64> {
    let mut best = BTreeMap::new();
    for r in rows {
        let e = best.entry(r.node).or_insert(f64::INFINITY);
        *e = e.min(r.loss);
    }
    best
}

/// Mean loss over nodes at each epoch (epochs present for every node).
fn mean_curve(rows: &[TrainLogRow]) -> BTreeMap<usize, f64> {
    let nodes: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.node).collect();
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.epoch).or_insert((0.0, 0));
        e.0 += r.loss;
        e.1 += 1;
    }
    acc.into_iter()
        .filter(|(_, (_, k))| *k == nodes.len())
        .map(|(epoch, (sum, k))| (epoch, sum / k as f64))
        .collect()
}

pub fn cmd_report(args: ReportArgs, cfg: &RunConfig) -> Result<()> {
    let dir = path_or(args.dir, cfg, "dir")
        .or_else(|| cfg.get_path("out"))
        .ok_or_else(|| Error::ModelInvalid("missing --dir (or config key `dir`)".into()))?;
    let mut sections = 0usize;
    let mut md = String::from("# Volt/Var Synthesis Report\n");

    // Training losses.
    let full_log = dir.join("train_log.jsonl");
    let base_log = dir.join("train_log_baseline.jsonl");
    if full_log.is_file() {
        let full = read_log(&full_log)?;
        let full_best = best_per_node(&full);
        let base_best = if base_log.is_file() {
            Some(best_per_node(&read_log(&base_log)?))
        } else {
            None
        };
        md.push_str("\n## Training\n\n");
        md.push_str("Best per-node mean-squared error of the fitted setpoint maps.\n\n");
        match &base_best {
            Some(bb) => {
                md.push_str("| node | loss (full) | loss (voltage-only) | improvement |\n");
                md.push_str("|-----:|------------:|--------------------:|------------:|\n");
                let mut csv = String::from("node,loss_full,loss_baseline,improvement\n");
                let (mut sf, mut sb) = (0.0, 0.0);
                for (node, lf) in &full_best {
                    let lb = *bb.get(node).ok_or_else(|| {
                        Error::ModelInvalid(format!("baseline log is missing node {node}"))
                    })?;
                    let imp = (lb - lf) / lb;
                    md.push_str(&format!(
                        "| {node} | {lf:.6e} | {lb:.6e} | {:.2}% |\n",
                        100.0 * imp
                    ));
                    csv.push_str(&format!(
                        "{node},{},{},{}\n",
                        format_float(*lf),
                        format_float(lb),
                        format_float(imp)
                    ));
                    sf += lf;
                    sb += lb;
                }
                let n = full_best.len() as f64;
                let (mf, mb) = (sf / n, sb / n);
                md.push_str(&format!(
                    "| **mean** | {mf:.6e} | {mb:.6e} | {:.2}% |\n",
                    100.0 * (mb - mf) / mb
                ));
                std::fs::write(dir.join("loss_summary.csv"), csv)?;

                let fc = mean_curve(&full);
                let bc = mean_curve(&read_log(&base_log)?);
                let mut curve = String::from("epoch,loss_full,loss_baseline\n");
                for (epoch, lf) in &fc {
                    if let Some(lb) = bc.get(epoch) {
                        curve.push_str(&format!(
                            "{epoch},{},{}\n",
                            format_float(*lf),
                            format_float(*lb)
                        ));
                    }
                }
                std::fs::write(dir.join("loss_curves.csv"), curve)?;
            }
            None => {
                md.push_str("| node | loss (full) |\n|-----:|------------:|\n");
                for (node, lf) in &full_best {
                    md.push_str(&format!("| {node} | {lf:.6e} |\n"));
                }
            }
        }
        sections += 1;
    }

    // Stability certificate.
    let cert_path = dir.join("certificate.json");
    if cert_path.is_file() {
        let cert: StabilityCertificate =
            serde_json::from_str(&std::fs::read_to_string(&cert_path)?)?;
        md.push_str("\n## Stability certificate\n\n| field | value |\n|---|---|\n");
        md.push_str(&format!("| regime | {} |\n", cert.regime.as_str()));
        md.push_str(&format!("| max psi slope | {:.6e} |\n", cert.l_psi_max));
        md.push_str(&format!("| max phi slope | {:.6e} |\n", cert.l_phi_max));
        md.push_str(&format!("| network gain (x_norm) | {:.6e} |\n", cert.x_norm));
        md.push_str(&format!("| combined slope | {:.6e} |\n", cert.combined_slope));
        md.push_str(&format!("| contraction condition | {} |\n", cert.contraction_ok));
        md.push_str(&format!("| monotone condition | {} |\n", cert.monotone_ok));
        md.push_str(&format!("| certified max step | {:.6e} |\n", cert.eps_max));
        if let Some(r) = cert.jacobian_spectral_radius {
            md.push_str(&format!("| spectral radius at equilibrium | {r:.6e} |\n"));
        }
        sections += 1;
    }

    // Closed-loop run.
    let summary_path = dir.join("summary.json");
    if summary_path.is_file() {
        let s: voltvar::sim::TraceSummary =
            serde_json::from_str(&std::fs::read_to_string(&summary_path)?)?;
        md.push_str("\n## Closed-loop run\n\n");
        md.push_str("| converged | steps | final residual | distance to optimum | eps |\n");
        md.push_str("|---|---:|---:|---:|---:|\n");
        let dist = s
            .distance_to_orpf
            .map(|d| format!("{d:.6e}"))
            .unwrap_or_else(|| "-".into());
        md.push_str(&format!(
            "| {} | {} | {:.6e} | {dist} | {:.6e} |\n",
            s.converged, s.steps, s.final_residual, s.eps
        ));
        sections += 1;
    }

    // Time-varying tracking.
    let tracking_path = dir.join("tracking.csv");
    if tracking_path.is_file() {
        let text = std::fs::read_to_string(&tracking_path)?;
        let mut dists = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: tracking_path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let d: f64 = fields[1].parse().map_err(|_| Error::Parse {
                path: tracking_path.display().to_string(),
                line: i + 1,
                msg: format!("bad distance `{}`", fields[1]),
            })?;
            dists.push(d);
        }
        if !dists.is_empty() {
            let mean = dists.iter().sum::<f64>() / dists.len() as f64;
            let worst = dists.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            md.push_str("\n## Time-varying tracking\n\n");
            md.push_str("| windows | mean distance | worst distance | final distance |\n");
            md.push_str("|---:|---:|---:|---:|\n");
            md.push_str(&format!(
                "| {} | {mean:.6e} | {worst:.6e} | {:.6e} |\n",
                dists.len(),
                dists.last().unwrap()
            ));
            sections += 1;
        }
    }

    if sections == 0 {
        return Err(Error::ModelInvalid(format!(
            "no recognized artifacts in {}",
            dir.display()
        )));
    }
    std::fs::write(dir.join("report.md"), md)?;
    println!("sections = {sections}");
    println!("wrote {}", dir.join("report.md").display());
    Ok(())
}
