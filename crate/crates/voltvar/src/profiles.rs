//! Time-stepped injection profiles: a day of per-bus active power and load
//! reactive power, either synthesized (double-peak demand, solar-shaped
//! generation, seeded noise) or exchanged as CSV.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::feeder::{BusKind, FeederModel};
use crate::textio;

/// One time step of operating conditions.
#[derive(Debug, Clone)]
pub struct ProfileStep {
    /// Active injections for buses 1..=N, bus order.
    pub p: Vec<f64>,
    /// Reactive injections for load buses, ascending-id order.
    pub q_load: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProfileSet {
    pub steps: Vec<ProfileStep>,
}

#[derive(Debug, Clone)]
pub struct SyntheticProfileOptions {
    pub seed: u64,
    pub steps: usize,
    /// Multiplicative uniform noise half-width on demand and generation.
    pub noise: f64,
    /// Per-generator solar peak, drawn uniformly from this range.
    pub solar_peak: (f64, f64),
}

impl Default for SyntheticProfileOptions {
    fn default() -> SyntheticProfileOptions {
        SyntheticProfileOptions {
            seed: 1,
            steps: 1440,
            noise: 0.05,
            solar_peak: (0.15, 0.30),
        }
    }
}

/// Morning/evening double-peak demand shape on [0, 1), normalized later.
fn demand_shape(t: f64) -> f64 {
    let g = |c: f64, w: f64| (-((t - c) / w) * ((t - c) / w)).exp();
    0.55 + 0.25 * g(0.35, 0.08) + 0.45 * g(0.80, 0.10)
}

/// Solar bell: zero outside (0.25, 0.75), sine arch peaking at noon.
fn solar_shape(t: f64) -> f64 {
    if t <= 0.25 || t >= 0.75 {
        0.0
    } else {
        (std::f64::consts::PI * (t - 0.25) / 0.5).sin()
    }
}

impl ProfileSet {
    /// Synthesize a day of profiles around the feeder's stored baseline:
    /// load buses scale their baseline demand by the (noisy) demand shape
    /// at constant power factor; generator buses produce solar-shaped
    /// active power with a seeded per-unit peak.
    pub fn synthetic_daily(model: &FeederModel, opts: &SyntheticProfileOptions) -> ProfileSet {
        assert!(opts.steps >= 1);
        let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
        let n = model.n();

        // Per-generator solar capacity, drawn ascending by bus id.
        let caps: Vec<f64> = model
            .generator_buses()
            .iter()
            .map(|_| rng.gen_range(opts.solar_peak.0..=opts.solar_peak.1))
            .collect();

        // Normalize the demand shape over the actual grid.
        let shape_max = (0..opts.steps)
            .map(|k| demand_shape(k as f64 / opts.steps as f64))
            .fold(f64::MIN, f64::max);

        let mut steps = Vec::with_capacity(opts.steps);
        for k in 0..opts.steps {
            let t = k as f64 / opts.steps as f64;
            let demand = demand_shape(t) / shape_max;
            let solar = solar_shape(t);
            let mut p = vec![0.0; n];
            let mut q_load = Vec::with_capacity(model.load_buses().len());
            let mut gen_idx = 0usize;
            for bus in model.buses().iter().skip(1) {
                // One draw per (step, bus) regardless of kind keeps the
                // stream layout independent of placement.
                let jitter = 1.0 + opts.noise * rng.gen_range(-1.0..=1.0);
                match bus.kind {
                    BusKind::Load => {
                        let scale = demand * jitter;
                        p[bus.id - 1] = bus.p * scale;
                        q_load.push(bus.q * scale);
                    }
                    BusKind::Generator => {
                        p[bus.id - 1] = (caps[gen_idx] * solar * jitter).max(0.0);
                        gen_idx += 1;
                    }
                    BusKind::Substation => unreachable!("skipped above"),
                }
            }
            steps.push(ProfileStep { p, q_load });
        }
        ProfileSet { steps }
    }

    /// Uniformly scaled copy (for light-loading studies).
    pub fn scaled(&self, factor: f64) -> ProfileSet {
        ProfileSet {
            steps: self
                .steps
                .iter()
                .map(|s| ProfileStep {
                    p: s.p.iter().map(|v| v * factor).collect(),
                    q_load: s.q_load.iter().map(|v| v * factor).collect(),
                })
                .collect(),
        }
    }

    /// Largest |p| over all steps and buses.
    pub fn max_abs_p(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.p.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    /// Long-format CSV: `step,bus,p_pu,q_pu`, one row per (step, bus 1..=N);
    /// `q_pu` is blank on generator buses (their reactive output is the
    /// control variable, not an operating condition).
    pub fn write_csv(&self, path: &Path, model: &FeederModel) -> Result<()> {
        let mut out = String::from("step,bus,p_pu,q_pu\n");
        for (k, step) in self.steps.iter().enumerate() {
            let mut load_idx = 0usize;
            for bus in 1..=model.n() {
                let q = if model.bus(bus).kind == BusKind::Load {
                    let s = textio::float(step.q_load[load_idx]);
                    load_idx += 1;
                    s
                } else {
                    String::new()
                };
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    k,
                    bus,
                    textio::float(step.p[bus - 1]),
                    q
                ));
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_csv(path: &Path, model: &FeederModel) -> Result<ProfileSet> {
        let file = std::fs::File::open(path)?;
        let n = model.n();
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut steps: Vec<ProfileStep> = Vec::new();
        let mut filled: Vec<Vec<bool>> = Vec::new();
        let mut lineno = 0usize;
        for raw in BufReader::new(file).lines() {
            let raw = raw?;
            lineno += 1;
            let s = raw.trim_end_matches('\r');
            if lineno == 1 {
                if s != "step,bus,p_pu,q_pu" {
                    return Err(perr(1, format!("expected header `step,bus,p_pu,q_pu`, got `{s}`")));
                }
                continue;
            }
            if s.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = s.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(perr(lineno, format!("expected 4 fields, got {}", f.len())));
            }
            let step: usize = f[0]
                .parse()
                .map_err(|_| perr(lineno, format!("bad step `{}`", f[0])))?;
            let bus: usize = f[1]
                .parse()
                .map_err(|_| perr(lineno, format!("bad bus `{}`", f[1])))?;
            if bus == 0 || bus > n {
                return Err(perr(lineno, format!("bus {bus} out of range 1..={n}")));
            }
            let p = textio::parse_float(f[2])
                .ok_or_else(|| perr(lineno, format!("bad p_pu `{}`", f[2])))?;
            let q = textio::parse_float(f[3]);
            while steps.len() <= step {
                steps.push(ProfileStep {
                    p: vec![0.0; n],
                    q_load: vec![0.0; model.load_buses().len()],
                });
                filled.push(vec![false; n]);
            }
            if filled[step][bus - 1] {
                return Err(perr(lineno, format!("duplicate row for step {step}, bus {bus}")));
            }
            filled[step][bus - 1] = true;
            steps[step].p[bus - 1] = p;
            let kind = model.bus(bus).kind;
            match (kind, q) {
                (BusKind::Load, Some(qv)) => {
                    let li = model.load_buses().iter().position(|&b| b == bus).unwrap();
                    steps[step].q_load[li] = qv;
                }
                (BusKind::Load, None) => {
                    return Err(perr(lineno, format!("load bus {bus} needs a q_pu value")))
                }
                (_, Some(_)) => {
                    return Err(perr(
                        lineno,
                        format!("bus {bus} is not a load; q_pu must be blank"),
                    ))
                }
                (_, None) => {}
            }
        }
        if steps.is_empty() {
            return Err(perr(1, "no profile rows".into()));
        }
        for (k, fl) in filled.iter().enumerate() {
            if let Some(bus0) = fl.iter().position(|&b| !b) {
                return Err(Error::ModelInvalid(format!(
                    "profile step {k} is missing bus {}",
                    bus0 + 1
                )));
            }
        }
        Ok(ProfileSet { steps })
    }
}
