//! Sweep power flow for radial feeders.
//!
//! Each iteration aggregates branch currents from the leaves toward the
//! substation (backward pass), then refreshes bus voltages from the root
//! outward (forward pass). Convergence requires both a small voltage update
//! and a small complex power mismatch computed against the full admittance
//! matrix, so a converged solution is a genuine power-flow solution and not
//! merely a stalled iteration.

use nalgebra::DVector;
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::sensitivity::build_admittance;

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Infinity-norm bound on the voltage update between iterations.
    pub tol_voltage: f64,
    /// Infinity-norm bound on complex power mismatch at non-substation buses.
    pub tol_mismatch: f64,
    pub max_iter: usize,
    /// Magnitudes below this abort with a voltage-collapse error.
    pub collapse_guard: f64,
}

impl Default for SweepOptions {
    fn default() -> SweepOptions {
        SweepOptions {
            tol_voltage: 1e-10,
            tol_mismatch: 1e-8,
            max_iter: 200,
            collapse_guard: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcSolution {
    /// Complex bus voltages including the substation at index 0.
    pub v: Vec<Complex<f64>>,
    pub iterations: usize,
    /// Final complex power mismatch (infinity norm over buses 1..=N).
    pub max_mismatch: f64,
}

impl AcSolution {
    pub fn v_mag(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.norm()).collect()
    }

    pub fn v_ang(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.arg()).collect()
    }

    /// Voltage magnitudes at the listed buses, in list order.
    pub fn v_mag_at(&self, buses: &[usize]) -> DVector<f64> {
        DVector::from_fn(buses.len(), |i, _| self.v[buses[i]].norm())
    }
}

/// Complex injections for buses 1..=N: stored (p, q) for loads, stored p
/// with controlled reactive output `q_c` for generators.
fn injections(model: &FeederModel, q_c: &DVector<f64>) -> Result<Vec<Complex<f64>>> {
    let c = model.n_generators();
    if q_c.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "q_c has {} entries, feeder has {c} generators",
            q_c.len()
        )));
    }
    let mut s = vec![Complex::new(0.0, 0.0); model.n_buses()];
    for b in model.buses().iter().skip(1) {
        s[b.id] = Complex::new(b.p, b.q);
    }
    for (k, &g) in model.generator_buses().iter().enumerate() {
        s[g] = Complex::new(model.bus(g).p, q_c[k]);
    }
    Ok(s)
}

/// Solve from a flat (all-ones) start with default tolerances.
pub fn solve(model: &FeederModel, q_c: &DVector<f64>) -> Result<AcSolution> {
    let start = vec![Complex::new(1.0, 0.0); model.n_buses()];
    solve_from(model, q_c, &start, &SweepOptions::default())
}

/// Solve starting from a prior voltage profile (the substation entry is
/// pinned back to 1 + 0i regardless of the start vector).
pub fn solve_from(
    model: &FeederModel,
    q_c: &DVector<f64>,
    start: &[Complex<f64>],
    opts: &SweepOptions,
) -> Result<AcSolution> {
    let n_buses = model.n_buses();
    if start.len() != n_buses {
        return Err(Error::DimensionMismatch(format!(
            "start profile has {} entries, feeder has {n_buses} buses",
            start.len()
        )));
    }
    let s = injections(model, q_c)?;
    let y = build_admittance(model);
    let topo = model.topo_order();

    let mut v: Vec<Complex<f64>> = start.to_vec();
    v[0] = Complex::new(1.0, 0.0);

    let mut branch = vec![Complex::new(0.0, 0.0); n_buses];
    let mut mismatch = f64::INFINITY;

    for iter in 1..=opts.max_iter {
        // Backward: accumulate branch currents, leaves first. branch[n] is
        // the current flowing from parent(n) into n.
        for &n in topo.iter().rev() {
            if n == 0 {
                continue;
            }
            let mut j = (s[n] / v[n]).conj();
            j = -j;
            for &ch in model.children(n) {
                j += branch[ch];
            }
            branch[n] = j;
        }

        // Forward: refresh voltages from the substation outward.
        let mut dv = 0.0f64;
        for &n in topo.iter() {
            if n == 0 {
                continue;
            }
            let line = model.line_into(n);
            let z = Complex::new(line.r, line.x);
            let next = v[line.from] - z * branch[n];
            dv = dv.max((next - v[n]).norm());
            v[n] = next;
            let mag = next.norm();
            if mag < opts.collapse_guard {
                return Err(Error::VoltageCollapse { bus: n, vmag: mag });
            }
        }

        // Mismatch against the admittance model: s_calc = diag(v) conj(Y v).
        mismatch = 0.0;
        for i in 1..n_buses {
            let mut inj = Complex::new(0.0, 0.0);
            for j in 0..n_buses {
                inj += y[(i, j)] * v[j];
            }
            let s_calc = v[i] * inj.conj();
            mismatch = mismatch.max((s[i] - s_calc).norm());
        }

        if dv < opts.tol_voltage && mismatch < opts.tol_mismatch {
            return Ok(AcSolution { v, iterations: iter, max_mismatch: mismatch });
        }
    }

    Err(Error::AcDivergence { iterations: opts.max_iter, mismatch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{synthetic_feeder, Bus, BusKind, FeederModel, Line, SyntheticFeederOptions};
    use approx::assert_relative_eq;

    fn two_bus(p: f64, z: Complex<f64>) -> FeederModel {
        FeederModel::new(
            vec![
                Bus {
                    id: 0,
                    kind: BusKind::Substation,
                    p: 0.0,
                    q: 0.0,
                    q_box: None,
                    v_min: 0.9,
                    v_max: 1.1,
                },
                Bus {
                    id: 1,
                    kind: BusKind::Generator,
                    p,
                    q: 0.0,
                    q_box: Some((-1.0, 1.0)),
                    v_min: 0.9,
                    v_max: 1.1,
                },
            ],
            vec![Line { from: 0, to: 1, r: z.re, x: z.im }],
        )
        .unwrap()
    }

    /// Closed-form single-line solution. The fixed point of
    /// v = 1 + z * conj(s) / conj(v) satisfies |v|^2 = conj(v) + z conj(s),
    /// so with w = z conj(s): Im v = Im w and Re v solves a quadratic
    /// (high-voltage root).
    fn two_bus_exact(s: Complex<f64>, z: Complex<f64>) -> Complex<f64> {
        let w = z * s.conj();
        let b = w.im;
        let disc = 1.0 - 4.0 * (b * b - w.re);
        let a = 0.5 * (1.0 + disc.sqrt());
        Complex::new(a, b)
    }

    #[test]
    fn zero_injections_converge_immediately() {
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(5));
        let flat = m
            .with_injections(&vec![0.0; m.n()], &vec![0.0; m.load_buses().len()])
            .unwrap();
        let sol = solve(&flat, &DVector::zeros(flat.n_generators())).unwrap();
        assert_eq!(sol.iterations, 1);
        for vi in &sol.v {
            assert_eq!(*vi, Complex::new(1.0, 0.0));
        }
        // Exactly flat voltages; the mismatch is admittance-row roundoff.
        assert!(sol.max_mismatch < 1e-12);
    }

    #[test]
    fn matches_closed_form_on_single_line() {
        let z = Complex::new(0.05, 0.10);
        let s = Complex::new(-0.30, -0.10);
        let m = two_bus(s.re, z);
        let sol = solve(&m, &DVector::from_vec(vec![s.im])).unwrap();
        let exact = two_bus_exact(s, z);
        assert_relative_eq!(sol.v[1].re, exact.re, epsilon = 1e-9);
        assert_relative_eq!(sol.v[1].im, exact.im, epsilon = 1e-9);
        assert!(sol.max_mismatch < 1e-8);
    }

    #[test]
    fn injecting_reactive_power_raises_voltage() {
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(5));
        let c = m.n_generators();
        let low = solve(&m, &DVector::zeros(c)).unwrap();
        let high = solve(&m, &DVector::from_element(c, 0.3)).unwrap();
        let gl = low.v_mag_at(m.generator_buses());
        let gh = high.v_mag_at(m.generator_buses());
        for i in 0..c {
            assert!(gh[i] > gl[i]);
        }
    }

    #[test]
    fn mismatch_bound_holds_on_converged_solutions() {
        let m = synthetic_feeder(&SyntheticFeederOptions::wide(9));
        let sol = solve(&m, &DVector::from_element(m.n_generators(), -0.1)).unwrap();
        assert!(sol.max_mismatch < 1e-8, "mismatch {}", sol.max_mismatch);
        assert_eq!(sol.v[0], Complex::new(1.0, 0.0));
    }

    #[test]
    fn warm_start_reconverges_in_one_iteration() {
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(5));
        let q = DVector::from_element(m.n_generators(), 0.05);
        let cold = solve(&m, &q).unwrap();
        let warm = solve_from(&m, &q, &cold.v, &SweepOptions::default()).unwrap();
        assert!(warm.iterations <= 2, "took {}", warm.iterations);
        // Both runs stop within tol_voltage of the fixed point, so they can
        // differ from each other by a few extra orders of roundoff headroom.
        for i in 0..cold.v.len() {
            assert_relative_eq!(warm.v[i].norm(), cold.v[i].norm(), epsilon = 1e-9);
        }
    }

    #[test]
    fn absurd_load_fails_loudly() {
        let z = Complex::new(0.05, 0.10);
        let m = two_bus(-8.0, z);
        let err = solve(&m, &DVector::from_vec(vec![0.0])).unwrap_err();
        assert!(
            matches!(err, Error::VoltageCollapse { .. } | Error::AcDivergence { .. }),
            "{err}"
        );
    }

    #[test]
    fn quadratic_consistency_with_linear_model() {
        // The sweep solution approaches the sensitivity model's prediction
        // at second order: scaling injections by 1/2 must shrink the gap by
        // about 1/4.
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(5));
        let s = crate::sensitivity::build_sensitivity(&m).unwrap();
        let q = DVector::zeros(m.n_generators());

        let gap = |scale: f64| -> f64 {
            let p: Vec<f64> = m.p_vector().iter().map(|v| v * scale).collect();
            let ql: Vec<f64> = m.q_load_vector().iter().map(|v| v * scale).collect();
            let ms = m.with_injections(&p, &ql).unwrap();
            let ss = s.with_injections(&p, &ql).unwrap();
            let ac = solve(&ms, &q).unwrap();
            let lin = ss.linear_voltage(&q).unwrap();
            let mags = ac.v_mag();
            (0..m.n())
                .map(|i| (mags[i + 1] - lin[i]).abs())
                .fold(0.0, f64::max)
        };

        let g1 = gap(1.0);
        let g2 = gap(0.5);
        assert!(g1 > 0.0);
        let ratio = g1 / g2;
        assert!((3.0..5.5).contains(&ratio), "second-order ratio {ratio}");
    }
}
