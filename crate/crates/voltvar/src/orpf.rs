//! Loss-minimizing reactive dispatch as a convex QP, reduced to the
//! generator outputs.
//!
//! With the load-side reactive injections fixed, the network-loss objective
//! over all injections collapses to `q' R q + 2 c' q + k` in the generator
//! vector `q`, constrained by the linearized voltage band at every bus and
//! the per-generator capability box. The solver is an operator-splitting
//! method (ADMM with over-relaxation and adaptive penalty) followed by an
//! active-set polish step; it reports the KKT residual of the point it
//! returns and emits a certificate-based status when the constraints are
//! inconsistent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par::par_map;
use crate::sensitivity::SensitivityModel;
use crate::textio;

#[derive(Debug, Clone)]
pub struct OrpfProblem {
    /// Quadratic coefficient (C x C, symmetric PD): generator block of the
    /// resistance sensitivity.
    pub r: DMatrix<f64>,
    /// Linear coefficient: cross-resistance times the fixed load reactive
    /// injections. The objective is `q' r q + 2 lin' q + constant`.
    pub lin: DVector<f64>,
    /// Loss contribution of the fixed injections (completes the objective).
    pub constant: f64,
    /// Voltage rows: N x C map from generator outputs to bus voltages,
    /// partitioned order (generators first).
    pub g: DMatrix<f64>,
    /// Voltage band shifted by the affine offset, partitioned order.
    pub v_lo: DVector<f64>,
    pub v_hi: DVector<f64>,
    /// Generator capability box.
    pub q_lo: DVector<f64>,
    pub q_hi: DVector<f64>,
}

/// Build the reduced dispatch problem at an operating point.
///
/// `p` covers buses 1..=N in bus order; `q_load` covers load buses in
/// ascending-id order; `boxes` covers generators in generator order;
/// `v_limits` are per-bus bands for buses 1..=N in bus order.
pub fn assemble(
    sens: &SensitivityModel,
    p: &[f64],
    q_load: &[f64],
    boxes: &[(f64, f64)],
    v_limits: (&[f64], &[f64]),
) -> Result<OrpfProblem> {
    let n = sens.n();
    let c = sens.c();
    let l = n - c;
    if boxes.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "{} capability boxes for {c} generators",
            boxes.len()
        )));
    }
    if v_limits.0.len() != n || v_limits.1.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "voltage limits cover {} buses, expected {n}",
            v_limits.0.len()
        )));
    }
    let at_point = sens.with_injections(p, q_load)?;

    let ql = DVector::from_column_slice(q_load);
    let lin = sens.r_gen_load() * &ql;

    // Loss constant: p' Rtilde p + q_load' R_load q_load.
    let mut p_part = DVector::zeros(n);
    for bus in 1..=n {
        p_part[sens.partitioned_index(bus)] = p[bus - 1];
    }
    let rp = sens.rtilde() * &p_part;
    let rql = sens.r_load() * &ql;
    let constant = p_part.dot(&rp) + ql.dot(&rql);

    // Voltage rows in partitioned order; shift band by the offset.
    let g = sens.xtilde().view((0, 0), (n, c)).into_owned();
    let v_hat = at_point.v_hat();
    let mut v_lo = DVector::zeros(n);
    let mut v_hi = DVector::zeros(n);
    for bus in 1..=n {
        let row = sens.partitioned_index(bus);
        v_lo[row] = v_limits.0[bus - 1] - v_hat[row];
        v_hi[row] = v_limits.1[bus - 1] - v_hat[row];
    }

    let q_lo = DVector::from_fn(c, |i, _| boxes[i].0);
    let q_hi = DVector::from_fn(c, |i, _| boxes[i].1);
    let _ = l;

    Ok(OrpfProblem {
        r: sens.r_gen().into_owned(),
        lin,
        constant,
        g,
        v_lo,
        v_hi,
        q_lo,
        q_hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OrpfSolution {
    pub q_star: DVector<f64>,
    pub objective: f64,
    /// max(stationarity, primal violation, complementarity) at `q_star`.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Multipliers for the stacked constraints [voltage rows; box rows].
    pub dual: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOptions {
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Proximal regularization on the x-update.
    pub sigma: f64,
    /// Over-relaxation coefficient.
    pub alpha: f64,
    pub rho0: f64,
    /// Residuals (and termination) are evaluated every this many iterations.
    pub check_every: usize,
    /// Relative tolerance of the primal infeasibility certificate.
    pub pinf_tol: f64,
    /// Run the active-set polish after convergence.
    pub polish: bool,
}

impl Default for AdmmOptions {
    fn default() -> AdmmOptions {
        AdmmOptions {
            kkt_tol: 1e-6,
            max_iter: 20_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho0: 0.1,
            check_every: 25,
            pinf_tol: 1e-6,
            polish: true,
        }
    }
}

/// Warm-start state for the splitting iteration.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

impl WarmStart {
    pub fn from_solution(problem: &OrpfProblem, sol: &OrpfSolution) -> WarmStart {
        let ax = problem.apply_a(&sol.q_star);
        let (l, u) = problem.stacked_bounds();
        let z = DVector::from_fn(ax.len(), |i, _| ax[i].clamp(l[i], u[i]));
        WarmStart { x: sol.q_star.clone(), z, y: sol.dual.clone() }
    }
}

impl OrpfProblem {
    pub fn c(&self) -> usize {
        self.r.nrows()
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn objective(&self, q: &DVector<f64>) -> f64 {
        let rq = &self.r * q;
        q.dot(&rq) + 2.0 * self.lin.dot(q) + self.constant
    }

    /// Stacked constraint map `[G q; q]`.
    fn apply_a(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let c = self.c();
        let gx = &self.g * x;
        let mut out = DVector::zeros(n + c);
        out.rows_mut(0, n).copy_from(&gx);
        out.rows_mut(n, c).copy_from(x);
        out
    }

    /// Adjoint of the stacked constraint map.
    fn apply_at(&self, w: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let c = self.c();
        let wv = w.rows(0, n).into_owned();
        let mut out = self.g.transpose() * wv;
        for i in 0..c {
            out[i] += w[n + i];
        }
        out
    }

    fn stacked_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        let c = self.c();
        let mut l = DVector::zeros(n + c);
        let mut u = DVector::zeros(n + c);
        l.rows_mut(0, n).copy_from(&self.v_lo);
        u.rows_mut(0, n).copy_from(&self.v_hi);
        l.rows_mut(n, c).copy_from(&self.q_lo);
        u.rows_mut(n, c).copy_from(&self.q_hi);
        (l, u)
    }

    pub fn is_feasible(&self, q: &DVector<f64>, tol: f64) -> bool {
        let ax = self.apply_a(q);
        let (l, u) = self.stacked_bounds();
        (0..ax.len()).all(|i| ax[i] >= l[i] - tol && ax[i] <= u[i] + tol)
    }

    /// First-order optimality residuals at a primal/dual pair.
    pub fn kkt_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> KktResidual {
        let ax = self.apply_a(x);
        let (l, u) = self.stacked_bounds();
        let grad = {
            let mut gr = &self.r * x;
            gr *= 2.0;
            gr += 2.0 * &self.lin;
            gr += self.apply_at(y);
            gr
        };
        let stationarity = grad.amax();
        let mut primal = 0.0f64;
        let mut complementarity = 0.0f64;
        for i in 0..ax.len() {
            primal = primal.max(l[i] - ax[i]).max(ax[i] - u[i]);
            let up = y[i].max(0.0) * (u[i] - ax[i]).max(0.0);
            let dn = (-y[i]).max(0.0) * (ax[i] - l[i]).max(0.0);
            complementarity = complementarity.max(up + dn);
        }
        KktResidual { stationarity, primal: primal.max(0.0), complementarity }
    }
}

fn factorize(
    p2: &DMatrix<f64>,
    ata: &DMatrix<f64>,
    sigma: f64,
    rho: f64,
) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let c = p2.nrows();
    let mut m = p2.clone();
    for i in 0..c {
        m[(i, i)] += sigma;
    }
    m += ata * rho;
    nalgebra::Cholesky::new(m)
}

/// Solve with default options from a cold start.
pub fn solve(problem: &OrpfProblem) -> OrpfSolution {
    solve_with(problem, &AdmmOptions::default(), None)
}

pub fn solve_with(
    problem: &OrpfProblem,
    opts: &AdmmOptions,
    warm: Option<&WarmStart>,
) -> OrpfSolution {
    let c = problem.c();
    let n = problem.n();
    let m = n + c;
    let (l, u) = problem.stacked_bounds();

    // P = 2R and q_vec = 2 lin: gradient of the objective.
    let p2 = {
        let mut p = problem.r.clone();
        p *= 2.0;
        p
    };
    let q_vec = {
        let mut q = problem.lin.clone();
        q *= 2.0;
        q
    };
    let ata = {
        let gtg = problem.g.transpose() * &problem.g;
        let mut a = gtg;
        for i in 0..c {
            a[(i, i)] += 1.0;
        }
        a
    };

    let mut rho = opts.rho0;
    let mut chol = factorize(&p2, &ata, opts.sigma, rho)
        .expect("P + sigma I + rho A'A is positive definite");

    let (mut x, mut z, mut y) = match warm {
        Some(w) => (w.x.clone(), w.z.clone(), w.y.clone()),
        None => {
            let x0 = DVector::zeros(c);
            let ax = problem.apply_a(&x0);
            let z0 = DVector::from_fn(m, |i, _| ax[i].clamp(l[i], u[i]));
            (x0, z0, DVector::zeros(m))
        }
    };

    let mut iterations = 0usize;
    let mut status = SolveStatus::MaxIter;

    while iterations < opts.max_iter {
        iterations += 1;

        // x-update: (P + sigma I + rho A'A) x~ = sigma x - q_vec + A'(rho z - y)
        let rhs = {
            let mut w = z.clone();
            w *= rho;
            w -= &y;
            let mut r = problem.apply_at(&w);
            r += x.scale(opts.sigma);
            r -= &q_vec;
            r
        };
        let x_tilde = chol.solve(&rhs);
        let ax_tilde = problem.apply_a(&x_tilde);

        // Over-relaxed z/y updates with projection onto the bounds.
        let mut x_next = x_tilde.scale(opts.alpha);
        x_next.axpy(1.0 - opts.alpha, &x, 1.0);

        let mut z_arg = ax_tilde.scale(opts.alpha);
        z_arg.axpy(1.0 - opts.alpha, &z, 1.0);
        let z_next = DVector::from_fn(m, |i, _| (z_arg[i] + y[i] / rho).clamp(l[i], u[i]));
        let mut y_next = z_arg;
        y_next -= &z_next;
        y_next *= rho;
        y_next += &y;

        let dy = &y_next - &y;
        x = x_next;
        z = z_next;
        y = y_next;

        if iterations % opts.check_every == 0 || iterations == opts.max_iter {
            let res = problem.kkt_residual(&x, &y);
            if res.max() <= opts.kkt_tol {
                status = SolveStatus::Optimal;
                break;
            }

            // Primal infeasibility certificate from the dual update direction.
            let dy_norm = dy.amax();
            if dy_norm > 0.0 {
                let at_dy = problem.apply_at(&dy).amax();
                let mut support = 0.0;
                for i in 0..m {
                    support += u[i] * dy[i].max(0.0) + l[i] * dy[i].min(0.0);
                }
                if at_dy <= opts.pinf_tol * dy_norm && support <= -opts.pinf_tol * dy_norm {
                    status = SolveStatus::Infeasible;
                    break;
                }
            }

            // Adaptive penalty: rebalance primal and dual residuals.
            let ax = problem.apply_a(&x);
            let r_prim = (&ax - &z).amax();
            let r_dual = {
                let mut g = &p2 * &x;
                g += &q_vec;
                g += problem.apply_at(&y);
                g.amax()
            };
            let p_scale = ax.amax().max(z.amax()).max(1e-12);
            let d_scale = (&p2 * &x)
                .amax()
                .max(problem.apply_at(&y).amax())
                .max(q_vec.amax())
                .max(1e-12);
            let ratio = ((r_prim / p_scale) / (r_dual / d_scale).max(1e-18)).sqrt();
            let rho_new = (rho * ratio).clamp(1e-6, 1e6);
            if rho_new > 5.0 * rho || rho_new < rho / 5.0 {
                rho = rho_new;
                chol = factorize(&p2, &ata, opts.sigma, rho)
                    .expect("P + sigma I + rho A'A is positive definite");
            }
        }
    }

    if status == SolveStatus::Infeasible {
        return OrpfSolution {
            q_star: DVector::zeros(c),
            objective: f64::NAN,
            kkt_residual: f64::NAN,
            iterations,
            status,
            dual: y,
        };
    }

    // Exact box feasibility for downstream consumers, then optional polish;
    // keep whichever point has the smaller residual.
    let mut best_x = DVector::from_fn(c, |i, _| x[i].clamp(problem.q_lo[i], problem.q_hi[i]));
    let mut best_y = y.clone();
    let mut best_res = problem.kkt_residual(&best_x, &best_y).max();

    if opts.polish {
        if let Some((px, py)) = polish(problem, &best_y) {
            let pres = problem.kkt_residual(&px, &py).max();
            if pres < best_res {
                best_x = px;
                best_y = py;
                best_res = pres;
            }
        }
    }

    if best_res <= opts.kkt_tol {
        status = SolveStatus::Optimal;
    } else if status == SolveStatus::Optimal {
        // Convergence was declared on the raw iterate; stay honest about
        // the returned point.
        status = if best_res <= 10.0 * opts.kkt_tol {
            SolveStatus::Optimal
        } else {
            SolveStatus::MaxIter
        };
    }

    OrpfSolution {
        objective: problem.objective(&best_x),
        q_star: best_x,
        kkt_residual: best_res,
        iterations,
        status,
        dual: best_y,
    }
}

/// Equality-constrained re-solve on the active set implied by the duals.
/// Returns a strictly better primal/dual pair or nothing.
fn polish(
    problem: &OrpfProblem,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let c = problem.c();
    let m = problem.n() + c;
    let (l, u) = problem.stacked_bounds();
    let kappa = 1e-8 * y.amax().max(1.0);

    let mut active: Vec<(usize, f64, f64)> = Vec::new(); // (row, bound, dual sign)
    for i in 0..m {
        if y[i] > kappa {
            active.push((i, u[i], 1.0));
        } else if y[i] < -kappa {
            active.push((i, l[i], -1.0));
        }
    }
    let k = active.len();
    if k == 0 {
        // Unconstrained minimum: 2R x = -2 lin.
        let sol = problem.r.clone().lu().solve(&(-problem.lin.clone()))?;
        let yz = DVector::zeros(m);
        return feasible_pair(problem, sol, yz, &l, &u);
    }
    if k > c {
        return None; // overdetermined active set; keep the ADMM iterate
    }

    // KKT system [[2R, A_a'], [A_a, -delta I]] [x; nu] = [-2 lin; b_a].
    let dim = c + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for i in 0..c {
        for j in 0..c {
            kkt[(i, j)] = 2.0 * problem.r[(i, j)];
        }
        rhs[i] = -2.0 * problem.lin[i];
    }
    let a_row = |row: usize, col: usize| -> f64 {
        if row < problem.n() {
            problem.g[(row, col)]
        } else if row - problem.n() == col {
            1.0
        } else {
            0.0
        }
    };
    for (t, &(row, bound, _)) in active.iter().enumerate() {
        for j in 0..c {
            let v = a_row(row, j);
            kkt[(c + t, j)] = v;
            kkt[(j, c + t)] = v;
        }
        kkt[(c + t, c + t)] = -1e-12;
        rhs[c + t] = bound;
    }

    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // One step of iterative refinement.
    let resid = &rhs - &kkt * &sol;
    if let Some(corr) = lu.solve(&resid) {
        sol += corr;
    }

    let px = sol.rows(0, c).into_owned();
    let mut py = DVector::zeros(m);
    for (t, &(row, _, sign)) in active.iter().enumerate() {
        let nu = sol[c + t];
        // Multiplier sign must match the bound side it claims.
        if nu * sign < -1e-9 {
            return None;
        }
        py[row] = nu;
    }
    feasible_pair(problem, px, py, &l, &u)
}

fn feasible_pair(
    problem: &OrpfProblem,
    x: DVector<f64>,
    y: DVector<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let ax = problem.apply_a(&x);
    for i in 0..ax.len() {
        if ax[i] < l[i] - 1e-9 || ax[i] > u[i] + 1e-9 {
            return None;
        }
    }
    Some((x, y))
}

/// Cold-start batch solve. Work fans out across scenarios; results are
/// collected in input order, so the output is identical with or without
/// the parallel feature.
pub fn solve_batch(problems: &[OrpfProblem], opts: &AdmmOptions) -> Vec<OrpfSolution> {
    par_map(problems, |p| solve_with(p, opts, None))
}

// ---------------------------------------------------------------------------
// Label artifact
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LabeledSolution {
    pub scenario_id: usize,
    pub solution: OrpfSolution,
}

/// One row per (scenario, generator): `scenario_id,bus_id,q_star_pu,objective,status`.
pub fn write_labels_csv(
    path: &Path,
    labels: &[LabeledSolution],
    gen_buses: &[usize],
) -> Result<()> {
    let mut out = String::from("scenario_id,bus_id,q_star_pu,objective,status\n");
    for rec in labels {
        for (k, &bus) in gen_buses.iter().enumerate() {
            let (qs, obj) = if rec.solution.status == SolveStatus::Infeasible {
                (String::new(), String::new())
            } else {
                (
                    textio::float(rec.solution.q_star[k]),
                    textio::float(rec.solution.objective),
                )
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                rec.scenario_id,
                bus,
                qs,
                obj,
                rec.solution.status.as_str()
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
