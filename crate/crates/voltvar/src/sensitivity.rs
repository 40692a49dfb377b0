//! Linearized voltage sensitivity of a radial feeder.
//!
//! The bus admittance matrix is reduced by removing the substation row and
//! column; the real and imaginary parts of its inverse give the resistance
//! and reactance sensitivity matrices. Voltages then follow the affine map
//! `v = Rtilde p + Xtilde q + 1`, and the generator-facing blocks drive
//! both dispatch and closed-loop control.
//!
//! Internally everything is stored in *partitioned* order: generator buses
//! first (ascending id), then load buses (ascending id). Public maps accept
//! and return natural bus order (1..=N) unless a method says otherwise.

use nalgebra::{DMatrix, DMatrixView, DVector};
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::textio;

/// Bus admittance matrix including the substation row/column. Symmetric,
/// zero row sums; the lossless-shunt convention of a pure branch model.
pub fn build_admittance(model: &FeederModel) -> DMatrix<Complex<f64>> {
    let n = model.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
    for l in model.lines() {
        let z = Complex::new(l.r, l.x);
        let ya = z.inv();
        y[(l.from, l.to)] -= ya;
        y[(l.to, l.from)] -= ya;
        y[(l.from, l.from)] += ya;
        y[(l.to, l.to)] += ya;
    }
    y
}

#[derive(Debug, Clone)]
pub struct SensitivityModel {
    gen_buses: Vec<usize>,
    load_buses: Vec<usize>,
    /// Position of each bus (1..=N) in partitioned order; index 0 unused.
    pos: Vec<usize>,
    /// N x N resistance sensitivity, partitioned order.
    rtilde: DMatrix<f64>,
    /// N x N reactance sensitivity, partitioned order.
    xtilde: DMatrix<f64>,
    /// Affine voltage offset at fixed (p, q_load), partitioned order.
    v_hat: DVector<f64>,
    /// Spectral norm of the generator-block reactance sensitivity.
    x_norm: f64,
}

fn symmetric_min_max_eig(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &ev in eig.eigenvalues.iter() {
        lo = lo.min(ev);
        hi = hi.max(ev);
    }
    (lo, hi)
}

fn check_positive_definite(m: &DMatrix<f64>, name: &str) -> Result<f64> {
    let (lo, hi) = symmetric_min_max_eig(m);
    if !(lo > 1e-10 * hi.max(0.0)) {
        return Err(Error::ModelInvalid(format!(
            "{name} is not positive definite (smallest eigenvalue {lo:.6e})"
        )));
    }
    Ok(hi)
}

/// Build the sensitivity model from a feeder, taking the feeder's stored
/// injections as the uncontrolled operating point.
pub fn build_sensitivity(model: &FeederModel) -> Result<SensitivityModel> {
    let n = model.n();
    let y = build_admittance(model);

    // Drop the substation row/column and invert.
    let y_red = y.view((1, 1), (n, n)).into_owned();
    let z = y_red
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::NumericalRank("reduced admittance matrix is singular".into()))?;

    // The inverse of a symmetric matrix is symmetric; scrub LU round-off so
    // downstream symmetric eigensolves are exact about it.
    let mut rt_nat = DMatrix::zeros(n, n);
    let mut xt_nat = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let re = 0.5 * (z[(i, j)].re + z[(j, i)].re);
            let im = 0.5 * (z[(i, j)].im + z[(j, i)].im);
            rt_nat[(i, j)] = re;
            xt_nat[(i, j)] = im;
        }
    }

    let gen_buses = model.generator_buses().to_vec();
    let load_buses = model.load_buses().to_vec();
    let order: Vec<usize> = gen_buses.iter().chain(load_buses.iter()).copied().collect();
    let mut pos = vec![usize::MAX; n + 1];
    for (k, &b) in order.iter().enumerate() {
        pos[b] = k;
    }

    let perm = |m: &DMatrix<f64>| -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| m[(order[i] - 1, order[j] - 1)])
    };
    let rtilde = perm(&rt_nat);
    let xtilde = perm(&xt_nat);

    check_positive_definite(&rtilde, "resistance sensitivity")?;
    check_positive_definite(&xtilde, "reactance sensitivity")?;

    let c = gen_buses.len();
    let x_norm = {
        let x_gen = xtilde.view((0, 0), (c, c)).into_owned();
        let (_, hi) = symmetric_min_max_eig(&x_gen);
        hi
    };

    let mut sens = SensitivityModel {
        gen_buses,
        load_buses,
        pos,
        rtilde,
        xtilde,
        v_hat: DVector::zeros(n),
        x_norm,
    };
    sens.v_hat = sens.compute_v_hat(&model.p_vector(), &model.q_load_vector())?;
    Ok(sens)
}

impl SensitivityModel {
    pub fn n(&self) -> usize {
        self.rtilde.nrows()
    }

    pub fn c(&self) -> usize {
        self.gen_buses.len()
    }

    pub fn gen_buses(&self) -> &[usize] {
        &self.gen_buses
    }

    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }

    /// Position of a bus id in partitioned order.
    pub fn partitioned_index(&self, bus: usize) -> usize {
        self.pos[bus]
    }

    /// Full resistance sensitivity in partitioned order.
    pub fn rtilde(&self) -> &DMatrix<f64> {
        &self.rtilde
    }

    /// Full reactance sensitivity in partitioned order.
    pub fn xtilde(&self) -> &DMatrix<f64> {
        &self.xtilde
    }

    /// Generator-to-generator reactance block (C x C, symmetric PD).
    pub fn x_gen(&self) -> DMatrixView<'_, f64> {
        let c = self.c();
        self.xtilde.view((0, 0), (c, c))
    }

    /// Generator-to-load reactance block (C x L).
    pub fn x_gen_load(&self) -> DMatrixView<'_, f64> {
        let c = self.c();
        let l = self.n() - c;
        self.xtilde.view((0, c), (c, l))
    }

    /// Load-to-load reactance block (L x L).
    pub fn x_load(&self) -> DMatrixView<'_, f64> {
        let c = self.c();
        let l = self.n() - c;
        self.xtilde.view((c, c), (l, l))
    }

    /// Generator-to-generator resistance block (C x C, symmetric PD).
    pub fn r_gen(&self) -> DMatrixView<'_, f64> {
        let c = self.c();
        self.rtilde.view((0, 0), (c, c))
    }

    /// Generator-to-load resistance block (C x L).
    pub fn r_gen_load(&self) -> DMatrixView<'_, f64> {
        let c = self.c();
        let l = self.n() - c;
        self.rtilde.view((0, c), (c, l))
    }

    /// Load-to-load resistance block (L x L).
    pub fn r_load(&self) -> DMatrixView<'_, f64> {
        let c = self.c();
        let l = self.n() - c;
        self.rtilde.view((c, c), (l, l))
    }

    /// Spectral norm of [`Self::x_gen`].
    pub fn x_norm(&self) -> f64 {
        self.x_norm
    }

    /// Voltage offset vector in partitioned order.
    pub fn v_hat(&self) -> &DVector<f64> {
        &self.v_hat
    }

    /// Offset at generator buses (generator order).
    pub fn v_hat_gen(&self) -> DVector<f64> {
        DVector::from_fn(self.c(), |i, _| self.v_hat[i])
    }

    fn compute_v_hat(&self, p: &[f64], q_load: &[f64]) -> Result<DVector<f64>> {
        let n = self.n();
        let c = self.c();
        let l = n - c;
        if p.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "p has {} entries, expected {n}",
                p.len()
            )));
        }
        if q_load.len() != l {
            return Err(Error::DimensionMismatch(format!(
                "q_load has {} entries, expected {l}",
                q_load.len()
            )));
        }
        // Partition p by bus id; q_load arrives already in load order.
        let mut p_part = DVector::zeros(n);
        for bus in 1..=n {
            p_part[self.pos[bus]] = p[bus - 1];
        }
        let ql = DVector::from_column_slice(q_load);
        let x_cols_l = self.xtilde.view((0, c), (n, l));
        let mut v = x_cols_l * ql;
        v += &self.rtilde * p_part;
        v.add_scalar_mut(1.0);
        Ok(v)
    }

    /// Same matrices, new operating point: replaces the stored offset with
    /// one computed from `p` (bus order) and `q_load` (load order).
    pub fn with_injections(&self, p: &[f64], q_load: &[f64]) -> Result<SensitivityModel> {
        let mut out = self.clone();
        out.v_hat = self.compute_v_hat(p, q_load)?;
        Ok(out)
    }

    /// Voltage at every non-substation bus (natural bus order 1..=N) under
    /// the linear model, for generator reactive output `q_c`.
    pub fn linear_voltage(&self, q_c: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n();
        let c = self.c();
        if q_c.len() != c {
            return Err(Error::DimensionMismatch(format!(
                "q_c has {} entries, expected {c}",
                q_c.len()
            )));
        }
        let x_cols_c = self.xtilde.view((0, 0), (n, c));
        let mut v_part = x_cols_c * q_c;
        v_part += &self.v_hat;
        let mut v = DVector::zeros(n);
        for bus in 1..=n {
            v[bus - 1] = v_part[self.pos[bus]];
        }
        Ok(v)
    }

    /// Voltage at generator buses only (generator order). Bit-identical to
    /// the generator entries of [`Self::linear_voltage`].
    pub fn gen_voltage(&self, q_c: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.c();
        if q_c.len() != c {
            return Err(Error::DimensionMismatch(format!(
                "q_c has {} entries, expected {c}",
                q_c.len()
            )));
        }
        // Same column-axpy evaluation order as the full map, restricted to
        // the first C rows, so the two agree exactly.
        let x_rows = self.xtilde.view((0, 0), (c, c));
        let mut v = x_rows * q_c;
        for i in 0..c {
            v[i] += self.v_hat[i];
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// JSON artifact
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixJson {
    fn from_matrix(m: &DMatrix<f64>) -> MatrixJson {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixJson { rows: m.nrows(), cols: m.ncols(), data }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix payload has {} entries for {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.data[i * self.cols + j]
        }))
    }
}

#[derive(Serialize, Deserialize)]
struct SensitivityJson {
    n: usize,
    c: usize,
    gen_buses: Vec<usize>,
    load_buses: Vec<usize>,
    rtilde: MatrixJson,
    xtilde: MatrixJson,
    v_hat: Vec<f64>,
    x_norm: f64,
}

impl SensitivityModel {
    pub fn to_json_string(&self) -> Result<String> {
        let file = SensitivityJson {
            n: self.n(),
            c: self.c(),
            gen_buses: self.gen_buses.clone(),
            load_buses: self.load_buses.clone(),
            rtilde: MatrixJson::from_matrix(&self.rtilde),
            xtilde: MatrixJson::from_matrix(&self.xtilde),
            v_hat: self.v_hat.iter().copied().collect(),
            x_norm: self.x_norm,
        };
        textio::to_json_string(&file)
    }

    pub fn from_json_str(s: &str) -> Result<SensitivityModel> {
        let file: SensitivityJson = serde_json::from_str(s)?;
        let n = file.n;
        let c = file.c;
        if file.gen_buses.len() != c
            || file.gen_buses.len() + file.load_buses.len() != n
            || file.v_hat.len() != n
        {
            return Err(Error::DimensionMismatch(
                "inconsistent dimensions in sensitivity file".into(),
            ));
        }
        let rtilde = file.rtilde.to_matrix()?;
        let xtilde = file.xtilde.to_matrix()?;
        if rtilde.shape() != (n, n) || xtilde.shape() != (n, n) {
            return Err(Error::DimensionMismatch(
                "sensitivity matrices must be N x N".into(),
            ));
        }
        let mut pos = vec![usize::MAX; n + 1];
        for (k, &b) in file
            .gen_buses
            .iter()
            .chain(file.load_buses.iter())
            .enumerate()
        {
            if b == 0 || b > n || pos[b] != usize::MAX {
                return Err(Error::ModelInvalid(format!(
                    "bus {b} out of range or repeated in sensitivity file"
                )));
            }
            pos[b] = k;
        }
        check_positive_definite(&rtilde, "resistance sensitivity")?;
        check_positive_definite(&xtilde, "reactance sensitivity")?;
        Ok(SensitivityModel {
            gen_buses: file.gen_buses,
            load_buses: file.load_buses,
            pos,
            rtilde,
            xtilde,
            v_hat: DVector::from_vec(file.v_hat),
            x_norm: file.x_norm,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<SensitivityModel> {
        let s = std::fs::read_to_string(path)?;
        SensitivityModel::from_json_str(&s)
    }
}
