//! Separable per-generator control surrogates.
//!
//! Each generator n carries two scalar shape functions: one of its own
//! reactive output (`psi`) and one of its local voltage (`phi`). Their sum,
//! clamped to the capability box, is the equilibrium function the
//! incremental controller tracks. Shape functions are single-hidden-layer
//! tanh networks, which keeps exact Lipschitz bookkeeping (a product-sum
//! bound over the weights) and lets monotonicity be enforced by weight
//! signs alone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sensitivity::SensitivityModel;
use crate::textio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// No monotonicity constraint.
    Free,
    /// Nonincreasing: output weights <= 0, input weights >= 0.
    Nonincreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Certified by a global contraction condition; any step size up to 1.
    CvpSc,
    /// Certified by monotone voltage response; step size bounded away from 1.
    RpSc,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::CvpSc => "cvpsc",
            Regime::RpSc => "rpsc",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "cvpsc" => Some(Regime::CvpSc),
            "rpsc" => Some(Regime::RpSc),
            _ => None,
        }
    }
}

/// Scalar function `x -> offset + sum_i w_out[i] * tanh(w_in[i] * u + b[i])`
/// with `u = (x + input_shift) * input_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarShapeFunction {
    pub input_weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub offset: f64,
    /// Input normalization, applied before the hidden layer.
    pub input_shift: f64,
    pub input_scale: f64,
    pub activation: Activation,
    pub sign_mode: SignMode,
    /// Upper bound the Lipschitz constant is held under; `None` = uncapped.
    pub slope_cap: Option<f64>,
}

impl ScalarShapeFunction {
    /// The constant function `x -> value` (empty hidden layer).
    pub fn constant(value: f64) -> ScalarShapeFunction {
        ScalarShapeFunction {
            input_weights: Vec::new(),
            biases: Vec::new(),
            output_weights: Vec::new(),
            offset: value,
            input_shift: 0.0,
            input_scale: 1.0,
            activation: Activation::Tanh,
            sign_mode: SignMode::Free,
            slope_cap: None,
        }
    }

    /// Nearly-linear function `x -> y_ref + slope * (x - x_ref)`, realized
    /// by one wide-and-shallow tanh unit. `curvature` sets how far from
    /// linear it is: relative error ~ (curvature * u_span)^2 / 3 over the
    /// normalized input span. The Lipschitz bound equals |slope| exactly.
    pub fn approx_linear(
        slope: f64,
        x_ref: f64,
        y_ref: f64,
        input_shift: f64,
        input_scale: f64,
        curvature: f64,
    ) -> ScalarShapeFunction {
        assert!(input_scale > 0.0 && curvature > 0.0);
        let u_ref = (x_ref + input_shift) * input_scale;
        let sign_mode = if slope <= 0.0 {
            SignMode::Nonincreasing
        } else {
            SignMode::Free
        };
        ScalarShapeFunction {
            input_weights: vec![curvature],
            biases: vec![-curvature * u_ref],
            output_weights: vec![slope / (curvature * input_scale)],
            offset: y_ref,
            input_shift,
            input_scale,
            activation: Activation::Tanh,
            sign_mode,
            slope_cap: None,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.output_weights.len()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let u = (x + self.input_shift) * self.input_scale;
        let mut acc = self.offset;
        for i in 0..self.hidden_size() {
            acc += self.output_weights[i] * (self.input_weights[i] * u + self.biases[i]).tanh();
        }
        acc
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let u = (x + self.input_shift) * self.input_scale;
        let mut acc = 0.0;
        for i in 0..self.hidden_size() {
            let t = (self.input_weights[i] * u + self.biases[i]).tanh();
            acc += self.output_weights[i] * self.input_weights[i] * (1.0 - t * t);
        }
        acc * self.input_scale
    }

    /// Certified Lipschitz constant: `|scale| * sum_i |w_out[i] w_in[i]|`.
    /// Never below the true maximum slope.
    pub fn lipschitz_bound(&self) -> f64 {
        let s: f64 = self
            .output_weights
            .iter()
            .zip(&self.input_weights)
            .map(|(o, i)| (o * i).abs())
            .sum();
        s * self.input_scale.abs()
    }

    /// Largest sampled |derivative| on a uniform grid over `[lo, hi]`;
    /// a lower estimate of the true maximum slope.
    pub fn sampled_max_slope(&self, lo: f64, hi: f64, samples: usize) -> f64 {
        assert!(samples >= 2 && hi >= lo);
        let mut best = 0.0f64;
        for k in 0..samples {
            let x = lo + (hi - lo) * (k as f64) / ((samples - 1) as f64);
            best = best.max(self.deriv(x).abs());
        }
        best
    }

    /// Clip weights onto the sign pattern (if monotone) and rescale output
    /// weights so the Lipschitz bound meets the cap. Idempotent.
    pub fn project_to_constraints(&mut self) {
        if self.sign_mode == SignMode::Nonincreasing {
            for w in &mut self.output_weights {
                if *w > 0.0 {
                    *w = 0.0;
                }
            }
            for w in &mut self.input_weights {
                if *w < 0.0 {
                    *w = 0.0;
                }
            }
        }
        if let Some(cap) = self.slope_cap {
            let l = self.lipschitz_bound();
            if l > cap {
                let f = if l > 0.0 { cap / l } else { 0.0 };
                for w in &mut self.output_weights {
                    *w *= f;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        if self.input_weights.len() != h || self.biases.len() != h {
            return Err(Error::ModelInvalid(format!(
                "shape function arrays disagree: {} in, {} bias, {h} out",
                self.input_weights.len(),
                self.biases.len()
            )));
        }
        let finite = self
            .input_weights
            .iter()
            .chain(&self.biases)
            .chain(&self.output_weights)
            .all(|v| v.is_finite())
            && self.offset.is_finite()
            && self.input_shift.is_finite();
        if !finite {
            return Err(Error::ModelInvalid("non-finite shape parameter".into()));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::ModelInvalid(format!(
                "input_scale must be positive and finite, got {}",
                self.input_scale
            )));
        }
        if self.sign_mode == SignMode::Nonincreasing {
            if self.output_weights.iter().any(|&w| w > 0.0)
                || self.input_weights.iter().any(|&w| w < 0.0)
            {
                return Err(Error::ModelInvalid(
                    "monotone shape function violates its weight sign pattern".into(),
                ));
            }
        }
        if let Some(cap) = self.slope_cap {
            if !(cap >= 0.0) {
                return Err(Error::ModelInvalid(format!("negative slope cap {cap}")));
            }
            let l = self.lipschitz_bound();
            if l > cap * (1.0 + 1e-12) + 1e-15 {
                return Err(Error::ModelInvalid(format!(
                    "Lipschitz bound {l} exceeds cap {cap}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSurrogate {
    pub bus: usize,
    pub q_min: f64,
    pub q_max: f64,
    pub psi: ScalarShapeFunction,
    pub phi: ScalarShapeFunction,
}

impl NodeSurrogate {
    /// `clamp(psi(q) + phi(v))`: clamping is 1-Lipschitz and preserves both
    /// monotonicity and the box, so certificates survive it.
    pub fn h(&self, q: f64, v: f64) -> f64 {
        (self.psi.eval(q) + self.phi.eval(v)).clamp(self.q_min, self.q_max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateSet {
    pub regime: Regime,
    pub nodes: Vec<NodeSurrogate>,
}

impl SurrogateSet {
    pub fn c(&self) -> usize {
        self.nodes.len()
    }

    pub fn l_psi_max(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.psi.lipschitz_bound())
            .fold(0.0, f64::max)
    }

    pub fn l_phi_max(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.phi.lipschitz_bound())
            .fold(0.0, f64::max)
    }

    /// Equilibrium target for node index `n` (set order). `q_n` must lie in
    /// the node's capability box.
    pub fn evaluate_h(&self, n: usize, q_n: f64, v_n: f64) -> Result<f64> {
        let node = self
            .nodes
            .get(n)
            .ok_or_else(|| Error::DimensionMismatch(format!("node index {n} of {}", self.c())))?;
        if q_n < node.q_min - 1e-9 || q_n > node.q_max + 1e-9 {
            return Err(Error::OutOfDomain(format!(
                "q = {q_n} outside [{}, {}] at bus {}",
                node.q_min, node.q_max, node.bus
            )));
        }
        Ok(node.h(q_n, v_n))
    }

    /// Vectorized equilibrium target over all nodes.
    pub fn h_vec(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        if q.len() != self.c() || v.len() != self.c() {
            return Err(Error::DimensionMismatch(format!(
                "q has {}, v has {}, set has {} nodes",
                q.len(),
                v.len(),
                self.c()
            )));
        }
        let mut out = DVector::zeros(self.c());
        for n in 0..self.c() {
            out[n] = self.evaluate_h(n, q[n], v[n])?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::ModelInvalid("surrogate set has no nodes".into()));
        }
        for node in &self.nodes {
            if !(node.q_min < node.q_max) {
                return Err(Error::ModelInvalid(format!(
                    "bus {}: empty capability box [{}, {}]",
                    node.bus, node.q_min, node.q_max
                )));
            }
            node.psi.validate()?;
            node.phi.validate()?;
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        textio::to_json_string(self)
    }

    pub fn from_json_str(s: &str) -> Result<SurrogateSet> {
        let set: SurrogateSet = serde_json::from_str(s)?;
        set.validate()?;
        Ok(set)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<SurrogateSet> {
        SurrogateSet::from_json_str(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Certification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub regime: Regime,
    pub l_psi_max: f64,
    pub l_phi_max: f64,
    pub x_norm: f64,
    /// Combined slope `L_psi + L_phi * ||X||`; contraction requires < 1.
    pub combined_slope: f64,
    /// Global contraction condition: combined slope below one.
    pub contraction_ok: bool,
    /// Monotone-response condition: every phi nonincreasing and L_psi < 1.
    pub monotone_ok: bool,
    /// Largest certified step size for the declared regime (0 = uncertified).
    pub eps_max: f64,
    /// Spectral radius of the update Jacobian at a reference equilibrium,
    /// when one was evaluated.
    pub jacobian_spectral_radius: Option<f64>,
}

impl StabilityCertificate {
    pub fn satisfied(&self) -> bool {
        self.eps_max > 0.0
    }

    /// Certified contraction factor of one incremental update at step `eps`
    /// (meaningful under the global contraction condition).
    pub fn contraction_factor(&self, eps: f64) -> f64 {
        1.0 - eps + eps * self.combined_slope
    }

    pub fn to_json_string(&self) -> Result<String> {
        textio::to_json_string(self)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Evaluate both stability conditions and the certified step-size range for
/// the set's declared regime. Never fails: an uncertified set simply gets
/// `eps_max = 0`.
pub fn certify(set: &SurrogateSet, sens: &SensitivityModel) -> StabilityCertificate {
    let l_psi = set.l_psi_max();
    let l_phi = set.l_phi_max();
    let x_norm = sens.x_norm();
    let combined = l_psi + l_phi * x_norm;
    let contraction_ok = combined < 1.0;
    let monotone_ok = set
        .nodes
        .iter()
        .all(|n| n.phi.sign_mode == SignMode::Nonincreasing)
        && l_psi < 1.0;
    let eps_max = match set.regime {
        Regime::CvpSc => {
            if contraction_ok {
                1.0
            } else {
                0.0
            }
        }
        Regime::RpSc => {
            if monotone_ok {
                (2.0 / (combined + 1.0)).min(1.0)
            } else {
                0.0
            }
        }
    };
    StabilityCertificate {
        regime: set.regime,
        l_psi_max: l_psi,
        l_phi_max: l_phi,
        x_norm,
        combined_slope: combined,
        contraction_ok,
        monotone_ok,
        eps_max,
        jacobian_spectral_radius: None,
    }
}

/// Spectral radius of the incremental update's Jacobian
/// `(1 - eps) I + eps (J_psi + J_phi X)` at the point `(q, gen_voltage(q))`.
///
/// Errors at nondifferentiable points: a coordinate on its box boundary or
/// a raw target exactly at the clamp threshold. When every phi has strictly
/// negative slope the spectrum is provably real (the matrix is similar to a
/// symmetric one); that realness is asserted to 1e-8 and the radius comes
/// from the real parts.
pub fn jacobian_spectral_radius(
    set: &SurrogateSet,
    sens: &SensitivityModel,
    q: &DVector<f64>,
    eps: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::EpsOutOfRange(eps));
    }
    let c = set.c();
    if q.len() != c || sens.c() != c {
        return Err(Error::DimensionMismatch(format!(
            "q has {}, sensitivity has {}, set has {c} nodes",
            q.len(),
            sens.c()
        )));
    }
    let v = sens.gen_voltage(q)?;
    let boundary_tol = 1e-9;

    let mut d_psi = DVector::zeros(c);
    let mut d_phi = DVector::zeros(c);
    for n in 0..c {
        let node = &set.nodes[n];
        if (q[n] - node.q_min).abs() <= boundary_tol || (q[n] - node.q_max).abs() <= boundary_tol {
            return Err(Error::NonsmoothPoint(format!(
                "q at bus {} sits on its box boundary",
                node.bus
            )));
        }
        let raw = node.psi.eval(q[n]) + node.phi.eval(v[n]);
        if (raw - node.q_min).abs() <= boundary_tol || (raw - node.q_max).abs() <= boundary_tol {
            return Err(Error::NonsmoothPoint(format!(
                "clamp threshold active at bus {}",
                node.bus
            )));
        }
        if raw > node.q_min && raw < node.q_max {
            d_psi[n] = node.psi.deriv(q[n]);
            d_phi[n] = node.phi.deriv(v[n]);
        }
        // Saturated target: locally constant, both slopes stay zero.
    }

    let x = sens.x_gen();
    let mut jac = DMatrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            let mut v_ij = eps * d_phi[i] * x[(i, j)];
            if i == j {
                v_ij += 1.0 - eps + eps * d_psi[i];
            }
            jac[(i, j)] = v_ij;
        }
    }

    let eigs = jac.complex_eigenvalues();
    let radius = eigs.iter().map(|l| l.norm()).fold(0.0, f64::max);

    let strictly_negative = (0..c).all(|n| d_phi[n] < 0.0);
    if strictly_negative {
        let max_imag = eigs.iter().map(|l| l.im.abs()).fold(0.0, f64::max);
        if max_imag > 1e-8 * radius.max(1.0) {
            return Err(Error::Numerical(format!(
                "expected a real spectrum (all phi slopes negative), got imaginary part {max_imag:.3e}"
            )));
        }
    }
    Ok(radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{synthetic_feeder, SyntheticFeederOptions};
    use crate::sensitivity::build_sensitivity;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_shape(rng: &mut ChaCha20Rng, hidden: usize) -> ScalarShapeFunction {
        ScalarShapeFunction {
            input_weights: (0..hidden).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            biases: (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            output_weights: (0..hidden).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            offset: rng.gen_range(-0.2..0.2),
            input_shift: -1.0,
            input_scale: 1.0,
            activation: Activation::Tanh,
            sign_mode: SignMode::Free,
            slope_cap: None,
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let f = random_shape(&mut rng, 8);
        for k in 0..20 {
            let x = -2.0 + 0.2 * k as f64;
            let h = 1e-6;
            let fd = (f.eval(x + h) - f.eval(x - h)) / (2.0 * h);
            assert_relative_eq!(f.deriv(x), fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn lipschitz_bound_dominates_sampled_slope() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = random_shape(&mut rng, 12);
            let bound = f.lipschitz_bound();
            let sampled = f.sampled_max_slope(-3.0, 3.0, 2001);
            assert!(
                sampled <= bound * (1.0 + 1e-12),
                "sampled {sampled} > bound {bound}"
            );
        }
    }

    #[test]
    fn projection_enforces_cap_and_signs() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut f = random_shape(&mut rng, 10);
        f.sign_mode = SignMode::Nonincreasing;
        f.slope_cap = Some(0.3);
        f.project_to_constraints();
        f.validate().unwrap();
        assert!(f.lipschitz_bound() <= 0.3 + 1e-12);
        assert!(f.output_weights.iter().all(|&w| w <= 0.0));
        assert!(f.input_weights.iter().all(|&w| w >= 0.0));
        // Idempotent.
        let before = f.clone();
        f.project_to_constraints();
        assert_eq!(before, f);
        // Monotone projection makes the function nonincreasing in fact.
        let mut prev = f.eval(-3.0);
        for k in 1..=60 {
            let cur = f.eval(-3.0 + 0.1 * k as f64);
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn approx_linear_tracks_a_line() {
        let f = ScalarShapeFunction::approx_linear(-0.5, 1.0, 0.02, -1.0, 1.0, 1e-6);
        for k in 0..=40 {
            let x = 0.9 + 0.005 * k as f64;
            let want = 0.02 - 0.5 * (x - 1.0);
            assert_relative_eq!(f.eval(x), want, epsilon = 1e-12);
        }
        assert_relative_eq!(f.lipschitz_bound(), 0.5, epsilon = 1e-15);
        assert_eq!(f.sign_mode, SignMode::Nonincreasing);
        f.validate().unwrap();
    }

    fn droop_set(regime: Regime, psi_slope: f64, phi_slope: f64, boxes: &[(f64, f64)]) -> SurrogateSet {
        let nodes = boxes
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| NodeSurrogate {
                bus: i + 1,
                q_min: lo,
                q_max: hi,
                psi: ScalarShapeFunction::approx_linear(
                    psi_slope,
                    0.0,
                    0.0,
                    0.0,
                    1.0 / hi.abs().max(lo.abs()),
                    1e-6,
                ),
                phi: ScalarShapeFunction::approx_linear(phi_slope, 1.0, 0.0, -1.0, 1.0, 1e-6),
            })
            .collect();
        SurrogateSet { regime, nodes }
    }

    #[test]
    fn clamped_target_and_domain_checks() {
        let set = droop_set(Regime::CvpSc, 0.3, -0.5, &[(-0.4, 0.4)]);
        // Far-below-band voltage drives the raw target above the box.
        let h = set.evaluate_h(0, 0.0, 0.1).unwrap();
        assert_eq!(h, 0.4);
        assert!(set.evaluate_h(0, 0.7, 1.0).is_err());
        let q = DVector::from_vec(vec![0.1]);
        let v = DVector::from_vec(vec![1.01]);
        let hv = set.h_vec(&q, &v).unwrap();
        let want = 0.3 * 0.1 - 0.5 * (1.01 - 1.0);
        assert_relative_eq!(hv[0], want, epsilon = 1e-9);
    }

    #[test]
    fn certificate_formulas() {
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(11));
        let s = build_sensitivity(&m).unwrap();
        let xn = s.x_norm();

        // Contraction regime: combined slope must be under one.
        let phi_slope = -0.5 / xn;
        let set = droop_set(Regime::CvpSc, 0.3, phi_slope, &m.generator_boxes());
        let cert = certify(&set, &s);
        assert_relative_eq!(cert.l_psi_max, 0.3, epsilon = 1e-12);
        assert_relative_eq!(cert.l_phi_max, 0.5 / xn, epsilon = 1e-12);
        assert_relative_eq!(cert.combined_slope, 0.3 + 0.5, epsilon = 1e-10);
        assert!(cert.contraction_ok);
        assert_eq!(cert.eps_max, 1.0);
        assert_relative_eq!(cert.contraction_factor(1.0), 0.8, epsilon = 1e-10);

        // Monotone regime: eps_max = 2 / (combined + 1) when it exceeds the
        // contraction threshold.
        let steep = droop_set(Regime::RpSc, 0.6, -2.0 / xn, &m.generator_boxes());
        let cert2 = certify(&steep, &s);
        assert!(!cert2.contraction_ok);
        assert!(cert2.monotone_ok);
        assert_relative_eq!(cert2.eps_max, 2.0 / (0.6 + 2.0 + 1.0), epsilon = 1e-9);

        // Declared contraction but violated: certificate refuses a step.
        let bad = droop_set(Regime::CvpSc, 0.6, -2.0 / xn, &m.generator_boxes());
        let cert3 = certify(&bad, &s);
        assert!(!cert3.satisfied());
        assert_eq!(cert3.eps_max, 0.0);
    }

    #[test]
    fn spectral_radius_matches_contraction_prediction() {
        // For the nearly-linear droop set the Jacobian is essentially
        // (1-eps)I + eps(a I + b X); its radius is computable per eigenvalue
        // of X and must stay below the certified contraction factor.
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(11));
        let s = build_sensitivity(&m).unwrap();
        let xn = s.x_norm();
        let a = 0.2;
        let b = -0.4 / xn;
        let set = droop_set(Regime::CvpSc, a, b, &m.generator_boxes());
        let cert = certify(&set, &s);
        assert!(cert.contraction_ok);

        let q = DVector::zeros(s.c());
        let eps = 0.7;
        let rho = jacobian_spectral_radius(&set, &s, &q, eps).unwrap();
        assert!(rho < 1.0);
        assert!(rho <= cert.contraction_factor(eps) + 1e-9);

        // Oracle: eigenvalues mu of X give 1 - eps + eps(a + b mu).
        let xg = s.x_gen().into_owned();
        let mu = xg.symmetric_eigen().eigenvalues;
        let oracle = mu
            .iter()
            .map(|&m_| (1.0 - eps + eps * (a + b * m_)).abs())
            .fold(0.0, f64::max);
        assert_relative_eq!(rho, oracle, max_relative = 1e-6);
    }

    #[test]
    fn spectral_radius_rejects_boundary_points() {
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(11));
        let s = build_sensitivity(&m).unwrap();
        let set = droop_set(Regime::CvpSc, 0.2, -0.3, &m.generator_boxes());
        let mut q = DVector::zeros(s.c());
        q[0] = 0.4; // on the box boundary
        let err = jacobian_spectral_radius(&set, &s, &q, 0.5).unwrap_err();
        assert!(matches!(err, Error::NonsmoothPoint(_)), "{err}");
        assert!(matches!(
            jacobian_spectral_radius(&set, &s, &DVector::zeros(s.c()), 1.5).unwrap_err(),
            Error::EpsOutOfRange(_)
        ));
    }

    #[test]
    fn json_round_trip() {
        let set = droop_set(Regime::RpSc, 0.4, -1.0, &[(-0.4, 0.4), (-0.2, 0.3)]);
        let text = set.to_json_string().unwrap();
        let back = SurrogateSet::from_json_str(&text).unwrap();
        assert_eq!(back.regime, Regime::RpSc);
        assert_eq!(back.nodes.len(), 2);
        assert_eq!(set.nodes[0].psi, back.nodes[0].psi);
        assert_eq!(text, back.to_json_string().unwrap());
        // Uncapped slope serializes as an explicit null, not a number.
        assert!(text.contains("\"slope_cap\":null"));
    }

    #[test]
    fn validate_rejects_cap_violation() {
        let mut f = ScalarShapeFunction::approx_linear(-0.8, 1.0, 0.0, -1.0, 1.0, 1e-6);
        f.slope_cap = Some(0.5);
        assert!(f.validate().is_err());
        f.project_to_constraints();
        f.validate().unwrap();
        assert!(f.lipschitz_bound() <= 0.5 + 1e-12);
    }
}
