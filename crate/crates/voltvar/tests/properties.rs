//! Randomized structural invariants. Every property here is a theorem of
//! the implementation — not a statistical tendency — so any shrunk
//! counterexample is a real bug. Strategies generate whole feeders,
//! surrogate weight patterns, and dispatch batches.

use std::collections::HashSet;
use std::sync::OnceLock;

use nalgebra::DVector;
use proptest::prelude::*;

use voltvar::feeder::{
    synthetic_feeder, Bus, BusKind, FeederModel, Line, SyntheticFeederOptions,
};
use voltvar::format_float;
use voltvar::orpf::{self, AdmmOptions, SolveStatus};
use voltvar::sensitivity::{build_admittance, build_sensitivity, SensitivityModel};
use voltvar::sim::{g_apply, step};
use voltvar::surrogate::{
    Activation, NodeSurrogate, Regime, ScalarShapeFunction, SignMode, SurrogateSet,
};
use voltvar::train::{fit, DataRow, FitHyper, NodeDataset};

// ---- generated feeders --------------------------------------------------

/// Proptest-owned description of a random radial feeder. Bus i+1 attaches
/// to a uniformly chosen earlier bus, so every tree shape is reachable.
#[derive(Debug, Clone)]
struct TreeSpec {
    picks: Vec<prop::sample::Index>,
    rx: Vec<(f64, f64)>,
    gen_flags: Vec<bool>,
    loads: Vec<(f64, f64)>,
}

fn tree_spec(max_buses: usize) -> impl Strategy<Value = TreeSpec> {
    (2..max_buses).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<prop::sample::Index>(), n),
            prop::collection::vec((0.005f64..0.05, 0.01f64..0.08), n),
            prop::collection::vec(prop::bool::weighted(0.4), n),
            prop::collection::vec((0.0f64..0.1, 0.0f64..0.05), n),
        )
            .prop_map(|(picks, rx, gen_flags, loads)| TreeSpec { picks, rx, gen_flags, loads })
    })
}

fn build_feeder(spec: &TreeSpec) -> FeederModel {
    let n = spec.rx.len();
    let any_gen = spec.gen_flags.iter().any(|&g| g);
    let mut buses = vec![Bus {
        id: 0,
        kind: BusKind::Substation,
        p: 0.0,
        q: 0.0,
        q_box: None,
        v_min: 0.9,
        v_max: 1.1,
    }];
    let mut lines = Vec::with_capacity(n);
    for i in 0..n {
        let id = i + 1;
        let gen = spec.gen_flags[i] || (!any_gen && i == n - 1);
        buses.push(Bus {
            id,
            kind: if gen { BusKind::Generator } else { BusKind::Load },
            p: if gen { 0.02 } else { -spec.loads[i].0 },
            q: if gen { 0.0 } else { -spec.loads[i].1 },
            q_box: gen.then_some((-0.25, 0.25)),
            v_min: 0.9,
            v_max: 1.1,
        });
        let parent = if i == 0 { 0 } else { spec.picks[i].index(id) };
        lines.push(Line { from: parent, to: id, r: spec.rx[i].0, x: spec.rx[i].1 });
    }
    FeederModel::new(buses, lines).expect("generated trees satisfy the model contract")
}

/// Fixed host feeder for surrogate and dispatch properties; the randomness
/// lives in the surrogates, operating points, and step sizes.
fn host() -> &'static (FeederModel, SensitivityModel) {
    static HOST: OnceLock<(FeederModel, SensitivityModel)> = OnceLock::new();
    HOST.get_or_init(|| {
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(11));
        let s = build_sensitivity(&m).expect("host feeder is well posed");
        (m, s)
    })
}

// ---- generated surrogates ------------------------------------------------

/// Raw hidden units plus this node's share of the instance slope budget.
#[derive(Debug, Clone)]
struct ShapeDraw {
    units: Vec<(f64, f64, f64)>,
    frac: f64,
}

fn shape_draw() -> impl Strategy<Value = ShapeDraw> {
    (
        prop::collection::vec((-1.5f64..1.5, -1.0f64..1.0, -1.5f64..1.5), 1..5),
        0.2f64..1.0,
    )
        .prop_map(|(units, frac)| ShapeDraw { units, frac })
}

/// One slope budget per instance, split between the setpoint and voltage
/// branches. The certificate combines per-branch maxima taken over
/// different nodes, so budgets must not be drawn per node.
#[derive(Debug, Clone)]
struct SetDraw {
    total: f64,
    split: f64,
    nodes: Vec<(ShapeDraw, ShapeDraw)>,
}

fn set_draw(c: usize, max_total: f64) -> impl Strategy<Value = SetDraw> {
    (
        0.05f64..max_total,
        0.0f64..1.0,
        prop::collection::vec((shape_draw(), shape_draw()), c),
    )
        .prop_map(|(total, split, nodes)| SetDraw { total, split, nodes })
}

fn materialize_shape(d: &ShapeDraw, target: f64, shift: f64, scale: f64) -> ScalarShapeFunction {
    let mut s = ScalarShapeFunction {
        input_weights: d.units.iter().map(|u| u.0).collect(),
        biases: d.units.iter().map(|u| u.1).collect(),
        output_weights: d.units.iter().map(|u| u.2).collect(),
        offset: 0.0,
        input_shift: shift,
        input_scale: scale,
        activation: Activation::Tanh,
        sign_mode: SignMode::Free,
        slope_cap: None,
    };
    let b = s.lipschitz_bound();
    if b > 1e-9 {
        let f = target / b;
        for w in &mut s.output_weights {
            *w *= f;
        }
    }
    s
}

fn materialize_set(d: &SetDraw, model: &FeederModel, x_norm: f64) -> SurrogateSet {
    let psi_budget = d.total * d.split;
    let phi_budget = d.total * (1.0 - d.split);
    let nodes = model
        .generator_buses()
        .iter()
        .zip(model.generator_boxes())
        .zip(&d.nodes)
        .map(|((&bus, (lo, hi)), (pd, fd))| NodeSurrogate {
            bus,
            q_min: lo,
            q_max: hi,
            psi: materialize_shape(pd, psi_budget * pd.frac, 0.0, 1.0 / hi.max(0.1)),
            phi: materialize_shape(fd, phi_budget * fd.frac / x_norm, -1.0, 10.0),
        })
        .collect();
    SurrogateSet { regime: Regime::CvpSc, nodes }
}

fn shape_bits(s: &ScalarShapeFunction) -> Vec<u64> {
    s.input_weights
        .iter()
        .chain(&s.biases)
        .chain(&s.output_weights)
        .chain([&s.offset, &s.input_shift, &s.input_scale])
        .map(|w| w.to_bits())
        .collect()
}

// ---- text round-trips ----------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2048))]

    /// The CSV float format survives a parse with the exact same bits,
    /// including negative zero and subnormals.
    #[test]
    fn float_text_round_trips_every_finite_value(
        x in any::<f64>().prop_filter("finite", |v| v.is_finite()),
    ) {
        let text = format_float(x);
        let back: f64 = text.parse().expect("formatted floats reparse");
        prop_assert_eq!(back.to_bits(), x.to_bits(), "{} reparsed as {:e}", text, back);
    }
}

// ---- feeder structure ----------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Branch-model admittance: symmetric with zero row sums (no shunts),
    /// and the sensitivity matrices equal shared-root-path impedance sums.
    #[test]
    fn tree_sensitivities_match_shared_path_sums(spec in tree_spec(12)) {
        let m = build_feeder(&spec);
        let y = build_admittance(&m);
        let nb = m.n_buses();
        let scale = y.iter().map(|c| c.norm()).fold(1.0, f64::max);
        for i in 0..nb {
            let mut re = 0.0;
            let mut im = 0.0;
            for j in 0..nb {
                prop_assert!((y[(i, j)] - y[(j, i)]).norm() <= 1e-12 * scale);
                re += y[(i, j)].re;
                im += y[(i, j)].im;
            }
            prop_assert!(re.hypot(im) <= 1e-12 * scale, "row {} sums to {}+{}j", i, re, im);
        }

        let s = build_sensitivity(&m).expect("random trees are well posed");
        for a in 1..=m.n() {
            let pa: HashSet<usize> = m.root_path(a).into_iter().collect();
            for b in a..=m.n() {
                let mut r_sum = 0.0;
                let mut x_sum = 0.0;
                for e in m.root_path(b) {
                    if pa.contains(&e) {
                        let line = m.line_into(e);
                        r_sum += line.r;
                        x_sum += line.x;
                    }
                }
                let i = s.partitioned_index(a);
                let j = s.partitioned_index(b);
                prop_assert!((s.rtilde()[(i, j)] - r_sum).abs() <= 1e-9);
                prop_assert!((s.xtilde()[(i, j)] - x_sum).abs() <= 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The voltage map is affine: deviations from the zero-dispatch voltage
    /// superpose linearly.
    #[test]
    fn linear_voltage_superposes(
        q1 in prop::collection::vec(-0.5f64..0.5, 5),
        q2 in prop::collection::vec(-0.5f64..0.5, 5),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let (_, sens) = host();
        let q1 = DVector::from_vec(q1);
        let q2 = DVector::from_vec(q2);
        let v0 = sens.linear_voltage(&DVector::zeros(sens.c())).unwrap();
        let lhs = sens.linear_voltage(&(&q1 * a + &q2 * b)).unwrap() - &v0;
        let rhs = (sens.linear_voltage(&q1).unwrap() - &v0) * a
            + (sens.linear_voltage(&q2).unwrap() - &v0) * b;
        prop_assert!((lhs - rhs).amax() <= 1e-12);
    }
}

// ---- surrogate constraints ------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Projection lands inside the constraint set (validate passes), and
    /// from a feasible point it is the bitwise identity.
    #[test]
    fn projection_caps_slope_and_fixes_feasible_points(
        units in prop::collection::vec((-2.0f64..2.0, -1.0f64..1.0, -2.0f64..2.0), 1..6),
        cap in 0.05f64..2.0,
        monotone in any::<bool>(),
        shift in -1.0f64..1.0,
        scale in 0.1f64..5.0,
    ) {
        let mut s = ScalarShapeFunction {
            input_weights: units.iter().map(|u| u.0).collect(),
            biases: units.iter().map(|u| u.1).collect(),
            output_weights: units.iter().map(|u| u.2).collect(),
            offset: 0.0,
            input_shift: shift,
            input_scale: scale,
            activation: Activation::Tanh,
            sign_mode: if monotone { SignMode::Nonincreasing } else { SignMode::Free },
            slope_cap: Some(cap),
        };
        s.project_to_constraints();
        prop_assert!(s.validate().is_ok(), "projected shape fails validation: {:?}", s.validate());
        if monotone {
            prop_assert!(s.input_weights.iter().all(|w| *w >= 0.0));
            prop_assert!(s.output_weights.iter().all(|w| *w <= 0.0));
        }
        // Feasible points are fixed points of the projection, bit for bit.
        if s.lipschitz_bound() <= cap {
            let mut again = s.clone();
            again.project_to_constraints();
            prop_assert_eq!(shape_bits(&again), shape_bits(&s));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// One closed-loop update against the linear plant shrinks distances by
    /// at least the certified factor 1 - eps + eps*(L_psi + L_phi*||X||),
    /// measured in the 2-norm the certificate is stated in.
    #[test]
    fn certified_factor_bounds_single_step_contraction(
        draw in set_draw(5, 0.95),
        qf in prop::collection::vec(0.0f64..=1.0, 5),
        qg in prop::collection::vec(0.0f64..=1.0, 5),
        eps in 0.05f64..=1.0,
    ) {
        let (model, sens) = host();
        let set = materialize_set(&draw, model, sens.x_norm());
        let kappa = 1.0 - eps + eps * (set.l_psi_max() + set.l_phi_max() * sens.x_norm());
        prop_assert!(kappa < 1.0, "budgeted draws stay contractive, got {}", kappa);

        let boxes = model.generator_boxes();
        let at = |f: &[f64]| {
            DVector::from_fn(boxes.len(), |i, _| boxes[i].0 + f[i] * (boxes[i].1 - boxes[i].0))
        };
        let q = at(&qf);
        let qp = at(&qg);
        let d0 = (&q - &qp).norm();
        let d1 = (g_apply(&set, sens, &q, eps).unwrap()
            - g_apply(&set, sens, &qp, eps).unwrap())
        .norm();
        prop_assert!(
            d1 <= kappa * d0 + 1e-12,
            "step expanded: {} > {} * {}",
            d1,
            kappa,
            d0
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Forward invariance of the capability boxes: from any state inside
    /// them, the update lands inside them again — for every step size and
    /// any voltage input, certified or not.
    #[test]
    fn update_step_lands_in_capability_boxes(
        draw in set_draw(5, 4.0),
        qf in prop::collection::vec(0.0f64..=1.0, 5),
        v in prop::collection::vec(0.5f64..1.5, 5),
        eps in 0.0f64..=1.0,
    ) {
        let (model, sens) = host();
        let set = materialize_set(&draw, model, sens.x_norm());
        let q = DVector::from_fn(set.c(), |i, _| {
            let node = &set.nodes[i];
            node.q_min + qf[i] * (node.q_max - node.q_min)
        });
        let out = step(&set, &q, &DVector::from_vec(v), eps).unwrap();
        for (n, node) in set.nodes.iter().enumerate() {
            prop_assert!(out[n] >= node.q_min && out[n] <= node.q_max);
        }
    }
}

// ---- dispatch solver -------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Batch solving is the same computation as a sequential loop over the
    /// problems: identical statuses and bitwise-identical iterates.
    #[test]
    fn batch_dispatch_matches_sequential_loop_bitwise(
        scales in prop::collection::vec((0.2f64..1.2, 0.2f64..1.2), 1..4),
    ) {
        let (model, sens) = host();
        let (v_lo, v_hi) = model.voltage_limits();
        let boxes = model.generator_boxes();
        let problems: Vec<_> = scales
            .iter()
            .map(|&(sp, sq)| {
                let p: Vec<f64> = model.p_vector().iter().map(|v| v * sp).collect();
                let ql: Vec<f64> = model.q_load_vector().iter().map(|v| v * sq).collect();
                orpf::assemble(sens, &p, &ql, &boxes, (&v_lo, &v_hi)).unwrap()
            })
            .collect();

        let opts = AdmmOptions::default();
        let batch = orpf::solve_batch(&problems, &opts);
        for (problem, got) in problems.iter().zip(&batch) {
            let solo = orpf::solve_with(problem, &opts, None);
            prop_assert_eq!(got.status, solo.status);
            prop_assert_eq!(got.iterations, solo.iterations);
            prop_assert_eq!(got.objective.to_bits(), solo.objective.to_bits());
            for i in 0..got.q_star.len() {
                prop_assert_eq!(got.q_star[i].to_bits(), solo.q_star[i].to_bits());
            }
        }
        // Lightly loaded host instances are feasible; solves must say so.
        for sol in &batch {
            prop_assert_eq!(sol.status, SolveStatus::Optimal);
            prop_assert!(sol.kkt_residual <= opts.kkt_tol);
        }
    }
}

// ---- plant agreement --------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The gap between the sweep solution and the linear voltage model is
    /// second order: halving every injection cuts it by 4x (at least 3x).
    #[test]
    fn halving_injections_quarters_linearization_gap(
        t in 0.5f64..1.0,
        load_scale in 0.6f64..1.4,
        qf in prop::collection::vec(0.0f64..=1.0, 5),
    ) {
        let (model, sens) = host();
        let boxes = model.generator_boxes();
        let q_base = DVector::from_fn(boxes.len(), |i, _| {
            boxes[i].0 + qf[i] * (boxes[i].1 - boxes[i].0)
        });

        let gap = |s: f64| -> f64 {
            let p: Vec<f64> = model.p_vector().iter().map(|v| v * s * load_scale).collect();
            let ql: Vec<f64> = model.q_load_vector().iter().map(|v| v * s * load_scale).collect();
            let ms = model.with_injections(&p, &ql).unwrap();
            let ss = sens.with_injections(&p, &ql).unwrap();
            let q = &q_base * s;
            let ac = voltvar::acpf::solve(&ms, &q).unwrap();
            let lin = ss.linear_voltage(&q).unwrap();
            let mags = ac.v_mag();
            (0..model.n()).map(|i| (mags[i + 1] - lin[i]).abs()).fold(0.0, f64::max)
        };

        let g1 = gap(t);
        let g2 = gap(t / 2.0);
        prop_assume!(g1 >= 1e-9);
        prop_assert!(3.0 * g2 <= g1 * (1.0 + 1e-6), "gap only fell {} -> {}", g1, g2);
    }
}

// ---- serialization -----------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// JSON artifacts reload with identical bits and reserialize to
    /// identical bytes.
    #[test]
    fn sensitivity_json_round_trips_bitwise(spec in tree_spec(10)) {
        let m = build_feeder(&spec);
        let s = build_sensitivity(&m).unwrap();
        let text = s.to_json_string().unwrap();
        let back = SensitivityModel::from_json_str(&text).unwrap();
        prop_assert_eq!(&back.to_json_string().unwrap(), &text);
        for (x, y) in s.xtilde().iter().zip(back.xtilde().iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in s.rtilde().iter().zip(back.rtilde().iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn surrogate_json_round_trips_bitwise(draw in set_draw(5, 3.0)) {
        let (model, sens) = host();
        let set = materialize_set(&draw, model, sens.x_norm());
        let text = set.to_json_string().unwrap();
        let back = SurrogateSet::from_json_str(&text).unwrap();
        prop_assert_eq!(&back.to_json_string().unwrap(), &text);
        for (a, b) in set.nodes.iter().zip(&back.nodes) {
            prop_assert_eq!(shape_bits(&a.psi), shape_bits(&b.psi));
            prop_assert_eq!(shape_bits(&a.phi), shape_bits(&b.phi));
        }
    }
}

// ---- training ------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Per-node fits depend only on their own dataset, bus id, and seed —
    /// not on which other nodes share the batch. This is what makes the
    /// data-parallel fit path equivalent to any sequential order.
    #[test]
    fn node_fits_are_independent_of_batch_composition(
        rows_a in prop::collection::vec((0.9f64..1.1, -0.2f64..0.2, -0.18f64..0.18), 8..20),
        rows_b in prop::collection::vec((0.9f64..1.1, -0.2f64..0.2, -0.18f64..0.18), 8..20),
        seed in any::<u64>(),
    ) {
        let dataset = |bus: usize, rows: &[(f64, f64, f64)]| NodeDataset {
            bus,
            q_min: -0.2,
            q_max: 0.2,
            rows: rows
                .iter()
                .map(|&(v, q, q_star)| DataRow { v, q, q_star })
                .collect(),
        };
        let ds_a = dataset(3, &rows_a);
        let ds_b = dataset(7, &rows_b);
        let hyper = FitHyper {
            hidden_size: 4,
            epochs: 30,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed,
            psi_slope_cap: 0.45,
            phi_slope_cap: Some(1.0),
            phi_monotone: false,
            psi_enabled: true,
        };
        let (both, _) = fit(&[ds_a.clone(), ds_b.clone()], Regime::CvpSc, &hyper).unwrap();
        let (only_a, _) = fit(&[ds_a], Regime::CvpSc, &hyper).unwrap();
        let (only_b, _) = fit(&[ds_b], Regime::CvpSc, &hyper).unwrap();
        prop_assert_eq!(shape_bits(&both.nodes[0].psi), shape_bits(&only_a.nodes[0].psi));
        prop_assert_eq!(shape_bits(&both.nodes[0].phi), shape_bits(&only_a.nodes[0].phi));
        prop_assert_eq!(shape_bits(&both.nodes[1].psi), shape_bits(&only_b.nodes[0].psi));
        prop_assert_eq!(shape_bits(&both.nodes[1].phi), shape_bits(&only_b.nodes[0].phi));
    }
}
