//! Radial feeder model: buses, lines, operating limits, CSV exchange
//! formats, and a seeded synthetic feeder for experiments.
//!
//! Conventions: bus 0 is the substation (slack, v = 1). Powers are in per
//! unit and positive when injected into the grid, so consumption is
//! negative. Lines are stored oriented away from the substation.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::textio;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Substation,
    Generator,
    Load,
}

impl BusKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BusKind::Substation => "substation",
            BusKind::Generator => "generator",
            BusKind::Load => "load",
        }
    }

    pub fn parse(s: &str) -> Option<BusKind> {
        match s.trim() {
            "substation" => Some(BusKind::Substation),
            "generator" => Some(BusKind::Generator),
            "load" => Some(BusKind::Load),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Active injection (pu). Negative for consumption.
    pub p: f64,
    /// Uncontrolled reactive injection (pu). For generator buses the
    /// reactive output is a control variable, so this stays 0.
    pub q: f64,
    /// Reactive capability interval `(q_min, q_max)`; generators only.
    pub q_box: Option<(f64, f64)>,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone)]
pub struct Line {
    /// Parent-side bus (closer to the substation).
    pub from: usize,
    /// Child-side bus; unique per line, so lines are indexed by `to`.
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// Validated radial feeder. Construction establishes: contiguous bus ids
/// with the substation at 0, a spanning tree oriented away from the root,
/// x > 0 and r >= 0 on every line, capability boxes exactly on generators,
/// and v_min < v_max per bus.
#[derive(Debug, Clone)]
pub struct FeederModel {
    buses: Vec<Bus>,
    /// lines[k] is the line feeding bus `to = k + 1`.
    lines: Vec<Line>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Breadth-first order from the root; parents precede children.
    topo: Vec<usize>,
    gen_buses: Vec<usize>,
    load_buses: Vec<usize>,
}

impl FeederModel {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>) -> Result<FeederModel> {
        let n_buses = buses.len();
        if n_buses < 2 {
            return Err(Error::Topology(format!(
                "need at least a substation and one bus, got {n_buses}"
            )));
        }
        for (i, b) in buses.iter().enumerate() {
            if b.id != i {
                return Err(Error::Topology(format!(
                    "bus ids must be contiguous from 0; position {i} has id {}",
                    b.id
                )));
            }
        }
        if buses[0].kind != BusKind::Substation {
            return Err(Error::Topology("bus 0 must be the substation".into()));
        }
        if let Some(b) = buses[1..].iter().find(|b| b.kind == BusKind::Substation) {
            return Err(Error::Topology(format!(
                "exactly one substation allowed; bus {} is a second one",
                b.id
            )));
        }
        for b in &buses {
            match (b.kind, b.q_box) {
                (BusKind::Generator, None) => {
                    return Err(Error::ModelInvalid(format!(
                        "generator bus {} has no reactive capability interval",
                        b.id
                    )))
                }
                (BusKind::Generator, Some((lo, hi))) if lo > hi => {
                    return Err(Error::ModelInvalid(format!(
                        "bus {}: q_min {lo} > q_max {hi}",
                        b.id
                    )))
                }
                (BusKind::Substation | BusKind::Load, Some(_)) => {
                    return Err(Error::ModelInvalid(format!(
                        "non-generator bus {} must not have a capability interval",
                        b.id
                    )))
                }
                _ => {}
            }
            if !(b.v_min < b.v_max) {
                return Err(Error::ModelInvalid(format!(
                    "bus {}: v_min {} must be below v_max {}",
                    b.id, b.v_min, b.v_max
                )));
            }
            if !(b.p.is_finite() && b.q.is_finite()) {
                return Err(Error::ModelInvalid(format!(
                    "bus {}: non-finite injection",
                    b.id
                )));
            }
        }

        if lines.len() != n_buses - 1 {
            return Err(Error::Topology(format!(
                "a radial feeder over {n_buses} buses needs {} lines, got {}",
                n_buses - 1,
                lines.len()
            )));
        }
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_buses];
        for (k, l) in lines.iter().enumerate() {
            if l.from >= n_buses || l.to >= n_buses {
                return Err(Error::Topology(format!(
                    "line {}->{} references an unknown bus",
                    l.from, l.to
                )));
            }
            if l.from == l.to {
                return Err(Error::Topology(format!("line {}->{} is a self-loop", l.from, l.to)));
            }
            if l.r == 0.0 && l.x == 0.0 {
                return Err(Error::SingularLine { from: l.from, to: l.to });
            }
            if !(l.x > 0.0) || !(l.r >= 0.0) || !l.r.is_finite() || !l.x.is_finite() {
                return Err(Error::ModelInvalid(format!(
                    "line {}->{}: need r >= 0 and x > 0, got r = {}, x = {}",
                    l.from, l.to, l.r, l.x
                )));
            }
            adj[l.from].push((l.to, k));
            adj[l.to].push((l.from, k));
        }

        // Root the tree at the substation; reorient lines parent -> child.
        let mut parent = vec![None; n_buses];
        let mut line_of = vec![usize::MAX; n_buses];
        let mut seen = vec![false; n_buses];
        let mut topo = Vec::with_capacity(n_buses);
        let mut queue = VecDeque::new();
        seen[0] = true;
        queue.push_back(0usize);
        while let Some(u) = queue.pop_front() {
            topo.push(u);
            for &(w, k) in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some(u);
                    line_of[w] = k;
                    queue.push_back(w);
                }
            }
        }
        if topo.len() != n_buses {
            let missing: Vec<usize> =
                (0..n_buses).filter(|&i| !seen[i]).take(5).collect();
            return Err(Error::Topology(format!(
                "feeder is not connected; unreachable buses include {missing:?}"
            )));
        }

        // n_buses - 1 edges and connected => the graph is a tree.
        let mut oriented = Vec::with_capacity(n_buses - 1);
        for to in 1..n_buses {
            let l = &lines[line_of[to]];
            let from = parent[to].expect("non-root bus has a parent");
            oriented.push(Line { from, to, r: l.r, x: l.x });
        }

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_buses];
        for l in &oriented {
            children[l.from].push(l.to);
        }
        for c in &mut children {
            c.sort_unstable();
        }

        let gen_buses: Vec<usize> = buses
            .iter()
            .filter(|b| b.kind == BusKind::Generator)
            .map(|b| b.id)
            .collect();
        let load_buses: Vec<usize> = buses
            .iter()
            .filter(|b| b.kind == BusKind::Load)
            .map(|b| b.id)
            .collect();
        if gen_buses.is_empty() {
            return Err(Error::ModelInvalid("feeder has no generator buses".into()));
        }

        Ok(FeederModel {
            buses,
            lines: oriented,
            parent,
            children,
            topo,
            gen_buses,
            load_buses,
        })
    }

    /// Total bus count including the substation.
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Non-substation bus count (the dimension of voltage/injection vectors).
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn n_generators(&self) -> usize {
        self.gen_buses.len()
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn bus(&self, id: usize) -> &Bus {
        &self.buses[id]
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// The line feeding `bus` from its parent. Panics for the substation.
    pub fn line_into(&self, bus: usize) -> &Line {
        assert!(bus >= 1 && bus < self.n_buses());
        &self.lines[bus - 1]
    }

    pub fn parent(&self, bus: usize) -> Option<usize> {
        self.parent[bus]
    }

    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Breadth-first bus order from the substation; parents precede children.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Generator bus ids, ascending.
    pub fn generator_buses(&self) -> &[usize] {
        &self.gen_buses
    }

    /// Load bus ids, ascending.
    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }

    /// Reactive capability `(q_min, q_max)` per generator, in generator order.
    pub fn generator_boxes(&self) -> Vec<(f64, f64)> {
        self.gen_buses
            .iter()
            .map(|&g| self.buses[g].q_box.expect("generators carry a box"))
            .collect()
    }

    /// Buses on the path from `bus` up to the substation, `bus` first,
    /// excluding the substation itself (each entry names the line feeding it).
    pub fn root_path(&self, bus: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut u = bus;
        while let Some(p) = self.parent[u] {
            path.push(u);
            u = p;
        }
        path
    }

    /// Copy of the model with replaced injections: `p` for buses 1..=N in bus
    /// order, `q_load` for load buses in ascending-id order. Generator
    /// reactive output is a control variable and is not stored here.
    pub fn with_injections(&self, p: &[f64], q_load: &[f64]) -> Result<FeederModel> {
        if p.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "p has {} entries, feeder has {} non-substation buses",
                p.len(),
                self.n()
            )));
        }
        if q_load.len() != self.load_buses.len() {
            return Err(Error::DimensionMismatch(format!(
                "q_load has {} entries, feeder has {} load buses",
                q_load.len(),
                self.load_buses.len()
            )));
        }
        let mut out = self.clone();
        for (i, &pi) in p.iter().enumerate() {
            out.buses[i + 1].p = pi;
        }
        for (k, &g) in self.load_buses.iter().enumerate() {
            out.buses[g].q = q_load[k];
        }
        Ok(out)
    }

    /// Active injections for buses 1..=N in bus order.
    pub fn p_vector(&self) -> Vec<f64> {
        self.buses[1..].iter().map(|b| b.p).collect()
    }

    /// Uncontrolled reactive injections for load buses, ascending-id order.
    pub fn q_load_vector(&self) -> Vec<f64> {
        self.load_buses.iter().map(|&b| self.buses[b].q).collect()
    }

    /// Voltage limits for buses 1..=N in bus order.
    pub fn voltage_limits(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.buses[1..].iter().map(|b| b.v_min).collect();
        let hi = self.buses[1..].iter().map(|b| b.v_max).collect();
        (lo, hi)
    }
}

// ---------------------------------------------------------------------------
// CSV exchange
// ---------------------------------------------------------------------------

const LINES_HEADER: &str = "from,to,r_pu,x_pu";
const BUSES_HEADER: &str = "id,kind,p_pu,q_pu,qmin_pu,qmax_pu,vmin_pu,vmax_pu";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn split_csv_line(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).collect()
}

fn read_lines_csv(path: &Path) -> Result<Vec<Line>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    let mut lineno = 0usize;
    for raw in BufReader::new(file).lines() {
        let raw = raw?;
        lineno += 1;
        let s = raw.trim_end_matches('\r');
        if lineno == 1 {
            if s != LINES_HEADER {
                return Err(parse_err(
                    path,
                    1,
                    format!("expected header `{LINES_HEADER}`, got `{s}`"),
                ));
            }
            continue;
        }
        if s.trim().is_empty() {
            continue;
        }
        let f = split_csv_line(s);
        if f.len() != 4 {
            return Err(parse_err(path, lineno, format!("expected 4 fields, got {}", f.len())));
        }
        let from: usize = f[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad `from` bus id `{}`", f[0])))?;
        let to: usize = f[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad `to` bus id `{}`", f[1])))?;
        let r = textio::parse_float(f[2])
            .ok_or_else(|| parse_err(path, lineno, format!("bad `r_pu` value `{}`", f[2])))?;
        let x = textio::parse_float(f[3])
            .ok_or_else(|| parse_err(path, lineno, format!("bad `x_pu` value `{}`", f[3])))?;
        rows.push(Line { from, to, r, x });
    }
    if lineno == 0 {
        return Err(parse_err(path, 1, "empty file"));
    }
    Ok(rows)
}

fn read_buses_csv(path: &Path) -> Result<Vec<Bus>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    let mut lineno = 0usize;
    for raw in BufReader::new(file).lines() {
        let raw = raw?;
        lineno += 1;
        let s = raw.trim_end_matches('\r');
        if lineno == 1 {
            if s != BUSES_HEADER {
                return Err(parse_err(
                    path,
                    1,
                    format!("expected header `{BUSES_HEADER}`, got `{s}`"),
                ));
            }
            continue;
        }
        if s.trim().is_empty() {
            continue;
        }
        let f = split_csv_line(s);
        if f.len() != 8 {
            return Err(parse_err(path, lineno, format!("expected 8 fields, got {}", f.len())));
        }
        let id: usize = f[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad bus id `{}`", f[0])))?;
        let kind = BusKind::parse(f[1]).ok_or_else(|| {
            parse_err(
                path,
                lineno,
                format!("bad `kind` `{}` (substation|generator|load)", f[1]),
            )
        })?;
        let p = textio::parse_float(f[2])
            .ok_or_else(|| parse_err(path, lineno, format!("bad `p_pu` value `{}`", f[2])))?;
        let q = textio::parse_float(f[3])
            .ok_or_else(|| parse_err(path, lineno, format!("bad `q_pu` value `{}`", f[3])))?;
        let qmin = textio::parse_float(f[4]);
        let qmax = textio::parse_float(f[5]);
        let q_box = match (kind, qmin, qmax) {
            (BusKind::Generator, Some(lo), Some(hi)) => Some((lo, hi)),
            (BusKind::Generator, _, _) => {
                return Err(parse_err(
                    path,
                    lineno,
                    "generator rows need numeric `qmin_pu` and `qmax_pu`",
                ))
            }
            (_, None, None) => None,
            _ => {
                return Err(parse_err(
                    path,
                    lineno,
                    "`qmin_pu`/`qmax_pu` must be blank for non-generator rows",
                ))
            }
        };
        let v_min = textio::parse_float(f[6])
            .ok_or_else(|| parse_err(path, lineno, format!("bad `vmin_pu` value `{}`", f[6])))?;
        let v_max = textio::parse_float(f[7])
            .ok_or_else(|| parse_err(path, lineno, format!("bad `vmax_pu` value `{}`", f[7])))?;
        rows.push(Bus { id, kind, p, q, q_box, v_min, v_max });
    }
    if lineno == 0 {
        return Err(parse_err(path, 1, "empty file"));
    }
    // Order by id so positional validation reports id gaps, not file order.
    rows.sort_by_key(|b| b.id);
    Ok(rows)
}

impl FeederModel {
    /// Load a feeder from the two-file CSV format: line records
    /// (`from,to,r_pu,x_pu`) and bus records
    /// (`id,kind,p_pu,q_pu,qmin_pu,qmax_pu,vmin_pu,vmax_pu`).
    pub fn from_csv_files(lines_path: &Path, buses_path: &Path) -> Result<FeederModel> {
        let lines = read_lines_csv(lines_path)?;
        let buses = read_buses_csv(buses_path)?;
        FeederModel::new(buses, lines)
    }

    pub fn write_lines_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(LINES_HEADER);
        out.push('\n');
        for l in &self.lines {
            out.push_str(&format!(
                "{},{},{},{}\n",
                l.from,
                l.to,
                textio::float(l.r),
                textio::float(l.x)
            ));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn write_buses_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(BUSES_HEADER);
        out.push('\n');
        for b in &self.buses {
            let (qmin, qmax) = match b.q_box {
                Some((lo, hi)) => (textio::float(lo), textio::float(hi)),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                b.id,
                b.kind.as_str(),
                textio::float(b.p),
                textio::float(b.q),
                qmin,
                qmax,
                textio::float(b.v_min),
                textio::float(b.v_max)
            ));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic feeder
// ---------------------------------------------------------------------------

/// Parent of bus `i + 1` in the synthetic 37-bus feeder (substation plus 36
/// buses on six laterals of varying depth).
const SYNTHETIC_PARENT: [usize; 36] = [
    0, 1, 2, 3, 4, 2, 6, 7, 8, 3, 10, 11, 4, 13, 14, 15, 5, 17, 18, 19, 5, 21, 22, 8, 24, 11, 26,
    27, 14, 29, 19, 31, 22, 33, 34, 35,
];

/// First generator placement: five units deep in the feeder.
pub const PLACEMENT_A: [usize; 5] = [27, 31, 32, 34, 35];
/// Second placement adds five mid-feeder units to the first set.
pub const PLACEMENT_B_EXTRA: [usize; 5] = [6, 18, 28, 29, 33];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorPlacement {
    /// Five deep generators, each with the larger capability.
    Deep,
    /// Ten generators (deep five plus mid-feeder five), smaller capability.
    Wide,
}

#[derive(Debug, Clone)]
pub struct SyntheticFeederOptions {
    pub seed: u64,
    pub placement: GeneratorPlacement,
    /// Per-generator symmetric reactive capability: box is `[-cap, cap]`.
    pub q_capacity: f64,
    pub r_range: (f64, f64),
    pub x_range: (f64, f64),
    /// Active demand magnitude per load bus, drawn uniformly.
    pub load_range: (f64, f64),
    /// Reactive/active demand ratio at load buses.
    pub load_tan_phi: f64,
    pub v_band: (f64, f64),
}

impl SyntheticFeederOptions {
    pub fn deep(seed: u64) -> SyntheticFeederOptions {
        SyntheticFeederOptions {
            seed,
            placement: GeneratorPlacement::Deep,
            q_capacity: 0.4,
            r_range: (0.002, 0.010),
            x_range: (0.006, 0.030),
            load_range: (0.02, 0.08),
            load_tan_phi: 0.3,
            v_band: (0.95, 1.05),
        }
    }

    pub fn wide(seed: u64) -> SyntheticFeederOptions {
        SyntheticFeederOptions {
            q_capacity: 0.2,
            placement: GeneratorPlacement::Wide,
            ..SyntheticFeederOptions::deep(seed)
        }
    }
}

/// Build the seeded synthetic 37-bus feeder. Identical options give an
/// identical model; draw order is fixed (line impedances by child bus,
/// then load demands by bus id).
pub fn synthetic_feeder(opts: &SyntheticFeederOptions) -> FeederModel {
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let n_buses = SYNTHETIC_PARENT.len() + 1;

    let mut lines = Vec::with_capacity(n_buses - 1);
    for (i, &from) in SYNTHETIC_PARENT.iter().enumerate() {
        let r = rng.gen_range(opts.r_range.0..=opts.r_range.1);
        let x = rng.gen_range(opts.x_range.0..=opts.x_range.1);
        lines.push(Line { from, to: i + 1, r, x });
    }

    let mut gen_set = vec![false; n_buses];
    for &g in &PLACEMENT_A {
        gen_set[g] = true;
    }
    if opts.placement == GeneratorPlacement::Wide {
        for &g in &PLACEMENT_B_EXTRA {
            gen_set[g] = true;
        }
    }

    let (v_min, v_max) = opts.v_band;
    let mut buses = Vec::with_capacity(n_buses);
    buses.push(Bus {
        id: 0,
        kind: BusKind::Substation,
        p: 0.0,
        q: 0.0,
        q_box: None,
        v_min,
        v_max,
    });
    for id in 1..n_buses {
        if gen_set[id] {
            buses.push(Bus {
                id,
                kind: BusKind::Generator,
                p: 0.0,
                q: 0.0,
                q_box: Some((-opts.q_capacity, opts.q_capacity)),
                v_min,
                v_max,
            });
        } else {
            let demand = rng.gen_range(opts.load_range.0..=opts.load_range.1);
            buses.push(Bus {
                id,
                kind: BusKind::Load,
                p: -demand,
                q: -demand * opts.load_tan_phi,
                q_box: None,
                v_min,
                v_max,
            });
        }
    }

    FeederModel::new(buses, lines).expect("synthetic feeder construction is always valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_buses() -> Vec<Bus> {
        vec![
            Bus {
                id: 0,
                kind: BusKind::Substation,
                p: 0.0,
                q: 0.0,
                q_box: None,
                v_min: 0.95,
                v_max: 1.05,
            },
            Bus {
                id: 1,
                kind: BusKind::Load,
                p: -0.1,
                q: -0.03,
                q_box: None,
                v_min: 0.95,
                v_max: 1.05,
            },
            Bus {
                id: 2,
                kind: BusKind::Generator,
                p: 0.0,
                q: 0.0,
                q_box: Some((-0.2, 0.2)),
                v_min: 0.95,
                v_max: 1.05,
            },
        ]
    }

    fn tiny_lines() -> Vec<Line> {
        vec![
            Line { from: 0, to: 1, r: 0.01, x: 0.02 },
            Line { from: 1, to: 2, r: 0.01, x: 0.02 },
        ]
    }

    #[test]
    fn builds_and_orients() {
        // Reversed orientation in the input must be normalized.
        let mut lines = tiny_lines();
        lines[1] = Line { from: 2, to: 1, r: 0.01, x: 0.02 };
        let m = FeederModel::new(tiny_buses(), lines).unwrap();
        assert_eq!(m.line_into(2).from, 1);
        assert_eq!(m.parent(2), Some(1));
        assert_eq!(m.parent(0), None);
        assert_eq!(m.generator_buses(), &[2]);
        assert_eq!(m.load_buses(), &[1]);
        assert_eq!(m.topo_order(), &[0, 1, 2]);
        assert_eq!(m.root_path(2), vec![2, 1]);
    }

    #[test]
    fn rejects_disconnected() {
        let mut buses = tiny_buses();
        buses.push(Bus {
            id: 3,
            kind: BusKind::Load,
            p: 0.0,
            q: 0.0,
            q_box: None,
            v_min: 0.95,
            v_max: 1.05,
        });
        // 3 lines needed; give a cycle on {0,1,2} leaving bus 3 isolated.
        let lines = vec![
            Line { from: 0, to: 1, r: 0.01, x: 0.02 },
            Line { from: 1, to: 2, r: 0.01, x: 0.02 },
            Line { from: 2, to: 0, r: 0.01, x: 0.02 },
        ];
        let err = FeederModel::new(buses, lines).unwrap_err();
        assert!(matches!(err, Error::Topology(_)), "{err}");
    }

    #[test]
    fn rejects_zero_impedance_line() {
        let mut lines = tiny_lines();
        lines[0].r = 0.0;
        lines[0].x = 0.0;
        let err = FeederModel::new(tiny_buses(), lines).unwrap_err();
        assert!(matches!(err, Error::SingularLine { from: 0, to: 1 }), "{err}");
    }

    #[test]
    fn rejects_nonpositive_reactance() {
        let mut lines = tiny_lines();
        lines[0].x = -0.02;
        let err = FeederModel::new(tiny_buses(), lines).unwrap_err();
        assert!(matches!(err, Error::ModelInvalid(_)), "{err}");
    }

    #[test]
    fn rejects_generator_without_box() {
        let mut buses = tiny_buses();
        buses[2].q_box = None;
        let err = FeederModel::new(buses, tiny_lines()).unwrap_err();
        assert!(matches!(err, Error::ModelInvalid(_)), "{err}");
    }

    #[test]
    fn rejects_gapped_ids() {
        let mut buses = tiny_buses();
        buses[2].id = 5;
        let err = FeederModel::new(buses, tiny_lines()).unwrap_err();
        assert!(matches!(err, Error::Topology(_)), "{err}");
    }

    #[test]
    fn rejects_inverted_voltage_band() {
        let mut buses = tiny_buses();
        buses[1].v_min = 1.10;
        let err = FeederModel::new(buses, tiny_lines()).unwrap_err();
        assert!(matches!(err, Error::ModelInvalid(_)), "{err}");
    }

    #[test]
    fn synthetic_deep_shape() {
        let m = synthetic_feeder(&SyntheticFeederOptions::deep(7));
        assert_eq!(m.n_buses(), 37);
        assert_eq!(m.generator_buses(), &PLACEMENT_A);
        assert_eq!(m.generator_boxes(), vec![(-0.4, 0.4); 5]);
        for b in m.buses() {
            if b.kind == BusKind::Load {
                assert!(b.p < 0.0 && b.q < 0.0);
                assert!((b.q / b.p - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_wide_shape() {
        let m = synthetic_feeder(&SyntheticFeederOptions::wide(7));
        let mut expect: Vec<usize> = PLACEMENT_A
            .iter()
            .chain(PLACEMENT_B_EXTRA.iter())
            .copied()
            .collect();
        expect.sort_unstable();
        assert_eq!(m.generator_buses(), expect.as_slice());
        assert_eq!(m.generator_boxes(), vec![(-0.2, 0.2); 10]);
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = synthetic_feeder(&SyntheticFeederOptions::deep(42));
        let b = synthetic_feeder(&SyntheticFeederOptions::deep(42));
        let c = synthetic_feeder(&SyntheticFeederOptions::deep(43));
        for i in 0..a.lines().len() {
            assert_eq!(a.lines()[i].r, b.lines()[i].r);
            assert_eq!(a.lines()[i].x, b.lines()[i].x);
        }
        assert!(a.lines().iter().zip(c.lines()).any(|(l, m)| l.r != m.r));
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let m = synthetic_feeder(&SyntheticFeederOptions::wide(3));
        let lines_a = dir.path().join("feeder.csv");
        let buses_a = dir.path().join("buses.csv");
        m.write_lines_csv(&lines_a).unwrap();
        m.write_buses_csv(&buses_a).unwrap();

        let m2 = FeederModel::from_csv_files(&lines_a, &buses_a).unwrap();
        let lines_b = dir.path().join("feeder2.csv");
        let buses_b = dir.path().join("buses2.csv");
        m2.write_lines_csv(&lines_b).unwrap();
        m2.write_buses_csv(&buses_b).unwrap();

        assert_eq!(
            std::fs::read(&lines_a).unwrap(),
            std::fs::read(&lines_b).unwrap()
        );
        assert_eq!(
            std::fs::read(&buses_a).unwrap(),
            std::fs::read(&buses_b).unwrap()
        );
    }

    #[test]
    fn csv_errors_carry_location() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("feeder.csv");
        std::fs::write(&p, "from,to,r_pu,x_pu\n0,1,0.01,bogus\n").unwrap();
        let err = read_lines_csv(&p).unwrap_err();
        match err {
            Error::Parse { line, ref msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("x_pu"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }

        let b = dir.path().join("buses.csv");
        std::fs::write(&b, "id,kind,p\n").unwrap();
        let err = read_buses_csv(&b).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn blank_box_enforcement() {
        let dir = tempdir().unwrap();
        let b = dir.path().join("buses.csv");
        std::fs::write(
            &b,
            "id,kind,p_pu,q_pu,qmin_pu,qmax_pu,vmin_pu,vmax_pu\n\
             0,substation,0,0,,,0.95,1.05\n\
             1,load,-0.1,-0.03,-0.1,0.1,0.95,1.05\n",
        )
        .unwrap();
        let err = read_buses_csv(&b).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn injection_replacement() {
        let m = FeederModel::new(tiny_buses(), tiny_lines()).unwrap();
        let m2 = m.with_injections(&[-0.2, 0.05], &[-0.07]).unwrap();
        assert_eq!(m2.bus(1).p, -0.2);
        assert_eq!(m2.bus(2).p, 0.05);
        assert_eq!(m2.bus(1).q, -0.07);
        assert_eq!(m2.bus(2).q, 0.0);
        assert!(m.with_injections(&[0.0], &[0.0]).is_err());
    }
}
