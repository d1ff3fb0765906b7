//! Mixed logical dynamical program for one follower over one horizon.
//!
//! Variable layout, for a horizon `N`:
//!
//! | block | index | count |
//! |---|---|---|
//! | `[Δd, Δv, a, v](k)`, k = 0..=N | `4k + c` | `4(N+1)` |
//! | `u(k)`, k = 0..N | | `N` |
//! | `[ξe, ξv, ξE](k)`, k = 0..N | | `3N` |
//! | `w_j(k)`, one block per step | | `Σ m_k` |
//!
//! The ego speed `v(k)` is carried explicitly next to the error state so
//! that the spacing, speed and emergency rows stay sparse.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DiscreteSystem, ErrorState, VehicleParams};
use crate::error::{Error, Result};
use crate::gp::DisturbanceLevels;
use crate::qp::{solve_qp, LinearConstraints, QpProblem, SparseRow};

/// Separation constant realizing strict inequalities in the indicator rows.
pub const LOGIC_EPS: f64 = 1e-6;
/// Smallest admissible predicted bumper-to-bumper gap (m).
pub const GAP_EPS: f64 = 0.1;
/// Default gap-error envelope used for the big-M constants (m).
pub const DEFAULT_GAP_ENVELOPE: f64 = 200.0;

/// Stage weights of the follower MPC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcWeights {
    /// Diagonal of Q over (Δd, Δv, a).
    pub state: [f64; 3],
    /// Weight on the negative log trajectory probability.
    pub probability: f64,
    /// Small weight on `u²`; makes the last planned input unique.
    pub input: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self {
            state: [20.0, 1.0, 0.1],
            probability: 10.0,
            input: 1e-4,
        }
    }
}

/// Big-M constants bounding `Δd + d̲` and `v - v̲` over the envelope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BigM {
    pub gap_upper: f64,
    pub gap_lower: f64,
    pub speed_upper: f64,
    pub speed_lower: f64,
}

/// Interval bounds of the two indicator expressions for `|Δd| ≤ gap_envelope`
/// and `v ∈ [0, v_max]`.
pub fn big_m_bounds(params: &VehicleParams, gap_envelope: f64) -> Result<BigM> {
    if !(gap_envelope.is_finite() && gap_envelope > 0.0) {
        return Err(Error::InvalidParams(format!(
            "gap envelope must be positive, got {gap_envelope}"
        )));
    }
    let d_low = params.hard_brake_margin;
    let v_low = params.brake_release_speed;
    let m = BigM {
        gap_upper: gap_envelope + d_low,
        gap_lower: -gap_envelope + d_low,
        speed_upper: params.speed_max - v_low,
        speed_lower: -v_low,
    };
    if m.gap_upper <= m.gap_lower || m.speed_upper <= m.speed_lower {
        return Err(Error::InvalidParams("degenerate big-M envelope".into()));
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanSource {
    Communicated,
    Gp,
    AccFallback,
}

/// Predecessor acceleration guess plus the disturbance scenario per step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredecessorPlan {
    pub accel: Vec<f64>,
    pub levels: Vec<DisturbanceLevels>,
    pub source: PlanSource,
}

impl PredecessorPlan {
    pub fn communicated(accel: Vec<f64>) -> Self {
        let levels = vec![DisturbanceLevels::deterministic(); accel.len()];
        Self {
            accel,
            levels,
            source: PlanSource::Communicated,
        }
    }

    /// Constant-speed predecessor.
    pub fn acc_fallback(horizon: usize) -> Self {
        Self {
            source: PlanSource::AccFallback,
            ..Self::communicated(vec![0.0; horizon])
        }
    }

    pub fn gp(accel: Vec<f64>, levels: Vec<DisturbanceLevels>) -> Self {
        Self {
            accel,
            levels,
            source: PlanSource::Gp,
        }
    }

    pub fn horizon(&self) -> usize {
        self.accel.len()
    }
}

/// Everything needed to assemble one program.
#[derive(Debug, Clone)]
pub struct MldInputs<'a> {
    pub x0: ErrorState,
    pub ego_speed: f64,
    pub params: &'a VehicleParams,
    pub system: &'a DiscreteSystem,
    pub plan: &'a PredecessorPlan,
    pub weights: MpcWeights,
    /// Input applied at the previous step.
    pub u_prev: f64,
    /// Emergency flag of the previously applied solution.
    pub emergency_prev: bool,
    pub chance_bound: f64,
    pub gap_envelope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarRole {
    GapError,
    SpeedError,
    Accel,
    Speed,
    Input,
    GapFlag,
    SpeedFlag,
    Emergency,
    Level(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarInfo {
    pub step: usize,
    pub role: VarRole,
    /// Branching priority for binaries; lower branches first.
    pub priority: Option<u8>,
}

impl VarInfo {
    pub fn is_binary(&self) -> bool {
        self.priority.is_some()
    }
}

/// Index arithmetic for the variable layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub horizon: usize,
    level_offsets: Vec<usize>,
    level_counts: Vec<usize>,
}

impl Layout {
    fn new(level_counts: Vec<usize>) -> Self {
        let horizon = level_counts.len();
        let base = 4 * (horizon + 1) + horizon + 3 * horizon;
        let mut level_offsets = Vec::with_capacity(horizon);
        let mut next = base;
        for &m in &level_counts {
            level_offsets.push(next);
            next += m;
        }
        Self {
            horizon,
            level_offsets,
            level_counts,
        }
    }

    pub fn gap_error(&self, k: usize) -> usize {
        4 * k
    }
    pub fn speed_error(&self, k: usize) -> usize {
        4 * k + 1
    }
    pub fn accel(&self, k: usize) -> usize {
        4 * k + 2
    }
    pub fn speed(&self, k: usize) -> usize {
        4 * k + 3
    }
    pub fn input(&self, k: usize) -> usize {
        4 * (self.horizon + 1) + k
    }
    pub fn gap_flag(&self, k: usize) -> usize {
        4 * (self.horizon + 1) + self.horizon + 3 * k
    }
    pub fn speed_flag(&self, k: usize) -> usize {
        self.gap_flag(k) + 1
    }
    pub fn emergency(&self, k: usize) -> usize {
        self.gap_flag(k) + 2
    }
    pub fn level(&self, k: usize, j: usize) -> usize {
        self.level_offsets[k] + j
    }
    pub fn levels_at(&self, k: usize) -> usize {
        self.level_counts[k]
    }
    pub fn num_vars(&self) -> usize {
        4 * (self.horizon + 1) + 4 * self.horizon + self.level_counts.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct MldProgram {
    pub qp: QpProblem,
    pub vars: Vec<VarInfo>,
    pub layout: Layout,
    /// `ln p_j(k)` per step and level.
    pub log_probs: Vec<Vec<f64>>,
    pub log_chance_bound: f64,
    pub big_m: BigM,
    /// Row index of the chance constraint in `qp.inequalities`.
    pub chance_row: usize,
    /// Gap-error margin `d̲` of the emergency indicator.
    pub gap_margin: f64,
    /// Speed threshold `v̲` of the emergency indicator.
    pub speed_floor: f64,
}

impl MldProgram {
    pub fn horizon(&self) -> usize {
        self.layout.horizon
    }

    pub fn binaries(&self) -> impl Iterator<Item = usize> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_binary())
            .map(|(i, _)| i)
    }

    pub fn binary_count(&self) -> usize {
        self.binaries().count()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.qp.objective(x)
    }

    /// Write a plain-text listing of variables, rows and objective triplets.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let qp = &self.qp;
        let _ = writeln!(out, "vars {}", qp.dim());
        for (i, v) in self.vars.iter().enumerate() {
            let kind = if v.is_binary() { "bin" } else { "cont" };
            let _ = writeln!(
                out,
                "var {i} {kind} step={} role={:?} lb={} ub={}",
                v.step, v.role, qp.lower[i], qp.upper[i]
            );
        }
        let rows = |out: &mut String, tag: &str, set: &LinearConstraints| {
            for (r, (row, b)) in set.rows.iter().zip(&set.rhs).enumerate() {
                let terms: Vec<String> = row.entries.iter().map(|(i, c)| format!("{c}*x{i}")).collect();
                let _ = writeln!(out, "{tag} {r}: {} {} {b}", terms.join(" + "), if tag == "eq" { "=" } else { "<=" });
            }
        };
        rows(&mut out, "eq", &qp.equalities);
        rows(&mut out, "in", &qp.inequalities);
        for i in 0..qp.dim() {
            for j in 0..qp.dim() {
                let h = qp.hessian[(i, j)];
                if h != 0.0 {
                    let _ = writeln!(out, "H {i} {j} {h}");
                }
            }
        }
        for (i, g) in qp.linear.iter().enumerate() {
            if *g != 0.0 {
                let _ = writeln!(out, "g {i} {g}");
            }
        }
        out
    }
}

fn row(entries: &[(usize, f64)]) -> SparseRow {
    SparseRow::new(entries.iter().copied().filter(|&(_, c)| c != 0.0).collect())
}

/// Assemble the follower program.
pub fn build(inp: &MldInputs) -> Result<MldProgram> {
    let p = inp.params;
    let n = inp.plan.horizon();
    if n == 0 {
        return Err(Error::Dimension("horizon must be at least 1".into()));
    }
    if inp.plan.levels.len() != n {
        return Err(Error::Dimension(format!(
            "plan has {} accelerations but {} level sets",
            n,
            inp.plan.levels.len()
        )));
    }
    if !(inp.x0.is_finite() && inp.ego_speed.is_finite() && inp.u_prev.is_finite()) {
        return Err(Error::InvalidParams("initial state must be finite".into()));
    }
    if !(inp.chance_bound > 0.0 && inp.chance_bound <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "chance bound must lie in (0, 1], got {}",
            inp.chance_bound
        )));
    }
    if p.input_min > p.input_max || p.accel_min > p.accel_max {
        return Err(Error::InfeasibleBounds("lower bound above upper bound".into()));
    }
    for lv in &inp.plan.levels {
        if lv.levels.is_empty() || lv.levels.len() != lv.probs.len() {
            return Err(Error::Dimension("disturbance levels and probabilities differ".into()));
        }
        if lv.probs.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(Error::InvalidParams("level probabilities must lie in (0, 1]".into()));
        }
    }
    let bm = big_m_bounds(p, inp.gap_envelope)?;

    let layout = Layout::new(inp.plan.levels.iter().map(|l| l.levels.len()).collect());
    let nv = layout.num_vars();
    let mut vars = vec![
        VarInfo {
            step: 0,
            role: VarRole::GapError,
            priority: None,
        };
        nv
    ];
    let mut lower = vec![f64::NEG_INFINITY; nv];
    let mut upper = vec![f64::INFINITY; nv];
    for k in 0..=n {
        for (c, role) in [VarRole::GapError, VarRole::SpeedError, VarRole::Accel, VarRole::Speed]
            .into_iter()
            .enumerate()
        {
            vars[4 * k + c] = VarInfo {
                step: k,
                role,
                priority: None,
            };
        }
        if k >= 1 {
            lower[layout.accel(k)] = p.accel_min;
            upper[layout.accel(k)] = p.accel_max;
            lower[layout.speed(k)] = 0.0;
            upper[layout.speed(k)] = p.speed_max;
        }
    }
    for (i, v) in [inp.x0.gap_error, inp.x0.speed_error, inp.x0.accel, inp.ego_speed]
        .into_iter()
        .enumerate()
    {
        lower[i] = v;
        upper[i] = v;
    }
    for k in 0..n {
        let iu = layout.input(k);
        vars[iu] = VarInfo {
            step: k,
            role: VarRole::Input,
            priority: None,
        };
        lower[iu] = p.input_min;
        upper[iu] = p.input_max;
        for (idx, role) in [
            (layout.gap_flag(k), VarRole::GapFlag),
            (layout.speed_flag(k), VarRole::SpeedFlag),
            (layout.emergency(k), VarRole::Emergency),
        ] {
            vars[idx] = VarInfo {
                step: k,
                role,
                priority: Some(1),
            };
            lower[idx] = 0.0;
            upper[idx] = 1.0;
        }
        for j in 0..layout.levels_at(k) {
            let idx = layout.level(k, j);
            vars[idx] = VarInfo {
                step: k,
                role: VarRole::Level(j),
                priority: Some(0),
            };
            lower[idx] = 0.0;
            upper[idx] = 1.0;
        }
    }

    let sys = inp.system;
    let ts = sys.ts;
    let mut eq = LinearConstraints::default();
    let mut ineq = LinearConstraints::default();
    for k in 0..n {
        let levels = &inp.plan.levels[k];
        // Error-state dynamics with the selected disturbance level.
        for r in 0..3 {
            let mut entries = vec![(4 * (k + 1) + r, 1.0)];
            for c in 0..3 {
                entries.push((4 * k + c, -sys.a[(r, c)]));
            }
            entries.push((layout.input(k), -sys.b[r]));
            for (j, &nj) in levels.levels.iter().enumerate() {
                entries.push((layout.level(k, j), -sys.e[r] * nj));
            }
            eq.push(row(&entries), sys.d[r] * inp.plan.accel[k]);
        }
        eq.push(
            row(&[
                (layout.speed(k + 1), 1.0),
                (layout.speed(k), -1.0),
                (layout.accel(k), -ts),
            ]),
            0.0,
        );
        let w: Vec<(usize, f64)> = (0..layout.levels_at(k)).map(|j| (layout.level(k, j), 1.0)).collect();
        eq.push(row(&w), 1.0);
    }

    // Strictly positive predicted gaps.
    for k in 1..=n {
        ineq.push(
            row(&[(layout.gap_error(k), -1.0), (layout.speed(k), -p.time_gap)]),
            p.standstill_gap - GAP_EPS,
        );
    }

    // Comfort rate limits, relaxed next to emergency steps.
    let span = p.input_span();
    let lo_rate = ts * p.input_min;
    let hi_rate = ts * p.input_max;
    for k in 0..n {
        let mut entries_lo = vec![(layout.input(k), -1.0)];
        let mut entries_hi = vec![(layout.input(k), 1.0)];
        let mut rhs_lo = -lo_rate;
        let mut rhs_hi = hi_rate;
        let relax_lo = -(lo_rate + span);
        let relax_hi = -(span - hi_rate);
        if k == 0 {
            rhs_lo -= inp.u_prev;
            rhs_hi += inp.u_prev;
            if inp.emergency_prev {
                rhs_lo -= relax_lo;
                rhs_hi -= relax_hi;
            }
        } else {
            entries_lo.push((layout.input(k - 1), 1.0));
            entries_hi.push((layout.input(k - 1), -1.0));
            entries_lo.push((layout.emergency(k - 1), relax_lo));
            entries_hi.push((layout.emergency(k - 1), relax_hi));
        }
        entries_lo.push((layout.emergency(k), relax_lo));
        entries_hi.push((layout.emergency(k), relax_hi));
        ineq.push(row(&entries_lo), rhs_lo);
        ineq.push(row(&entries_hi), rhs_hi);
    }

    let d_low = p.hard_brake_margin;
    let v_low = p.brake_release_speed;
    for k in 0..n {
        let (e, v, em) = (layout.gap_flag(k), layout.speed_flag(k), layout.emergency(k));
        // ξe = 1 ⇔ Δd + d̲ ≤ 0.
        ineq.push(row(&[(layout.gap_error(k), 1.0), (e, bm.gap_upper)]), bm.gap_upper - d_low);
        ineq.push(
            row(&[(layout.gap_error(k), -1.0), (e, bm.gap_lower - LOGIC_EPS)]),
            d_low - LOGIC_EPS,
        );
        // ξv = 1 ⇔ v ≥ v̲.
        ineq.push(
            row(&[(layout.speed(k), 1.0), (v, -(bm.speed_upper + LOGIC_EPS))]),
            v_low - LOGIC_EPS,
        );
        ineq.push(
            row(&[(layout.speed(k), -1.0), (v, -bm.speed_lower)]),
            -v_low - bm.speed_lower,
        );
        // ξE = ξe·ξv.
        ineq.push(row(&[(e, 1.0), (v, 1.0), (em, -1.0)]), 1.0);
        ineq.push(row(&[(em, 1.0), (e, -1.0)]), 0.0);
        ineq.push(row(&[(em, 1.0), (v, -1.0)]), 0.0);
        // Emergency pins the input to u_min.
        ineq.push(row(&[(layout.input(k), 1.0), (em, span)]), p.input_max);
    }

    let log_probs: Vec<Vec<f64>> = inp
        .plan
        .levels
        .iter()
        .map(|l| l.probs.iter().map(|q| q.ln()).collect())
        .collect();
    let log_chance_bound = inp.chance_bound.ln();
    let mut chance = Vec::new();
    for (k, lp) in log_probs.iter().enumerate() {
        for (j, &l) in lp.iter().enumerate() {
            chance.push((layout.level(k, j), -l));
        }
    }
    let chance_row = ineq.len();
    ineq.push(row(&chance), -log_chance_bound);

    let mut hessian = DMatrix::zeros(nv, nv);
    let mut linear = DVector::zeros(nv);
    for k in 0..n {
        for c in 0..3 {
            hessian[(4 * k + c, 4 * k + c)] = 2.0 * inp.weights.state[c];
        }
        hessian[(layout.input(k), layout.input(k))] = 2.0 * inp.weights.input;
        for (j, &l) in log_probs[k].iter().enumerate() {
            linear[layout.level(k, j)] = -inp.weights.probability * l;
        }
    }

    Ok(MldProgram {
        qp: QpProblem {
            hessian,
            linear,
            equalities: eq,
            inequalities: ineq,
            lower,
            upper,
        },
        vars,
        layout,
        log_probs,
        log_chance_bound,
        big_m: bm,
        chance_row,
        gap_margin: d_low,
        speed_floor: v_low,
    })
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub hessian_psd: bool,
    pub min_eigenvalue: f64,
    /// Largest ratio of an indicator expression's range to its big-M bound;
    /// values above 1 mean the bound does not cover the envelope.
    pub big_m_ratio: f64,
    pub binary_count: usize,
    pub equality_count: usize,
    pub level_equalities: usize,
    pub binaries_with_priority: bool,
    /// Fixing binaries to the canonical non-emergency assignment at a zero
    /// initial state gives a feasible QP.
    pub feasible_at_rest: bool,
}

impl Diagnostics {
    pub fn all_pass(&self) -> bool {
        self.hessian_psd && self.big_m_ratio <= 1.0 && self.binaries_with_priority && self.feasible_at_rest
    }
}

/// Structural checks on a program; never fails.
pub fn validate(program: &MldProgram, params: &VehicleParams, gap_envelope: f64) -> Diagnostics {
    let h = &program.qp.hessian;
    let sym = (h + h.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
    let bm = &program.big_m;
    let gap_range = [gap_envelope + params.hard_brake_margin, -gap_envelope + params.hard_brake_margin];
    let speed_range = [params.speed_max - params.brake_release_speed, -params.brake_release_speed];
    let ratio = |range: f64, bound: f64| if bound == 0.0 { f64::INFINITY } else { range / bound };
    let big_m_ratio = [
        ratio(gap_range[0], bm.gap_upper),
        ratio(gap_range[1], bm.gap_lower),
        ratio(speed_range[0], bm.speed_upper),
        ratio(speed_range[1], bm.speed_lower),
    ]
    .into_iter()
    .fold(0.0f64, f64::max);

    let lay = &program.layout;
    let level_equalities = program
        .qp
        .equalities
        .rows
        .iter()
        .zip(&program.qp.equalities.rhs)
        .filter(|(r, &b)| {
            b == 1.0
                && !r.entries.is_empty()
                && r.entries
                    .iter()
                    .all(|&(i, c)| c == 1.0 && matches!(program.vars[i].role, VarRole::Level(_)))
        })
        .count();

    // Canonical assignment at rest: no emergency, speed flag set, most
    // likely level selected.
    let mut qp = program.qp.clone();
    for i in 0..4 {
        qp.lower[i] = 0.0;
        qp.upper[i] = 0.0;
    }
    qp.lower[lay.speed(0)] = params.speed_max * 0.5;
    qp.upper[lay.speed(0)] = params.speed_max * 0.5;
    for k in 0..lay.horizon {
        let best = (0..lay.levels_at(k))
            .max_by(|&a, &b| program.log_probs[k][a].total_cmp(&program.log_probs[k][b]))
            .unwrap_or(0);
        for j in 0..lay.levels_at(k) {
            let v = if j == best { 1.0 } else { 0.0 };
            qp.lower[lay.level(k, j)] = v;
            qp.upper[lay.level(k, j)] = v;
        }
        for (idx, v) in [(lay.gap_flag(k), 0.0), (lay.speed_flag(k), 1.0), (lay.emergency(k), 0.0)] {
            qp.lower[idx] = v;
            qp.upper[idx] = v;
        }
    }
    let feasible_at_rest = solve_qp(&qp).map(|s| s.is_optimal()).unwrap_or(false);

    Diagnostics {
        hessian_psd: min_eig >= -1e-9,
        min_eigenvalue: min_eig,
        big_m_ratio,
        binary_count: program.binary_count(),
        equality_count: program.qp.equalities.len(),
        level_equalities,
        binaries_with_priority: program.vars.iter().filter(|v| v.is_binary()).all(|v| v.priority.is_some()),
        feasible_at_rest,
    }
}
