//! Branch-and-bound over the binaries of an [`MldProgram`].
//!
//! Nodes are explored best-first by relaxation bound with FIFO tie-breaking.
//! Each node fixes a subset of binaries; fixings are closed under the
//! emergency product logic, the one-level-per-step rule and the chance
//! bound before the relaxation is solved. Incumbents always come from a QP
//! with every binary fixed, so their continuous part satisfies the original
//! rows to QP precision.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use log::warn;

use crate::error::{Error, Result};
use crate::mld::MldProgram;
use crate::qp::{solve_qp_with_bounds, QpOptions, QpSolution, QpStatus};

/// Default node budget per solve.
pub const DEFAULT_NODE_BUDGET: usize = 20_000;
/// Largest binary count accepted by [`enumerate_solve`].
pub const ENUMERATION_LIMIT: usize = 18;

const INTEGRALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct MiqpOptions {
    pub node_budget: usize,
    /// Relative optimality gap at which the search stops.
    pub gap_tol: f64,
    pub qp: QpOptions,
    /// Keep a per-node log in the solution (tests and diagnostics).
    pub record_nodes: bool,
}

impl Default for MiqpOptions {
    fn default() -> Self {
        Self {
            node_budget: DEFAULT_NODE_BUDGET,
            gap_tol: 1e-6,
            qp: QpOptions::default(),
            record_nodes: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiqpStatus {
    Optimal,
    /// Budget ran out; the incumbent is returned with its gap.
    BudgetExhausted,
    Infeasible,
    /// Budget ran out before any integral point was found.
    BudgetInfeasible,
}

/// One relaxation solved during the search.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    /// `(variable, value)` branched on to create this node.
    pub branch: Option<(usize, u8)>,
    pub objective: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiqpSolution {
    pub status: MiqpStatus,
    /// Full primal point (empty when no incumbent exists).
    pub x: Vec<f64>,
    pub objective: f64,
    /// Lowest bound among unexplored nodes at termination.
    pub bound: f64,
    pub gap: f64,
    /// Relaxations solved.
    pub nodes: usize,
    pub node_log: Vec<NodeRecord>,
}

impl MiqpSolution {
    fn empty(status: MiqpStatus, nodes: usize) -> Self {
        Self {
            status,
            x: Vec::new(),
            objective: f64::INFINITY,
            bound: f64::INFINITY,
            gap: f64::INFINITY,
            nodes,
            node_log: Vec::new(),
        }
    }

    pub fn has_solution(&self) -> bool {
        !self.x.is_empty()
    }

    /// Planned inputs `u(0..N)`.
    pub fn inputs(&self, program: &MldProgram) -> Vec<f64> {
        (0..program.horizon()).map(|k| self.x[program.layout.input(k)]).collect()
    }

    /// Rows of `[Δd, Δv, a, v]` for k = 0..=N.
    pub fn states(&self, program: &MldProgram) -> Vec<[f64; 4]> {
        (0..=program.horizon())
            .map(|k| std::array::from_fn(|c| self.x[4 * k + c]))
            .collect()
    }

    pub fn emergency(&self, program: &MldProgram, k: usize) -> bool {
        self.x[program.layout.emergency(k)] > 0.5
    }

    /// Binary values in variable order.
    pub fn binaries(&self, program: &MldProgram) -> Vec<u8> {
        program.binaries().map(|i| (self.x[i] > 0.5) as u8).collect()
    }
}

/// Tri-state fixing of each binary.
type Fixing = Vec<Option<u8>>;

struct Node {
    bound: f64,
    seq: usize,
    fixing: Fixing,
    relaxed: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    /// Reversed so that `BinaryHeap` pops the lowest bound, then lowest seq.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Search<'a> {
    program: &'a MldProgram,
    opts: &'a MiqpOptions,
    base_lower: Vec<f64>,
    base_upper: Vec<f64>,
}

impl Search<'_> {
    fn bounds(&self, fixing: &Fixing) -> (Vec<f64>, Vec<f64>) {
        let mut lo = self.base_lower.clone();
        let mut hi = self.base_upper.clone();
        for (i, f) in fixing.iter().enumerate() {
            if let Some(v) = f {
                lo[i] = *v as f64;
                hi[i] = *v as f64;
            }
        }
        (lo, hi)
    }

    fn solve(&self, fixing: &Fixing) -> Result<QpSolution> {
        let (lo, hi) = self.bounds(fixing);
        solve_qp_with_bounds(&self.program.qp, &lo, &hi, &self.opts.qp)
    }

    /// Close `fixing` under the logic rules. Returns false on conflict or when
    /// the chance bound is out of reach.
    fn propagate(&self, fixing: &mut Fixing) -> bool {
        let lay = &self.program.layout;
        for k in 0..lay.horizon {
            let (e, v, em) = (lay.gap_flag(k), lay.speed_flag(k), lay.emergency(k));
            let mut changed = true;
            while changed {
                changed = false;
                let set = |idx: usize, val: u8, fx: &mut Fixing| -> Option<bool> {
                    match fx[idx] {
                        Some(cur) if cur != val => None,
                        Some(_) => Some(false),
                        None => {
                            fx[idx] = Some(val);
                            Some(true)
                        }
                    }
                };
                let (fe, fv, fem) = (fixing[e], fixing[v], fixing[em]);
                let mut rules: Vec<(usize, u8)> = Vec::new();
                if fe == Some(0) || fv == Some(0) {
                    rules.push((em, 0));
                }
                if fe == Some(1) && fv == Some(1) {
                    rules.push((em, 1));
                }
                if fem == Some(1) {
                    rules.push((e, 1));
                    rules.push((v, 1));
                }
                if fem == Some(0) && fe == Some(1) {
                    rules.push((v, 0));
                }
                if fem == Some(0) && fv == Some(1) {
                    rules.push((e, 0));
                }
                for (idx, val) in rules {
                    match set(idx, val, fixing) {
                        None => return false,
                        Some(c) => changed |= c,
                    }
                }
            }

            let m = lay.levels_at(k);
            let ones = (0..m).filter(|&j| fixing[lay.level(k, j)] == Some(1)).count();
            if ones > 1 {
                return false;
            }
            if ones == 1 {
                for j in 0..m {
                    let idx = lay.level(k, j);
                    if fixing[idx].is_none() {
                        fixing[idx] = Some(0);
                    }
                }
            } else {
                let open: Vec<usize> = (0..m)
                    .map(|j| lay.level(k, j))
                    .filter(|&idx| fixing[idx].is_none())
                    .collect();
                match open.len() {
                    0 => return false,
                    1 => fixing[open[0]] = Some(1),
                    _ => {}
                }
            }
        }
        self.chance_reachable(fixing)
    }

    /// Alternate logic propagation and bound tightening until stable.
    fn settle(&self, fixing: &mut Fixing) -> bool {
        for _ in 0..10 {
            if !self.propagate(fixing) {
                return false;
            }
            match tighten(self.program, fixing) {
                None => return false,
                Some(next) if next == *fixing => return true,
                Some(next) => *fixing = next,
            }
        }
        self.propagate(fixing)
    }

    fn chance_reachable(&self, fixing: &Fixing) -> bool {
        let lay = &self.program.layout;
        let mut best = 0.0;
        for k in 0..lay.horizon {
            best += (0..lay.levels_at(k))
                .filter(|&j| fixing[lay.level(k, j)] != Some(0))
                .map(|j| self.program.log_probs[k][j])
                .fold(f64::NEG_INFINITY, f64::max);
        }
        best >= self.program.log_chance_bound - 1e-12
    }

    /// Binary assignment suggested by a relaxed point: flags from the
    /// indicator logic, levels by largest weight.
    fn rounding(&self, x: &[f64], fixing: &Fixing) -> Fixing {
        let prog = self.program;
        let lay = &prog.layout;
        let mut out = fixing.clone();
        for k in 0..lay.horizon {
            let m = lay.levels_at(k);
            if (0..m).all(|j| out[lay.level(k, j)].is_none() || out[lay.level(k, j)] == Some(0)) {
                let pick = (0..m)
                    .filter(|&j| out[lay.level(k, j)].is_none())
                    .max_by(|&a, &b| {
                        x[lay.level(k, a)]
                            .total_cmp(&x[lay.level(k, b)])
                            .then_with(|| b.cmp(&a))
                    });
                for j in 0..m {
                    let idx = lay.level(k, j);
                    if out[idx].is_none() {
                        out[idx] = Some((Some(j) == pick) as u8);
                    }
                }
            }
            let e = lay.gap_flag(k);
            let v = lay.speed_flag(k);
            let em = lay.emergency(k);
            let ge = out[e].unwrap_or((x[lay.gap_error(k)] + prog.gap_margin <= 0.0) as u8);
            let sv = out[v].unwrap_or((x[lay.speed(k)] >= prog.speed_floor) as u8);
            out[e] = Some(ge);
            out[v] = Some(sv);
            if out[em].is_none() {
                out[em] = Some(ge * sv);
            }
        }
        out
    }

    fn is_integral(&self, x: &[f64]) -> bool {
        self.program
            .binaries()
            .all(|i| (x[i] - x[i].round()).abs() <= INTEGRALITY_TOL)
    }

    fn branch_var(&self, x: &[f64], fixing: &Fixing) -> Option<usize> {
        let mut best: Option<(u8, f64, usize)> = None;
        for i in self.program.binaries() {
            if fixing[i].is_some() {
                continue;
            }
            let frac = (x[i] - x[i].round()).abs();
            if frac <= INTEGRALITY_TOL {
                continue;
            }
            let pri = self.program.vars[i].priority.unwrap_or(u8::MAX);
            let better = match best {
                None => true,
                Some((bp, bf, _)) => pri < bp || (pri == bp && frac > bf + 1e-12),
            };
            if better {
                best = Some((pri, frac, i));
            }
        }
        best.map(|(_, _, i)| i)
    }
}

/// Interval bound tightening over every row, used only to fix binaries.
/// Returns `None` when some row cannot be satisfied.
fn tighten(program: &MldProgram, fixing: &Fixing) -> Option<Fixing> {
    let qp = &program.qp;
    let n = qp.dim();
    let mut lo = qp.lower.clone();
    let mut hi = qp.upper.clone();
    let mut out = fixing.clone();
    for i in 0..n {
        if let Some(v) = out[i] {
            lo[i] = v as f64;
            hi[i] = v as f64;
        }
    }
    let eq = qp.equalities.rows.iter().zip(&qp.equalities.rhs);
    let ineq = qp.inequalities.rows.iter().zip(&qp.inequalities.rhs);
    // (row, rhs, also enforce ≥ rhs)
    let rows: Vec<_> = eq.map(|(r, &b)| (r, b, true)).chain(ineq.map(|(r, &b)| (r, b, false))).collect();
    for _pass in 0..20 {
        let mut changed = false;
        for &(row, b, is_eq) in &rows {
            for sign in [1.0, -1.0] {
                if sign < 0.0 && !is_eq {
                    continue;
                }
                // sign·Σ c x ≤ sign·b
                let rhs = sign * b;
                let mut min_act = 0.0;
                let mut inf_count = 0;
                for &(i, c) in &row.entries {
                    let c = sign * c;
                    let m = if c > 0.0 { c * lo[i] } else { c * hi[i] };
                    if m.is_finite() {
                        min_act += m;
                    } else {
                        inf_count += 1;
                    }
                }
                if inf_count == 0 && min_act > rhs + 1e-7 * (1.0 + rhs.abs()) {
                    return None;
                }
                if inf_count > 1 {
                    continue;
                }
                for &(i, c) in &row.entries {
                    let c = sign * c;
                    let own = if c > 0.0 { c * lo[i] } else { c * hi[i] };
                    let rest = if own.is_finite() {
                        if inf_count > 0 {
                            continue;
                        }
                        min_act - own
                    } else {
                        min_act
                    };
                    let limit = (rhs - rest) / c;
                    let slack = 1e-9 * (1.0 + limit.abs());
                    if c > 0.0 && limit < hi[i] - slack {
                        hi[i] = limit;
                        changed = true;
                    } else if c < 0.0 && limit > lo[i] + slack {
                        lo[i] = limit;
                        changed = true;
                    }
                    if program.vars[i].is_binary() && out[i].is_none() {
                        if hi[i] < 1.0 - 1e-9 {
                            out[i] = Some(0);
                            hi[i] = 0.0;
                            lo[i] = lo[i].min(0.0);
                        } else if lo[i] > 1e-9 {
                            out[i] = Some(1);
                            lo[i] = 1.0;
                            hi[i] = hi[i].max(1.0);
                        }
                    }
                    if lo[i] > hi[i] + 1e-7 * (1.0 + hi[i].abs()) {
                        return None;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    Some(out)
}

/// Solve to global optimality within `opts.gap_tol`.
pub fn solve_miqp(program: &MldProgram, opts: &MiqpOptions) -> Result<MiqpSolution> {
    program.qp.check_dimensions()?;
    let search = Search {
        program,
        opts,
        base_lower: program.qp.lower.clone(),
        base_upper: program.qp.upper.clone(),
    };
    let mut log = Vec::new();
    let mut nodes = 0usize;
    let mut root_fix: Fixing = vec![None; program.qp.dim()];
    if !search.settle(&mut root_fix) {
        return Ok(MiqpSolution::empty(MiqpStatus::Infeasible, 0));
    }
    let root = search.solve(&root_fix)?;
    nodes += 1;
    if opts.record_nodes {
        log.push(NodeRecord {
            id: 0,
            parent: None,
            branch: None,
            objective: root.objective,
            feasible: root.is_optimal(),
        });
    }
    if root.status == QpStatus::Infeasible {
        let mut s = MiqpSolution::empty(MiqpStatus::Infeasible, nodes);
        s.node_log = log;
        return Ok(s);
    }

    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut tried: HashSet<Vec<Option<u8>>> = HashSet::new();
    let cutoff = |inc: &Option<(f64, Vec<f64>)>| -> f64 {
        match inc {
            Some((v, _)) => v - opts.gap_tol * v.abs().max(1.0),
            None => f64::INFINITY,
        }
    };
    let mut try_assignment = |fix: Fixing, inc: &mut Option<(f64, Vec<f64>)>| -> Result<()> {
        let key: Vec<Option<u8>> = program.binaries().map(|i| fix[i]).collect();
        if key.iter().any(Option::is_none) || !tried.insert(key) {
            return Ok(());
        }
        let mut fix = fix;
        if !search.propagate(&mut fix) {
            return Ok(());
        }
        let sol = search.solve(&fix)?;
        if sol.is_optimal() && inc.as_ref().is_none_or(|(v, _)| sol.objective < *v) {
            *inc = Some((sol.objective, sol.x));
        }
        Ok(())
    };

    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    heap.push(Node {
        bound: root.objective,
        seq,
        fixing: root_fix,
        relaxed: root.x,
    });
    let mut ids = vec![0usize];
    let mut exhausted = false;

    while let Some(node) = heap.pop() {
        if node.bound >= cutoff(&incumbent) {
            heap.clear();
            break;
        }
        let parent_id = ids[node.seq];
        if search.is_integral(&node.relaxed) {
            let fix: Fixing = node
                .fixing
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    f.or_else(|| program.vars[i].is_binary().then(|| node.relaxed[i].round() as u8))
                })
                .collect();
            try_assignment(fix, &mut incumbent)?;
            continue;
        }
        try_assignment(search.rounding(&node.relaxed, &node.fixing), &mut incumbent)?;
        if node.bound >= cutoff(&incumbent) {
            continue;
        }
        let Some(var) = search.branch_var(&node.relaxed, &node.fixing) else {
            continue;
        };
        for val in [0u8, 1u8] {
            if nodes >= opts.node_budget {
                exhausted = true;
                break;
            }
            let mut fix = node.fixing.clone();
            fix[var] = Some(val);
            if !search.settle(&mut fix) {
                continue;
            }
            let sol = search.solve(&fix)?;
            nodes += 1;
            if opts.record_nodes {
                log.push(NodeRecord {
                    id: nodes - 1,
                    parent: Some(parent_id),
                    branch: Some((var, val)),
                    objective: sol.objective,
                    feasible: sol.is_optimal(),
                });
            }
            if sol.status == QpStatus::Infeasible {
                continue;
            }
            let bound = sol.objective.max(node.bound);
            if bound >= cutoff(&incumbent) {
                continue;
            }
            seq += 1;
            ids.push(nodes - 1);
            heap.push(Node {
                bound,
                seq,
                fixing: fix,
                relaxed: sol.x,
            });
        }
        if exhausted {
            heap.push(node);
            break;
        }
    }

    let open_bound = heap.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min);
    let mut out = match incumbent {
        Some((obj, x)) => {
            let bound = open_bound.min(obj);
            let gap = (obj - bound).max(0.0) / obj.abs().max(1.0);
            let status = if exhausted && gap > opts.gap_tol {
                warn!("node budget of {} exhausted, gap {gap:.3e}", opts.node_budget);
                MiqpStatus::BudgetExhausted
            } else {
                MiqpStatus::Optimal
            };
            MiqpSolution {
                status,
                x,
                objective: obj,
                bound,
                gap,
                nodes,
                node_log: Vec::new(),
            }
        }
        None if exhausted => {
            warn!("node budget of {} exhausted without an incumbent", opts.node_budget);
            MiqpSolution::empty(MiqpStatus::BudgetInfeasible, nodes)
        }
        None => MiqpSolution::empty(MiqpStatus::Infeasible, nodes),
    };
    out.node_log = log;
    Ok(out)
}

/// Exhaustive oracle: every level choice per step and every consistent
/// `(ξe, ξv)` pair per step, each solved as a QP.
pub fn enumerate_solve(program: &MldProgram) -> Result<MiqpSolution> {
    let count = program.binary_count();
    if count > ENUMERATION_LIMIT {
        return Err(Error::TooManyBinaries {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let lay = &program.layout;
    let n = lay.horizon;
    let choices: Vec<usize> = (0..n).map(|k| lay.levels_at(k) * 4).collect();
    let total: usize = choices.iter().product();
    let opts = QpOptions::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evaluated = 0;
    for code in 0..total {
        let mut rem = code;
        let mut lo = program.qp.lower.clone();
        let mut hi = program.qp.upper.clone();
        let mut log_p = 0.0;
        for k in 0..n {
            let c = rem % choices[k];
            rem /= choices[k];
            let level = c / 4;
            let (xe, xv) = ((c % 4) / 2, c % 2);
            for j in 0..lay.levels_at(k) {
                let v = (j == level) as u8 as f64;
                lo[lay.level(k, j)] = v;
                hi[lay.level(k, j)] = v;
            }
            log_p += program.log_probs[k][level];
            for (idx, v) in [
                (lay.gap_flag(k), xe),
                (lay.speed_flag(k), xv),
                (lay.emergency(k), xe * xv),
            ] {
                lo[idx] = v as f64;
                hi[idx] = v as f64;
            }
        }
        if log_p < program.log_chance_bound - 1e-12 {
            continue;
        }
        evaluated += 1;
        let sol = solve_qp_with_bounds(&program.qp, &lo, &hi, &opts)?;
        if sol.is_optimal() && best.as_ref().is_none_or(|(v, _)| sol.objective < *v) {
            best = Some((sol.objective, sol.x));
        }
    }
    Ok(match best {
        Some((obj, x)) => MiqpSolution {
            status: MiqpStatus::Optimal,
            x,
            objective: obj,
            bound: obj,
            gap: 0.0,
            nodes: evaluated,
            node_log: Vec::new(),
        },
        None => MiqpSolution::empty(MiqpStatus::Infeasible, evaluated),
    })
}

/// Independent check of a candidate point by direct substitution into every
/// row of the program. Returns the list of violated items.
pub fn check_solution(program: &MldProgram, x: &[f64], tol: f64) -> Vec<String> {
    let mut bad = Vec::new();
    let qp = &program.qp;
    if x.len() != qp.dim() {
        bad.push(format!("length {} != {}", x.len(), qp.dim()));
        return bad;
    }
    for (r, (row, &b)) in qp.equalities.rows.iter().zip(&qp.equalities.rhs).enumerate() {
        let lhs: f64 = row.entries.iter().map(|&(i, c)| c * x[i]).sum();
        if (lhs - b).abs() > tol {
            bad.push(format!("equality {r}: {lhs} != {b}"));
        }
    }
    for (r, (row, &b)) in qp.inequalities.rows.iter().zip(&qp.inequalities.rhs).enumerate() {
        let lhs: f64 = row.entries.iter().map(|&(i, c)| c * x[i]).sum();
        if lhs > b + tol {
            bad.push(format!("inequality {r}: {lhs} > {b}"));
        }
    }
    for i in 0..qp.dim() {
        if x[i] < qp.lower[i] - tol || x[i] > qp.upper[i] + tol {
            bad.push(format!("bound {i}: {} outside [{}, {}]", x[i], qp.lower[i], qp.upper[i]));
        }
    }
    let lay = &program.layout;
    for i in program.binaries() {
        if x[i] != 0.0 && x[i] != 1.0 {
            bad.push(format!("binary {i} = {}", x[i]));
        }
    }
    for k in 0..lay.horizon {
        let s: f64 = (0..lay.levels_at(k)).map(|j| x[lay.level(k, j)]).sum();
        if s != 1.0 {
            bad.push(format!("step {k}: level sum {s}"));
        }
        let (e, v, em) = (x[lay.gap_flag(k)], x[lay.speed_flag(k)], x[lay.emergency(k)]);
        if em != e * v {
            bad.push(format!("step {k}: emergency {em} != {e}*{v}"));
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{discrete_system, ErrorState, VehicleParams};
    use crate::gp::discretize;
    use crate::mld::{build, MldInputs, MpcWeights, PredecessorPlan, DEFAULT_GAP_ENVELOPE};

    fn program(x0: ErrorState, speed: f64, plan: &PredecessorPlan, u_prev: f64) -> MldProgram {
        let p = VehicleParams::default();
        let sys = discrete_system(&p, 0.1).unwrap();
        build(&MldInputs {
            x0,
            ego_speed: speed,
            params: &p,
            system: &sys,
            plan,
            weights: MpcWeights::default(),
            u_prev,
            emergency_prev: false,
            chance_bound: 0.01f64.powi(plan.horizon() as i32),
            gap_envelope: DEFAULT_GAP_ENVELOPE,
        })
        .unwrap()
    }

    #[test]
    fn equilibrium_is_free() {
        let plan = PredecessorPlan::communicated(vec![0.0; 7]);
        let prog = program(ErrorState::default(), 20.0, &plan, 0.0);
        let sol = solve_miqp(&prog, &MiqpOptions::default()).unwrap();
        assert_eq!(sol.status, MiqpStatus::Optimal);
        assert!(sol.objective.abs() < 1e-7);
        assert!(sol.inputs(&prog).iter().all(|u| u.abs() < 1e-5));
        assert!((0..7).all(|k| !sol.emergency(&prog, k)));
        assert!(check_solution(&prog, &sol.x, 1e-6).is_empty());
    }

    #[test]
    fn communicated_program_needs_one_node() {
        let plan = PredecessorPlan::communicated(vec![0.0; 7]);
        let prog = program(ErrorState::new(0.5, 0.2, 0.0), 20.0, &plan, 0.0);
        let sol = solve_miqp(&prog, &MiqpOptions::default()).unwrap();
        assert_eq!(sol.status, MiqpStatus::Optimal);
        assert_eq!(sol.nodes, 1);
    }

    #[test]
    fn hard_braking_triggers_emergency() {
        let plan = PredecessorPlan::communicated(vec![-4.0; 7]);
        let prog = program(ErrorState::new(-2.0, -3.0, 0.0), 20.0, &plan, 0.0);
        let sol = solve_miqp(&prog, &MiqpOptions::default()).unwrap();
        assert_eq!(sol.status, MiqpStatus::Optimal);
        assert!(sol.emergency(&prog, 0));
        assert!((sol.inputs(&prog)[0] - VehicleParams::default().input_min).abs() < 1e-6);
        assert!(check_solution(&prog, &sol.x, 1e-6).is_empty());
    }

    #[test]
    fn matches_enumeration_on_small_gp_program() {
        let plan = PredecessorPlan::gp(vec![-1.0, -2.0], vec![discretize(0.8), discretize(1.2)]);
        let prog = program(ErrorState::new(-0.5, -1.0, -1.0), 15.0, &plan, -1.0);
        let bb = solve_miqp(&prog, &MiqpOptions::default()).unwrap();
        let ex = enumerate_solve(&prog).unwrap();
        assert_eq!(bb.status, MiqpStatus::Optimal);
        assert!((bb.objective - ex.objective).abs() <= 1e-6 * ex.objective.abs().max(1.0));
    }

    #[test]
    fn enumeration_rejects_large_programs() {
        let plan = PredecessorPlan::gp(vec![0.0; 7], vec![discretize(1.0); 7]);
        let prog = program(ErrorState::default(), 20.0, &plan, 0.0);
        assert!(matches!(enumerate_solve(&prog), Err(Error::TooManyBinaries { .. })));
    }

    #[test]
    fn deterministic_node_sequence() {
        let plan = PredecessorPlan::gp(vec![-2.0; 5], vec![discretize(1.5); 5]);
        let prog = program(ErrorState::new(-1.5, -2.0, -1.0), 12.0, &plan, -1.0);
        let opts = MiqpOptions {
            record_nodes: true,
            ..MiqpOptions::default()
        };
        let a = solve_miqp(&prog, &opts).unwrap();
        let b = solve_miqp(&prog, &opts).unwrap();
        assert_eq!(a, b);
    }
}
