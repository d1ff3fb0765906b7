//! Convex quadratic programming.
//!
//! `min ½xᵀHx + gᵀx  s.t.  A_eq x = b_eq,  A_in x ≤ b_in,  l ≤ x ≤ u`
//!
//! Fixed variables are substituted, equality constraints are eliminated by
//! Gauss–Jordan reduction onto a set of basic variables, and the remaining
//! inequality-constrained problem in the nonbasic variables is solved with a
//! Mehrotra predictor–corrector interior-point method. Infeasibility is
//! certified either by an interval bound on a single row or by a phase-1
//! elastic LP whose optimal violation stays positive.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sparse linear form `Σ coeff·x[idx]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub entries: Vec<(usize, f64)>,
}

impl SparseRow {
    pub fn new(entries: Vec<(usize, f64)>) -> Self {
        Self { entries }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, c)| c * x[i]).sum()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|&(i, _)| i).max()
    }
}

/// Rows `A x (= or ≤) b`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearConstraints {
    pub rows: Vec<SparseRow>,
    pub rhs: Vec<f64>,
}

impl LinearConstraints {
    pub fn push(&mut self, row: SparseRow, rhs: f64) {
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Build from a dense matrix (mostly for tests).
    pub fn from_dense(a: &DMatrix<f64>, b: &[f64]) -> Self {
        let mut out = Self::default();
        for r in 0..a.nrows() {
            let entries = (0..a.ncols())
                .filter(|&c| a[(r, c)] != 0.0)
                .map(|c| (c, a[(r, c)]))
                .collect();
            out.push(SparseRow::new(entries), b[r]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub equalities: LinearConstraints,
    pub inequalities: LinearConstraints,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    /// Unconstrained problem over `n` free variables.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            equalities: LinearConstraints::default(),
            inequalities: LinearConstraints::default(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.hessian * &xv)) + self.linear.dot(&xv)
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let n = self.dim();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(Error::Dimension(format!(
                "hessian is {}x{}, expected {n}x{n}",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension("bound vectors must match variable count".into()));
        }
        for (name, set) in [("equality", &self.equalities), ("inequality", &self.inequalities)] {
            if set.rows.len() != set.rhs.len() {
                return Err(Error::Dimension(format!("{name} rows and rhs differ in length")));
            }
            if set.rows.iter().filter_map(SparseRow::max_index).any(|i| i >= n) {
                return Err(Error::Dimension(format!("{name} row references variable >= {n}")));
            }
        }
        Ok(())
    }

    /// Largest violation of any constraint at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, &b) in self.equalities.rows.iter().zip(&self.equalities.rhs) {
            worst = worst.max((row.dot(x) - b).abs());
        }
        for (row, &b) in self.inequalities.rows.iter().zip(&self.inequalities.rhs) {
            worst = worst.max(row.dot(x) - b);
        }
        for (i, &xi) in x.iter().enumerate() {
            worst = worst.max(self.lower[i] - xi).max(xi - self.upper[i]);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    /// `½xᵀHx + gᵀx` at `x`.
    pub objective: f64,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

impl QpSolution {
    fn infeasible(n: usize, problem: &QpProblem) -> Self {
        Self {
            status: QpStatus::Infeasible,
            x: vec![f64::NAN; n],
            eq_duals: vec![0.0; problem.equalities.len()],
            ineq_duals: vec![0.0; problem.inequalities.len()],
            lower_duals: vec![0.0; n],
            upper_duals: vec![0.0; n],
            objective: f64::INFINITY,
            kkt: KktResiduals::default(),
            iterations: 0,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 80,
        }
    }
}

/// Solve with the problem's own bounds and default options.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    solve_qp_with_bounds(problem, &problem.lower, &problem.upper, &QpOptions::default())
}

/// Solve with replacement variable bounds, leaving `problem` untouched.
pub fn solve_qp_with_bounds(
    problem: &QpProblem,
    lower: &[f64],
    upper: &[f64],
    opts: &QpOptions,
) -> Result<QpSolution> {
    problem.check_dimensions()?;
    let n = problem.dim();
    if lower.len() != n || upper.len() != n {
        return Err(Error::Dimension("bound vectors must match variable count".into()));
    }
    for i in 0..n {
        if lower[i] > upper[i] + 1e-12 {
            return Ok(QpSolution::infeasible(n, problem));
        }
    }
    let Some(red) = Reduction::new(problem, lower, upper, opts.tol) else {
        return Ok(QpSolution::infeasible(n, problem));
    };
    if red.interval_infeasible(opts.tol) {
        return Ok(QpSolution::infeasible(n, problem));
    }
    let ipm = interior_point(&red.p, &red.q, &red.rows, &red.rhs, opts);
    match ipm.status {
        QpStatus::Optimal => Ok(red.recover(problem, lower, upper, &ipm)),
        _ => {
            if red.phase_one_infeasible(opts) {
                Ok(QpSolution::infeasible(n, problem))
            } else {
                let mut sol = red.recover(problem, lower, upper, &ipm);
                sol.status = QpStatus::MaxIter;
                Ok(sol)
            }
        }
    }
}

/// Affine expression of one original variable in reduced coordinates.
#[derive(Debug, Clone, Default)]
struct Expr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

#[derive(Debug, Clone, Copy)]
enum RowOrigin {
    Inequality(usize),
    Lower(usize),
    Upper(usize),
}

struct Reduction {
    dim: usize,
    exprs: Vec<Expr>,
    /// Basic variable chosen for each independent equality row.
    pivots: Vec<(usize, usize)>,
    p: DMatrix<f64>,
    q: DVector<f64>,
    rows: Vec<SparseRow>,
    rhs: Vec<f64>,
    origins: Vec<RowOrigin>,
}

impl Reduction {
    fn new(problem: &QpProblem, lower: &[f64], upper: &[f64], tol: f64) -> Option<Self> {
        let n = problem.dim();
        let fixed: Vec<Option<f64>> = (0..n)
            .map(|i| (upper[i] - lower[i] <= 1e-12).then(|| 0.5 * (lower[i] + upper[i])))
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        let mut col_of = vec![usize::MAX; n];
        for (c, &i) in free.iter().enumerate() {
            col_of[i] = c;
        }

        // Dense [E | e] over free columns.
        let me = problem.equalities.len();
        let nf = free.len();
        let mut e = DMatrix::<f64>::zeros(me, nf + 1);
        for (r, (row, &b)) in problem
            .equalities
            .rows
            .iter()
            .zip(&problem.equalities.rhs)
            .enumerate()
        {
            let mut rhs = b;
            for &(i, c) in &row.entries {
                match fixed[i] {
                    Some(v) => rhs -= c * v,
                    None => e[(r, col_of[i])] += c,
                }
            }
            e[(r, nf)] = rhs;
        }

        // Gauss–Jordan with threshold pivoting that prefers low column indices.
        let mut row_done = vec![false; me];
        let mut col_basic = vec![false; nf];
        let mut pivots_rc: Vec<(usize, usize)> = Vec::new();
        let scale = e.columns(0, nf).amax().max(1.0);
        loop {
            let mut best = 0.0;
            for r in (0..me).filter(|&r| !row_done[r]) {
                for c in (0..nf).filter(|&c| !col_basic[c]) {
                    best = f64::max(best, e[(r, c)].abs());
                }
            }
            if best <= 1e-11 * scale {
                break;
            }
            let mut choice = None;
            'cols: for c in (0..nf).filter(|&c| !col_basic[c]) {
                let mut br = None;
                let mut bv = 0.0;
                for r in (0..me).filter(|&r| !row_done[r]) {
                    if e[(r, c)].abs() > bv {
                        bv = e[(r, c)].abs();
                        br = Some(r);
                    }
                }
                if bv >= 0.1 * best {
                    choice = br.map(|r| (r, c));
                    break 'cols;
                }
            }
            let (pr, pc) = choice?;
            let inv = 1.0 / e[(pr, pc)];
            for j in 0..=nf {
                e[(pr, j)] *= inv;
            }
            for r in 0..me {
                if r != pr {
                    let f = e[(r, pc)];
                    if f != 0.0 {
                        for j in 0..=nf {
                            let v = e[(pr, j)];
                            if v != 0.0 {
                                e[(r, j)] -= f * v;
                            }
                        }
                        e[(r, pc)] = 0.0;
                    }
                }
            }
            row_done[pr] = true;
            col_basic[pc] = true;
            pivots_rc.push((pr, pc));
        }
        // Dependent rows must be consistent.
        let rhs_scale = problem.equalities.rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for r in (0..me).filter(|&r| !row_done[r]) {
            if e[(r, nf)].abs() > 1e3 * tol * rhs_scale {
                return None;
            }
        }

        let nonbasic: Vec<usize> = (0..nf).filter(|&c| !col_basic[c]).collect();
        let dim = nonbasic.len();
        let mut red_of_col = vec![usize::MAX; nf];
        for (k, &c) in nonbasic.iter().enumerate() {
            red_of_col[c] = k;
        }

        let mut exprs = vec![Expr::default(); n];
        for (i, expr) in exprs.iter_mut().enumerate() {
            if let Some(v) = fixed[i] {
                expr.constant = v;
            } else if !col_basic[col_of[i]] {
                expr.terms.push((red_of_col[col_of[i]], 1.0));
            }
        }
        let mut pivots = Vec::with_capacity(pivots_rc.len());
        for &(r, c) in &pivots_rc {
            let var = free[c];
            let expr = &mut exprs[var];
            expr.constant = e[(r, nf)];
            for &nc in &nonbasic {
                let v = e[(r, nc)];
                if v != 0.0 {
                    expr.terms.push((red_of_col[nc], -v));
                }
            }
            pivots.push((r, var));
        }

        // Reduced objective from the nonzeros of H.
        let mut p = DMatrix::<f64>::zeros(dim, dim);
        let mut q = DVector::<f64>::zeros(dim);
        let t0: Vec<f64> = exprs.iter().map(|x| x.constant).collect();
        for a in 0..n {
            let mut grad_a = problem.linear[a];
            for b in 0..n {
                let h = problem.hessian[(a, b)];
                if h == 0.0 {
                    continue;
                }
                grad_a += h * t0[b];
                for &(ia, ca) in &exprs[a].terms {
                    for &(ib, cb) in &exprs[b].terms {
                        p[(ia, ib)] += h * ca * cb;
                    }
                }
            }
            for &(ia, ca) in &exprs[a].terms {
                q[ia] += grad_a * ca;
            }
        }

        let mut red = Self {
            dim,
            exprs,
            pivots,
            p,
            q,
            rows: Vec::new(),
            rhs: Vec::new(),
            origins: Vec::new(),
        };
        let mut dense = vec![0.0; dim];
        for (idx, (row, &b)) in problem
            .inequalities
            .rows
            .iter()
            .zip(&problem.inequalities.rhs)
            .enumerate()
        {
            let mut constant = 0.0;
            for &(i, c) in &row.entries {
                constant += c * red.exprs[i].constant;
                for &(k, v) in &red.exprs[i].terms {
                    dense[k] += c * v;
                }
            }
            if !red.push_row(&mut dense, b - constant, RowOrigin::Inequality(idx), tol) {
                return None;
            }
        }
        for i in 0..n {
            if fixed[i].is_some() {
                continue;
            }
            for (bound, sign, origin) in [
                (upper[i], 1.0, RowOrigin::Upper(i)),
                (-lower[i], -1.0, RowOrigin::Lower(i)),
            ] {
                if !bound.is_finite() {
                    continue;
                }
                let constant = sign * red.exprs[i].constant;
                for &(k, v) in &red.exprs[i].terms {
                    dense[k] += sign * v;
                }
                if !red.push_row(&mut dense, bound - constant, origin, tol) {
                    return None;
                }
            }
        }
        Some(red)
    }

    /// Append a reduced row, clearing `dense`. Returns false when an
    /// all-zero row is violated.
    fn push_row(&mut self, dense: &mut [f64], rhs: f64, origin: RowOrigin, tol: f64) -> bool {
        let entries: Vec<(usize, f64)> = dense
            .iter_mut()
            .enumerate()
            .filter_map(|(k, v)| {
                let val = std::mem::take(v);
                (val != 0.0).then_some((k, val))
            })
            .collect();
        if entries.is_empty() {
            return rhs >= -1e2 * tol * (1.0 + rhs.abs());
        }
        self.rows.push(SparseRow::new(entries));
        self.rhs.push(rhs);
        self.origins.push(origin);
        true
    }

    /// A row whose minimum over the reduced variable box already exceeds its
    /// bound proves infeasibility.
    fn interval_infeasible(&self, tol: f64) -> bool {
        let mut lo = vec![f64::NEG_INFINITY; self.dim];
        let mut hi = vec![f64::INFINITY; self.dim];
        for (row, &b) in self.rows.iter().zip(&self.rhs) {
            if let [(k, c)] = row.entries[..] {
                if c > 0.0 {
                    hi[k] = hi[k].min(b / c);
                } else {
                    lo[k] = lo[k].max(b / c);
                }
            }
        }
        if (0..self.dim).any(|k| lo[k] > hi[k] + tol * (1.0 + lo[k].abs())) {
            return true;
        }
        for (row, &b) in self.rows.iter().zip(&self.rhs) {
            let mut min = 0.0;
            for &(k, c) in &row.entries {
                let term = if c > 0.0 { c * lo[k] } else { c * hi[k] };
                if !term.is_finite() {
                    min = f64::NEG_INFINITY;
                    break;
                }
                min += term;
            }
            if min > b + 1e2 * tol * (1.0 + b.abs()) {
                return true;
            }
        }
        false
    }

    /// Elastic LP `min t  s.t.  G y - t ≤ h, t ≥ 0`. Positive optimum means
    /// no point satisfies every row.
    fn phase_one_infeasible(&self, opts: &QpOptions) -> bool {
        let dim = self.dim + 1;
        let t = self.dim;
        let mut rows = Vec::with_capacity(self.rows.len() + 1);
        for row in &self.rows {
            let mut entries = row.entries.clone();
            entries.push((t, -1.0));
            rows.push(SparseRow::new(entries));
        }
        rows.push(SparseRow::new(vec![(t, -1.0)]));
        let mut rhs = self.rhs.clone();
        rhs.push(0.0);
        let mut q = DVector::zeros(dim);
        q[t] = 1.0;
        let p = DMatrix::zeros(dim, dim);
        let res = interior_point(&p, &q, &rows, &rhs, opts);
        let scale = 1.0 + self.rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        match res.status {
            QpStatus::Optimal => res.y[t] > 1e-6 * scale,
            _ => res.y.get(t).is_some_and(|&v| v > 1e-3 * scale),
        }
    }

    fn recover(&self, problem: &QpProblem, lower: &[f64], upper: &[f64], ipm: &IpmResult) -> QpSolution {
        let n = problem.dim();
        let x: Vec<f64> = self
            .exprs
            .iter()
            .map(|e| e.constant + e.terms.iter().map(|&(k, c)| c * ipm.y[k]).sum::<f64>())
            .collect();
        let mut ineq_duals = vec![0.0; problem.inequalities.len()];
        let mut lower_duals = vec![0.0; n];
        let mut upper_duals = vec![0.0; n];
        for (origin, &z) in self.origins.iter().zip(&ipm.z) {
            match *origin {
                RowOrigin::Inequality(i) => ineq_duals[i] = z,
                RowOrigin::Lower(i) => lower_duals[i] = z,
                RowOrigin::Upper(i) => upper_duals[i] = z,
            }
        }
        let xv = DVector::from_column_slice(&x);
        let mut resid = &problem.hessian * &xv + &problem.linear;
        for (row, &z) in problem.inequalities.rows.iter().zip(&ineq_duals) {
            for &(i, c) in &row.entries {
                resid[i] += c * z;
            }
        }
        for i in 0..n {
            resid[i] += upper_duals[i] - lower_duals[i];
        }
        // Equality multipliers from the basic columns.
        let mut eq_duals = vec![0.0; problem.equalities.len()];
        let k = self.pivots.len();
        if k > 0 {
            let mut pos = vec![usize::MAX; n];
            for (j, &(_, var)) in self.pivots.iter().enumerate() {
                pos[var] = j;
            }
            let mut m = DMatrix::<f64>::zeros(k, k);
            for (j, &(r, _)) in self.pivots.iter().enumerate() {
                for &(i, c) in &problem.equalities.rows[r].entries {
                    if pos[i] != usize::MAX {
                        m[(pos[i], j)] += c;
                    }
                }
            }
            let b = DVector::from_iterator(k, self.pivots.iter().map(|&(_, var)| -resid[var]));
            if let Some(sol) = m.lu().solve(&b) {
                for (j, &(r, _)) in self.pivots.iter().enumerate() {
                    eq_duals[r] = sol[j];
                }
            }
        }
        for (row, &lam) in problem.equalities.rows.iter().zip(&eq_duals) {
            for &(i, c) in &row.entries {
                resid[i] += c * lam;
            }
        }
        // Fixed variables absorb what remains in their bound multipliers.
        for i in 0..n {
            if upper[i] - lower[i] <= 1e-12 {
                if resid[i] > 0.0 {
                    lower_duals[i] += resid[i];
                } else {
                    upper_duals[i] -= resid[i];
                }
                resid[i] = 0.0;
            }
        }
        let mut comp: f64 = 0.0;
        for ((row, &b), &z) in problem
            .inequalities
            .rows
            .iter()
            .zip(&problem.inequalities.rhs)
            .zip(&ineq_duals)
        {
            comp = comp.max((z * (b - row.dot(&x))).abs());
        }
        for i in 0..n {
            if upper[i] - lower[i] > 1e-12 {
                if lower[i].is_finite() {
                    comp = comp.max((lower_duals[i] * (x[i] - lower[i])).abs());
                }
                if upper[i].is_finite() {
                    comp = comp.max((upper_duals[i] * (upper[i] - x[i])).abs());
                }
            }
        }
        let mut bounded = problem.clone();
        bounded.lower = lower.to_vec();
        bounded.upper = upper.to_vec();
        let kkt = KktResiduals {
            stationarity: resid.amax(),
            primal: bounded.max_violation(&x).max(0.0),
            complementarity: comp,
        };
        QpSolution {
            status: QpStatus::Optimal,
            objective: problem.objective(&x),
            x,
            eq_duals,
            ineq_duals,
            lower_duals,
            upper_duals,
            kkt,
            iterations: ipm.iterations,
        }
    }
}

struct IpmResult {
    status: QpStatus,
    y: DVector<f64>,
    z: Vec<f64>,
    iterations: usize,
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    let mut alpha: f64 = 1.0;
    for (&x, &dx) in v.iter().zip(dv) {
        if dx < 0.0 {
            alpha = alpha.min(-x / dx);
        }
    }
    alpha
}

/// Mehrotra predictor–corrector for `min ½yᵀPy + qᵀy  s.t.  G y ≤ h`.
fn interior_point(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    rows: &[SparseRow],
    h: &[f64],
    opts: &QpOptions,
) -> IpmResult {
    let n = q.len();
    let m = rows.len();

    // Start inside the simple bounds where possible.
    let mut lo = vec![f64::NEG_INFINITY; n];
    let mut hi = vec![f64::INFINITY; n];
    for (row, &b) in rows.iter().zip(h) {
        if let [(k, c)] = row.entries[..] {
            if c > 0.0 {
                hi[k] = hi[k].min(b / c);
            } else {
                lo[k] = lo[k].max(b / c);
            }
        }
    }
    let mut y = DVector::from_fn(n, |k, _| match (lo[k].is_finite(), hi[k].is_finite()) {
        (true, true) => 0.5 * (lo[k] + hi[k]),
        (true, false) => lo[k] + 1.0,
        (false, true) => hi[k] - 1.0,
        (false, false) => 0.0,
    });
    if m == 0 {
        let mut mat = p.clone();
        for k in 0..n {
            mat[(k, k)] += 1e-12;
        }
        let status = match mat.cholesky() {
            Some(ch) => {
                y = ch.solve(&(-q));
                QpStatus::Optimal
            }
            None => QpStatus::MaxIter,
        };
        return IpmResult {
            status,
            y,
            z: Vec::new(),
            iterations: 1,
        };
    }

    let mut s: Vec<f64> = rows
        .iter()
        .zip(h)
        .map(|(r, &b)| (b - r.dot(y.as_slice())).max(1.0))
        .collect();
    let mut z = vec![1.0; m];

    let q_norm = q.amax();
    let h_norm = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut reg = 1e-10;

    let mut rd = DVector::zeros(n);
    let mut rp = vec![0.0; m];
    let mut ds = vec![0.0; m];
    let mut dz = vec![0.0; m];
    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        rd.copy_from(&(p * &y + q));
        for (i, row) in rows.iter().enumerate() {
            for &(k, c) in &row.entries {
                rd[k] += c * z[i];
            }
            rp[i] = row.dot(y.as_slice()) + s[i] - h[i];
        }
        let mu = s.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / m as f64;
        let rd_inf = rd.amax();
        let rp_inf = rp.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if rd_inf <= opts.tol * (1.0 + q_norm)
            && rp_inf <= opts.tol * (1.0 + h_norm)
            && mu <= opts.tol
        {
            status = QpStatus::Optimal;
            break;
        }
        if !(mu.is_finite() && rd_inf.is_finite()) {
            break;
        }

        let mut mat = p.clone();
        for (i, row) in rows.iter().enumerate() {
            let w = z[i] / s[i];
            for &(a, ca) in &row.entries {
                for &(b, cb) in &row.entries {
                    mat[(a, b)] += w * ca * cb;
                }
            }
        }
        let chol = loop {
            let mut trial = mat.clone();
            for k in 0..n {
                trial[(k, k)] += reg;
            }
            if let Some(c) = trial.cholesky() {
                break Some(c);
            }
            reg *= 100.0;
            if reg > 1e-2 {
                break None;
            }
        };
        let Some(chol) = chol else { break };

        let solve_dir = |rc: &[f64], ds: &mut [f64], dz: &mut [f64]| {
            let mut rhs = -&rd;
            for (i, row) in rows.iter().enumerate() {
                let t = (z[i] * rp[i] - rc[i]) / s[i];
                for &(k, c) in &row.entries {
                    rhs[k] -= c * t;
                }
            }
            let dy = chol.solve(&rhs);
            for (i, row) in rows.iter().enumerate() {
                ds[i] = -rp[i] - row.dot(dy.as_slice());
                dz[i] = (-rc[i] - z[i] * ds[i]) / s[i];
            }
            dy
        };

        // Predictor.
        let rc_aff: Vec<f64> = s.iter().zip(&z).map(|(a, b)| a * b).collect();
        let _ = solve_dir(&rc_aff, &mut ds, &mut dz);
        let alpha_aff = max_step(&s, &ds).min(max_step(&z, &dz));
        let mu_aff = s
            .iter()
            .zip(&ds)
            .zip(z.iter().zip(&dz))
            .map(|((si, dsi), (zi, dzi))| (si + alpha_aff * dsi) * (zi + alpha_aff * dzi))
            .sum::<f64>()
            / m as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let rc: Vec<f64> = (0..m)
            .map(|i| s[i] * z[i] + ds[i] * dz[i] - sigma * mu)
            .collect();
        let dy = solve_dir(&rc, &mut ds, &mut dz);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        y.axpy(alpha, &dy, 1.0);
        for i in 0..m {
            s[i] = (s[i] + alpha * ds[i]).max(1e-300);
            z[i] = (z[i] + alpha * dz[i]).max(1e-300);
        }
    }
    IpmResult {
        status,
        y,
        z,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_problem() -> QpProblem {
        QpProblem::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1))
    }

    fn assert_kkt(sol: &QpSolution) {
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.kkt.primal <= 1e-6, "primal {}", sol.kkt.primal);
        assert!(sol.kkt.stationarity <= 1e-6, "stationarity {}", sol.kkt.stationarity);
        assert!(sol.kkt.complementarity <= 1e-6, "comp {}", sol.kkt.complementarity);
    }

    #[test]
    fn textbook_bound() {
        let mut p = scalar_problem();
        p.lower[0] = 1.0;
        let sol = solve_qp(&p).unwrap();
        assert_kkt(&sol);
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
        assert!((sol.objective - 0.5).abs() < 1e-8);
        assert!((sol.lower_duals[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn textbook_row() {
        let mut p = scalar_problem();
        p.inequalities.push(SparseRow::new(vec![(0, -1.0)]), -1.0);
        let sol = solve_qp(&p).unwrap();
        assert_kkt(&sol);
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn contradictory_bounds() {
        let mut p = scalar_problem();
        p.lower[0] = 1.0;
        p.upper[0] = 0.0;
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);

        let mut p = scalar_problem();
        p.inequalities.push(SparseRow::new(vec![(0, -1.0)]), -1.0);
        p.inequalities.push(SparseRow::new(vec![(0, 1.0)]), 0.0);
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn infeasible_needs_phase_one() {
        // x + y ≥ 3, x - y ≥ 0.5... with x, y ∈ [0, 1]: x + y ≤ 2 < 3.
        let mut p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2));
        p.inequalities.push(SparseRow::new(vec![(0, -1.0), (1, -1.0)]), -3.0);
        p.lower = vec![0.0, 0.0];
        p.upper = vec![1.0, 1.0];
        p.inequalities.push(SparseRow::new(vec![(0, 1.0), (1, 2.0)]), 10.0);
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn inconsistent_equalities() {
        let mut p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2));
        p.equalities.push(SparseRow::new(vec![(0, 1.0), (1, 1.0)]), 1.0);
        p.equalities.push(SparseRow::new(vec![(0, 2.0), (1, 2.0)]), 3.0);
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_equalities_are_fine() {
        let mut p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2));
        p.equalities.push(SparseRow::new(vec![(0, 1.0), (1, 1.0)]), 1.0);
        p.equalities.push(SparseRow::new(vec![(0, 2.0), (1, 2.0)]), 2.0);
        let sol = solve_qp(&p).unwrap();
        assert_kkt(&sol);
        assert!((sol.x[0] - 0.5).abs() < 1e-8 && (sol.x[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn psd_hessian_with_bounds() {
        // Linear objective in the second coordinate.
        let mut h = DMatrix::zeros(2, 2);
        h[(0, 0)] = 2.0;
        let mut p = QpProblem::new(h, DVector::from_vec(vec![-2.0, 1.0]));
        p.lower = vec![-5.0, -3.0];
        p.upper = vec![5.0, 3.0];
        let sol = solve_qp(&p).unwrap();
        assert_kkt(&sol);
        assert!((sol.x[0] - 1.0).abs() < 1e-7);
        assert!((sol.x[1] + 3.0).abs() < 1e-7);
    }

    #[test]
    fn fixed_variables_substituted() {
        let mut p = QpProblem::new(DMatrix::identity(3, 3), DVector::from_vec(vec![1.0, -1.0, 0.0]));
        p.lower = vec![2.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        p.upper = vec![2.0, f64::INFINITY, f64::INFINITY];
        p.equalities.push(SparseRow::new(vec![(0, 1.0), (1, 1.0), (2, 1.0)]), 4.0);
        let sol = solve_qp(&p).unwrap();
        assert_kkt(&sol);
        assert!((sol.x[0] - 2.0).abs() < 1e-12);
        // min ½(y²+z²) - y with y + z = 2 → y = 1.5, z = 0.5.
        assert!((sol.x[1] - 1.5).abs() < 1e-7);
        assert!((sol.x[2] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn dimension_errors() {
        let mut p = scalar_problem();
        p.inequalities.push(SparseRow::new(vec![(3, 1.0)]), 0.0);
        assert!(matches!(solve_qp(&p), Err(Error::Dimension(_))));
    }

    /// Equality-only problems against the dense KKT system.
    fn kkt_oracle(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
        let n = h.nrows();
        let m = a.nrows();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(h);
        k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        k.view_mut((n, 0), (m, n)).copy_from(a);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-g));
        rhs.rows_mut(n, m).copy_from(b);
        k.lu().solve(&rhs).unwrap().rows(0, n).into_owned()
    }

    proptest! {
        #[test]
        fn equality_only_matches_dense_kkt(
            entries in prop::collection::vec(-1.0f64..1.0, 5 * 5),
            g in prop::collection::vec(-2.0f64..2.0, 5),
            a in prop::collection::vec(-1.0f64..1.0, 2 * 5),
            b in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let m = DMatrix::from_vec(5, 5, entries);
            let h = &m * m.transpose() + DMatrix::identity(5, 5) * 0.5;
            let g = DVector::from_vec(g);
            let a = DMatrix::from_vec(2, 5, a);
            let b = DVector::from_vec(b);
            let mut p = QpProblem::new(h.clone(), g.clone());
            p.equalities = LinearConstraints::from_dense(&a, b.as_slice());
            let sol = solve_qp(&p).unwrap();
            prop_assert_eq!(sol.status, QpStatus::Optimal);
            let x = kkt_oracle(&h, &g, &a, &b);
            for i in 0..5 {
                prop_assert!((sol.x[i] - x[i]).abs() < 1e-8, "x[{}] {} vs {}", i, sol.x[i], x[i]);
            }
        }

        #[test]
        fn random_box_qp_satisfies_kkt(
            entries in prop::collection::vec(-1.0f64..1.0, 4 * 4),
            g in prop::collection::vec(-3.0f64..3.0, 4),
            rows in prop::collection::vec(-1.0f64..1.0, 3 * 4),
        ) {
            let m = DMatrix::from_vec(4, 4, entries);
            let h = &m * m.transpose();
            let mut p = QpProblem::new(h, DVector::from_vec(g));
            p.lower = vec![-1.0; 4];
            p.upper = vec![1.0; 4];
            p.inequalities = LinearConstraints::from_dense(&DMatrix::from_vec(3, 4, rows), &[0.5, 0.5, 0.5]);
            let sol = solve_qp(&p).unwrap();
            prop_assert_eq!(sol.status, QpStatus::Optimal);
            prop_assert!(sol.kkt.primal <= 1e-6);
            prop_assert!(sol.kkt.stationarity <= 1e-6);
            prop_assert!(sol.kkt.complementarity <= 1e-6);
        }
    }
}
