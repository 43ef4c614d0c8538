//! Dense small-scale linear programming: a two-phase tableau simplex with an
//! anti-cycling fallback, zero-sum matrix-game minimax, and the coarse
//! correlated equilibrium subroutine over a pair of payoff matrices.
//!
//! Everything here is exact dense arithmetic on problems of at most a few
//! hundred variables. Pivoting uses largest-coefficient pricing and switches
//! to Bland's rule after a degenerate stall, so cycling cannot occur.

use thiserror::Error;

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;
const MAX_ITER: usize = 200_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LpError {
    #[error("infeasible program")]
    Infeasible,
    #[error("unbounded program")]
    Unbounded,
    #[error("pivot limit exceeded")]
    CyclingGuard,
    #[error("bad input: {0}")]
    BadInput(String),
}

/// `maximize objective . x` subject to `a_ub x <= b_ub`, `a_eq x = b_eq`,
/// `x >= lower_bounds` (zeros when empty).
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub a_ub: Vec<Vec<f64>>,
    pub b_ub: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub lower_bounds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// Solves the program with the two-phase simplex method.
///
/// Returns a vertex solution; identical inputs always yield the identical
/// vertex.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let n = lp.objective.len();
    if n == 0 {
        return Err(LpError::BadInput("empty objective".into()));
    }
    for row in lp.a_ub.iter().chain(lp.a_eq.iter()) {
        if row.len() != n {
            return Err(LpError::BadInput("constraint row length mismatch".into()));
        }
    }
    if lp.a_ub.len() != lp.b_ub.len() || lp.a_eq.len() != lp.b_eq.len() {
        return Err(LpError::BadInput("constraint rhs length mismatch".into()));
    }
    if !lp.lower_bounds.is_empty() && lp.lower_bounds.len() != n {
        return Err(LpError::BadInput("lower bound length mismatch".into()));
    }
    let finite = |v: &f64| v.is_finite();
    if !lp.objective.iter().all(finite)
        || !lp.a_ub.iter().flatten().all(finite)
        || !lp.a_eq.iter().flatten().all(finite)
        || !lp.b_ub.iter().all(finite)
        || !lp.b_eq.iter().all(finite)
        || !lp.lower_bounds.iter().all(finite)
    {
        return Err(LpError::BadInput("non-finite coefficient".into()));
    }

    // Shift x = y + lb so every variable has a zero lower bound.
    let lb = if lp.lower_bounds.is_empty() { vec![0.0; n] } else { lp.lower_bounds.clone() };
    let shift_rhs = |a: &[Vec<f64>], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(row, &bi)| bi - row.iter().zip(&lb).map(|(aij, l)| aij * l).sum::<f64>())
            .collect()
    };
    let b_ub = shift_rhs(&lp.a_ub, &lp.b_ub);
    let b_eq = shift_rhs(&lp.a_eq, &lp.b_eq);
    let obj_shift: f64 = lp.objective.iter().zip(&lb).map(|(c, l)| c * l).sum();

    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::with_capacity(lp.a_ub.len() + lp.a_eq.len());
    for (row, &bi) in lp.a_ub.iter().zip(&b_ub) {
        rows.push((row.clone(), bi, false));
    }
    for (row, &bi) in lp.a_eq.iter().zip(&b_eq) {
        rows.push((row.clone(), bi, true));
    }

    let y = simplex(n, &lp.objective, rows)?;
    let x: Vec<f64> = y.iter().zip(&lb).map(|(yi, l)| yi + l).collect();
    let objective = lp.objective.iter().zip(&x).map(|(c, xi)| c * xi).sum::<f64>();
    debug_assert!(objective.is_finite());
    let _ = obj_shift;
    Ok(LpSolution { x, objective })
}

/// Core tableau simplex over `maximize c.y` with rows `(a, b, is_eq)` and
/// `y >= 0`.
fn simplex(n: usize, c: &[f64], rows: Vec<(Vec<f64>, f64, bool)>) -> Result<Vec<f64>, LpError> {
    let m = rows.len();
    // Column layout: structural | slack/surplus | artificial.
    let mut n_slack = 0usize;
    let mut n_art = 0usize;
    for &(_, b, is_eq) in &rows {
        if is_eq {
            n_art += 1;
        } else {
            n_slack += 1;
            if b < 0.0 {
                n_art += 1;
            }
        }
    }
    let total = n + n_slack + n_art;
    let width = total + 1; // + rhs
    let mut tab = vec![0.0f64; (m + 2) * width]; // m rows + phase-2 row + phase-1 row
    let mut basis = vec![usize::MAX; m];
    let art_start = n + n_slack;

    let mut slack_idx = n;
    let mut art_idx = art_start;
    for (r, (a, b, is_eq)) in rows.into_iter().enumerate() {
        let sign = if b < 0.0 { -1.0 } else { 1.0 };
        let base = r * width;
        for (j, &aij) in a.iter().enumerate() {
            tab[base + j] = sign * aij;
        }
        tab[base + total] = sign * b;
        if is_eq {
            tab[base + art_idx] = 1.0;
            basis[r] = art_idx;
            art_idx += 1;
        } else {
            // sign<0 turns `<=` into `>=`: surplus plus artificial.
            tab[base + slack_idx] = sign;
            if sign < 0.0 {
                tab[base + art_idx] = 1.0;
                basis[r] = art_idx;
                art_idx += 1;
            } else {
                basis[r] = slack_idx;
            }
            slack_idx += 1;
        }
    }

    let p2 = (m) * width; // phase-2 objective row offset
    let p1 = (m + 1) * width; // phase-1 objective row offset
    for j in 0..n {
        tab[p2 + j] = c[j];
    }
    // Phase-1 reduced costs: maximize -(sum of artificials); fold in the
    // rows whose basic variable is artificial.
    for r in 0..m {
        if basis[r] >= art_start {
            for j in 0..width {
                tab[p1 + j] += tab[r * width + j];
            }
        }
    }
    // Zero the artificial columns in the phase-1 row (reduced cost of a
    // basic variable is zero; built-in -1 cancels the +1 fold).
    for j in art_start..total {
        tab[p1 + j] = 0.0;
    }

    if n_art > 0 {
        run_phase(&mut tab, m, width, total, &mut basis, p1, art_start)?;
        if tab[p1 + total] > FEAS_TOL {
            return Err(LpError::Infeasible);
        }
        // Kick leftover artificials out of the basis; drop redundant rows.
        for r in 0..m {
            if basis[r] >= art_start {
                let base = r * width;
                let col = (0..art_start).find(|&j| tab[base + j].abs() > PIVOT_TOL);
                match col {
                    Some(j) => pivot(&mut tab, m, width, &mut basis, r, j),
                    None => {
                        for j in 0..width {
                            tab[base + j] = 0.0;
                        }
                    }
                }
            }
        }
    }

    run_phase(&mut tab, m, width, total, &mut basis, p2, art_start)?;

    let mut y = vec![0.0f64; n];
    for r in 0..m {
        if basis[r] < n {
            y[basis[r]] = tab[r * width + total];
        }
    }
    Ok(y)
}

/// Runs one simplex phase to optimality over the first `limit` columns.
fn run_phase(
    tab: &mut [f64],
    m: usize,
    width: usize,
    total: usize,
    basis: &mut [usize],
    obj: usize,
    limit: usize,
) -> Result<(), LpError> {
    let mut bland = false;
    let mut stall = 0usize;
    for _ in 0..MAX_ITER {
        let enter = if bland {
            (0..limit).find(|&j| tab[obj + j] > PIVOT_TOL)
        } else {
            let mut best = None;
            let mut best_val = PIVOT_TOL;
            for j in 0..limit {
                if tab[obj + j] > best_val {
                    best_val = tab[obj + j];
                    best = Some(j);
                }
            }
            best
        };
        let Some(col) = enter else { return Ok(()) };

        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            let a = tab[r * width + col];
            if a > PIVOT_TOL {
                let ratio = tab[r * width + total] / a;
                let better = match leave {
                    None => true,
                    Some((lr, lratio)) => {
                        ratio < lratio - 1e-12
                            || (ratio < lratio + 1e-12 && basis[r] < basis[lr])
                    }
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        let Some((row, ratio)) = leave else { return Err(LpError::Unbounded) };
        if ratio.abs() < 1e-12 {
            stall += 1;
            if stall > 2 * (m + total) {
                bland = true;
            }
        } else {
            stall = 0;
        }
        pivot(tab, m, width, basis, row, col);
    }
    Err(LpError::CyclingGuard)
}

fn pivot(tab: &mut [f64], m: usize, width: usize, basis: &mut [usize], row: usize, col: usize) {
    let base = row * width;
    let p = tab[base + col];
    for j in 0..width {
        tab[base + j] /= p;
    }
    tab[base + col] = 1.0;
    for r in 0..m + 2 {
        if r == row {
            continue;
        }
        let factor = tab[r * width + col];
        if factor != 0.0 {
            for j in 0..width {
                tab[r * width + j] -= factor * tab[base + j];
            }
            tab[r * width + col] = 0.0;
        }
    }
    basis[row] = col;
}

/// Solution of a two-player zero-sum matrix game (payoff to the row player).
#[derive(Debug, Clone)]
pub struct MatrixGameSolution {
    pub value: f64,
    pub row_strategy: Vec<f64>,
    pub col_strategy: Vec<f64>,
    pub duality_gap: f64,
}

/// Minimax solution of `M` by linear programming.
///
/// The row player maximizes, the column player minimizes. Works for any
/// finite payoff range; callers in this crate rescale into `[0, 1]` first.
pub fn solve_matrix_game(matrix: &[Vec<f64>]) -> Result<MatrixGameSolution, LpError> {
    let n = matrix.len();
    if n == 0 {
        return Err(LpError::BadInput("empty matrix".into()));
    }
    let m = matrix[0].len();
    if m == 0 || matrix.iter().any(|r| r.len() != m) {
        return Err(LpError::BadInput("ragged matrix".into()));
    }
    if matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LpError::BadInput("non-finite payoff".into()));
    }
    // Shift all payoffs positive so the classical normalization applies.
    let min_entry = matrix.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let shift = 1.0 - min_entry.min(0.0);
    let shifted = |a: usize, b: usize| matrix[a][b] + shift;

    // Column player: maximize sum(q) s.t. M' q <= 1, q >= 0; y = q / sum(q).
    let col_lp = LinearProgram {
        objective: vec![1.0; m],
        a_ub: (0..n).map(|a| (0..m).map(|b| shifted(a, b)).collect()).collect(),
        b_ub: vec![1.0; n],
        ..Default::default()
    };
    let col = solve_lp(&col_lp)?;
    let col_total: f64 = col.x.iter().sum();
    if col_total <= 0.0 {
        return Err(LpError::BadInput("degenerate column program".into()));
    }
    let col_strategy: Vec<f64> = col.x.iter().map(|q| q / col_total).collect();

    // Row player: minimize sum(p) s.t. M'^T p >= 1, p >= 0; x = p / sum(p).
    let row_lp = LinearProgram {
        objective: vec![-1.0; n],
        a_ub: (0..m).map(|b| (0..n).map(|a| -shifted(a, b)).collect()).collect(),
        b_ub: vec![-1.0; m],
        ..Default::default()
    };
    let row = solve_lp(&row_lp)?;
    let row_total: f64 = row.x.iter().sum();
    if row_total <= 0.0 {
        return Err(LpError::BadInput("degenerate row program".into()));
    }
    let row_strategy: Vec<f64> = row.x.iter().map(|p| p / row_total).collect();

    let value = 1.0 / col_total - shift;
    // Realized guarantees of the two strategies; their difference bounds the
    // distance from the exact minimax value.
    let row_payoff_to_col = |b: usize| -> f64 {
        (0..n).map(|a| row_strategy[a] * matrix[a][b]).sum()
    };
    let col_payoff_to_row = |a: usize| -> f64 {
        (0..m).map(|b| col_strategy[b] * matrix[a][b]).sum()
    };
    let best_row_dev = (0..n).map(col_payoff_to_row).fold(f64::NEG_INFINITY, f64::max);
    let best_col_dev = (0..m).map(row_payoff_to_col).fold(f64::INFINITY, f64::min);
    let duality_gap = (best_row_dev - best_col_dev).max(0.0);

    Ok(MatrixGameSolution { value, row_strategy, col_strategy, duality_gap })
}

/// A joint distribution over an `n x m` action grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f64>,
}

impl JointDistribution {
    pub fn prob(&self, a: usize, b: usize) -> f64 {
        self.probs[a * self.cols + b]
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for a in 0..self.rows {
            for b in 0..self.cols {
                out[a] += self.prob(a, b);
            }
        }
        out
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for a in 0..self.rows {
            for b in 0..self.cols {
                out[b] += self.prob(a, b);
            }
        }
        out
    }

    pub fn expect(&self, matrix: &[Vec<f64>]) -> f64 {
        let mut acc = 0.0;
        for a in 0..self.rows {
            for b in 0..self.cols {
                acc += self.prob(a, b) * matrix[a][b];
            }
        }
        acc
    }
}

/// Computes a coarse correlated equilibrium of the bimatrix `(P, Q)` where
/// the row player maximizes `P` and the column player minimizes `Q`.
///
/// Among feasible points it maximizes `E[P] - E[Q]` and then picks the
/// lexicographically smallest vertex, so the output is a deterministic
/// function of the inputs. Infeasibility cannot occur (a Nash point of
/// `(P, Q)` satisfies the constraints); solver failures are hard errors.
pub fn solve_cce(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<JointDistribution, LpError> {
    let n = p.len();
    if n == 0 || p[0].is_empty() {
        return Err(LpError::BadInput("empty payoff matrix".into()));
    }
    let m = p[0].len();
    if q.len() != n || p.iter().any(|r| r.len() != m) || q.iter().any(|r| r.len() != m) {
        return Err(LpError::BadInput("payoff shape mismatch".into()));
    }
    let vars = n * m;
    let idx = |a: usize, b: usize| a * m + b;

    let mut a_ub: Vec<Vec<f64>> = Vec::with_capacity(n + m);
    // Row deviations: E[P(a*, b)] - E[P] <= 0 for every a*.
    for a_star in 0..n {
        let mut row = vec![0.0; vars];
        for a in 0..n {
            for b in 0..m {
                row[idx(a, b)] = p[a_star][b] - p[a][b];
            }
        }
        a_ub.push(row);
    }
    // Column deviations: E[Q] - E[Q(a, b*)] <= 0 for every b*.
    for b_star in 0..m {
        let mut row = vec![0.0; vars];
        for a in 0..n {
            for b in 0..m {
                row[idx(a, b)] = q[a][b] - q[a][b_star];
            }
        }
        a_ub.push(row);
    }
    let b_ub = vec![0.0; n + m];
    let a_eq = vec![vec![1.0; vars]];
    let b_eq = vec![1.0];

    let mut objective = vec![0.0; vars];
    for a in 0..n {
        for b in 0..m {
            objective[idx(a, b)] = p[a][b] - q[a][b];
        }
    }

    let mut lp = LinearProgram { objective, a_ub, b_ub, a_eq, b_eq, ..Default::default() };
    let first = solve_lp(&lp)?;
    let mut best = first.objective;

    // Lexicographic refinement: pin the objective, then minimize each
    // coordinate in turn. The slack keeps successive programs feasible.
    const PIN_EPS: f64 = 1e-9;
    let primary = lp.objective.clone();
    lp.a_ub.push(primary.iter().map(|c| -c).collect());
    lp.b_ub.push(-(best - PIN_EPS));
    let mut solution = first.x;
    for coord in 0..vars {
        lp.objective = vec![0.0; vars];
        lp.objective[coord] = -1.0;
        let sol = solve_lp(&lp)?;
        let min_val = -sol.objective;
        solution = sol.x;
        let mut pin = vec![0.0; vars];
        pin[coord] = 1.0;
        lp.a_ub.push(pin);
        lp.b_ub.push(min_val + PIN_EPS);
    }
    let _ = &mut best;

    let mut probs = solution;
    for v in probs.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(LpError::BadInput(format!("cce mass {total}")));
    }
    for v in probs.iter_mut() {
        *v /= total;
    }
    Ok(JointDistribution { rows: n, cols: m, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_variable_box() {
        let lp = LinearProgram {
            objective: vec![1.0],
            a_ub: vec![vec![1.0]],
            b_ub: vec![3.0],
            ..Default::default()
        };
        let sol = solve_lp(&lp).unwrap();
        assert!((sol.x[0] - 3.0).abs() < 1e-9);
        assert!((sol.objective - 3.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_pair() {
        // x <= 0 and x >= 1.
        let lp = LinearProgram {
            objective: vec![1.0],
            a_ub: vec![vec![1.0], vec![-1.0]],
            b_ub: vec![0.0, -1.0],
            ..Default::default()
        };
        assert_eq!(solve_lp(&lp).unwrap_err(), LpError::Infeasible);
    }

    #[test]
    fn unbounded_detected() {
        let lp = LinearProgram { objective: vec![1.0], ..Default::default() };
        assert_eq!(solve_lp(&lp).unwrap_err(), LpError::Unbounded);
    }

    #[test]
    fn lower_bounds_shift() {
        // maximize -x with x >= 2 gives x = 2.
        let lp = LinearProgram {
            objective: vec![-1.0],
            lower_bounds: vec![2.0],
            a_ub: vec![vec![1.0]],
            b_ub: vec![5.0],
            ..Default::default()
        };
        let sol = solve_lp(&lp).unwrap();
        assert!((sol.x[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn equalities_work() {
        // maximize x + y s.t. x + y = 1, x <= 0.25.
        let lp = LinearProgram {
            objective: vec![1.0, 1.0],
            a_eq: vec![vec![1.0, 1.0]],
            b_eq: vec![1.0],
            a_ub: vec![vec![1.0, 0.0]],
            b_ub: vec![0.25],
            ..Default::default()
        };
        let sol = solve_lp(&lp).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-9);
        assert!(sol.x[0] <= 0.25 + 1e-9);
    }

    #[test]
    fn deterministic_vertex() {
        let lp = LinearProgram {
            objective: vec![1.0, 1.0],
            a_ub: vec![vec![1.0, 1.0]],
            b_ub: vec![1.0],
            ..Default::default()
        };
        let a = solve_lp(&lp).unwrap();
        let b = solve_lp(&lp).unwrap();
        assert_eq!(a.x, b.x);
    }

    /// Brute-force oracle: enumerate candidate vertices from every n-subset
    /// of tight constraints and return the best feasible objective.
    fn vertex_enumeration_optimum(lp: &LinearProgram) -> Option<f64> {
        let n = lp.objective.len();
        // Constraint list: a_ub rows (<=), plus x_i >= 0 rows.
        let mut rows: Vec<(Vec<f64>, f64)> = lp.a_ub.iter().cloned().zip(lp.b_ub.iter().cloned()).collect();
        for i in 0..n {
            let mut r = vec![0.0; n];
            r[i] = -1.0;
            rows.push((r, 0.0));
        }
        let total = rows.len();
        let mut best: Option<f64> = None;
        let mut combo: Vec<usize> = (0..n).collect();
        loop {
            if let Some(x) = solve_square(&combo.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>(), n) {
                let feasible = rows
                    .iter()
                    .all(|(a, b)| a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum::<f64>() <= b + 1e-7);
                if feasible {
                    let obj = lp.objective.iter().zip(&x).map(|(c, xi)| c * xi).sum::<f64>();
                    best = Some(best.map_or(obj, |cur: f64| cur.max(obj)));
                }
            }
            // next combination
            let mut i = n;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if combo[i] != i + total - n {
                    combo[i] += 1;
                    for j in i + 1..n {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn solve_square(rows: &[(Vec<f64>, f64)], n: usize) -> Option<Vec<f64>> {
        let mut a: Vec<Vec<f64>> = rows.iter().map(|(r, _)| r.clone()).collect();
        let mut b: Vec<f64> = rows.iter().map(|(_, v)| *v).collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
            if a[piv][col].abs() < 1e-10 {
                return None;
            }
            a.swap(col, piv);
            b.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..n {
                        a[r][k] -= f * a[col][k];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
        Some((0..n).map(|i| b[i] / a[i][i]).collect())
    }

    #[test]
    fn random_lps_match_vertex_enumeration() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for trial in 0..40 {
            let n = rng.gen_range(2..=5);
            let m = rng.gen_range(1..=4);
            let mut lp = LinearProgram {
                objective: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                a_ub: (0..m)
                    .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                b_ub: (0..m).map(|_| rng.gen_range(0.1..2.0)).collect(),
                ..Default::default()
            };
            // Box to keep it bounded; x = 0 stays feasible.
            for i in 0..n {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                lp.a_ub.push(r);
                lp.b_ub.push(1.0);
            }
            let sol = solve_lp(&lp).unwrap();
            let oracle = vertex_enumeration_optimum(&lp).unwrap();
            assert!(
                (sol.objective - oracle).abs() <= 1e-8,
                "trial {trial}: simplex {} vs oracle {oracle}",
                sol.objective
            );
            // Primal feasibility residuals.
            for (a, b) in lp.a_ub.iter().zip(&lp.b_ub) {
                let lhs: f64 = a.iter().zip(&sol.x).map(|(ai, xi)| ai * xi).sum();
                assert!(lhs <= b + 1e-8);
            }
            assert!(sol.x.iter().all(|&v| v >= -1e-8));
        }
    }

    #[test]
    fn singleton_matrix_game() {
        let sol = solve_matrix_game(&[vec![0.5]]).unwrap();
        assert!((sol.value - 0.5).abs() < 1e-9);
        assert_eq!(sol.row_strategy, vec![1.0]);
        assert_eq!(sol.col_strategy, vec![1.0]);
    }

    #[test]
    fn matching_pennies_uniform() {
        let sol = solve_matrix_game(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((sol.value - 0.5).abs() < 1e-8);
        for p in sol.row_strategy.iter().chain(sol.col_strategy.iter()) {
            assert!((p - 0.5).abs() < 1e-8);
        }
        assert!(sol.duality_gap <= 1e-8);
    }

    #[test]
    fn role_symmetry_complement() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..=4);
            let m = rng.gen_range(2..=4);
            let game: Vec<Vec<f64>> =
                (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let forward = solve_matrix_game(&game).unwrap();
            let complement: Vec<Vec<f64>> =
                (0..m).map(|b| (0..n).map(|a| 1.0 - game[a][b]).collect()).collect();
            let backward = solve_matrix_game(&complement).unwrap();
            assert!(
                (forward.value - (1.0 - backward.value)).abs() <= 1e-8,
                "value {} vs complement {}",
                forward.value,
                backward.value
            );
        }
    }

    #[test]
    fn cce_constant_matrix_tie_break() {
        let p = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let cce = solve_cce(&p, &p).unwrap();
        // Lexicographically smallest vertex of the simplex: all mass on the
        // last joint action.
        assert!((cce.prob(1, 1) - 1.0).abs() < 1e-7, "{:?}", cce.probs);
    }

    #[test]
    fn cce_identity_pair_uniform_marginals() {
        let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cce = solve_cce(&p, &p).unwrap();
        for v in cce.row_marginal().iter().chain(cce.col_marginal().iter()) {
            assert!((v - 0.5).abs() < 1e-7, "{:?}", cce.probs);
        }
        // The marginal pair is a Nash point for the zero-sum payoff.
        let exploit = marginal_exploitability(&p, &cce);
        assert!(exploit <= 1e-7);
    }

    fn marginal_exploitability(q: &[Vec<f64>], pi: &JointDistribution) -> f64 {
        let mu = pi.row_marginal();
        let nu = pi.col_marginal();
        let n = q.len();
        let m = q[0].len();
        let best_row = (0..n)
            .map(|a| (0..m).map(|b| nu[b] * q[a][b]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let worst_col = (0..m)
            .map(|b| (0..n).map(|a| mu[a] * q[a][b]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        best_row - worst_col
    }

    #[test]
    fn cce_constraints_hold_on_random_pairs() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let p: Vec<Vec<f64>> =
                (0..3).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let q: Vec<Vec<f64>> =
                (0..3).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let cce = solve_cce(&p, &q).unwrap();
            let ep = cce.expect(&p);
            let eq = cce.expect(&q);
            let col_marg = cce.col_marginal();
            let row_marg = cce.row_marginal();
            for a_star in 0..3 {
                let dev: f64 = (0..3).map(|b| col_marg[b] * p[a_star][b]).sum();
                assert!(ep >= dev - 1e-8);
            }
            for b_star in 0..3 {
                let dev: f64 = (0..3).map(|a| row_marg[a] * q[a][b_star]).sum();
                assert!(eq <= dev + 1e-8);
            }
        }
    }

    #[test]
    fn cce_zero_sum_marginals_are_nash() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let q: Vec<Vec<f64>> =
                (0..3).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let cce = solve_cce(&q, &q).unwrap();
            assert!(marginal_exploitability(&q, &cce) <= 1e-7);
        }
    }

    #[test]
    fn cce_deterministic() {
        let p = vec![vec![0.2, 0.8], vec![0.6, 0.1]];
        let q = vec![vec![0.9, 0.3], vec![0.4, 0.5]];
        let a = solve_cce(&p, &q).unwrap();
        let b = solve_cce(&p, &q).unwrap();
        assert_eq!(a.probs, b.probs);
    }
}
