//! Optimal one-to-one matching between predicted and ground-truth tips.

use crate::error::{Error, Result};
use crate::geometry::Point;

/// `rows × cols` non-negative finite costs; rows are predictions, columns truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("cost matrix"));
        }
        if entries.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries for {rows}x{cols}", rows * cols),
                actual: entries.len().to_string(),
            });
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        if entries.iter().any(|&c| c < 0.0) {
            return Err(Error::InvalidScene("negative cost".into()));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                expected: format!("rows of length {cols}"),
                actual: "ragged rows".into(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(
            self.rows,
            self.cols,
            self.entries.iter().map(|c| c * k).collect(),
        )
    }

    /// Sum of the given pairs' entries, accumulated in list order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Matched `(pred_index, true_index)` pairs, sorted by prediction index.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn truth_for(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }

    pub fn pred_for(&self, truth: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == truth).map(|p| p.0)
    }
}

/// Euclidean distances: `entries[i][j] = |pred[i] - truth[j]|`.
pub fn cost_matrix(pred: &[Point], truth: &[Point]) -> Result<CostMatrix> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::EmptyInput("tip list"));
    }
    let entries = pred
        .iter()
        .flat_map(|p| truth.iter().map(move |t| p.distance(t)))
        .collect();
    CostMatrix::new(pred.len(), truth.len(), entries)
}

/// Kuhn–Munkres with row/column potentials on a square matrix, `O(n³)`.
/// Returns the column assigned to each row.
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based bookkeeping; index 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[owner[j] - 1] = j - 1;
    }
    col_of_row
}

/// Square padding of a rectangular problem. Dummy rows/columns carry a constant
/// sentinel, so every completion pays the same amount for them.
struct Padded<'a> {
    cost: &'a CostMatrix,
    n: usize,
    sentinel: f64,
}

impl Padded<'_> {
    fn get(&self, r: usize, c: usize) -> f64 {
        if r < self.cost.rows && c < self.cost.cols {
            self.cost.get(r, c)
        } else {
            self.sentinel
        }
    }

    /// Optimal real-pair cost with some rows already fixed to columns.
    fn constrained_optimum(&self, fixed: &[(usize, usize)]) -> f64 {
        let free_rows: Vec<usize> = (0..self.n)
            .filter(|r| fixed.iter().all(|f| f.0 != *r))
            .collect();
        let free_cols: Vec<usize> = (0..self.n)
            .filter(|c| fixed.iter().all(|f| f.1 != *c))
            .collect();
        let fixed_cost: f64 = fixed.iter().map(|&(r, c)| self.real(r, c)).sum();
        if free_rows.is_empty() {
            return fixed_cost;
        }
        let cols = solve_square(free_rows.len(), |i, j| self.get(free_rows[i], free_cols[j]));
        fixed_cost
            + cols
                .iter()
                .enumerate()
                .map(|(i, &j)| self.real(free_rows[i], free_cols[j]))
                .sum::<f64>()
    }

    fn real(&self, r: usize, c: usize) -> f64 {
        if r < self.cost.rows && c < self.cost.cols {
            self.cost.get(r, c)
        } else {
            0.0
        }
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Among equal-cost optima the lexicographically smallest pair list is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if cost.entries.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    let n = cost.rows.max(cost.cols);
    let max = cost.entries.iter().copied().fold(0.0f64, f64::max);
    let padded = Padded {
        cost,
        n,
        sentinel: 1.0 + 2.0 * max,
    };
    let first = solve_square(n, |r, c| padded.get(r, c));
    let optimum: f64 = first
        .iter()
        .enumerate()
        .map(|(r, &c)| padded.real(r, c))
        .sum();
    let tol = 1e-12 * (1.0 + optimum.abs());

    // Walk rows in order and keep the smallest column that still admits an optimal
    // completion; a dummy column (row left unmatched) sorts after every real one.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(cost.rows);
    for r in 0..cost.rows {
        // Fallback guards against rounding: the column with the cheapest completion.
        let mut cheapest: Option<(f64, usize)> = None;
        let mut choice = None;
        for c in 0..n {
            if fixed.iter().any(|f| f.1 == c) {
                continue;
            }
            fixed.push((r, c));
            let completion = padded.constrained_optimum(&fixed);
            fixed.pop();
            if completion <= optimum + tol {
                choice = Some(c);
                break;
            }
            if cheapest.is_none_or(|(v, _)| completion < v) {
                cheapest = Some((completion, c));
            }
            if c >= cost.cols {
                // Dummy columns are interchangeable.
                break;
            }
        }
        let c = choice.or(cheapest.map(|(_, c)| c)).expect("a free column exists");
        fixed.push((r, c));
    }
    let pairs: Vec<(usize, usize)> = fixed.into_iter().filter(|&(_, c)| c < cost.cols).collect();
    Ok(Assignment {
        total_cost: cost.total(&pairs),
        pairs,
    })
}

/// Exhaustive search over every injective matching; test oracle.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<Assignment> {
    let k = cost.rows.min(cost.cols);
    if k > 8 {
        return Err(Error::SizeGuard(format!(
            "brute force limited to min(rows, cols) <= 8, got {k}"
        )));
    }
    let mut best: Option<Assignment> = None;
    let mut consider = |mut pairs: Vec<(usize, usize)>| {
        pairs.sort_unstable();
        let total = cost.total(&pairs);
        let better = match &best {
            None => true,
            Some(b) => total < b.total_cost || (total == b.total_cost && pairs < b.pairs),
        };
        if better {
            best = Some(Assignment {
                pairs,
                total_cost: total,
            });
        }
    };
    // Choose an ordered injection from the smaller side into the larger one.
    let transpose = cost.rows > cost.cols;
    let (small, large) = if transpose {
        (cost.cols, cost.rows)
    } else {
        (cost.rows, cost.cols)
    };
    let mut chosen = Vec::with_capacity(small);
    let mut used = vec![false; large];
    enumerate_injections(small, large, &mut chosen, &mut used, &mut |inj| {
        let pairs = inj
            .iter()
            .enumerate()
            .map(|(s, &l)| if transpose { (l, s) } else { (s, l) })
            .collect();
        consider(pairs);
    });
    Ok(best.expect("non-empty matrix has at least one matching"))
}

fn enumerate_injections(
    small: usize,
    large: usize,
    chosen: &mut Vec<usize>,
    used: &mut [bool],
    visit: &mut dyn FnMut(&[usize]),
) {
    if chosen.len() == small {
        visit(chosen);
        return;
    }
    for l in 0..large {
        if !used[l] {
            used[l] = true;
            chosen.push(l);
            enumerate_injections(small, large, chosen, used, visit);
            chosen.pop();
            used[l] = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let p = [Point::new(0.0, 0.0), Point::new(10.0, 0.0)];
        let c = cost_matrix(&p, &p).unwrap();
        assert_eq!((c.get(0, 0), c.get(1, 1)), (0.0, 0.0));
        let c = cost_matrix(&[Point::new(0.0, 0.0)], &[Point::new(3.0, 4.0)]).unwrap();
        assert_eq!(c.get(0, 0), 5.0);
        let swapped = [Point::new(10.0, 0.0), Point::new(0.0, 0.0)];
        let c = cost_matrix(&p, &swapped).unwrap();
        assert_eq!(c, m(&[&[10.0, 0.0], &[0.0, 10.0]]));
        assert!(cost_matrix(&[], &p).is_err());
    }

    #[test]
    fn forced_optimum() {
        let a = hungarian(&m(&[&[0.0, 9.0], &[9.0, 0.0]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn three_by_three_matches_permutation_oracle() {
        let c = m(&[&[4.0, 1.0, 3.0], &[2.0, 0.0, 5.0], &[3.0, 2.0, 2.0]]);
        // All 3! permutations by hand: min is 1 + 2 + 2 = 5 via (0,1),(1,0),(2,2).
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let oracle = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(r, &c2)| c.get(r, c2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(oracle, 5.0);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.total_cost, oracle);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn rectangular_matches_exhaustive_injections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = CostMatrix::new(4, 2, (0..8).map(|_| rng.random::<f64>()).collect()).unwrap();
            // 4·3 = 12 ordered pairs of distinct rows for the two columns.
            let mut oracle = f64::INFINITY;
            for r0 in 0..4 {
                for r1 in 0..4 {
                    if r0 != r1 {
                        oracle = oracle.min(c.get(r0, 0) + c.get(r1, 1));
                    }
                }
            }
            let a = hungarian(&c).unwrap();
            assert_eq!(a.pairs.len(), 2);
            assert!((a.total_cost - oracle).abs() <= 1e-15);
            let t = hungarian(&c.scaled(1.0).unwrap()).unwrap();
            assert_eq!(a, t);
        }
    }

    #[test]
    fn brute_force_examples() {
        assert_eq!(brute_force_assignment(&m(&[&[7.0]])).unwrap().total_cost, 7.0);
        let flat = CostMatrix::new(3, 3, vec![2.5; 9]).unwrap();
        let a = brute_force_assignment(&flat).unwrap();
        assert_eq!(a.total_cost, 7.5);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let b = hungarian(&flat).unwrap();
        assert_eq!(a, b);
        let big = CostMatrix::new(9, 9, vec![1.0; 81]).unwrap();
        assert!(matches!(brute_force_assignment(&big), Err(Error::SizeGuard(_))));
    }

    #[test]
    fn ties_break_lexicographically_on_rectangles() {
        // Every column costs the same for every row; smallest pairs win.
        let c = CostMatrix::new(4, 2, vec![1.0; 8]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a, brute_force_assignment(&c).unwrap());
        let c = CostMatrix::new(2, 4, vec![1.0; 8]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn agrees_with_oracle_on_random_square_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let c = CostMatrix::new(4, 4, (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
            let h = hungarian(&c).unwrap();
            let b = brute_force_assignment(&c).unwrap();
            assert_eq!(h, b);
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(CostMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(CostMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_and_scale_equivariance(
            rows in 1usize..=4,
            cols in 1usize..=4,
            seed in any::<u64>(),
            k in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>() * 10.0).collect();
            let c = CostMatrix::new(rows, cols, data.clone()).unwrap();
            let base = hungarian(&c).unwrap();

            // Reverse the row order.
            let perm: Vec<usize> = (0..rows).rev().collect();
            let permuted: Vec<f64> = perm.iter().flat_map(|&r| data[r * cols..(r + 1) * cols].to_vec()).collect();
            let pc = CostMatrix::new(rows, cols, permuted).unwrap();
            let ph = hungarian(&pc).unwrap();
            prop_assert!((ph.total_cost - base.total_cost).abs() <= 1e-12);
            for &(r, col) in &base.pairs {
                let new_row = perm.iter().position(|&p| p == r).unwrap();
                prop_assert_eq!(ph.truth_for(new_row), Some(col));
            }

            let scaled = hungarian(&c.scaled(k).unwrap()).unwrap();
            prop_assert!((scaled.total_cost - k * base.total_cost).abs() <= 1e-9 * (1.0 + k * base.total_cost));
            prop_assert!((c.total(&scaled.pairs) - base.total_cost).abs() <= 1e-12 * (1.0 + base.total_cost));
        }
    }
}
