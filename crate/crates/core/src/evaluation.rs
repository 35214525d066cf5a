//! Clustering metrics: Hungarian-matched accuracy and normalized mutual
//! information.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Joint counts of true labels (rows) against predicted labels (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    /// Table sized to the largest label seen on each side.
    pub fn new(y: &[usize], y_hat: &[usize]) -> Result<Self> {
        let rows = y.iter().max().map_or(0, |m| m + 1);
        let cols = y_hat.iter().max().map_or(0, |m| m + 1);
        Self::with_shape(y, y_hat, rows, cols)
    }

    pub fn with_shape(y: &[usize], y_hat: &[usize], rows: usize, cols: usize) -> Result<Self> {
        check_lengths(y, y_hat)?;
        let mut counts = vec![0u64; rows * cols];
        for (&a, &b) in y.iter().zip(y_hat) {
            if a >= rows || b >= cols {
                return Err(Error::invalid(format!(
                    "label pair ({a}, {b}) outside a {rows}×{cols} table"
                )));
            }
            counts[a * cols + b] += 1;
        }
        Ok(Self {
            rows,
            cols,
            counts,
            total: y.len() as u64,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts
            .chunks(self.cols.max(1))
            .take(self.rows)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// Zero-padded to a square so every predicted cluster can be matched.
    pub fn padded_square(&self) -> Self {
        let s = self.rows.max(self.cols);
        let mut counts = vec![0u64; s * s];
        for i in 0..self.rows {
            for j in 0..self.cols {
                counts[i * s + j] = self.get(i, j);
            }
        }
        Self {
            rows: s,
            cols: s,
            counts,
            total: self.total,
        }
    }
}

fn check_lengths(y: &[usize], y_hat: &[usize]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::invalid(format!(
            "label vectors differ in length ({} vs {})",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

/// Minimum-cost assignment; `perm[i]` is the column given to row `i`.
///
/// Kuhn–Munkres with row and column potentials, O(K³).
pub fn hungarian_match(cost: &Matrix) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::invalid(format!(
            "cost matrix must be square, got {}×{}",
            n,
            cost.cols()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::invalid("cost matrix contains non-finite values"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Fraction of samples correct under the best one-to-one relabeling of
/// `y_hat`. True labels must be below `k`; predictions may use more
/// clusters, which are then left unmatched.
pub fn accuracy(y: &[usize], y_hat: &[usize], k: usize) -> Result<f64> {
    check_lengths(y, y_hat)?;
    if let Some(bad) = y.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("true label {bad} is not below k={k}")));
    }
    if y.is_empty() {
        return Err(Error::invalid("cannot score an empty labeling"));
    }
    let cols = y_hat.iter().max().map_or(0, |m| m + 1).max(k);
    let table = ContingencyTable::with_shape(y, y_hat, k, cols)?.padded_square();
    let s = table.rows;
    let neg = Matrix::from_vec_unchecked(s, s, table.counts.iter().map(|&c| -(c as f64)).collect());
    let perm = hungarian_match(&neg)?;
    let matched: u64 = perm.iter().enumerate().map(|(i, &j)| table.get(i, j)).sum();
    Ok(matched as f64 / table.total as f64)
}

/// `I(Y;Ŷ) / √(H(Y)·H(Ŷ))` with natural logs.
pub fn nmi(y: &[usize], y_hat: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(y, y_hat)?;
    if table.total == 0 {
        return Err(Error::invalid("cannot score an empty labeling"));
    }
    let n = table.total as f64;
    let a = table.row_totals();
    let b = table.col_totals();
    let entropy = |m: &[u64]| -> f64 {
        m.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (hy, hp) = (entropy(&a), entropy(&b));
    if hy == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    if hy == 0.0 || hp == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for i in 0..table.rows {
        for j in 0..table.cols {
            let c = table.get(i, j);
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (hy * hp).sqrt()).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hungarian_trivial_cases() {
        let mut c = Matrix::filled(4, 4, 1.0);
        for i in 0..4 {
            c[(i, i)] = 0.0;
        }
        assert_eq!(hungarian_match(&c).unwrap(), vec![0, 1, 2, 3]);
        let mut c = Matrix::filled(4, 4, 1.0);
        for i in 0..4 {
            c[(i, 3 - i)] = 0.0;
        }
        assert_eq!(hungarian_match(&c).unwrap(), vec![3, 2, 1, 0]);
        assert!(hungarian_match(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = Rng::new(11);
        let perms = permutations(5);
        for _ in 0..50 {
            let c = Matrix::from_vec(5, 5, (0..25).map(|_| rng.uniform_range(-3.0, 3.0)).collect()).unwrap();
            let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum::<f64>();
            let best = perms.iter().map(|p| cost(p)).fold(f64::INFINITY, f64::min);
            let got = hungarian_match(&c).unwrap();
            assert!((cost(&got) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap(), 0.5);
        assert!(accuracy(&[0, 1], &[0], 2).is_err());
        assert!(accuracy(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn accuracy_with_extra_predicted_clusters() {
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 0, 1, 2], 2).unwrap(), 0.75);
    }

    #[test]
    fn constant_predictor_on_balanced_labels() {
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        assert!(accuracy(&y, &[0; 12], 3).unwrap() >= 1.0 / 3.0);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn nmi_is_symmetric() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let y: Vec<usize> = (0..20).map(|_| rng.below(4)).collect();
            let p: Vec<usize> = (0..20).map(|_| rng.below(3)).collect();
            assert!((nmi(&y, &p).unwrap() - nmi(&p, &y).unwrap()).abs() < 1e-12);
        }
    }
}
