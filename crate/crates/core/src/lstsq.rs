//! Small dense least squares via Householder QR with column pivoting.
//!
//! Columns are scaled to unit max-absolute-value before factoring and the
//! solution is unscaled afterwards. Columns whose residual norm falls below
//! `RANK_TOL` times the leading pivot are treated as collinear: they are
//! dropped and their coefficients set to zero.

pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub coeffs: Vec<f64>,
    pub rank: usize,
    /// Original indices of columns left out of the fit.
    pub dropped: Vec<usize>,
}

impl Solution {
    pub fn is_full_rank(&self) -> bool {
        self.dropped.is_empty()
    }
}

/// Minimises `||A x - y||` where `columns[j]` is column `j` of `A`.
///
/// Panics if the columns and `y` disagree in length.
pub fn solve(columns: &[Vec<f64>], y: &[f64]) -> Solution {
    let p = columns.len();
    let n = y.len();
    assert!(
        columns.iter().all(|c| c.len() == n),
        "column length mismatch"
    );

    let scale: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .collect();
    // Row-major working copy of the scaled design.
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..p)
                .map(|j| {
                    if scale[j] > 0.0 {
                        columns[j][i] / scale[j]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut rhs = y.to_vec();
    let mut perm: Vec<usize> = (0..p).collect();

    let col_norm = |a: &[Vec<f64>], j: usize, from: usize| -> f64 {
        a[from..]
            .iter()
            .map(|row| row[j] * row[j])
            .sum::<f64>()
            .sqrt()
    };

    let mut rank = 0;
    let mut lead = 0.0_f64;
    for k in 0..p.min(n) {
        // Pivot: largest remaining norm; near-ties go to the earlier original column.
        let mut best = k;
        let mut best_norm = col_norm(&a, k, k);
        for j in k + 1..p {
            let nj = col_norm(&a, j, k);
            let clearly_larger = nj > best_norm * (1.0 + 1e-12);
            let tie_but_earlier = nj >= best_norm * (1.0 - 1e-12) && perm[j] < perm[best];
            if clearly_larger || tie_but_earlier {
                best = j;
                best_norm = nj;
            }
        }
        if k == 0 {
            lead = best_norm;
        }
        if best_norm == 0.0 || best_norm <= RANK_TOL * lead {
            break;
        }
        if best != k {
            for row in a.iter_mut() {
                row.swap(k, best);
            }
            perm.swap(k, best);
        }

        // Householder reflector zeroing a[k+1.., k].
        let alpha = if a[k][k] > 0.0 { -best_norm } else { best_norm };
        let mut v: Vec<f64> = a[k..].iter().map(|row| row[k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..p {
                let dot: f64 = v.iter().zip(&a[k..]).map(|(vi, row)| vi * row[j]).sum();
                let f = 2.0 * dot / vnorm2;
                for (vi, row) in v.iter().zip(a[k..].iter_mut()) {
                    row[j] -= f * vi;
                }
            }
            let dot: f64 = v.iter().zip(&rhs[k..]).map(|(vi, r)| vi * r).sum();
            let f = 2.0 * dot / vnorm2;
            for (vi, r) in v.iter().zip(rhs[k..].iter_mut()) {
                *r -= f * vi;
            }
        }
        rank += 1;
    }

    // Back substitution on the leading rank x rank triangle.
    let mut x = vec![0.0; rank];
    for i in (0..rank).rev() {
        let tail: f64 = (i + 1..rank).map(|j| a[i][j] * x[j]).sum();
        x[i] = (rhs[i] - tail) / a[i][i];
    }

    let mut coeffs = vec![0.0; p];
    for (k, &orig) in perm.iter().enumerate().take(rank) {
        coeffs[orig] = x[k] / scale[orig];
    }
    let mut dropped: Vec<usize> = perm[rank..].to_vec();
    dropped.sort_unstable();
    Solution {
        coeffs,
        rank,
        dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    /// Independent route: SVD pseudo-inverse solution.
    fn svd_solve(columns: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let n = y.len();
        let p = columns.len();
        let a = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
        let b = DVector::from_column_slice(y);
        let x = a.svd(true, true).solve(&b, 1e-12).unwrap();
        x.iter().copied().collect()
    }

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let ones = vec![1.0; 6];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 2.0).collect();
        let s = solve(&[x, ones], &y);
        assert!(s.is_full_rank());
        assert!((s.coeffs[0] - 3.0).abs() < 1e-12);
        assert!((s.coeffs[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_column_is_dropped() {
        let x: Vec<f64> = (1..8).map(f64::from).collect();
        let twice: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y: Vec<f64> = x.iter().map(|v| 4.0 * v).collect();
        let s = solve(&[x, twice], &y);
        assert_eq!(s.rank, 1);
        assert_eq!(s.dropped.len(), 1);
        let fitted: f64 = s.coeffs[0] * 3.0 + s.coeffs[1] * 6.0;
        assert!((fitted - 12.0).abs() < 1e-9);
    }

    #[test]
    fn zero_column() {
        let s = solve(&[vec![0.0; 3], vec![1.0; 3]], &[2.0, 2.0, 2.0]);
        assert_eq!(s.dropped, vec![0]);
        assert!((s.coeffs[1] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn agrees_with_svd(seed_rows in proptest::collection::vec((1.0f64..5000.0, 1.0f64..300.0, -50.0f64..50.0), 6..40)) {
            let g: Vec<f64> = seed_rows.iter().map(|r| r.0.round()).collect();
            let l: Vec<f64> = seed_rows.iter().map(|r| r.1.round()).collect();
            let gl: Vec<f64> = g.iter().zip(&l).map(|(a, b)| a * b).collect();
            let ones = vec![1.0; g.len()];
            let y: Vec<f64> = seed_rows.iter().zip(&gl).map(|(r, p)| 0.01 * p + 0.3 * r.0 + r.2).collect();
            let cols = vec![gl, g, l, ones];
            let qr = solve(&cols, &y);
            prop_assume!(qr.is_full_rank());
            let svd = svd_solve(&cols, &y);
            // Compare fitted values, which are well conditioned even when coefficients are not.
            for (i, _) in y.iter().enumerate() {
                let a: f64 = cols.iter().zip(&qr.coeffs).map(|(c, x)| c[i] * x).sum();
                let b: f64 = cols.iter().zip(&svd).map(|(c, x)| c[i] * x).sum();
                prop_assert!((a - b).abs() <= 1e-7 * (1.0 + b.abs()), "row {}: {} vs {}", i, a, b);
            }
        }
    }
}
