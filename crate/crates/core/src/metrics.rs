//! Accuracy and the rank correlations used to score difficulty ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub spearman: f64,
    pub pearson: f64,
    pub kendall: f64,
}

/// Percentage of `correct` flags set. Errors on an empty slice.
pub fn accuracy(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::DegenerateInput("accuracy of zero records".into()));
    }
    Ok(100.0 * correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidParams(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput("need at least two observations".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite value".into()));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall tau-b in O(n log n) (Knight's algorithm): sort by (x, y), count
/// tied pairs, then count discordant pairs as the swaps a merge sort on y
/// performs.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |run: u64| run * (run - 1) / 2;
    let (mut ties_x, mut ties_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                ties_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += pairs(run_x);
            ties_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += pairs(run_x);
    ties_xy += pairs(run_xy);

    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys);

    let mut ties_y = 0u64;
    let mut run_y = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            ties_y += pairs(run_y);
            run_y = 1;
        }
    }
    ties_y += pairs(run_y);

    let n0 = pairs(n as u64);
    if ties_x == n0 || ties_y == n0 {
        return Err(Error::DegenerateInput("all values tied".into()));
    }
    // concordant - discordant = n0 - tx - ty + txy - 2 * discordant
    let numer = n0 as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// Sorts ascending and returns the number of strictly inverted pairs.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    swaps
}

pub fn correlations(x: &[f64], y: &[f64]) -> Result<Correlations> {
    Ok(Correlations {
        spearman: spearman(x, y)?,
        pearson: pearson(x, y)?,
        kendall: kendall(x, y)?,
    })
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Tau-b by enumerating every pair.
    fn kendall_pairs(x: &[f64], y: &[f64]) -> f64 {
        let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        let n = x.len();
        for i in 0..n {
            for j in i + 1..n {
                let sx = (x[i] - x[j]).signum() * f64::from(u8::from(x[i] != x[j]));
                let sy = (y[i] - y[j]).signum() * f64::from(u8::from(y[i] != y[j]));
                if sx == 0.0 {
                    tx += 1;
                }
                if sy == 0.0 {
                    ty += 1;
                }
                if sx * sy > 0.0 {
                    c += 1;
                } else if sx * sy < 0.0 {
                    d += 1;
                }
            }
        }
        let n0 = (n * (n - 1) / 2) as i64;
        (c - d) as f64 / (((n0 - tx) * (n0 - ty)) as f64).sqrt()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true, true, false, true]).unwrap(), 75.0);
        assert_eq!(accuracy(&[true; 5]).unwrap(), 100.0);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // cov 4, variances 5 and 5
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // explicit ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]: cov 4.5, var 4.5 and 5
        let expected = 4.5 / (4.5f64 * 5.0).sqrt();
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert!((spearman(&[1.0, 2.0, 2.0, 4.0], &a).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kendall_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((kendall(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((kendall(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((kendall(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(kendall(&[2.0; 4], &a), Err(Error::DegenerateInput(_))));
    }

    proptest! {
        #[test]
        fn kendall_matches_pair_enumeration(pairs in proptest::collection::vec((0u8..4, 0u8..4), 2..8)) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let all_tied = |v: &[f64]| v.iter().all(|a| *a == v[0]);
            prop_assume!(!all_tied(&x) && !all_tied(&y));
            let fast = kendall(&x, &y).unwrap();
            let slow = kendall_pairs(&x, &y);
            prop_assert!((fast - slow).abs() < 1e-12, "{} vs {}", fast, slow);
        }

        #[test]
        fn coefficients_bounded_and_rank_invariant(xs in proptest::collection::vec(-50i32..50, 3..30),
                                                  ys in proptest::collection::vec(-50i32..50, 3..30)) {
            let n = xs.len().min(ys.len());
            let x: Vec<f64> = xs[..n].iter().map(|v| *v as f64).collect();
            let y: Vec<f64> = ys[..n].iter().map(|v| *v as f64).collect();
            let Ok(c) = correlations(&x, &y) else { return Ok(()); };
            for v in [c.spearman, c.pearson, c.kendall] {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
            // strictly monotone transform of x
            let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            prop_assert!((spearman(&tx, &y).unwrap() - c.spearman).abs() < 1e-9);
            prop_assert!((kendall(&tx, &y).unwrap() - c.kendall).abs() < 1e-9);
            let ax: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
            prop_assert!((pearson(&ax, &y).unwrap() - c.pearson).abs() < 1e-9);
            let self_c = correlations(&x, &x).unwrap();
            prop_assert!((self_c.spearman - 1.0).abs() < 1e-12);
            prop_assert!((self_c.pearson - 1.0).abs() < 1e-12);
            prop_assert!((self_c.kendall - 1.0).abs() < 1e-12);
        }
    }
}
