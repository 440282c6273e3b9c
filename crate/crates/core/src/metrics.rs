//! Puzzle-level accuracy, piece-level accuracy and normalized Kendall distance.

use crate::error::{Error, Result};

fn check_bijection(p: &[usize], what: &str) -> Result<()> {
    let mut seen = vec![false; p.len()];
    for &v in p {
        if v >= p.len() || std::mem::replace(&mut seen[v], true) {
            return Err(Error::invalid(format!("{what} is not a permutation of 0..{}", p.len())));
        }
    }
    Ok(())
}

// Merge sort that counts inversions.
fn inversions(v: &mut [usize], buf: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = inversions(&mut v[..mid], &mut buf[..mid]) + inversions(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf[k] = v[i];
            i += 1;
        } else {
            buf[k] = v[j];
            j += 1;
            count += (mid - i) as u64;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    count
}

/// Unordered pairs ranked in opposite order by the two rankings.
pub fn kendall_distance(predicted: &[usize], truth: &[usize]) -> Result<u64> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid("rankings differ in length"));
    }
    check_bijection(predicted, "predicted ranking")?;
    check_bijection(truth, "true ranking")?;
    let mut by_truth = vec![0; truth.len()];
    for (elem, &rank) in truth.iter().enumerate() {
        by_truth[rank] = predicted[elem];
    }
    let mut buf = vec![0; by_truth.len()];
    Ok(inversions(&mut by_truth, &mut buf))
}

/// Discordant pairs divided by `N(N-1)/2`: 0 for agreement, 1 for reversal.
pub fn kendall_normalized(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    let n = predicted.len();
    if n < 2 {
        return Err(Error::invalid("Kendall distance needs at least two elements"));
    }
    Ok(kendall_distance(predicted, truth)? as f64 / (n * (n - 1) / 2) as f64)
}

fn check_pairs(assignments: &[Vec<usize>], truths: &[Vec<usize>]) -> Result<()> {
    if assignments.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} assignments for {} puzzles",
            assignments.len(),
            truths.len()
        )));
    }
    for (a, t) in assignments.iter().zip(truths) {
        if a.len() != t.len() {
            return Err(Error::invalid("assignment and truth differ in piece count"));
        }
    }
    Ok(())
}

pub fn correct_pieces(assignment: &[usize], truth: &[usize]) -> usize {
    assignment.iter().zip(truth).filter(|(a, t)| a == t).count()
}

/// Correct placements over all pieces (missing pieces included).
pub fn piece_accuracy(assignments: &[Vec<usize>], truths: &[Vec<usize>]) -> Result<f64> {
    check_pairs(assignments, truths)?;
    let total: usize = truths.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::invalid("no pieces to score"));
    }
    let good: usize = assignments.iter().zip(truths).map(|(a, t)| correct_pieces(a, t)).sum();
    Ok(good as f64 / total as f64)
}

/// Piece accuracy restricted to rows not listed in `missing`.
pub fn piece_accuracy_given(assignments: &[Vec<usize>], truths: &[Vec<usize>], missing: &[Vec<usize>]) -> Result<f64> {
    check_pairs(assignments, truths)?;
    if missing.len() != truths.len() {
        return Err(Error::invalid("missing sets do not match puzzles"));
    }
    let (mut good, mut total) = (0usize, 0usize);
    for ((a, t), m) in assignments.iter().zip(truths).zip(missing) {
        for (i, (x, y)) in a.iter().zip(t).enumerate() {
            if !m.contains(&i) {
                total += 1;
                good += usize::from(x == y);
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no given pieces to score"));
    }
    Ok(good as f64 / total as f64)
}

/// Fraction of puzzles with every piece in place.
pub fn puzzle_accuracy(assignments: &[Vec<usize>], truths: &[Vec<usize>]) -> Result<f64> {
    check_pairs(assignments, truths)?;
    if truths.is_empty() {
        return Err(Error::invalid("no puzzles to score"));
    }
    let perfect = assignments.iter().zip(truths).filter(|(a, t)| a == t).count();
    Ok(perfect as f64 / truths.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_normalized(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).unwrap(), 0.0);
        assert_eq!(kendall_normalized(&[4, 3, 2, 1, 0], &[0, 1, 2, 3, 4]).unwrap(), 1.0);
        assert!((kendall_normalized(&[1, 0, 2], &[0, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(kendall_normalized(&[0], &[0]).is_err());
        assert!(kendall_normalized(&[0, 0], &[0, 1]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let truth = vec![(0..9).collect::<Vec<_>>()];
        assert_eq!(piece_accuracy(&truth, &truth).unwrap(), 1.0);
        let six = vec![vec![0, 1, 2, 3, 4, 5, 7, 8, 6]];
        assert!((piece_accuracy(&six, &truth).unwrap() - 6.0 / 9.0).abs() < 1e-15);

        let good = vec![0, 1, 2];
        let truths = vec![good.clone(); 5];
        let mut preds = truths.clone();
        preds[3] = vec![1, 0, 2];
        assert_eq!(puzzle_accuracy(&truths, &truths).unwrap(), 1.0);
        assert!((puzzle_accuracy(&preds, &truths).unwrap() - 0.8).abs() < 1e-15);
        assert!(puzzle_accuracy(&preds[..2], &truths).is_err());
    }

    #[test]
    fn given_only_variant_skips_missing() {
        let truths = vec![vec![0, 1, 2, 3]];
        let preds = vec![vec![0, 1, 3, 2]];
        assert_eq!(piece_accuracy(&preds, &truths).unwrap(), 0.5);
        assert!((piece_accuracy_given(&preds, &truths, &[vec![2]]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }
}
