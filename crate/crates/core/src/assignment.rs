//! Turning estimated slot codes into a piece → slot permutation.

use serde::{Deserialize, Serialize};
use tensorlab::Tensor;

use crate::error::{Error, Result};
use crate::posenc::PeTable;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `permutation[piece] = slot`.
    pub permutation: Vec<usize>,
    /// L2 distance of each piece's estimate to its assigned slot code.
    pub distances: Vec<f64>,
}

impl Assignment {
    /// Sum of squared distances, accumulated in piece order.
    pub fn total_cost(&self) -> f64 {
        self.distances.iter().map(|d| d * d).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    #[default]
    Greedy,
    Hungarian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GreedyOrder {
    /// Commit the globally closest free (piece, slot) pair first.
    #[default]
    BestFirst,
    /// Give each piece, in index order, its closest free slot.
    PieceOrder,
}

/// Squared L2 distances, `cost[piece][slot]`.
pub fn cost_matrix(l_hat: &Tensor<f64>, table: &PeTable) -> Result<Vec<Vec<f64>>> {
    if l_hat.rank() != 2 || l_hat.rows() != table.len() || l_hat.last_dim() != table.dim() {
        return Err(Error::invalid(format!(
            "estimates {:?} do not match a table of {} x {}",
            l_hat.shape(),
            table.len(),
            table.dim()
        )));
    }
    Ok((0..l_hat.rows())
        .map(|i| {
            table
                .rows()
                .iter()
                .map(|code| code.iter().zip(l_hat.row(i)).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect()
        })
        .collect())
}

fn finish(cost: &[Vec<f64>], permutation: Vec<usize>) -> Assignment {
    let distances = permutation.iter().enumerate().map(|(i, &s)| cost[i][s].sqrt()).collect();
    Assignment {
        permutation,
        distances,
    }
}

pub fn greedy_match(l_hat: &Tensor<f64>, table: &PeTable) -> Result<Assignment> {
    greedy_match_with(l_hat, table, GreedyOrder::BestFirst)
}

/// Ties go to the lower piece index, then the lower slot index.
pub fn greedy_match_with(l_hat: &Tensor<f64>, table: &PeTable, order: GreedyOrder) -> Result<Assignment> {
    let cost = cost_matrix(l_hat, table)?;
    let n = cost.len();
    let mut perm = vec![usize::MAX; n];
    let mut slot_used = vec![false; n];
    match order {
        GreedyOrder::BestFirst => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
            for (i, row) in cost.iter().enumerate() {
                pairs.extend(row.iter().enumerate().map(|(s, &c)| (c, i, s)));
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            for (_, i, s) in pairs {
                if perm[i] == usize::MAX && !slot_used[s] {
                    perm[i] = s;
                    slot_used[s] = true;
                }
            }
        }
        GreedyOrder::PieceOrder => {
            for (i, row) in cost.iter().enumerate() {
                let s = (0..n)
                    .filter(|&s| !slot_used[s])
                    .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))
                    .expect("a free slot remains");
                perm[i] = s;
                slot_used[s] = true;
            }
        }
    }
    Ok(finish(&cost, perm))
}

/// Minimum total squared distance bijection (shortest augmenting paths with potentials).
pub fn hungarian_match(l_hat: &Tensor<f64>, table: &PeTable) -> Result<Assignment> {
    let cost = cost_matrix(l_hat, table)?;
    let n = cost.len();
    // 1-based arrays; column 0 is a virtual root.
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
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(finish(&cost, perm))
}

pub fn match_codes(l_hat: &Tensor<f64>, table: &PeTable, matcher: Matcher) -> Result<Assignment> {
    match matcher {
        Matcher::Greedy => greedy_match(l_hat, table),
        Matcher::Hungarian => hungarian_match(l_hat, table),
    }
}

/// Half the smallest pairwise distance between table rows; infinite for one row.
pub fn noise_tolerance_radius(table: &PeTable) -> f64 {
    let rows = table.rows();
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d.sqrt());
        }
    }
    best / 2.0
}

/// Checks that `perm` is a bijection on `0..perm.len()`.
pub fn is_bijection(perm: &[usize]) -> bool {
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    sorted.iter().enumerate().all(|(i, &v)| i == v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenc::{pe_table, Layout};

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn exact_codes_match_identity_and_permutations() {
        let table = pe_table(&Layout::square(3)).unwrap();
        for m in [Matcher::Greedy, Matcher::Hungarian] {
            let a = match_codes(&table.to_tensor(), &table, m).unwrap();
            assert_eq!(a.permutation, (0..9).collect::<Vec<_>>());
            assert!(a.distances.iter().all(|&d| d == 0.0));
            let pi = [4, 2, 7, 0, 8, 1, 3, 6, 5];
            let a = match_codes(&table.gather(&pi), &table, m).unwrap();
            assert_eq!(a.permutation, pi);
        }
    }

    #[test]
    fn equidistant_piece_takes_lower_slot() {
        let table = PeTable::from_rows(vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let l_hat = t(&[vec![1.0, 0.0], vec![1.0, 3.0], vec![0.5, 6.0]]);
        let a = greedy_match(&l_hat, &table).unwrap();
        assert_eq!(a.permutation[0], 0);
        assert_eq!(a.permutation, vec![0, 1, 2]);
    }

    #[test]
    fn piece_order_can_be_worse() {
        let table = PeTable::from_rows(vec![vec![0.0], vec![1.0]]).unwrap();
        let l_hat = t(&[vec![0.6], vec![0.1]]);
        let best = greedy_match(&l_hat, &table).unwrap();
        let fixed = greedy_match_with(&l_hat, &table, GreedyOrder::PieceOrder).unwrap();
        assert_eq!(best.permutation, vec![1, 0]);
        assert_eq!(fixed.permutation, vec![1, 0]);
        let l_hat = t(&[vec![0.4], vec![0.1]]);
        let fixed = greedy_match_with(&l_hat, &table, GreedyOrder::PieceOrder).unwrap();
        let best = greedy_match(&l_hat, &table).unwrap();
        assert_eq!(fixed.permutation, vec![0, 1]);
        assert_eq!(best.permutation, vec![1, 0]);
        assert!(best.total_cost() <= fixed.total_cost());
    }

    #[test]
    fn radius_examples() {
        let two = PeTable::from_rows(vec![vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(noise_tolerance_radius(&two), 1.0);
        let one = PeTable::from_rows(vec![vec![1.0]]).unwrap();
        assert_eq!(noise_tolerance_radius(&one), f64::INFINITY);
        assert!(noise_tolerance_radius(&pe_table(&Layout::square(3)).unwrap()) > 0.0);
    }

    #[test]
    fn rejects_row_mismatch() {
        let table = pe_table(&Layout::square(2)).unwrap();
        assert!(greedy_match(&Tensor::zeros(&[3, 32]), &table).is_err());
        assert!(hungarian_match(&Tensor::zeros(&[4, 16]), &table).is_err());
    }
}
