//! Minimum-cost bipartite assignment of ground-truth relations to queries.

use crate::error::{Error, Result};

/// One-to-one assignment of every ground truth to a distinct query.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `query_for_gt[j]` is the query matched to ground truth `j`.
    pub query_for_gt: Vec<usize>,
    pub num_queries: usize,
    pub cost: f64,
}

impl Assignment {
    pub fn empty(num_queries: usize) -> Self {
        Self {
            query_for_gt: Vec::new(),
            num_queries,
            cost: 0.0,
        }
    }

    /// Inverse view: the ground truth matched to each query, if any.
    pub fn gt_for_query(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_queries];
        for (j, &q) in self.query_for_gt.iter().enumerate() {
            out[q] = Some(j);
        }
        out
    }
}

/// Solves the rectangular assignment problem for a `N_q × G` cost matrix
/// (`G <= N_q`) with the shortest-augmenting-path Hungarian method, O(G²·N_q).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let num_queries = cost.len();
    let num_gt = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != num_gt) {
        return Err(Error::Precondition("ragged cost matrix".into()));
    }
    if num_gt == 0 {
        return Ok(Assignment::empty(num_queries));
    }
    if num_gt > num_queries {
        return Err(Error::Precondition(format!(
            "{num_gt} ground truths exceed {num_queries} queries"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Precondition("cost matrix has non-finite entries".into()));
    }

    // Rows are ground truths (1-based), columns are queries (1-based); index 0
    // is the virtual source used by the augmenting search.
    let n = num_gt;
    let m = num_queries;
    let a = |row: usize, col: usize| cost[col - 1][row - 1];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let row0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let reduced = a(row0, col) - u[row0] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut query_for_gt = vec![usize::MAX; n];
    for col in 1..=m {
        if owner[col] != 0 {
            query_for_gt[owner[col] - 1] = col - 1;
        }
    }
    let total = query_for_gt
        .iter()
        .enumerate()
        .map(|(j, &q)| cost[q][j])
        .sum();
    Ok(Assignment {
        query_for_gt,
        num_queries,
        cost: total,
    })
}
