//! O-D pair graph: adjacency plus the diffusion transition matrices.

use super::{DataError, DemandTensor};

/// Rule deciding which O-D pairs count as neighbors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjacencyMode {
    /// Pairs are adjacent iff they share an origin zone or share a
    /// destination zone. Default: the minimal structural relation between
    /// O-D pairs, needing no tuning and no demand data.
    SharedEndpoint,
    /// Pairs are adjacent iff the Pearson correlation of their demand
    /// series strictly exceeds `threshold`. Callers should pass the
    /// training split so test-period demand never shapes the graph.
    DemandCorrelation { threshold: f64 },
}

/// Pair graph with row-normalized forward/backward transition matrices,
/// all dense |V| × |V| row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ODGraph {
    pair_index: Vec<(String, String)>,
    adjacency: Vec<f64>,
    forward_transition: Vec<f64>,
    backward_transition: Vec<f64>,
    num_pairs: usize,
}

impl ODGraph {
    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn pair_index(&self) -> &[(String, String)] {
        &self.pair_index
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    /// Row-normalized adjacency (out-edges; zero rows stay zero).
    pub fn forward_transition(&self) -> &[f64] {
        &self.forward_transition
    }

    /// Row-normalized transpose (in-edges; zero rows stay zero).
    pub fn backward_transition(&self) -> &[f64] {
        &self.backward_transition
    }
}

/// Build the pair graph for `tensor` under the chosen rule. The diagonal is
/// always zero; a graph with no edge at all is an error.
pub fn build_adjacency(tensor: &DemandTensor, mode: AdjacencyMode) -> Result<ODGraph, DataError> {
    let pairs = tensor.pair_index();
    let v = pairs.len();
    let mut adjacency = vec![0.0; v * v];

    match mode {
        AdjacencyMode::SharedEndpoint => {
            for i in 0..v {
                for j in 0..v {
                    if i != j && (pairs[i].0 == pairs[j].0 || pairs[i].1 == pairs[j].1) {
                        adjacency[i * v + j] = 1.0;
                    }
                }
            }
        }
        AdjacencyMode::DemandCorrelation { threshold } => {
            for i in 0..v {
                for j in (i + 1)..v {
                    if let Some(r) = pearson(tensor.series(i), tensor.series(j)) {
                        if r > threshold {
                            adjacency[i * v + j] = 1.0;
                            adjacency[j * v + i] = 1.0;
                        }
                    }
                }
            }
        }
    }

    if adjacency.iter().all(|&a| a == 0.0) {
        return Err(DataError::EmptyGraph);
    }

    let forward_transition = row_normalize(&adjacency, v, false);
    let backward_transition = row_normalize(&adjacency, v, true);
    Ok(ODGraph {
        pair_index: pairs.to_vec(),
        adjacency,
        forward_transition,
        backward_transition,
        num_pairs: v,
    })
}

/// Pearson correlation; `None` when either series has zero variance, which
/// deliberately yields no edge (a constant series correlates with nothing).
fn pearson(a: &[i64], b: &[i64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<i64>() as f64 / n;
    let mb = b.iter().sum::<i64>() as f64 / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn row_normalize(a: &[f64], v: usize, transpose: bool) -> Vec<f64> {
    let at = |i: usize, j: usize| {
        if transpose {
            a[j * v + i]
        } else {
            a[i * v + j]
        }
    };
    let mut out = vec![0.0; v * v];
    for i in 0..v {
        let row_sum: f64 = (0..v).map(|j| at(i, j)).sum();
        if row_sum > 0.0 {
            for j in 0..v {
                out[i * v + j] = at(i, j) / row_sum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn tensor_for(pairs: Vec<(&str, &str)>, windows: usize) -> DemandTensor {
        let pair_index: Vec<(String, String)> = pairs
            .into_iter()
            .map(|(o, d)| (o.to_string(), d.to_string()))
            .collect();
        let counts = vec![0i64; pair_index.len() * windows];
        DemandTensor::new(
            pair_index,
            counts,
            windows,
            15,
            Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    #[allow(clippy::identity_op)] // indices spelled row * width + col
    fn shared_endpoint_rule() {
        let t = tensor_for(vec![("A", "B"), ("A", "C"), ("D", "C")], 4);
        let g = build_adjacency(&t, AdjacencyMode::SharedEndpoint).unwrap();
        let a = g.adjacency();
        // (A,B) ~ (A,C) via origin A; (A,C) ~ (D,C) via destination C.
        assert_eq!(a[1], 1.0);
        assert_eq!(a[3 * 1 + 2], 1.0);
        // (A,B) and (D,C) share nothing.
        assert_eq!(a[2], 0.0);
        // Zero diagonal.
        for i in 0..3 {
            assert_eq!(a[i * 3 + i], 0.0);
        }
    }

    #[test]
    fn single_pair_has_no_edges() {
        let t = tensor_for(vec![("A", "B")], 4);
        assert!(matches!(
            build_adjacency(&t, AdjacencyMode::SharedEndpoint),
            Err(DataError::EmptyGraph)
        ));
    }

    #[test]
    fn transition_rows_sum_to_one_or_zero() {
        let t = tensor_for(vec![("A", "B"), ("A", "C"), ("D", "C"), ("E", "F")], 4);
        let g = build_adjacency(&t, AdjacencyMode::SharedEndpoint).unwrap();
        let v = g.num_pairs();
        for matrix in [g.forward_transition(), g.backward_transition()] {
            for i in 0..v {
                let s: f64 = matrix[i * v..(i + 1) * v].iter().sum();
                assert!(
                    (s - 1.0).abs() < 1e-12 || s == 0.0,
                    "row {i} sums to {s}"
                );
            }
        }
        // (E,F) is isolated: its transition rows must stay all-zero.
        let s: f64 = g.forward_transition()[3 * v..4 * v].iter().sum();
        assert_eq!(s, 0.0);
    }

    #[test]
    #[allow(clippy::identity_op)] // indices spelled row * width + col
    fn constant_series_never_correlates() {
        let pair_index = vec![
            ("A".to_string(), "B".to_string()),
            ("C".to_string(), "D".to_string()),
            ("E".to_string(), "F".to_string()),
        ];
        // Pair 0 constant; pairs 1 and 2 identical ramps (correlation 1).
        let mut counts = vec![5, 5, 5, 5];
        counts.extend_from_slice(&[1, 2, 3, 4]);
        counts.extend_from_slice(&[1, 2, 3, 4]);
        let t = DemandTensor::new(
            pair_index,
            counts,
            4,
            15,
            Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap(),
        )
        .unwrap();
        let g = build_adjacency(&t, AdjacencyMode::DemandCorrelation { threshold: 0.9 }).unwrap();
        let a = g.adjacency();
        assert_eq!(a[1], 0.0, "constant row must not gain edges");
        assert_eq!(a[1 * 3 + 2], 1.0);
        assert_eq!(a[2 * 3 + 1], 1.0);
    }
}
