//! Slow feature analysis and its manifold-regularized variant.
//!
//! Both learners work on temporal transitions `(x_i, ẋ_i)` with
//! `ẋ_i = x_i − x_{i+1}`, collected from whitened state sequences without
//! crossing sequence boundaries.
//!
//! Standard SFA diagonalizes `ẊẊᵀ`. The regularized learner builds a kNN
//! similarity graph `S` over the initial states, with degrees `D`, and solves
//!
//! ```text
//! (Ẋ L Ẋᵀ) u = μ (Ẋ D Ẋᵀ) u,    L = I + λ (D − S)
//! ```
//!
//! keeping the eigenvectors with the smallest eigenvalues. The leading one or
//! few solutions are typically dominated by noise and are dropped with
//! [`drop_noisy`].

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cube_sampling::CubeSequence;
use crate::error::{Error, Result};
use crate::linalg::{gen_sym_eig, sym_eig, SymMatrix, WhiteningTransform};

/// Initial states and variations of every transition, one column each.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    pub initial_states: DMatrix<f64>,
    pub variations: DMatrix<f64>,
}

impl TransitionSet {
    pub fn len(&self) -> usize {
        self.variations.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.variations.nrows()
    }

    /// Keeps a seeded uniform subset of at most `budget` transitions, in
    /// their original order.
    pub fn subsample(&self, budget: usize, seed: u64) -> TransitionSet {
        if budget >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = index::sample(&mut rng, self.len(), budget).into_vec();
        keep.sort_unstable();
        TransitionSet {
            initial_states: self.initial_states.select_columns(&keep),
            variations: self.variations.select_columns(&keep),
        }
    }
}

/// Transitions of already-whitened state sequences (one column per time step).
pub fn transitions_from_states(sequences: &[DMatrix<f64>]) -> Result<TransitionSet> {
    let Some(first) = sequences.first() else {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    };
    let dim = first.nrows();
    let mut total = 0;
    for s in sequences {
        if s.nrows() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: s.nrows(),
            });
        }
        if s.ncols() < 2 {
            return Err(Error::TooFewSamples {
                needed: 1,
                got: s.ncols(),
            });
        }
        total += s.ncols() - 1;
    }
    let mut initial_states = DMatrix::zeros(dim, total);
    let mut variations = DMatrix::zeros(dim, total);
    let mut col = 0;
    for s in sequences {
        for i in 0..s.ncols() - 1 {
            initial_states.set_column(col, &s.column(i));
            variations.set_column(col, &(s.column(i) - s.column(i + 1)));
            col += 1;
        }
    }
    Ok(TransitionSet {
        initial_states,
        variations,
    })
}

/// Whitens every elemental cube of every sequence and collects transitions.
pub fn build_transitions(
    sequences: &[CubeSequence],
    whitener: &WhiteningTransform,
) -> Result<TransitionSet> {
    let whitened = sequences
        .iter()
        .map(|s| whitener.apply_columns(&s.states))
        .collect::<Result<Vec<_>>>()?;
    transitions_from_states(&whitened)
}

/// Symmetric kNN similarity graph over transition initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    /// Sorted `(column, S_ij)` pairs per row; the diagonal is never stored.
    rows: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
    pub k: usize,
    pub r: f64,
}

impl SimilarityGraph {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// `D_ii = Σ_j S_ij`.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |e| e.0)
            .map_or(0.0, |p| self.rows[i][p].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Dense `S`; only sensible for small graphs.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, s) in row {
                m[(i, j)] = s;
            }
        }
        m
    }

    /// Dense `L = I + λ (D − S)`; only sensible for small graphs.
    pub fn dense_laplacian(&self, lambda: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut l = DMatrix::identity(n, n);
        if lambda == 0.0 {
            return l;
        }
        for (i, row) in self.rows.iter().enumerate() {
            l[(i, i)] += lambda * self.degree[i];
            for &(j, s) in row {
                l[(i, j)] -= lambda * s;
            }
        }
        l
    }

    /// Replaces the degree vector; used to study the constraint in isolation.
    pub fn with_degree(mut self, degree: Vec<f64>) -> Result<Self> {
        if degree.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: degree.len(),
            });
        }
        self.degree = degree;
        Ok(self)
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact kNN graph with `S_ij = exp(−‖x_i − x_j‖² / r)` whenever `i` is among
/// the `k` nearest neighbors of `j` or vice versa.
///
/// Neighbors are found by exhaustive search. Self is never a neighbor and
/// equal distances are resolved in favor of the lower index.
pub fn knn_similarity(states: &DMatrix<f64>, k: usize, r: f64) -> Result<SimilarityGraph> {
    let n = states.ncols();
    if k == 0 || n <= k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidConfig(format!("kernel width r = {r} must be positive")));
    }
    let dim = states.nrows();
    let data = states.as_slice();
    let col = |i: usize| &data[i * dim..(i + 1) * dim];

    let neighbors: Vec<Vec<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = col(i);
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = squared_distance(xi, col(j));
                if best.len() == k && d >= best[k - 1].0 {
                    continue;
                }
                // Insert after every entry with distance <= d, so earlier
                // (lower-index) candidates win ties.
                let pos = best.partition_point(|e| e.0 <= d);
                best.insert(pos, (d, j));
                best.truncate(k);
            }
            best
        })
        .collect();

    let mut edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, list) in neighbors.iter().enumerate() {
        for &(d, j) in list {
            let s = (-d / r).exp();
            edges[i].push((j, s));
            edges[j].push((i, s));
        }
    }
    for row in edges.iter_mut() {
        row.sort_by_key(|e| e.0);
        row.dedup_by_key(|e| e.0);
    }
    let degree = edges.iter().map(|row| row.iter().map(|e| e.1).sum()).collect();
    Ok(SimilarityGraph {
        rows: edges,
        degree,
        k,
        r,
    })
}

/// Learned slow directions in whitened space, one unit-norm column each,
/// ordered by ascending eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowProjection {
    pub u: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub n_dropped: usize,
}

impl SlowProjection {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Keeps the first `q` columns.
    pub fn leading(&self, q: usize) -> SlowProjection {
        let q = q.min(self.len());
        SlowProjection {
            u: self.u.columns(0, q).into_owned(),
            eigenvalues: self.eigenvalues.rows(0, q).into_owned(),
            n_dropped: self.n_dropped,
        }
    }

    /// `Uᵀ x` for every column of `x`.
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.u.transpose() * x
    }
}

/// `Σ_i w_i ẋ_i ẋ_iᵀ` for nonnegative weights.
fn weighted_gram(x: &DMatrix<f64>, weights: Option<&[f64]>) -> DMatrix<f64> {
    match weights {
        None => x * x.transpose(),
        Some(w) => {
            let mut scaled = x.clone();
            for (mut c, &wi) in scaled.column_iter_mut().zip(w) {
                c *= wi.max(0.0).sqrt();
            }
            &scaled * scaled.transpose()
        }
    }
}

/// The pair `(A, B) = (Ẋ L Ẋᵀ, Ẋ D Ẋᵀ)` of the regularized problem.
pub fn mrsfa_matrices(
    transitions: &TransitionSet,
    graph: &SimilarityGraph,
    lambda: f64,
) -> Result<(SymMatrix, SymMatrix)> {
    let t = transitions.len();
    if graph.dim() != t {
        return Err(Error::DimMismatch {
            expected: t,
            got: graph.dim(),
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda = {lambda} must be nonnegative")));
    }
    let x = &transitions.variations;
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::AllZeroVariations);
    }
    let b = weighted_gram(x, Some(graph.degree()));
    let a = if lambda == 0.0 {
        weighted_gram(x, None)
    } else {
        let diag: Vec<f64> = graph.degree().iter().map(|d| 1.0 + lambda * d).collect();
        let mut a = weighted_gram(x, Some(&diag));
        // Ẋ S Ẋᵀ = Ẋ Zᵀ with z_i = Σ_j S_ij ẋ_j.
        let m = x.nrows();
        let mut z = DMatrix::zeros(m, t);
        for i in 0..t {
            let mut zi = z.column_mut(i);
            for &(j, s) in graph.row(i) {
                zi.axpy(s, &x.column(j), 1.0);
            }
        }
        a.gemm(-lambda, x, &z.transpose(), 1.0);
        a
    };
    Ok((SymMatrix::symmetrized(a), SymMatrix::symmetrized(b)))
}

/// Solves the regularized slowness problem and returns every solution.
pub fn fit_mrsfa(
    transitions: &TransitionSet,
    graph: &SimilarityGraph,
    lambda: f64,
    ridge: f64,
) -> Result<SlowProjection> {
    let (a, b) = mrsfa_matrices(transitions, graph, lambda)?;
    let sol = gen_sym_eig(&a, &b, ridge)?;
    Ok(SlowProjection {
        u: sol.eigenvectors,
        eigenvalues: sol.eigenvalues,
        n_dropped: 0,
    })
}

/// Standard SFA: the `q` slowest eigenvectors of `ẊẊᵀ`.
pub fn fit_sfa(transitions: &TransitionSet, q: usize) -> Result<SlowProjection> {
    let x = &transitions.variations;
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::AllZeroVariations);
    }
    if transitions.len() < transitions.dim() {
        log::warn!(
            "SFA: {} transitions for {} dimensions; covariance is rank deficient",
            transitions.len(),
            transitions.dim()
        );
    }
    let sol = sym_eig(&SymMatrix::symmetrized(weighted_gram(x, None)))?.leading(q);
    Ok(SlowProjection {
        u: sol.eigenvectors,
        eigenvalues: sol.eigenvalues,
        n_dropped: 0,
    })
}

/// Removes the `n_drop` smallest-eigenvalue solutions.
pub fn drop_noisy(p: &SlowProjection, n_drop: usize) -> Result<SlowProjection> {
    if n_drop >= p.len() {
        return Err(Error::AllDropped {
            n_drop,
            available: p.len(),
        });
    }
    let keep = p.len() - n_drop;
    Ok(SlowProjection {
        u: p.u.columns(n_drop, keep).into_owned(),
        eigenvalues: p.eigenvalues.rows(n_drop, keep).into_owned(),
        n_dropped: p.n_dropped + n_drop,
    })
}

/// `tr(Uᵀ A U) / tr(Uᵀ B U)`.
pub fn trace_ratio(u: &DMatrix<f64>, a: &SymMatrix, b: &SymMatrix) -> f64 {
    let num = (u.transpose() * a.as_matrix() * u).trace();
    let den = (u.transpose() * b.as_matrix() * u).trace();
    num / den
}
