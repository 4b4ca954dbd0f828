//! Dense symmetric eigensolvers and PCA whitening.
//!
//! Every learning stage in the crate reduces to one of three problems: a
//! symmetric eigen-decomposition, a symmetric-definite generalized
//! eigenproblem `A u = λ B u`, or a whitening transform fitted from sample
//! moments. Matrices are small (a few hundred rows at most), so everything
//! here is dense.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance on `|a_ij - a_ji|` accepted by [`SymMatrix::new`].
const SYMMETRY_TOL: f64 = 1e-12;

/// Default relative ridge added to the constraint matrix of [`gen_sym_eig`].
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Default whitening floor, relative to the largest covariance eigenvalue.
pub const DEFAULT_RELATIVE_FLOOR: f64 = 1e-8;

const MAX_SWEEPS_PER_DIM: usize = 64;

/// A finite, square, symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Validates that `m` is square, finite and symmetric to within a relative
    /// `1e-12`, then stores the exactly symmetrized matrix.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self::symmetrized(m))
    }

    /// Replaces `m` by `(m + mᵀ) / 2` without any tolerance check.
    pub fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Eigenvalues in ascending order with matching unit-norm eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSolution {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenSolution {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Keeps the first `q` (smallest) eigenpairs.
    pub fn leading(&self, q: usize) -> EigenSolution {
        let q = q.min(self.len());
        EigenSolution {
            eigenvalues: self.eigenvalues.rows(0, q).into_owned(),
            eigenvectors: self.eigenvectors.columns(0, q).into_owned(),
        }
    }
}

/// Symmetric eigen-decomposition, eigenvalues ascending.
pub fn sym_eig(a: &SymMatrix) -> Result<EigenSolution> {
    let n = a.dim();
    if a.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if n == 0 {
        return Ok(EigenSolution {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
        });
    }
    let max_iter = MAX_SWEEPS_PER_DIM * n.max(8);
    let eig = SymmetricEigen::try_new(a.0.clone(), f64::EPSILON, max_iter)
        .ok_or(Error::NoConvergence {
            iterations: max_iter,
        })?;
    Ok(sorted_solution(eig.eigenvalues, eig.eigenvectors))
}

/// Solves `a u = λ b' u` with `b' = b + ridge · tr(b)/n · I`.
///
/// The problem is reduced through the Cholesky factor `b' = R Rᵀ` to the
/// standard symmetric problem `R⁻¹ a R⁻ᵀ y = λ y`, then mapped back by
/// `u = R⁻ᵀ y`. The returned columns are rescaled to unit Euclidean norm, so
/// they are `b'`-orthogonal but not `b'`-normalized.
pub fn gen_sym_eig(a: &SymMatrix, b: &SymMatrix, ridge: f64) -> Result<EigenSolution> {
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: b.dim(),
        });
    }
    if a.0.iter().chain(b.0.iter()).any(|v| !v.is_finite()) || !ridge.is_finite() {
        return Err(Error::NonFinite);
    }
    let b_ridged = ridged(b, ridge);
    let chol = Cholesky::new(b_ridged).ok_or(Error::SingularB)?;
    let l = chol.l();
    let left = l.solve_lower_triangular(&a.0).ok_or(Error::SingularB)?;
    let reduced = l
        .solve_lower_triangular(&left.transpose())
        .ok_or(Error::SingularB)?;
    let std = sym_eig(&SymMatrix::symmetrized(reduced))?;
    let mut vectors = l
        .transpose()
        .solve_upper_triangular(&std.eigenvectors)
        .ok_or(Error::SingularB)?;
    for mut col in vectors.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        canonical_sign(col.as_mut_slice());
    }
    Ok(EigenSolution {
        eigenvalues: std.eigenvalues,
        eigenvectors: vectors,
    })
}

/// `b + ridge · tr(b)/n · I`, the constraint matrix actually used by
/// [`gen_sym_eig`].
pub fn ridged(b: &SymMatrix, ridge: f64) -> DMatrix<f64> {
    let n = b.dim();
    let mut m = b.0.clone();
    if n > 0 && ridge > 0.0 {
        let shift = ridge * b.trace() / n as f64;
        for i in 0..n {
            m[(i, i)] += shift;
        }
    }
    m
}

fn sorted_solution(values: DVector<f64>, vectors: DMatrix<f64>) -> EigenSolution {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| values[i]));
    let mut eigenvectors = DMatrix::zeros(vectors.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = vectors.column(src).into_owned();
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        canonical_sign(col.as_mut_slice());
        eigenvectors.set_column(dst, &col);
    }
    EigenSolution {
        eigenvalues,
        eigenvectors,
    }
}

/// Flips `v` so that its largest-magnitude entry (first on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// PCA whitening: `y = projection · (x − mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    /// `out_dim × in_dim`; row `i` is the `i`-th principal direction scaled by
    /// `1/sqrt(max(λ_i, eigen_floor))`.
    pub projection: DMatrix<f64>,
    pub eigen_floor: f64,
}

impl WhiteningTransform {
    pub fn in_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Applies the transform to one sample.
    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        pca_whiten_apply(self, x)
    }

    /// Applies the transform to every column of `data`.
    pub fn apply_columns(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.nrows() != self.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.in_dim(),
                got: data.nrows(),
            });
        }
        let mut centered = data.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        Ok(&self.projection * centered)
    }
}

/// Fits a whitening transform on the columns of `data`.
///
/// Covariance uses the `1/N` normalization, so the transformed fitting set has
/// identity covariance under the same convention. `eigen_floor = None` selects
/// `1e-8 · λ_max`. When fewer than `out_dim` eigenvalues exceed the floor the
/// output dimension is clamped down with a warning.
pub fn pca_whiten_fit(
    data: &DMatrix<f64>,
    out_dim: usize,
    eigen_floor: Option<f64>,
) -> Result<WhiteningTransform> {
    let n = data.ncols();
    if n <= out_dim {
        return Err(Error::TooFewSamples {
            needed: out_dim,
            got: n,
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mean = data.column_sum() / n as f64;
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = (&centered * centered.transpose()) / n as f64;
    whitening_from_moments(mean, SymMatrix::symmetrized(cov), out_dim, eigen_floor)
}

/// Builds the whitening transform from a mean and a covariance matrix.
pub fn whitening_from_moments(
    mean: DVector<f64>,
    cov: SymMatrix,
    out_dim: usize,
    eigen_floor: Option<f64>,
) -> Result<WhiteningTransform> {
    let in_dim = cov.dim();
    if mean.len() != in_dim {
        return Err(Error::DimMismatch {
            expected: in_dim,
            got: mean.len(),
        });
    }
    if out_dim == 0 || out_dim > in_dim {
        return Err(Error::DimMismatch {
            expected: in_dim,
            got: out_dim,
        });
    }
    let eig = sym_eig(&cov)?;
    let largest = eig.eigenvalues[in_dim - 1].max(0.0);
    let floor = eigen_floor.unwrap_or(DEFAULT_RELATIVE_FLOOR * largest);
    let usable = eig.eigenvalues.iter().filter(|&&v| v > floor).count();
    // Spread indistinguishable from round-off on the data's own scale.
    let negligible = 1e-24 * (1.0 + mean.norm_squared() / in_dim as f64);
    if usable == 0 || largest <= negligible {
        return Err(Error::RankDeficient { floor });
    }
    let kept = if usable < out_dim {
        log::warn!(
            "whitening: only {usable} eigenvalues exceed floor {floor:e}; \
             clamping output dimension {out_dim} -> {usable}"
        );
        usable
    } else {
        out_dim
    };
    let mut projection = DMatrix::zeros(kept, in_dim);
    for r in 0..kept {
        let src = in_dim - 1 - r;
        let scale = 1.0 / eig.eigenvalues[src].max(floor).sqrt();
        for c in 0..in_dim {
            projection[(r, c)] = eig.eigenvectors[(c, src)] * scale;
        }
    }
    Ok(WhiteningTransform {
        mean,
        projection,
        eigen_floor: floor,
    })
}

/// `t.projection · (x − t.mean)`.
pub fn pca_whiten_apply(t: &WhiteningTransform, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != t.in_dim() {
        return Err(Error::DimMismatch {
            expected: t.in_dim(),
            got: x.len(),
        });
    }
    let centered = DVector::from_iterator(x.len(), x.iter().zip(t.mean.iter()).map(|(a, m)| a - m));
    Ok(&t.projection * centered)
}

/// Streaming first and second moments for data too large to hold as one
/// matrix. Samples are shifted by the first sample seen to limit
/// cancellation in `E[xxᵀ] − E[x]E[x]ᵀ`.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    dim: usize,
    shift: Option<DVector<f64>>,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
    count: usize,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            shift: None,
            sum: DVector::zeros(dim),
            outer: DMatrix::zeros(dim, dim),
            count: 0,
        }
    }

    /// Adds every column of `batch`.
    pub fn add_columns(&mut self, batch: &DMatrix<f64>) -> Result<()> {
        if batch.nrows() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: batch.nrows(),
            });
        }
        if batch.ncols() == 0 {
            return Ok(());
        }
        let shift = self
            .shift
            .get_or_insert_with(|| batch.column(0).into_owned())
            .clone();
        let mut centered = batch.clone();
        for mut col in centered.column_iter_mut() {
            col -= &shift;
        }
        self.sum += centered.column_sum();
        self.outer.gemm(1.0, &centered, &centered.transpose(), 1.0);
        self.count += batch.ncols();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean and `1/N` covariance of everything added so far.
    pub fn finish(&self) -> Result<(DVector<f64>, SymMatrix)> {
        let Some(shift) = &self.shift else {
            return Err(Error::TooFewSamples { needed: 0, got: 0 });
        };
        let n = self.count as f64;
        let offset = &self.sum / n;
        let cov = &self.outer / n - &offset * offset.transpose();
        Ok((shift + offset, SymMatrix::symmetrized(cov)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrized(&m + m.transpose())
    }

    #[test]
    fn identity_eigenvalues_are_ones() {
        let e = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_eigenvalues_sorted() {
        let e = sym_eig(&SymMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(e.eigenvectors[(1, 0)], 1.0);
    }

    #[test]
    fn random_reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_sym(6, &mut rng);
        let e = sym_eig(&a).unwrap();
        let v = &e.eigenvectors;
        let recon = v * DMatrix::from_diagonal(&e.eigenvalues) * v.transpose();
        let fro = a.as_matrix().norm();
        assert!((recon - a.as_matrix()).amax() <= 1e-8 * fro);
        let gram = v.transpose() * v;
        assert!((gram - DMatrix::identity(6, 6)).amax() <= 1e-8);
        for w in e.eigenvalues.as_slice().windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn rejects_non_finite_and_asymmetric() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(SymMatrix::new(m), Err(Error::NonFinite)));
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = 0.5;
        assert!(matches!(SymMatrix::new(m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn generalized_with_identity_matches_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_sym(7, &mut rng);
        let s = sym_eig(&a).unwrap();
        let g = gen_sym_eig(&a, &SymMatrix::identity(7), 0.0).unwrap();
        for (x, y) in s.eigenvalues.iter().zip(g.eigenvalues.iter()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn generalized_diagonal_ratio() {
        let a = SymMatrix::from_diagonal(&[2.0, 1.0]);
        let b = SymMatrix::from_diagonal(&[1.0, 4.0]);
        let g = gen_sym_eig(&a, &b, 0.0).unwrap();
        assert!((g.eigenvalues[0] - 0.25).abs() < 1e-14);
        assert!((g.eigenvalues[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn generalized_errors() {
        let a = SymMatrix::identity(3);
        let b = SymMatrix::from_diagonal(&[1.0, 0.0, 0.0]);
        assert!(matches!(gen_sym_eig(&a, &b, 0.0), Err(Error::SingularB)));
        assert!(gen_sym_eig(&a, &b, 1e-3).is_ok());
        let zero = SymMatrix::from_diagonal(&[0.0, 0.0, 0.0]);
        assert!(matches!(gen_sym_eig(&a, &zero, 1e-8), Err(Error::SingularB)));
        assert!(matches!(
            gen_sym_eig(&a, &SymMatrix::identity(2), 0.0),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn whitening_isotropic_is_rotation() {
        // Columns ±e_i: zero mean, identity covariance.
        let n = 3;
        let mut data = DMatrix::zeros(n, 2 * n);
        for i in 0..n {
            data[(i, 2 * i)] = 3f64.sqrt();
            data[(i, 2 * i + 1)] = -(3f64.sqrt());
        }
        let t = pca_whiten_fit(&data, n, None).unwrap();
        let p = &t.projection;
        assert!((p * p.transpose() - DMatrix::identity(n, n)).amax() < 1e-12);
    }

    #[test]
    fn whitening_two_d_unit_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = DMatrix::from_fn(2, 500, |r, _| {
            let s: f64 = rng.random_range(-1.0..1.0);
            if r == 0 { 2.0 * s * 3f64.sqrt() } else { s * 3f64.sqrt() }
        });
        let t = pca_whiten_fit(&data, 2, None).unwrap();
        let y = t.apply_columns(&data).unwrap();
        let cov = &y * y.transpose() / 500.0;
        assert!((cov - DMatrix::identity(2, 2)).amax() < 1e-6);
    }

    #[test]
    fn whitening_clamps_rank() {
        let data = DMatrix::from_fn(3, 50, |r, c| if r == 0 { c as f64 } else { 0.0 });
        let t = pca_whiten_fit(&data, 2, None).unwrap();
        assert_eq!(t.out_dim(), 1);
        let flat = DMatrix::from_element(3, 10, 1.0);
        let r = pca_whiten_fit(&flat, 2, None);
        assert!(matches!(r, Err(Error::RankDeficient { .. })), "{r:?}");
    }

    #[test]
    fn apply_mean_gives_zero_and_checks_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = DMatrix::from_fn(4, 40, |_, _| rng.random_range(-1.0..1.0));
        let t = pca_whiten_fit(&data, 3, None).unwrap();
        let z = t.apply(t.mean.as_slice()).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(t.apply(&[0.0; 3]), Err(Error::DimMismatch { .. })));
        // Held-out sample against a naive double loop.
        let x: Vec<f64> = (0..4).map(|i| i as f64 * 0.3 - 0.2).collect();
        let got = t.apply(&x).unwrap();
        for r in 0..3 {
            let mut acc = 0.0;
            for c in 0..4 {
                acc += t.projection[(r, c)] * (x[c] - t.mean[c]);
            }
            assert!((acc - got[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_moments_match_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data = DMatrix::from_fn(5, 300, |_, _| 100.0 + rng.random_range(-1.0..1.0));
        let mut acc = MomentAccumulator::new(5);
        acc.add_columns(&data.columns(0, 120).into_owned()).unwrap();
        acc.add_columns(&data.columns(120, 180).into_owned()).unwrap();
        let (mean, cov) = acc.finish().unwrap();
        let direct_mean = data.column_mean();
        let mut c = data.clone();
        for mut col in c.column_iter_mut() {
            col -= &direct_mean;
        }
        let direct_cov = &c * c.transpose() / 300.0;
        assert!((mean - direct_mean).amax() < 1e-10);
        assert!((cov.as_matrix() - direct_cov).amax() < 1e-10);
    }
}
