//! Convolution filters composed from the whitening and slow projections.
//!
//! For a raw vectorized cube `x`, the learned feature map is
//! `Uᵀ P (x − mean) = Wᵀ x + b` with `W = Pᵀ U` and `b = −Wᵀ mean`, where `P`
//! is the whitening projection. Each column of `W` is a 3D filter; its first
//! temporal slice is the 2D "slim" filter used for dense convolution.
//!
//! Model file `filters.slf` (all integers u32 LE, all reals f64 LE):
//!
//! ```text
//! "SLF1" h w d q group_size n_dropped m
//! mean[h·w·d] projection[m × h·w·d, row-major] W[q × h·w·d, filter-major]
//! b[q] eigenvalues[q] config_len config_json[config_len]
//! ```

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::binio::{fnv1a, ByteReader, ByteWriter};
use crate::cube_sampling::CubeSpec;
use crate::error::{Error, Result};
use crate::linalg::WhiteningTransform;
use crate::mrsfa::SlowProjection;
use crate::video_io::{to_byte, write_pgm};

pub const SLF_MAGIC: &[u8; 4] = b"SLF1";
pub const DEFAULT_GROUP_SIZE: usize = 8;

/// A 2D filter, row-major (`weights[y · width + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SlimFilter {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl SlimFilter {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub spec: CubeSpec,
    pub whitener: WhiteningTransform,
    /// `h·w·d × q`, one 3D filter per column in cube vectorization order.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub eigenvalues: DVector<f64>,
    pub n_dropped: usize,
    pub slim: Vec<SlimFilter>,
    pub groups: Vec<Range<usize>>,
    pub group_size: usize,
    /// Effective learning configuration (JSON), when known.
    pub config_json: Option<String>,
}

impl FilterBank {
    pub fn len(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Wᵀ x + b` for one raw vectorized cube.
    pub fn respond(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.weights.nrows() {
            return Err(Error::DimMismatch {
                expected: self.weights.nrows(),
                got: x.len(),
            });
        }
        Ok(self.weights.tr_mul(&DVector::from_column_slice(x)) + &self.bias)
    }

    /// Short fingerprint of the learning configuration.
    pub fn provenance(&self) -> String {
        format!(
            "{:016x}",
            fnv1a(self.config_json.as_deref().unwrap_or("").as_bytes())
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut w = ByteWriter::new(SLF_MAGIC);
        for v in [
            s.height,
            s.width,
            s.elemental,
            self.len(),
            self.group_size,
            self.n_dropped,
            self.whitener.out_dim(),
        ] {
            w.u32(v);
        }
        w.f64s(self.whitener.mean.iter());
        w.f64s(self.whitener.projection.transpose().iter());
        w.f64s(self.weights.iter());
        w.f64s(self.bias.iter());
        w.f64s(self.eigenvalues.iter());
        w.string(self.config_json.as_deref().unwrap_or(""));
        w.finish()
    }

    /// Parses an `SLF1` file. The cube length is not stored; it is set to the
    /// elemental length. The whitening floor is not stored either and reads
    /// back as zero.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, SLF_MAGIC, "filters.slf")?;
        let (h, w, d, q, group_size, n_dropped, m) =
            (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let spec = CubeSpec::new(h, w, d, d)
            .map_err(|e| Error::BadModel(format!("filters.slf: {e}")))?;
        if group_size == 0 {
            return Err(Error::BadModel("filters.slf: zero group size".into()));
        }
        let dim = spec.state_dim();
        let mean = DVector::from_vec(r.f64s(dim)?);
        let projection = DMatrix::from_vec(dim, m, r.f64s(dim * m)?).transpose();
        let weights = DMatrix::from_vec(dim, q, r.f64s(dim * q)?);
        let bias = DVector::from_vec(r.f64s(q)?);
        let eigenvalues = DVector::from_vec(r.f64s(q)?);
        let config = r.string()?;
        r.expect_end()?;
        let bank = FilterBank {
            spec,
            whitener: WhiteningTransform {
                mean,
                projection,
                eigen_floor: 0.0,
            },
            weights,
            bias,
            eigenvalues,
            n_dropped,
            slim: Vec::new(),
            groups: Vec::new(),
            group_size,
            config_json: (!config.is_empty()).then_some(config),
        };
        Ok(group_filters(&slim(&bank), group_size))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Filters of group `g` as a sub-slice of [`FilterBank::slim`].
    pub fn group(&self, g: usize) -> &[SlimFilter] {
        &self.slim[self.groups[g].clone()]
    }
}

/// Composes `W = Pᵀ U` and `b = −Wᵀ mean`; slim filters and groups are
/// filled in with the defaults.
pub fn compose_filters(
    whitener: &WhiteningTransform,
    proj: &SlowProjection,
    spec: &CubeSpec,
) -> Result<FilterBank> {
    if whitener.out_dim() != proj.u.nrows() {
        return Err(Error::DimMismatch {
            expected: whitener.out_dim(),
            got: proj.u.nrows(),
        });
    }
    if whitener.in_dim() != spec.state_dim() {
        return Err(Error::DimMismatch {
            expected: spec.state_dim(),
            got: whitener.in_dim(),
        });
    }
    let weights = whitener.projection.tr_mul(&proj.u);
    let bias = -weights.tr_mul(&whitener.mean);
    let bank = FilterBank {
        spec: *spec,
        whitener: whitener.clone(),
        weights,
        bias,
        eigenvalues: proj.eigenvalues.clone(),
        n_dropped: proj.n_dropped,
        slim: Vec::new(),
        groups: Vec::new(),
        group_size: DEFAULT_GROUP_SIZE,
        config_json: None,
    };
    Ok(group_filters(&slim(&bank), DEFAULT_GROUP_SIZE))
}

/// Derives the 2D filters from the first temporal slice of each 3D filter.
/// The full weights and the bias are kept.
pub fn slim(fb: &FilterBank) -> FilterBank {
    let spec = &fb.spec;
    let slim = fb
        .weights
        .column_iter()
        .map(|col| {
            let mut weights = vec![0.0; spec.frame_len()];
            for y in 0..spec.height {
                for x in 0..spec.width {
                    weights[y * spec.width + x] = col[spec.index(y, x, 0)];
                }
            }
            SlimFilter {
                height: spec.height,
                width: spec.width,
                weights,
            }
        })
        .collect();
    FilterBank {
        slim,
        ..fb.clone()
    }
}

/// Splits the filters, in eigenvalue order, into consecutive groups of
/// `group_size`; a short final group is kept with a warning.
pub fn group_filters(fb: &FilterBank, group_size: usize) -> FilterBank {
    let q = fb.len();
    let size = group_size.max(1);
    if q % size != 0 {
        log::warn!("{q} filters do not divide into groups of {size}; last group has {}", q % size);
    }
    let groups = (0..q)
        .step_by(size)
        .map(|start| start..(start + size).min(q))
        .collect();
    FilterBank {
        groups,
        group_size: size,
        ..fb.clone()
    }
}

/// Writes each slim filter as an 8-bit PGM, min-max stretched to `[0, 255]`
/// (constant filters become uniform 128).
pub fn export_filters(fb: &FilterBank, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(fb.slim.len());
    for (j, f) in fb.slim.iter().enumerate() {
        let lo = f.weights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = f.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pixels: Vec<u8> = f
            .weights
            .iter()
            .map(|&v| {
                if hi > lo {
                    to_byte(255.0 * (v - lo) / (hi - lo))
                } else {
                    128
                }
            })
            .collect();
        let path = dir.join(format!("filter_{j:03}.pgm"));
        write_pgm(&path, f.height, f.width, &pixels)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pca_whiten_fit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bank(spec: CubeSpec, m: usize, q: usize, seed: u64) -> FilterBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = spec.state_dim();
        let data = DMatrix::from_fn(dim, 4 * dim, |_, _| 50.0 + rng.random_range(-10.0..10.0));
        let whitener = pca_whiten_fit(&data, m, None).unwrap();
        let u = DMatrix::from_fn(m, q, |_, _| rng.random_range(-1.0..1.0));
        let proj = SlowProjection {
            u,
            eigenvalues: DVector::from_fn(q, |i, _| i as f64),
            n_dropped: 1,
        };
        compose_filters(&whitener, &proj, &spec).unwrap()
    }

    #[test]
    fn affine_equivalence_on_random_inputs() {
        let spec = CubeSpec::new(3, 3, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = spec.state_dim();
        let data = DMatrix::from_fn(dim, 100, |_, _| rng.random_range(0.0..255.0));
        let whitener = pca_whiten_fit(&data, 10, None).unwrap();
        let u = DMatrix::from_fn(10, 5, |_, _| rng.random_range(-1.0..1.0));
        let proj = SlowProjection { u: u.clone(), eigenvalues: DVector::zeros(5), n_dropped: 0 };
        let bank = compose_filters(&whitener, &proj, &spec).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..255.0)).collect();
            let lhs = bank.respond(&x).unwrap();
            let rhs = u.transpose() * whitener.apply(&x).unwrap();
            worst = worst.max((lhs - rhs).amax());
        }
        assert!(worst <= 1e-10, "max deviation {worst}");
    }

    #[test]
    fn zero_mean_gives_zero_bias_and_identity_selects_basis() {
        let spec = CubeSpec::new(2, 2, 1, 1).unwrap();
        let whitener = WhiteningTransform {
            mean: DVector::zeros(4),
            projection: DMatrix::identity(4, 4),
            eigen_floor: 0.0,
        };
        let mut u = DMatrix::zeros(4, 1);
        u[(0, 0)] = 1.0;
        let proj = SlowProjection { u, eigenvalues: DVector::zeros(1), n_dropped: 0 };
        let bank = compose_filters(&whitener, &proj, &spec).unwrap();
        assert!(bank.bias.iter().all(|&b| b == 0.0));
        assert_eq!(bank.weights.column(0).as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        // d = 1: the slim filter is the full filter.
        assert_eq!(bank.slim[0].weights, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn slim_takes_first_frame_and_is_idempotent() {
        let spec = CubeSpec::new(7, 7, 6, 6).unwrap();
        let bank = random_bank(spec, 20, 4, 2);
        assert!(bank.slim.iter().all(|f| f.height == 7 && f.width == 7));
        for (j, f) in bank.slim.iter().enumerate() {
            for y in 0..7 {
                for x in 0..7 {
                    assert_eq!(f.at(y, x), bank.weights[(spec.index(y, x, 0), j)]);
                }
            }
        }
        assert_eq!(slim(&slim(&bank)), slim(&bank));
    }

    #[test]
    fn grouping_partitions_filters() {
        let spec = CubeSpec::new(2, 2, 2, 1).unwrap();
        let bank = random_bank(spec, 4, 4, 3);
        let mut big = bank.clone();
        big.weights = DMatrix::from_fn(4, 24, |r, c| (r + c) as f64);
        big.bias = DVector::zeros(24);
        let g = group_filters(&big, 8);
        assert_eq!(g.groups, vec![0..8, 8..16, 16..24]);
        big.weights = DMatrix::zeros(4, 9);
        let g = group_filters(&big, 8);
        assert_eq!(g.groups, vec![0..8, 8..9]);
        big.weights = DMatrix::zeros(4, 8);
        assert_eq!(group_filters(&big, 8).groups.len(), 1);
    }

    #[test]
    fn slf_round_trip_is_bit_exact() {
        let spec = CubeSpec::new(3, 3, 5, 2).unwrap();
        let mut bank = random_bank(spec, 8, 5, 4);
        bank.config_json = Some("{\"k\":5}".into());
        let bytes = bank.to_bytes();
        let back = FilterBank::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.weights, bank.weights);
        assert_eq!(back.whitener.projection, bank.whitener.projection);
        assert_eq!(back.slim, bank.slim);
        assert_eq!(back.provenance(), bank.provenance());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FilterBank::from_bytes(&bad), Err(Error::BadModel(_))));
        assert!(FilterBank::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn export_writes_one_pgm_per_filter() {
        let spec = CubeSpec::new(7, 7, 6, 6).unwrap();
        let mut bank = random_bank(spec, 30, 24, 5);
        bank.slim[3].weights.iter_mut().for_each(|w| *w = 0.25);
        let dir = tempfile::tempdir().unwrap();
        let paths = export_filters(&bank, dir.path()).unwrap();
        assert_eq!(paths.len(), 24);
        assert!(paths[0].ends_with("filter_000.pgm"));
        let flat = fs::read(&paths[3]).unwrap();
        assert!(flat[flat.len() - 49..].iter().all(|&p| p == 128));
        let first = fs::read(&paths[0]).unwrap();
        export_filters(&bank, dir.path()).unwrap();
        assert_eq!(fs::read(&paths[0]).unwrap(), first);
    }
}
