//! Local descriptors pooled from feature-map volumes.
//!
//! A volume of `h_p × w_p × l_p` pooled-map cells over the `g` maps of one
//! filter group is described by: per frame, the average of each of the four
//! spatial quadrants per map (a `4g` slice vector, L2-normalized); then the
//! mean slice vector of each temporal third, concatenated to `12g` values.
//! Layout: `third · 4g + quadrant · g + map`, quadrants in row-major order.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_maps::FeatureMapStack;
use crate::linalg::{pca_whiten_fit, WhiteningTransform};

pub const FEATURES_MAGIC: &[u8; 4] = b"SLFV";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub h_p: usize,
    pub w_p: usize,
    pub l_p: usize,
    pub s_s: usize,
    pub s_t: usize,
}

impl PoolSpec {
    pub fn new(h_p: usize, w_p: usize, l_p: usize, s_s: usize, s_t: usize) -> Result<Self> {
        let spec = Self { h_p, w_p, l_p, s_s, s_t };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_p == 0 || self.w_p == 0 || self.h_p % 2 != 0 || self.w_p % 2 != 0 {
            return Err(Error::InvalidPoolSpec(format!(
                "volume sides {}x{} must be positive and even",
                self.h_p, self.w_p
            )));
        }
        if self.l_p < 3 {
            return Err(Error::InvalidPoolSpec(format!("volume length {} < 3", self.l_p)));
        }
        if self.s_s == 0 || self.s_t == 0 {
            return Err(Error::InvalidPoolSpec("strides must be positive".into()));
        }
        Ok(())
    }

    /// Slice boundaries of the three temporal parts.
    pub fn thirds(&self) -> [(usize, usize); 3] {
        let a = self.l_p / 3;
        let b = 2 * self.l_p / 3;
        [(0, a), (a, b), (b, self.l_p)]
    }

    /// Grid sizes `(ny, nx, nt)` on maps of `h × w` with `n` frames.
    pub fn grid(&self, h: usize, w: usize, n: usize) -> Option<(usize, usize, usize)> {
        if h < self.h_p || w < self.w_p || n < self.l_p {
            return None;
        }
        Some((
            (h - self.h_p) / self.s_s + 1,
            (w - self.w_p) / self.s_s + 1,
            (n - self.l_p) / self.s_t + 1,
        ))
    }

    /// Number of volumes on the grid (zero if the maps are too small).
    pub fn count(&self, h: usize, w: usize, n: usize) -> usize {
        self.grid(h, w, n).map_or(0, |(a, b, c)| a * b * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Appearance,
    Variation,
}

/// Where a feature came from, in pooled-map coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePosition {
    pub scale: usize,
    pub y: usize,
    pub x: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    pub dim: usize,
    /// Features stored back to back, `dim` values each.
    pub data: Vec<f64>,
    pub positions: Vec<FeaturePosition>,
    pub group: usize,
    pub channel: Channel,
}

impl LocalFeatureSet {
    pub fn empty(dim: usize, group: usize, channel: Channel) -> Self {
        Self {
            dim,
            data: Vec::new(),
            positions: Vec::new(),
            group,
            channel,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Appends another set of the same dimension.
    pub fn extend(&mut self, other: LocalFeatureSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.data.extend(other.data);
        self.positions.extend(other.positions);
        Ok(())
    }

    /// Features as matrix columns.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim, self.len(), &self.data)
    }

    /// Keeps the features at the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.dim, self.group, self.channel);
        for &i in idx {
            out.data.extend_from_slice(self.feature(i));
            out.positions.push(self.positions[i]);
        }
        out
    }
}

/// Summed-area tables of one frame, one per map.
struct FrameIntegrals {
    width: usize,
    tables: Vec<Vec<f64>>,
}

impl FrameIntegrals {
    fn new(maps: &[crate::feature_maps::Map2]) -> Self {
        let (h, w) = maps.first().map_or((0, 0), |m| (m.height, m.width));
        let stride = w + 1;
        let tables = maps
            .iter()
            .map(|m| {
                let mut t = vec![0.0; (h + 1) * stride];
                for y in 0..h {
                    let mut run = 0.0;
                    for x in 0..w {
                        run += m.at(y, x);
                        t[(y + 1) * stride + x + 1] = t[y * stride + x + 1] + run;
                    }
                }
                t
            })
            .collect();
        Self { width: stride, tables }
    }

    #[inline]
    fn rect_sum(&self, c: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        let t = &self.tables[c];
        let s = self.width;
        t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0]
    }

    /// Quadrant means of the window at `(y, x)` into `out` (`q · g + c`).
    fn quadrant_means(&self, y: usize, x: usize, spec: &PoolSpec, out: &mut [f64]) {
        let (hh, hw) = (spec.h_p / 2, spec.w_p / 2);
        let g = self.tables.len();
        let area = (hh * hw) as f64;
        for q in 0..4 {
            let y0 = y + (q / 2) * hh;
            let x0 = x + (q % 2) * hw;
            for c in 0..g {
                out[q * g + c] = self.rect_sum(c, y0, x0, y0 + hh, x0 + hw) / area;
            }
        }
    }
}

/// Unnormalized quadrant means by direct summation.
pub fn naive_quadrant_means(
    stack: &FeatureMapStack,
    spec: &PoolSpec,
    t: usize,
    y: usize,
    x: usize,
) -> Vec<f64> {
    let g = stack.filter_count();
    let (hh, hw) = (spec.h_p / 2, spec.w_p / 2);
    let mut out = vec![0.0; 4 * g];
    for q in 0..4 {
        for c in 0..g {
            let m = &stack.maps[t][c];
            let mut acc = 0.0;
            for yy in 0..hh {
                for xx in 0..hw {
                    acc += m.at(y + (q / 2) * hh + yy, x + (q % 2) * hw + xx);
                }
            }
            out[q * g + c] = acc / (hh * hw) as f64;
        }
    }
    out
}

/// L2-normalized slice vectors on the spatial grid of every frame,
/// `data[((t · ny) + iy) · nx + ix]` holding `4g` values.
#[derive(Debug, Clone)]
pub struct SliceGrid {
    pub frames: usize,
    pub ny: usize,
    pub nx: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SliceGrid {
    #[inline]
    pub fn slice(&self, t: usize, iy: usize, ix: usize) -> &[f64] {
        let i = (t * self.ny + iy) * self.nx + ix;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn check_fits(stack: &FeatureMapStack, spec: &PoolSpec) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let (h, w) = stack.map_dims();
    spec.grid(h, w, stack.frame_count())
        .ok_or(Error::VolumeLargerThanMaps)
}

pub fn normalized_slices(stack: &FeatureMapStack, spec: &PoolSpec) -> Result<SliceGrid> {
    let (ny, nx, _) = check_fits(stack, spec)?;
    let dim = 4 * stack.filter_count();
    let per_frame: Vec<Vec<f64>> = stack
        .maps
        .par_iter()
        .map(|frame| {
            let ints = FrameIntegrals::new(frame);
            let mut out = vec![0.0; ny * nx * dim];
            for iy in 0..ny {
                for ix in 0..nx {
                    let v = &mut out[(iy * nx + ix) * dim..(iy * nx + ix + 1) * dim];
                    ints.quadrant_means(iy * spec.s_s, ix * spec.s_s, spec, v);
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        v.iter_mut().for_each(|a| *a /= norm);
                    }
                }
            }
            out
        })
        .collect();
    Ok(SliceGrid {
        frames: stack.frame_count(),
        ny,
        nx,
        dim,
        data: per_frame.concat(),
    })
}

/// Pools every volume on the `(s_s, s_t)` grid into a `12g`-dim descriptor.
/// Output order is `t`, then `y`, then `x`.
pub fn pool_volume(
    stack: &FeatureMapStack,
    spec: &PoolSpec,
    group: usize,
    channel: Channel,
    scale: usize,
) -> Result<LocalFeatureSet> {
    let (ny, nx, nt) = check_fits(stack, spec)?;
    let slices = normalized_slices(stack, spec)?;
    let sd = slices.dim;
    let dim = 3 * sd;
    let thirds = spec.thirds();
    let blocks: Vec<Vec<f64>> = (0..nt)
        .into_par_iter()
        .map(|it| {
            let t0 = it * spec.s_t;
            let mut out = vec![0.0; ny * nx * dim];
            for iy in 0..ny {
                for ix in 0..nx {
                    let f = &mut out[(iy * nx + ix) * dim..(iy * nx + ix + 1) * dim];
                    for (p, &(a, b)) in thirds.iter().enumerate() {
                        let part = &mut f[p * sd..(p + 1) * sd];
                        for t in t0 + a..t0 + b {
                            for (d, s) in part.iter_mut().zip(slices.slice(t, iy, ix)) {
                                *d += s;
                            }
                        }
                        let n = (b - a) as f64;
                        part.iter_mut().for_each(|d| *d /= n);
                    }
                }
            }
            out
        })
        .collect();
    let mut positions = Vec::with_capacity(nt * ny * nx);
    for it in 0..nt {
        for iy in 0..ny {
            for ix in 0..nx {
                positions.push(FeaturePosition {
                    scale,
                    y: iy * spec.s_s,
                    x: ix * spec.s_s,
                    t: it * spec.s_t,
                });
            }
        }
    }
    Ok(LocalFeatureSet {
        dim,
        data: blocks.concat(),
        positions,
        group,
        channel,
    })
}

/// Checks summed-area pooling against direct summation on every slice of
/// every grid position, within `1e-9` relative to the window's absolute sum.
pub fn integral_pool_oracle_check(stack: &FeatureMapStack, spec: &PoolSpec) -> bool {
    let Ok((ny, nx, _)) = check_fits(stack, spec) else {
        return false;
    };
    let g = stack.filter_count();
    let (hh, hw) = (spec.h_p / 2, spec.w_p / 2);
    stack.maps.iter().enumerate().all(|(t, frame)| {
        let ints = FrameIntegrals::new(frame);
        let mut fast = vec![0.0; 4 * g];
        (0..ny).all(|iy| {
            (0..nx).all(|ix| {
                let (y, x) = (iy * spec.s_s, ix * spec.s_s);
                ints.quadrant_means(y, x, spec, &mut fast);
                let slow = naive_quadrant_means(stack, spec, t, y, x);
                (0..4 * g).all(|k| {
                    let (q, c) = (k / g, k % g);
                    let m = &frame[c];
                    let mut scale = 0.0;
                    for yy in 0..hh {
                        for xx in 0..hw {
                            scale += m.at(y + (q / 2) * hh + yy, x + (q % 2) * hw + xx).abs();
                        }
                    }
                    scale /= (hh * hw) as f64;
                    (fast[k] - slow[k]).abs() <= 1e-9 * scale.max(f64::MIN_POSITIVE)
                        || fast[k] == slow[k]
                })
            })
        })
    })
}

/// Fits the PCA-whitening reducer on training features.
pub fn fit_reducer(features: &LocalFeatureSet, out_dim: usize) -> Result<WhiteningTransform> {
    if features.is_empty() {
        return Err(Error::EmptyFeatureSet);
    }
    pca_whiten_fit(&features.to_matrix(), out_dim, None)
}

/// Applies a fitted reducer to every feature.
pub fn reduce48(features: &LocalFeatureSet, reducer: &WhiteningTransform) -> Result<LocalFeatureSet> {
    if features.dim != reducer.in_dim() {
        return Err(Error::DimMismatch {
            expected: reducer.in_dim(),
            got: features.dim,
        });
    }
    let out = reducer.apply_columns(&features.to_matrix())?;
    Ok(LocalFeatureSet {
        dim: reducer.out_dim(),
        data: out.as_slice().to_vec(),
        positions: features.positions.clone(),
        group: features.group,
        channel: features.channel,
    })
}

/// Writes `"SLFV" dim count` followed by the features as f32 LE.
pub fn write_features_bin(path: &Path, set: &LocalFeatureSet) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * set.data.len());
    buf.extend_from_slice(FEATURES_MAGIC);
    buf.extend_from_slice(&(set.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for &v in &set.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a features dump as `(dim, values)`.
pub fn read_features_bin(path: &Path) -> Result<(usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 12 || &bytes[..4] != FEATURES_MAGIC {
        return Err(bad("missing SLFV magic"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * dim * count {
        return Err(bad("payload length does not match header"));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dim, values))
}
