//! Dense convolution with slim filters, activation, max pooling, and the
//! appearance / variation maps derived from the pooled responses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_bank::SlimFilter;
use crate::video_io::GraySequence;

/// A row-major 2D real map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Frame `t` of a video as a real map.
    pub fn from_frame(video: &GraySequence, t: usize) -> Self {
        Self {
            height: video.height(),
            width: video.width(),
            data: video.frame(t).iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    #[default]
    Abs,
    Square,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
            Activation::Abs => v.abs(),
            Activation::Square => v * v,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "relu" => Ok(Self::Relu),
            "abs" => Ok(Self::Abs),
            "square" => Ok(Self::Square),
            other => Err(Error::InvalidConfig(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Raw,
    Pooled,
    Appearance,
    Variation,
}

/// Per-frame, per-filter maps; `maps[i][j]` is frame `i`, filter `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack {
    pub kind: MapKind,
    pub pool_size: usize,
    pub maps: Vec<Vec<Map2>>,
}

impl FeatureMapStack {
    pub fn frame_count(&self) -> usize {
        self.maps.len()
    }

    pub fn filter_count(&self) -> usize {
        self.maps.first().map_or(0, |f| f.len())
    }

    /// `(height, width)` shared by all maps.
    pub fn map_dims(&self) -> (usize, usize) {
        self.maps
            .first()
            .and_then(|f| f.first())
            .map_or((0, 0), |m| (m.height, m.width))
    }
}

/// Valid-region cross-correlation plus bias.
pub fn convolve_frame(frame: &Map2, filter: &SlimFilter, bias: f64, stride: usize) -> Result<Map2> {
    let (fh, fw) = (filter.height, filter.width);
    if frame.height < fh || frame.width < fw {
        return Err(Error::FilterLargerThanFrame {
            filter_h: fh,
            filter_w: fw,
            frame_h: frame.height,
            frame_w: frame.width,
        });
    }
    let stride = stride.max(1);
    let oh = (frame.height - fh) / stride + 1;
    let ow = (frame.width - fw) / stride + 1;
    let mut out = Map2 {
        height: oh,
        width: ow,
        data: vec![bias; oh * ow],
    };
    for oy in 0..oh {
        let dst = &mut out.data[oy * ow..(oy + 1) * ow];
        for fy in 0..fh {
            let src = frame.row(oy * stride + fy);
            for fx in 0..fw {
                let w = filter.at(fy, fx);
                if stride == 1 {
                    for (d, s) in dst.iter_mut().zip(&src[fx..fx + ow]) {
                        *d += w * s;
                    }
                } else {
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d += w * src[ox * stride + fx];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn activate(map: &Map2, f: Activation) -> Map2 {
    Map2 {
        height: map.height,
        width: map.width,
        data: map.data.iter().map(|&v| f.apply(v)).collect(),
    }
}

/// Non-overlapping `s × s` max pooling; windows cut by the right or bottom
/// edge take the maximum over the cells they cover.
pub fn max_pool(map: &Map2, s: usize) -> Map2 {
    let s = s.max(1);
    if s == 1 {
        return map.clone();
    }
    let oh = map.height.div_ceil(s);
    let ow = map.width.div_ceil(s);
    let mut out = Map2 {
        height: oh,
        width: ow,
        data: vec![f64::NEG_INFINITY; oh * ow],
    };
    for y in 0..map.height {
        let dst = &mut out.data[(y / s) * ow..(y / s + 1) * ow];
        for (x, &v) in map.row(y).iter().enumerate() {
            let d = &mut dst[x / s];
            if v > *d {
                *d = v;
            }
        }
    }
    out
}

/// Convolves every frame with every filter, activates and max-pools.
pub fn pooled_maps(
    video: &GraySequence,
    filters: &[SlimFilter],
    biases: &[f64],
    activation: Activation,
    stride: usize,
    pool_size: usize,
) -> Result<FeatureMapStack> {
    if filters.len() != biases.len() {
        return Err(Error::DimMismatch {
            expected: filters.len(),
            got: biases.len(),
        });
    }
    let maps = (0..video.length())
        .into_par_iter()
        .map(|t| {
            let frame = Map2::from_frame(video, t);
            filters
                .iter()
                .zip(biases)
                .map(|(f, &b)| {
                    let m = convolve_frame(&frame, f, b, stride)?;
                    Ok(max_pool(&activate(&m, activation), pool_size))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMapStack {
        kind: MapKind::Pooled,
        pool_size,
        maps,
    })
}

fn map_stack(stack: &FeatureMapStack, kind: MapKind, frames: usize, f: impl Fn(usize, usize, usize) -> f64 + Sync) -> FeatureMapStack {
    let maps = (0..frames)
        .map(|i| {
            stack.maps[i]
                .iter()
                .enumerate()
                .map(|(j, m)| Map2 {
                    height: m.height,
                    width: m.width,
                    data: (0..m.data.len()).map(|k| f(i, j, k)).collect(),
                })
                .collect()
        })
        .collect();
    FeatureMapStack {
        kind,
        pool_size: stack.pool_size,
        maps,
    }
}

/// `A_i = |M̂_i|`; a no-op on abs-activated input, applied regardless.
pub fn appearance_maps(pooled: &FeatureMapStack) -> FeatureMapStack {
    map_stack(pooled, MapKind::Appearance, pooled.frame_count(), |i, j, k| {
        pooled.maps[i][j].data[k].abs()
    })
}

/// `V_i = |M̂_i − M̂_{i+1}|`, one frame fewer than the input.
pub fn variation_maps(pooled: &FeatureMapStack) -> Result<FeatureMapStack> {
    let n = pooled.frame_count();
    if n < 2 {
        return Err(Error::TooFewFrames(n));
    }
    Ok(map_stack(pooled, MapKind::Variation, n - 1, |i, j, k| {
        (pooled.maps[i][j].data[k] - pooled.maps[i + 1][j].data[k]).abs()
    }))
}
