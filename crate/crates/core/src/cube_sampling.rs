//! Random spatio-temporal cube sampling and cube-sequence reformatting.
//!
//! Cubes are vectorized with `y` fastest, then `x`, then `t`, so the samples
//! of one frame of a cube are contiguous and an elemental cube covering
//! frames `[i, i + d)` is a contiguous slice of its parent cube.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video_io::GraySequence;

/// Cube size `height × width × length` and elemental cube length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeSpec {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub elemental: usize,
}

impl CubeSpec {
    pub fn new(height: usize, width: usize, length: usize, elemental: usize) -> Result<Self> {
        if height == 0 || width == 0 || length == 0 || elemental == 0 {
            return Err(Error::InvalidCubeSpec("all sides must be positive".into()));
        }
        if elemental > length {
            return Err(Error::InvalidCubeSpec(format!(
                "elemental length {elemental} exceeds cube length {length}"
            )));
        }
        Ok(Self {
            height,
            width,
            length,
            elemental,
        })
    }

    /// Number of elemental cubes per reformatted sequence, `l − d + 1`.
    pub fn elemental_count(&self) -> usize {
        self.length - self.elemental + 1
    }

    /// Dimension of one elemental cube, `h · w · d`.
    pub fn state_dim(&self) -> usize {
        self.height * self.width * self.elemental
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn cube_len(&self) -> usize {
        self.frame_len() * self.length
    }

    /// Position of sample `(y, x, t)` in the vectorized cube.
    #[inline]
    pub fn index(&self, y: usize, x: usize, t: usize) -> usize {
        y + self.height * (x + self.width * t)
    }

    /// Learning needs at least one temporal transition per sequence.
    pub fn check_learnable(&self) -> Result<()> {
        if self.elemental_count() < 2 {
            return Err(Error::InvalidCubeSpec(format!(
                "l_n = {} leaves no temporal transition",
                self.elemental_count()
            )));
        }
        Ok(())
    }

    fn positions_in(&self, video: (usize, usize, usize)) -> u64 {
        let (h, w, l) = video;
        if h < self.height || w < self.width || l < self.length {
            return 0;
        }
        ((h - self.height + 1) * (w - self.width + 1) * (l - self.length + 1)) as u64
    }
}

/// Top-left-first corner of a sampled cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CubePosition {
    pub video: usize,
    pub y: usize,
    pub x: usize,
    pub t: usize,
}

/// A vectorized `h × w × l` cube.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCube {
    pub spec: CubeSpec,
    pub data: Vec<f32>,
}

impl RawCube {
    #[inline]
    pub fn at(&self, y: usize, x: usize, t: usize) -> f32 {
        self.data[self.spec.index(y, x, t)]
    }
}

/// A reformatted cube: column `i` is the elemental cube of frames `[i, i + d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeSequence {
    pub states: DMatrix<f64>,
}

impl CubeSequence {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }
}

/// Draws `count` cube corners uniformly over all valid `(video, y, x, t)`
/// positions of videos with the given `(height, width, length)` sizes.
/// Videos too small for the cube are skipped with a warning.
pub fn sample_positions(
    sizes: &[(usize, usize, usize)],
    count: usize,
    spec: &CubeSpec,
    seed: u64,
) -> Result<Vec<CubePosition>> {
    let mut cumulative = Vec::with_capacity(sizes.len());
    let mut total = 0u64;
    for (i, &s) in sizes.iter().enumerate() {
        let n = spec.positions_in(s);
        if n == 0 {
            log::warn!(
                "video {i} ({}x{}x{}) is smaller than the {}x{}x{} cube; skipped",
                s.0,
                s.1,
                s.2,
                spec.height,
                spec.width,
                spec.length
            );
        }
        total += n;
        cumulative.push(total);
    }
    if total == 0 {
        return Err(Error::TooSmallVideo);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u = rng.random_range(0..total);
        let video = cumulative.partition_point(|&c| c <= u);
        let mut local = u - if video == 0 { 0 } else { cumulative[video - 1] };
        let (h, w, _) = sizes[video];
        let ny = (h - spec.height + 1) as u64;
        let nx = (w - spec.width + 1) as u64;
        let y = (local % ny) as usize;
        local /= ny;
        let x = (local % nx) as usize;
        let t = (local / nx) as usize;
        out.push(CubePosition { video, y, x, t });
    }
    Ok(out)
}

/// Copies the cube at `pos` out of `video` (the `pos.video` field is ignored).
pub fn extract_cube(video: &GraySequence, pos: &CubePosition, spec: &CubeSpec) -> RawCube {
    let mut data = Vec::with_capacity(spec.cube_len());
    for t in 0..spec.length {
        for x in 0..spec.width {
            for y in 0..spec.height {
                data.push(video.at(pos.t + t, pos.y + y, pos.x + x));
            }
        }
    }
    RawCube { spec: *spec, data }
}

/// Samples `count` cubes from `videos` with a seeded generator.
pub fn sample_cubes(
    videos: &[GraySequence],
    count: usize,
    spec: &CubeSpec,
    seed: u64,
) -> Result<Vec<RawCube>> {
    let sizes: Vec<_> = videos
        .iter()
        .map(|v| (v.height(), v.width(), v.length()))
        .collect();
    let positions = sample_positions(&sizes, count, spec, seed)?;
    Ok(positions
        .iter()
        .map(|p| extract_cube(&videos[p.video], p, spec))
        .collect())
}

/// Elemental cube `i` of a raw cube as a contiguous slice.
pub fn elemental_slice<'a>(cube: &'a RawCube, i: usize) -> &'a [f32] {
    let spec = &cube.spec;
    let start = i * spec.frame_len();
    &cube.data[start..start + spec.state_dim()]
}

/// Reformats a frame-based cube into its sequence of overlapping elemental cubes.
pub fn reformat(cube: &RawCube, spec: &CubeSpec) -> Result<CubeSequence> {
    if cube.spec != *spec || cube.data.len() != spec.cube_len() {
        return Err(Error::DimMismatch {
            expected: spec.cube_len(),
            got: cube.data.len(),
        });
    }
    let n = spec.elemental_count();
    let dim = spec.state_dim();
    let mut states = DMatrix::zeros(dim, n);
    for i in 0..n {
        let src = elemental_slice(cube, i);
        for (dst, &v) in states.column_mut(i).iter_mut().zip(src) {
            *dst = v as f64;
        }
    }
    Ok(CubeSequence { states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, l: usize) -> GraySequence {
        GraySequence::from_fn(h, w, l, "ramp", |t, y, x| ((t * 37 + y * 11 + x * 3) % 251) as f32).unwrap()
    }

    #[test]
    fn default_scale_sampling_counts() {
        let spec = CubeSpec::new(7, 7, 15, 6).unwrap();
        let videos = vec![ramp(20, 24, 30), ramp(16, 16, 20)];
        let cubes = sample_cubes(&videos, 100_000, &spec, 7).unwrap();
        assert_eq!(cubes.len(), 100_000);
        assert!(cubes.iter().all(|c| c.data.len() == 735));
    }

    #[test]
    fn single_position_returns_whole_video() {
        let spec = CubeSpec::new(7, 7, 15, 6).unwrap();
        let v = ramp(7, 7, 15);
        let cubes = sample_cubes(std::slice::from_ref(&v), 1, &spec, 1).unwrap();
        for t in 0..15 {
            for y in 0..7 {
                for x in 0..7 {
                    assert_eq!(cubes[0].at(y, x, t), v.at(t, y, x));
                }
            }
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic_and_skips_small_videos() {
        let spec = CubeSpec::new(3, 3, 4, 2).unwrap();
        let sizes = [(2, 2, 2), (10, 12, 9), (5, 5, 5)];
        let a = sample_positions(&sizes, 500, &spec, 42).unwrap();
        let b = sample_positions(&sizes, 500, &spec, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.video != 0));
        for p in &a {
            let (h, w, l) = sizes[p.video];
            assert!(p.y + 3 <= h && p.x + 3 <= w && p.t + 4 <= l);
        }
        assert!(matches!(
            sample_positions(&[(2, 2, 2)], 1, &spec, 0),
            Err(Error::TooSmallVideo)
        ));
    }

    #[test]
    fn reformat_counts_and_overlap() {
        let spec = CubeSpec::new(7, 7, 15, 6).unwrap();
        let v = ramp(9, 9, 16);
        let cube = extract_cube(&v, &CubePosition { video: 0, y: 1, x: 2, t: 1 }, &spec);
        let seq = reformat(&cube, &spec).unwrap();
        assert_eq!(seq.len(), 10);
        let frame = spec.frame_len();
        for i in 0..9 {
            let a = seq.states.column(i);
            let b = seq.states.column(i + 1);
            for k in 0..(spec.elemental - 1) * frame {
                assert_eq!(a[frame + k], b[k]);
            }
        }
        let full = CubeSpec::new(7, 7, 15, 15).unwrap();
        let cube = extract_cube(&v, &CubePosition { video: 0, y: 0, x: 0, t: 0 }, &full);
        assert_eq!(reformat(&cube, &full).unwrap().len(), 1);
        assert!(full.check_learnable().is_err());
        assert!(matches!(reformat(&cube, &spec), Err(Error::DimMismatch { .. })));
    }

    proptest! {
        #[test]
        fn vectorization_is_a_bijection(h in 1usize..5, w in 1usize..5, l in 1usize..5) {
            let spec = CubeSpec::new(h, w, l, 1).unwrap();
            let mut seen = vec![false; spec.cube_len()];
            for t in 0..l { for x in 0..w { for y in 0..h {
                let i = spec.index(y, x, t);
                prop_assert!(!seen[i]);
                seen[i] = true;
            }}}
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}
