//! Labeled synthetic dynamic-texture datasets.
//!
//! Every video is generated from its own seed (derived from the dataset seed
//! and the video index), quantized to 8-bit levels and kept stationary in
//! mean intensity by removing the per-frame spatial mean of the texture.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::video_io::{to_byte, write_dtv, GraySequence, ManifestEntry, VideoManifest, MANIFEST_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Sinusoidal grating drifting perpendicular to its stripes.
    DriftingGrating {
        orientation_deg: f64,
        /// Cycles per pixel.
        frequency: f64,
        /// Pixels per frame.
        speed: f64,
    },
    /// Per-pixel AR(1) noise with the given lag-one correlation.
    FlickerNoise { temporal_corr: f64 },
    /// Gaussian blobs that fade in and out, `blob_rate` new blobs per frame.
    BoilingBlobs { blob_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub generator: Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    pub videos_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// Standard deviation of additive i.i.d. pixel noise.
    pub noise_sigma: f64,
    /// Texture amplitude in gray levels.
    pub contrast: f64,
    pub seed: u64,
}

pub const DEFAULT_GRATING_FREQUENCY: f64 = 0.05;

impl Default for SynthSpec {
    fn default() -> Self {
        let grating = |deg: f64, speed: f64, name: &str| ClassSpec {
            name: name.into(),
            generator: Generator::DriftingGrating {
                orientation_deg: deg,
                frequency: DEFAULT_GRATING_FREQUENCY,
                speed,
            },
        };
        Self {
            classes: vec![
                grating(0.0, 0.5, "grating_0_slow"),
                grating(0.0, 2.0, "grating_0_fast"),
                grating(90.0, 0.5, "grating_90_slow"),
                grating(90.0, 2.0, "grating_90_fast"),
                ClassSpec {
                    name: "flicker".into(),
                    generator: Generator::FlickerNoise { temporal_corr: 0.9 },
                },
                ClassSpec {
                    name: "blobs".into(),
                    generator: Generator::BoilingBlobs { blob_rate: 1.5 },
                },
            ],
            videos_per_class: 20,
            height: 50,
            width: 50,
            length: 50,
            noise_sigma: 10.0,
            contrast: 60.0,
            seed: 2024,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("synthetic data needs at least 2 classes".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.contrast >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma and contrast must be >= 0".into()));
        }
        if self.videos_per_class == 0 || self.height == 0 || self.width == 0 || self.length == 0 {
            return Err(Error::InvalidConfig("synthetic sizes must be positive".into()));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty()) {
            return Err(Error::InvalidConfig("class names must be unique and nonempty".into()));
        }
        for c in &self.classes {
            match c.generator {
                Generator::FlickerNoise { temporal_corr } if !(-1.0..1.0).contains(&temporal_corr) => {
                    return Err(Error::InvalidConfig("temporal_corr must lie in [-1, 1)".into()))
                }
                Generator::BoilingBlobs { blob_rate } if !(blob_rate > 0.0) => {
                    return Err(Error::InvalidConfig("blob_rate must be positive".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn video_count(&self) -> usize {
        self.classes.len() * self.videos_per_class
    }

    /// Relative path of video `i` of class `c`.
    pub fn video_path(&self, c: usize, i: usize) -> String {
        let name = &self.classes[c].name;
        format!("{name}/{name}_{i:03}.dtv")
    }
}

/// Zero-mean texture frames, `length × height × width`.
fn texture(g: &Generator, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w, l) = (spec.height, spec.width, spec.length);
    let mut out = vec![0.0; h * w * l];
    match *g {
        Generator::DriftingGrating {
            orientation_deg,
            frequency,
            speed,
        } => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let theta = orientation_deg.to_radians();
            let (c, s) = (theta.cos(), theta.sin());
            for t in 0..l {
                for y in 0..h {
                    for x in 0..w {
                        let u = x as f64 * c + y as f64 * s;
                        out[(t * h + y) * w + x] =
                            (2.0 * PI * frequency * (u - speed * t as f64) + phase).sin();
                    }
                }
            }
        }
        Generator::FlickerNoise { temporal_corr } => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let innov = (1.0 - temporal_corr * temporal_corr).sqrt();
            let mut state: Vec<f64> = (0..h * w).map(|_| normal.sample(rng)).collect();
            for t in 0..l {
                if t > 0 {
                    for v in state.iter_mut() {
                        *v = temporal_corr * *v + innov * normal.sample(rng);
                    }
                }
                out[t * h * w..(t + 1) * h * w].copy_from_slice(&state);
            }
        }
        Generator::BoilingBlobs { blob_rate } => {
            const LIFE: usize = 12;
            let births = Poisson::new(blob_rate).unwrap();
            // Blobs born before the first frame keep the start stationary.
            for birth in -(LIFE as i64)..l as i64 {
                let n = births.sample(rng) as usize;
                for _ in 0..n {
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let sigma: f64 = rng.random_range(2.0..4.0);
                    let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.6..1.4);
                    for age in 0..LIFE {
                        let t = birth + age as i64;
                        if t < 0 || t >= l as i64 {
                            continue;
                        }
                        let env = (PI * (age as f64 + 0.5) / LIFE as f64).sin();
                        let t = t as usize;
                        let reach = (3.0 * sigma).ceil() as i64;
                        let (y0, y1) = ((cy as i64 - reach).max(0), (cy as i64 + reach).min(h as i64 - 1));
                        let (x0, x1) = ((cx as i64 - reach).max(0), (cx as i64 + reach).min(w as i64 - 1));
                        for y in y0..=y1 {
                            for x in x0..=x1 {
                                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                                out[(t * h + y as usize) * w + x as usize] +=
                                    amp * env * (-d2 / (2.0 * sigma * sigma)).exp();
                            }
                        }
                    }
                }
            }
        }
    }
    for frame in out.chunks_exact_mut(h * w) {
        let m = frame.iter().sum::<f64>() / (h * w) as f64;
        frame.iter_mut().for_each(|v| *v -= m);
    }
    out
}

/// Generates one video of class `class` from a video-specific seed.
pub fn generate_video(spec: &SynthSpec, class: usize, index: usize) -> Result<GraySequence> {
    let flat = class * spec.videos_per_class + index;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth", flat as u64));
    let tex = texture(&spec.classes[class].generator, spec, &mut rng);
    let offset = rng.random_range(-8.0..8.0);
    let amp = spec.contrast * rng.random_range(0.85..1.15);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let samples: Vec<f32> = tex
        .iter()
        .map(|&v| {
            let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            to_byte(128.0 + offset + amp * v + n) as f32
        })
        .collect();
    GraySequence::new(
        spec.height,
        spec.width,
        spec.length,
        samples,
        spec.video_path(class, index),
    )
}

/// All videos of the dataset with a manifest of relative paths.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<GraySequence>, VideoManifest)> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.videos_per_class).map(move |i| (c, i)))
        .collect();
    let videos = jobs
        .par_iter()
        .map(|&(c, i)| generate_video(spec, c, i))
        .collect::<Result<Vec<_>>>()?;
    let manifest = VideoManifest::new(
        jobs.iter()
            .map(|&(c, i)| ManifestEntry {
                path: spec.video_path(c, i).into(),
                label: spec.classes[c].name.clone(),
                split: None,
            })
            .collect(),
    )?;
    // The manifest sorts by path; keep videos in the same order.
    let mut by_path: Vec<(String, GraySequence)> =
        videos.into_iter().map(|v| (v.source_id.clone(), v)).collect();
    by_path.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((by_path.into_iter().map(|p| p.1).collect(), manifest))
}

/// Writes the dataset as `.dtv` files under `dir` plus `manifest.csv`.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<VideoManifest> {
    let (videos, manifest) = generate(spec)?;
    for c in &spec.classes {
        fs::create_dir_all(dir.join(&c.name))?;
    }
    videos
        .par_iter()
        .zip(&manifest.entries)
        .try_for_each(|(v, e)| write_dtv(&dir.join(&e.path), v))?;
    let absolute = VideoManifest {
        entries: manifest
            .entries
            .iter()
            .map(|e| ManifestEntry {
                path: dir.join(&e.path),
                ..e.clone()
            })
            .collect(),
    };
    absolute.write_csv(&dir.join(MANIFEST_FILE), dir)?;
    Ok(absolute)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video_io::{load_video, read_manifest_csv, FormatHint};

    fn tiny() -> SynthSpec {
        SynthSpec {
            videos_per_class: 2,
            height: 20,
            width: 24,
            length: 12,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_counts_and_sizes() {
        let spec = SynthSpec::default();
        assert_eq!(spec.video_count(), 120);
        let (videos, manifest) = generate(&SynthSpec { videos_per_class: 1, ..spec }).unwrap();
        assert_eq!(videos.len(), 6);
        assert_eq!(manifest.labels().len(), 6);
        assert!(videos.iter().all(|v| (v.height(), v.width(), v.length()) == (50, 50, 50)));
        for (v, e) in videos.iter().zip(&manifest.entries) {
            assert_eq!(Path::new(&v.source_id), e.path);
            assert!(v.samples().iter().all(|&s| (0.0..=255.0).contains(&s) && s.fract() == 0.0));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_dataset(&spec, a.path()).unwrap();
        write_dataset(&spec, b.path()).unwrap();
        for e in &ma.entries {
            let rel = e.path.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&e.path).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        let back = read_manifest_csv(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, ma);
        let (mem, _) = generate(&spec).unwrap();
        let disk = load_video(&ma.entries[0].path, FormatHint::Auto, 0).unwrap();
        assert_eq!(disk.samples(), mem[0].samples());
        let other = generate(&SynthSpec { seed: 7, ..spec }).unwrap().0;
        assert_ne!(other[0].samples(), mem[0].samples());
    }

    #[test]
    fn static_grating_is_static() {
        let spec = SynthSpec {
            classes: vec![
                ClassSpec {
                    name: "still".into(),
                    generator: Generator::DriftingGrating { orientation_deg: 30.0, frequency: 0.1, speed: 0.0 },
                },
                ClassSpec { name: "noise".into(), generator: Generator::FlickerNoise { temporal_corr: 0.5 } },
            ],
            noise_sigma: 0.0,
            ..tiny()
        };
        let (videos, _) = generate(&spec).unwrap();
        let still = videos.iter().find(|v| v.source_id.starts_with("still")).unwrap();
        for t in 1..still.length() {
            assert_eq!(still.frame(t), still.frame(0));
        }
    }

    fn histogram(v: &GraySequence) -> Vec<f64> {
        let mut h = vec![0.0; 16];
        for &s in v.samples() {
            h[(s as usize) / 16] += 1.0;
        }
        let n = v.samples().len() as f64;
        h.iter().map(|c| c / n).collect()
    }

    #[test]
    fn speed_only_changes_temporal_statistics() {
        let mut spec = SynthSpec::default();
        spec.videos_per_class = 1;
        spec.noise_sigma = 0.0;
        spec.contrast = 60.0;
        let slow = generate_video(&spec, 0, 0).unwrap();
        let mut fast_spec = spec.clone();
        // Same per-video seed stream as the slow video, different speed.
        fast_spec.classes[0].generator = Generator::DriftingGrating {
            orientation_deg: 0.0,
            frequency: DEFAULT_GRATING_FREQUENCY,
            speed: 2.0,
        };
        let fast = generate_video(&fast_spec, 0, 0).unwrap();
        let l1: f64 = histogram(&slow).iter().zip(histogram(&fast)).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 0.1, "per-frame marginals differ: {l1}");
        let diff = |v: &GraySequence| {
            (1..v.length())
                .map(|t| v.frame(t).iter().zip(v.frame(t - 1)).map(|(a, b)| (a - b).abs() as f64).sum::<f64>())
                .sum::<f64>()
        };
        assert!(diff(&fast) > 2.0 * diff(&slow));
    }

    #[test]
    fn frame_means_are_stationary() {
        let spec = SynthSpec { videos_per_class: 2, ..SynthSpec::default() };
        let (videos, _) = generate(&spec).unwrap();
        for v in &videos {
            let means: Vec<f64> = (0..v.length())
                .map(|t| v.frame(t).iter().map(|&s| s as f64).sum::<f64>() / v.frame(t).len() as f64)
                .collect();
            let avg = means.iter().sum::<f64>() / means.len() as f64;
            let drift = means.iter().map(|m| (m - avg).abs()).fold(0.0, f64::max);
            assert!(drift <= 1.0, "{}: drift {drift}", v.source_id);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = tiny();
        s.classes.truncate(1);
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.noise_sigma = -1.0;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.classes[1].name = s.classes[0].name.clone();
        assert!(s.validate().is_err());
    }
}
