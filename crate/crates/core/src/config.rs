//! Pipeline configuration: every tunable in one flat JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cube_sampling::CubeSpec;
use crate::error::{Error, Result};
use crate::feature_maps::Activation;
use crate::fisher::GmmOptions;
use crate::local_features::{Channel, PoolSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Mrsfa,
    Sfa,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrsfa" => Ok(Self::Mrsfa),
            "sfa" => Ok(Self::Sfa),
            _ => Err(Error::InvalidConfig(format!("unknown method {s:?} (mrsfa|sfa)"))),
        }
    }
}

/// Which feature channels make up the video representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FeatureSelection {
    #[default]
    #[serde(rename = "af+vf")]
    AfVf,
    #[serde(rename = "af")]
    Af,
    #[serde(rename = "vf")]
    Vf,
}

impl FeatureSelection {
    pub fn channels(self) -> &'static [Channel] {
        match self {
            Self::AfVf => &[Channel::Appearance, Channel::Variation],
            Self::Af => &[Channel::Appearance],
            Self::Vf => &[Channel::Variation],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AfVf => "af+vf",
            Self::Af => "af",
            Self::Vf => "vf",
        }
    }
}

impl std::str::FromStr for FeatureSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "af+vf" | "vf+af" | "all" => Ok(Self::AfVf),
            "af" => Ok(Self::Af),
            "vf" => Ok(Self::Vf),
            _ => Err(Error::InvalidConfig(format!("unknown feature selection {s:?} (af|vf|af+vf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Filter learner.
    pub method: Method,
    pub cube_height: usize,
    pub cube_width: usize,
    pub cube_length: usize,
    pub elemental_length: usize,
    /// Cubes sampled for filter learning.
    pub n_cubes: usize,
    /// Videos the cubes are drawn from.
    pub filter_videos: usize,
    /// Learn filters from each training split instead of once.
    pub filters_per_split: bool,
    /// Whitened state dimension `m`.
    pub pca_dim: usize,
    pub knn_k: usize,
    /// Similarity bandwidth; `null` means `pca_dim / 2`.
    pub knn_r: Option<f64>,
    pub lambda: f64,
    pub ridge: f64,
    pub transition_budget: usize,
    pub n_filters: usize,
    pub n_dropped: usize,
    pub group_size: usize,
    pub activation: Activation,
    pub conv_stride: usize,
    pub pool_size: usize,
    pub volume_height: usize,
    pub volume_width: usize,
    pub volume_length: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub scales: Vec<f64>,
    /// Frames kept per video (0 keeps all).
    pub max_frames: usize,
    pub features: FeatureSelection,
    pub reduced_dim: usize,
    pub gmm_k: usize,
    pub gmm_subsample: usize,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
    pub power_alpha: f64,
    pub svm_c: f64,
    pub svm_eps: f64,
    pub svm_max_epochs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::large()
    }
}

impl PipelineConfig {
    /// Settings for full-resolution datasets.
    pub fn large() -> Self {
        let s = 0.5f64.sqrt();
        Self {
            method: Method::Mrsfa,
            cube_height: 7,
            cube_width: 7,
            cube_length: 15,
            elemental_length: 6,
            n_cubes: 100_000,
            filter_videos: 100,
            filters_per_split: false,
            pca_dim: 64,
            knn_k: 5,
            knn_r: None,
            lambda: 0.1,
            ridge: crate::linalg::DEFAULT_RIDGE,
            transition_budget: 100_000,
            n_filters: 24,
            n_dropped: 1,
            group_size: 8,
            activation: Activation::Abs,
            conv_stride: 1,
            pool_size: 4,
            volume_height: 8,
            volume_width: 8,
            volume_length: 15,
            spatial_stride: 1,
            temporal_stride: 3,
            scales: vec![1.0, s, 0.5, 0.5 * s, 0.25],
            max_frames: 256,
            features: FeatureSelection::AfVf,
            reduced_dim: 48,
            gmm_k: 16,
            gmm_subsample: 16_000,
            gmm_max_iters: 100,
            gmm_tol: 1e-6,
            power_alpha: 0.5,
            svm_c: 1.0,
            svm_eps: 1e-4,
            svm_max_epochs: 1000,
            seed: 0,
        }
    }

    /// Settings for 50×50 videos.
    pub fn small() -> Self {
        let s = 0.5f64.sqrt();
        Self {
            pool_size: 2,
            volume_height: 6,
            volume_width: 6,
            volume_length: 9,
            scales: vec![2.0, 1.0 / s, 1.0, s, 0.5],
            ..Self::large()
        }
    }

    /// The small-video settings scaled down so the synthetic benchmark runs
    /// in minutes on one core.
    pub fn synth() -> Self {
        Self {
            n_cubes: 4_000,
            transition_budget: 12_000,
            scales: vec![1.0, 0.5f64.sqrt()],
            ..Self::small()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "large" | "default" => Ok(Self::large()),
            "small" => Ok(Self::small()),
            "synth" => Ok(Self::synth()),
            _ => Err(Error::InvalidConfig(format!(
                "unknown preset {name:?} (large|small|synth)"
            ))),
        }
    }

    pub fn cube_spec(&self) -> Result<CubeSpec> {
        CubeSpec::new(
            self.cube_height,
            self.cube_width,
            self.cube_length,
            self.elemental_length,
        )
    }

    pub fn pool_spec(&self) -> Result<PoolSpec> {
        PoolSpec::new(
            self.volume_height,
            self.volume_width,
            self.volume_length,
            self.spatial_stride,
            self.temporal_stride,
        )
    }

    pub fn knn_bandwidth(&self) -> f64 {
        self.knn_r.unwrap_or(self.pca_dim as f64 / 2.0)
    }

    pub fn n_groups(&self) -> usize {
        self.n_filters.div_ceil(self.group_size.max(1))
    }

    pub fn gmm_options(&self, seed: u64) -> GmmOptions {
        GmmOptions {
            k: self.gmm_k,
            max_iters: self.gmm_max_iters,
            tol: self.gmm_tol,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cube = self.cube_spec()?;
        cube.check_learnable()?;
        self.pool_spec()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.pca_dim == 0 || self.pca_dim > cube.state_dim() {
            return bad(format!("pca_dim {} must be in 1..={}", self.pca_dim, cube.state_dim()));
        }
        if self.n_filters == 0 || self.n_filters + self.n_dropped > self.pca_dim {
            return bad(format!(
                "n_filters + n_dropped = {} exceeds pca_dim {}",
                self.n_filters + self.n_dropped,
                self.pca_dim
            ));
        }
        if self.group_size == 0 {
            return bad("group_size must be positive".into());
        }
        if self.knn_k == 0 || !(self.knn_bandwidth() > 0.0) {
            return bad("knn_k and knn_r must be positive".into());
        }
        if !(self.lambda >= 0.0) || !(self.ridge >= 0.0) {
            return bad("lambda and ridge must be nonnegative".into());
        }
        if self.conv_stride == 0 || self.pool_size == 0 {
            return bad("conv_stride and pool_size must be positive".into());
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("scales must be a nonempty list of positive numbers".into());
        }
        if self.n_cubes == 0 || self.filter_videos == 0 || self.transition_budget == 0 {
            return bad("n_cubes, filter_videos and transition_budget must be positive".into());
        }
        if self.reduced_dim == 0 || self.reduced_dim > 12 * self.group_size {
            return bad(format!("reduced_dim must be in 1..={}", 12 * self.group_size));
        }
        if self.gmm_k == 0 || self.gmm_subsample < 10 * self.gmm_k || self.gmm_max_iters == 0 {
            return bad("gmm_subsample must be at least 10 * gmm_k".into());
        }
        if !(self.power_alpha > 0.0 && self.power_alpha <= 1.0) {
            return bad("power_alpha must lie in (0, 1]".into());
        }
        if !(self.svm_c > 0.0) || !(self.svm_eps > 0.0) || self.svm_max_epochs == 0 {
            return bad("svm_c, svm_eps and svm_max_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Overrides one key. The value is parsed as JSON, falling back to a
    /// plain string (so `method=sfa` works without quotes).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let obj = doc.as_object_mut().expect("config is an object");
        if !obj.contains_key(key) {
            return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
        }
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        obj.insert(key.to_string(), parsed);
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::InvalidConfig(format!("{key}={value}: {e}")))?;
        Ok(())
    }

    /// `(key, default as JSON)` for every key, in declaration order.
    pub fn keys_with_values(&self) -> Vec<(String, String)> {
        let doc = serde_json::to_value(self).expect("config serializes");
        let obj = doc.as_object().expect("config is an object");
        obj.iter().map(|(k, v)| (k.clone(), v.to_string())).collect()
    }

    /// Compact JSON embedded in model files.
    pub fn provenance_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_as_declared() {
        let c = PipelineConfig::default();
        assert_eq!(c.cube_spec().unwrap(), CubeSpec::new(7, 7, 15, 6).unwrap());
        assert_eq!((c.pca_dim, c.knn_k, c.knn_bandwidth(), c.lambda), (64, 5, 32.0, 0.1));
        assert_eq!((c.n_filters, c.n_dropped, c.group_size, c.n_groups()), (24, 1, 8, 3));
        assert_eq!(c.activation, Activation::Abs);
        assert_eq!((c.conv_stride, c.pool_size), (1, 4));
        assert_eq!(c.pool_spec().unwrap(), PoolSpec::new(8, 8, 15, 1, 3).unwrap());
        assert_eq!((c.max_frames, c.gmm_k, c.gmm_subsample), (256, 16, 16_000));
        assert_eq!((c.power_alpha, c.svm_c, c.transition_budget), (0.5, 1.0, 100_000));
        assert_eq!(c.scales.len(), 5);
        let s = PipelineConfig::small();
        assert_eq!(s.pool_size, 2);
        assert_eq!(s.pool_spec().unwrap(), PoolSpec::new(6, 6, 9, 1, 3).unwrap());
        assert_eq!(s.scales[0], 2.0);
        for p in ["large", "small", "synth"] {
            PipelineConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn overrides() {
        let mut c = PipelineConfig::default();
        c.set("lambda", "0.25").unwrap();
        c.set("method", "sfa").unwrap();
        c.set("scales", "[1, 0.5]").unwrap();
        c.set("features", "af").unwrap();
        assert_eq!((c.lambda, c.method, c.features), (0.25, Method::Sfa, FeatureSelection::Af));
        assert_eq!(c.scales, vec![1.0, 0.5]);
        assert!(c.set("no_such_key", "1").is_err());
        assert!(c.set("gmm_k", "\"many\"").is_err());
        assert_eq!(c.keys_with_values().len(), serde_json::to_value(&c).unwrap().as_object().unwrap().len());
        assert!(PipelineConfig::from_json("{\"bogus\": 1}").is_err());
        assert_eq!(PipelineConfig::from_json("{\"lambda\": 0.5}").unwrap().pca_dim, 64);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = PipelineConfig::default();
        c.n_filters = 70;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.volume_height = 7;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.elemental_length = 15;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip(lambda in 0.0f64..10.0, k in 1usize..50, seed in any::<u64>(), alpha in 0.01f64..1.0,
                           scales in proptest::collection::vec(0.1f64..3.0, 1..6), r in proptest::option::of(0.1f64..100.0)) {
            let c = PipelineConfig { lambda, gmm_k: k, seed, power_alpha: alpha, scales, knn_r: r, ..PipelineConfig::small() };
            prop_assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c.clone());
            prop_assert_eq!(PipelineConfig::from_json(&c.provenance_json()).unwrap(), c);
        }
    }
}
