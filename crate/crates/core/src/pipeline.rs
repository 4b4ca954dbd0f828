//! End-to-end orchestration: filter learning, multi-scale extraction,
//! encoder fitting, SVM training and evaluation protocols.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{make_splits, predict, train_svm, EvalReport, LinearOvaSvm, Protocol, Split, SvmOptions};
use crate::config::{FeatureSelection, Method, PipelineConfig};
use crate::cube_sampling::{extract_cube, reformat, sample_positions, RawCube};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::feature_maps::{appearance_maps, pooled_maps, variation_maps};
use crate::filter_bank::{compose_filters, group_filters, FilterBank};
use crate::fisher::{l2_normalize, FisherEncoder, SetKey, VideoEncoder};
use crate::linalg::{whitening_from_moments, MomentAccumulator, WhiteningTransform};
use crate::local_features::{pool_volume, Channel, LocalFeatureSet};
use crate::mrsfa::{drop_noisy, fit_mrsfa, fit_sfa, knn_similarity, TransitionSet};
use crate::video_io::{load_video, rescale, FormatHint, GraySequence, VideoManifest};

/// Manifest split naming the designated filter-learning videos.
pub const FILTER_SPLIT: &str = "filters";

enum Source {
    Memory(Vec<GraySequence>),
    Files(Vec<PathBuf>),
}

/// Labeled videos, either in memory or loaded on demand.
pub struct Dataset {
    pub class_names: Vec<String>,
    /// Index into `class_names` per video.
    pub labels: Vec<usize>,
    pub splits: Vec<Option<String>>,
    pub max_frames: usize,
    source: Source,
}

impl Dataset {
    pub fn from_manifest(manifest: &VideoManifest, max_frames: usize) -> Result<Self> {
        let paths = manifest.entries.iter().map(|e| e.path.clone()).collect();
        Self::build(manifest, Source::Files(paths), max_frames)
    }

    /// `videos[i]` belongs to `manifest.entries[i]`.
    pub fn in_memory(videos: Vec<GraySequence>, manifest: &VideoManifest, max_frames: usize) -> Result<Self> {
        if videos.len() != manifest.len() {
            return Err(Error::DimMismatch {
                expected: manifest.len(),
                got: videos.len(),
            });
        }
        Self::build(manifest, Source::Memory(videos), max_frames)
    }

    fn build(manifest: &VideoManifest, source: Source, max_frames: usize) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let class_names = manifest.labels();
        let labels = manifest
            .entries
            .iter()
            .map(|e| class_names.binary_search(&e.label).expect("label listed"))
            .collect();
        Ok(Self {
            class_names,
            labels,
            splits: manifest.entries.iter().map(|e| e.split.clone()).collect(),
            max_frames,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn video(&self, i: usize) -> Result<GraySequence> {
        let v = match &self.source {
            Source::Memory(v) => v[i].clone(),
            Source::Files(p) => load_video(&p[i], FormatHint::Auto, 0)?,
        };
        Ok(if self.max_frames > 0 { v.truncated(self.max_frames) } else { v })
    }

    /// Videos whose manifest split is exactly `name`.
    pub fn designated(&self, name: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i].as_deref() == Some(name))
            .collect()
    }

    /// Videos available for training: everything not marked `test` or
    /// `filters`.
    pub fn training_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !matches!(self.splits[i].as_deref(), Some("test") | Some(FILTER_SPLIT)))
            .collect()
    }

    /// The designated filter-learning videos, else the training videos.
    pub fn filter_indices(&self) -> Vec<usize> {
        let d = self.designated(FILTER_SPLIT);
        if d.is_empty() {
            self.training_indices()
        } else {
            d
        }
    }

    /// Videos whose manifest split equals `name`; every video when no
    /// entry carries a split.
    pub fn split_indices(&self, name: &str) -> Vec<usize> {
        if self.splits.iter().all(Option::is_none) {
            return (0..self.len()).collect();
        }
        (0..self.len())
            .filter(|&i| self.splits[i].as_deref() == Some(name))
            .collect()
    }
}

/// Learns the filter bank from cubes sampled in (a seeded subset of) the
/// given videos.
pub fn learn_filters(ds: &Dataset, candidates: &[usize], cfg: &PipelineConfig) -> Result<FilterBank> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = cfg.cube_spec()?;
    let videos: Vec<usize> = if candidates.len() > cfg.filter_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "filter_videos", 0));
        let mut pick: Vec<usize> = index::sample(&mut rng, candidates.len(), cfg.filter_videos)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        pick.sort_unstable();
        pick
    } else {
        candidates.to_vec()
    };

    let sizes = videos
        .par_iter()
        .map(|&v| ds.video(v).map(|s| (s.height(), s.width(), s.length())))
        .collect::<Result<Vec<_>>>()?;
    let positions = sample_positions(&sizes, cfg.n_cubes, &spec, derive_seed(cfg.seed, "cubes", 0))?;
    let mut by_video: Vec<Vec<usize>> = vec![Vec::new(); videos.len()];
    for (i, p) in positions.iter().enumerate() {
        by_video[p.video].push(i);
    }
    let extracted = by_video
        .par_iter()
        .enumerate()
        .map(|(vi, idx)| {
            if idx.is_empty() {
                return Ok(Vec::new());
            }
            let v = ds.video(videos[vi])?;
            Ok(idx.iter().map(|&i| (i, extract_cube(&v, &positions[i], &spec))).collect())
        })
        .collect::<Result<Vec<Vec<(usize, RawCube)>>>>()?;
    let mut cubes: Vec<Option<RawCube>> = vec![None; positions.len()];
    for (i, c) in extracted.into_iter().flatten() {
        cubes[i] = Some(c);
    }
    let cubes: Vec<RawCube> = cubes.into_iter().map(|c| c.expect("every cube extracted")).collect();
    log::info!("sampled {} cubes from {} videos", cubes.len(), videos.len());

    let whitener = fit_state_whitener(&cubes, cfg)?;
    let transitions = sampled_transitions(&cubes, &whitener, cfg)?;
    log::info!("{} transitions in {} dimensions", transitions.len(), transitions.dim());
    let q = cfg.n_filters + cfg.n_dropped;
    let all = match cfg.method {
        Method::Mrsfa => {
            let graph = knn_similarity(&transitions.initial_states, cfg.knn_k, cfg.knn_bandwidth())?;
            fit_mrsfa(&transitions, &graph, cfg.lambda, cfg.ridge)?
        }
        Method::Sfa => fit_sfa(&transitions, q)?,
    };
    let proj = drop_noisy(&all, cfg.n_dropped)?.leading(cfg.n_filters);
    let mut fb = group_filters(&compose_filters(&whitener, &proj, &spec)?, cfg.group_size);
    fb.config_json = Some(cfg.provenance_json());
    Ok(fb)
}

/// PCA whitening of all elemental cubes, from streamed moments.
fn fit_state_whitener(cubes: &[RawCube], cfg: &PipelineConfig) -> Result<WhiteningTransform> {
    let mut acc = MomentAccumulator::new(cfg.cube_spec()?.state_dim());
    for chunk in cubes.chunks(256) {
        let states = chunk
            .iter()
            .map(|c| reformat(c, &c.spec).map(|s| s.states))
            .collect::<Result<Vec<_>>>()?;
        let cols: Vec<_> = states.iter().flat_map(|s| s.column_iter()).collect();
        acc.add_columns(&DMatrix::from_columns(&cols))?;
    }
    let (mean, cov) = acc.finish()?;
    whitening_from_moments(mean, cov, cfg.pca_dim, None)
}

/// A seeded subset of at most `transition_budget` whitened transitions.
fn sampled_transitions(
    cubes: &[RawCube],
    whitener: &WhiteningTransform,
    cfg: &PipelineConfig,
) -> Result<TransitionSet> {
    let steps = cfg.cube_spec()?.elemental_count() - 1;
    let total = cubes.len() * steps;
    let budget = cfg.transition_budget.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "transitions", 0));
    let mut chosen = index::sample(&mut rng, total, budget).into_vec();
    chosen.sort_unstable();
    let m = whitener.out_dim();
    let mut initial_states = DMatrix::zeros(m, budget);
    let mut variations = DMatrix::zeros(m, budget);
    let mut cached: Option<(usize, DMatrix<f64>)> = None;
    for (col, &flat) in chosen.iter().enumerate() {
        let (c, i) = (flat / steps, flat % steps);
        if cached.as_ref().is_none_or(|(k, _)| *k != c) {
            let states = reformat(&cubes[c], &cubes[c].spec)?.states;
            cached = Some((c, whitener.apply_columns(&states)?));
        }
        let w = &cached.as_ref().expect("cached").1;
        initial_states.set_column(col, &w.column(i));
        variations.set_column(col, &(w.column(i) - w.column(i + 1)));
    }
    Ok(TransitionSet {
        initial_states,
        variations,
    })
}

/// Layout of the feature sets: channel-major, then group.
pub fn set_keys(n_groups: usize, features: FeatureSelection) -> Vec<SetKey> {
    features
        .channels()
        .iter()
        .flat_map(|&channel| (0..n_groups).map(move |group| SetKey { group, channel }))
        .collect()
}

/// Local feature sets of one video, pooled over every usable scale.
/// Scales at which the maps cannot hold one pooling volume are skipped.
pub fn extract_video(video: &GraySequence, fb: &FilterBank, cfg: &PipelineConfig) -> Result<Vec<LocalFeatureSet>> {
    let pool = cfg.pool_spec()?;
    let keys = set_keys(fb.groups.len(), cfg.features);
    let mut sets: Vec<LocalFeatureSet> = keys
        .iter()
        .map(|k| LocalFeatureSet::empty(12 * fb.groups[k.group].len(), k.group, k.channel))
        .collect();
    let want = |c: Channel| cfg.features.channels().contains(&c);
    for (si, &scale) in cfg.scales.iter().enumerate() {
        let scaled = match rescale(video, scale) {
            Ok(v) => v,
            Err(Error::DegenerateSize) => {
                log::warn!("scale {scale}: video degenerates; skipped");
                continue;
            }
            Err(e) => return Err(e),
        };
        let maps_h = scaled.height().saturating_sub(fb.spec.height) / cfg.conv_stride + 1;
        let maps_w = scaled.width().saturating_sub(fb.spec.width) / cfg.conv_stride + 1;
        let fits = scaled.height() >= fb.spec.height
            && scaled.width() >= fb.spec.width
            && pool
                .grid(maps_h.div_ceil(cfg.pool_size), maps_w.div_ceil(cfg.pool_size), scaled.length() - 1)
                .is_some();
        if !fits {
            log::warn!(
                "scale {scale}: {}x{}x{} video too small for the pooling volume; skipped",
                scaled.height(),
                scaled.width(),
                scaled.length()
            );
            continue;
        }
        for (g, range) in fb.groups.iter().enumerate() {
            let biases: Vec<f64> = fb.bias.as_slice()[range.clone()].to_vec();
            let pooled = pooled_maps(
                &scaled,
                &fb.slim[range.clone()],
                &biases,
                cfg.activation,
                cfg.conv_stride,
                cfg.pool_size,
            )?;
            for (channel, stack) in [
                (Channel::Appearance, want(Channel::Appearance).then(|| Ok(appearance_maps(&pooled)))),
                (Channel::Variation, want(Channel::Variation).then(|| variation_maps(&pooled))),
            ] {
                let Some(stack) = stack else { continue };
                let part = pool_volume(&stack?, &pool, g, channel, si)?;
                let k = keys
                    .iter()
                    .position(|k| *k == SetKey { group: g, channel })
                    .expect("key in layout");
                sets[k].extend(part)?;
            }
        }
    }
    Ok(sets)
}

/// At most `quota` features of each set, chosen with a seeded sampler.
pub fn sample_features(sets: &[LocalFeatureSet], quota: usize, seed: u64) -> Vec<LocalFeatureSet> {
    sets.iter()
        .enumerate()
        .map(|(i, s)| {
            if s.len() <= quota {
                return s.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "set", i as u64));
            let mut idx = index::sample(&mut rng, s.len(), quota).into_vec();
            idx.sort_unstable();
            s.select(&idx)
        })
        .collect()
}

/// Fits one reducer + GMM per set from per-video samples of the training
/// videos, capped at `gmm_subsample` features per set.
pub fn fit_video_encoder(
    samples: &[&[LocalFeatureSet]],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<VideoEncoder> {
    let Some(first) = samples.first() else {
        return Err(Error::EmptyData);
    };
    let encoders = (0..first.len())
        .map(|k| {
            let mut pool = LocalFeatureSet::empty(first[k].dim, first[k].group, first[k].channel);
            for s in samples {
                pool.extend(s[k].clone())?;
            }
            let pool = sample_features(&[pool], cfg.gmm_subsample, derive_seed(seed, "gmm_pool", k as u64))
                .pop()
                .expect("one set");
            let opts = cfg.gmm_options(derive_seed(seed, "gmm", k as u64));
            FisherEncoder::fit(&pool, cfg.reduced_dim, &opts, cfg.power_alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoEncoder {
        encoders,
        config_json: Some(cfg.provenance_json()),
    })
}

/// Normalized Fisher vector blocks of one video, in encoder order.
pub fn encode_blocks(sets: &[LocalFeatureSet], enc: &VideoEncoder) -> Result<Vec<Vec<f64>>> {
    enc.encoders
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let set = sets
                .iter()
                .find(|s| SetKey::of(s) == e.key)
                .ok_or(Error::MissingSet(i))?;
            e.encode(set)
        })
        .collect()
}

/// Concatenates the blocks whose channel is selected and L2-normalizes.
pub fn assemble(blocks: &[Vec<f64>], keys: &[SetKey], selection: FeatureSelection) -> Vec<f64> {
    let mut v: Vec<f64> = blocks
        .iter()
        .zip(keys)
        .filter(|(_, k)| selection.channels().contains(&k.channel))
        .flat_map(|(b, _)| b.iter().copied())
        .collect();
    l2_normalize(&mut v);
    v
}

fn svm_options(cfg: &PipelineConfig, seed: u64) -> SvmOptions {
    SvmOptions {
        c: cfg.svm_c,
        eps: cfg.svm_eps,
        max_epochs: cfg.svm_max_epochs,
        seed,
    }
}

/// Per-video GMM samples, sized so that any `min_train` videos supply
/// `gmm_subsample` features per set.
fn gmm_samples(
    ds: &Dataset,
    videos: &[usize],
    fb: &FilterBank,
    cfg: &PipelineConfig,
    min_train: usize,
) -> Result<Vec<Vec<LocalFeatureSet>>> {
    let quota = cfg.gmm_subsample.div_ceil(min_train.max(1));
    videos
        .par_iter()
        .map(|&v| {
            let sets = extract_video(&ds.video(v)?, fb, cfg)?;
            Ok(sample_features(&sets, quota, derive_seed(cfg.seed, "gmm_sample", v as u64)))
        })
        .collect()
}

/// Fits the encoder and the SVM on the given training videos.
pub fn train_models(
    ds: &Dataset,
    train: &[usize],
    fb: &FilterBank,
    cfg: &PipelineConfig,
) -> Result<(VideoEncoder, LinearOvaSvm)> {
    if train.is_empty() {
        return Err(Error::EmptyData);
    }
    let samples = gmm_samples(ds, train, fb, cfg, train.len())?;
    let refs: Vec<&[LocalFeatureSet]> = samples.iter().map(Vec::as_slice).collect();
    let enc = fit_video_encoder(&refs, cfg, derive_seed(cfg.seed, "encoder", 0))?;
    let reps = train
        .par_iter()
        .map(|&v| {
            let sets = extract_video(&ds.video(v)?, fb, cfg)?;
            Ok(assemble(&encode_blocks(&sets, &enc)?, &enc.keys(), FeatureSelection::AfVf))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = train.iter().map(|&v| ds.labels[v]).collect();
    let (mut svm, _) = train_svm(&reps, &labels, &ds.class_names, &svm_options(cfg, derive_seed(cfg.seed, "svm", 0)))?;
    svm.config_json = Some(cfg.provenance_json());
    Ok((enc, svm))
}

/// `(truth, prediction)` for each video under fitted models.
pub fn classify(
    ds: &Dataset,
    videos: &[usize],
    fb: &FilterBank,
    enc: &VideoEncoder,
    svm: &LinearOvaSvm,
    cfg: &PipelineConfig,
) -> Result<Vec<(usize, usize)>> {
    let index_of: Vec<Option<usize>> = ds
        .class_names
        .iter()
        .map(|n| svm.labels.iter().position(|l| l == n))
        .collect();
    videos
        .par_iter()
        .map(|&v| {
            let sets = extract_video(&ds.video(v)?, fb, cfg)?;
            let rep = assemble(&encode_blocks(&sets, enc)?, &enc.keys(), FeatureSelection::AfVf);
            let (p, _) = predict(svm, &rep)?;
            let truth = index_of[ds.labels[v]].ok_or_else(|| {
                Error::InvalidManifest(format!("label {} unknown to the model", ds.class_names[ds.labels[v]]))
            })?;
            Ok((truth, p))
        })
        .collect()
}

/// Result of an evaluation protocol, one report per feature selection.
pub struct Evaluation {
    pub reports: Vec<(FeatureSelection, EvalReport)>,
    pub filters: FilterBank,
    /// Frames per second of feature extraction.
    pub fps: f64,
}

/// Runs `protocol`, refitting encoders and SVMs per split. Filters are
/// shared when given, or learned once from the videos whose manifest split
/// is `filters` (these take no part in the protocol). Otherwise, or when
/// `filters_per_split` is set, each split learns its own filters from its
/// training videos. Every selection in `ablations` must be covered by
/// `cfg.features`.
pub fn evaluate(
    ds: &Dataset,
    cfg: &PipelineConfig,
    protocol: &Protocol,
    filters: Option<&FilterBank>,
    ablations: &[FeatureSelection],
) -> Result<Evaluation> {
    cfg.validate()?;
    for a in ablations {
        if a.channels().iter().any(|c| !cfg.features.channels().contains(c)) {
            return Err(Error::InvalidConfig(format!(
                "ablation {} needs channels not in features = {}",
                a.name(),
                cfg.features.name()
            )));
        }
    }
    let ablations = if ablations.is_empty() { vec![cfg.features] } else { ablations.to_vec() };
    let designated = ds.designated(FILTER_SPLIT);
    let pool: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.splits[i].as_deref() != Some(FILTER_SPLIT))
        .collect();
    let pool_labels: Vec<usize> = pool.iter().map(|&i| ds.labels[i]).collect();
    let splits: Vec<Split> = make_splits(&pool_labels, &ds.class_names, protocol, cfg.seed)?
        .into_iter()
        .map(|s| Split {
            train: s.train.iter().map(|&i| pool[i]).collect(),
            test: s.test.iter().map(|&i| pool[i]).collect(),
        })
        .collect();
    let shared = match filters {
        Some(fb) => Some(fb.clone()),
        None if !cfg.filters_per_split && !designated.is_empty() => Some(learn_filters(ds, &designated, cfg)?),
        None => {
            log::info!("learning filters from the training videos of each split");
            None
        }
    };
    let min_train = splits.iter().map(|s| s.train.len()).min().unwrap_or(1);
    let cached = match &shared {
        Some(fb) => Some(gmm_samples(ds, &pool, fb, cfg, min_train)?),
        None => None,
    };

    let mut extract_secs = 0.0;
    let mut frames = 0usize;
    let mut preds: Vec<Vec<Vec<(usize, usize)>>> = vec![Vec::new(); ablations.len()];
    let mut last_fb = shared.clone();
    for (s, Split { train, test }) in splits.iter().enumerate() {
        let split_seed = derive_seed(cfg.seed, "split_models", s as u64);
        let (fb, local);
        match (&shared, &cached) {
            (Some(f), Some(c)) => {
                fb = f.clone();
                local = train
                    .iter()
                    .map(|&v| c[pool.binary_search(&v).expect("video in pool")].clone())
                    .collect::<Vec<_>>();
            }
            _ => {
                let split_cfg = PipelineConfig { seed: split_seed, ..cfg.clone() };
                fb = learn_filters(ds, train, &split_cfg)?;
                local = gmm_samples(ds, train, &fb, cfg, train.len())?;
            }
        }
        let refs: Vec<&[LocalFeatureSet]> = local.iter().map(Vec::as_slice).collect();
        let enc = fit_video_encoder(&refs, cfg, split_seed)?;
        let keys = enc.keys();

        let started = Instant::now();
        let mut videos: Vec<usize> = train.iter().chain(test).copied().collect();
        videos.sort_unstable();
        let blocks = videos
            .par_iter()
            .map(|&v| {
                let video = ds.video(v)?;
                let n = video.length();
                Ok((n, encode_blocks(&extract_video(&video, &fb, cfg)?, &enc)?))
            })
            .collect::<Result<Vec<_>>>()?;
        extract_secs += started.elapsed().as_secs_f64();
        frames += blocks.iter().map(|b| b.0).sum::<usize>();
        let block_of = |v: usize| &blocks[videos.binary_search(&v).expect("video encoded")].1;

        for (a, &sel) in ablations.iter().enumerate() {
            let reps: Vec<Vec<f64>> = train.iter().map(|&v| assemble(block_of(v), &keys, sel)).collect();
            let labels: Vec<usize> = train.iter().map(|&v| ds.labels[v]).collect();
            let (svm, _) = train_svm(&reps, &labels, &ds.class_names, &svm_options(cfg, split_seed))?;
            let p = test
                .iter()
                .map(|&v| Ok((ds.labels[v], predict(&svm, &assemble(block_of(v), &keys, sel))?.0)))
                .collect::<Result<Vec<_>>>()?;
            let right = p.iter().filter(|(t, q)| t == q).count();
            log::info!("split {s} [{}]: {right}/{} correct", sel.name(), p.len());
            preds[a].push(p);
        }
        last_fb = Some(fb);
    }
    let fps = if extract_secs > 0.0 { frames as f64 / extract_secs } else { 0.0 };
    log::info!("feature extraction + encoding: {frames} frames in {extract_secs:.1} s ({fps:.1} frames/s)");

    let config = serde_json::to_value(cfg)?;
    let reports = ablations
        .iter()
        .zip(preds)
        .map(|(&sel, p)| {
            let mut r = EvalReport::from_predictions(protocol, cfg.seed, &ds.class_names, &p);
            r.config = Some(config.clone());
            (sel, r)
        })
        .collect();
    Ok(Evaluation {
        reports,
        filters: last_fb.expect("at least one split"),
        fps,
    })
}
