//! Diagonal-covariance GMMs and Fisher-vector encoding.
//!
//! Sums over samples are computed in fixed-size chunks that are reduced in
//! chunk order, so results do not depend on the number of worker threads.
//!
//! Encoder file `encoder.sfe` (u32 and f64 little endian):
//!
//! ```text
//! "SFE1" n_sets K d power_alpha:f64
//! per set: group channel in_dim out_dim mean[in_dim] projection[out_dim × in_dim, row-major]
//!          weights[K] means[K × out_dim] variances[K × out_dim] var_floor:f64
//! config_len config_json
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg::WhiteningTransform;
use crate::local_features::{fit_reducer, reduce48, Channel, LocalFeatureSet};

pub const SFE_MAGIC: &[u8; 4] = b"SFE1";
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub k: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    /// `k × d`, cluster-major.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub var_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the per-sample log-likelihood gains less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            k: 16,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// A fitted model with its training trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood per sample before each M-step and after the last.
    pub log_likelihoods: Vec<f64>,
    /// Whether the M-step that followed entry `i` reseeded a cluster.
    pub reseeded: Vec<bool>,
    pub converged: bool,
}

impl GmmModel {
    fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.d..(k + 1) * self.d]
    }

    fn var(&self, k: usize) -> &[f64] {
        &self.variances[k * self.d..(k + 1) * self.d]
    }

    /// Posteriors into `out`; returns the sample log-likelihood.
    fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        Scorer::new(self).posteriors_into(x, out)
    }

    /// Posterior responsibilities `γ(k)` of one sample.
    pub fn posteriors(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.posteriors_into(x, &mut out);
        out
    }

    /// Mean log-likelihood per sample of column-major `data`.
    pub fn mean_log_likelihood(&self, data: &[f64]) -> f64 {
        let n = data.len() / self.d;
        let scorer = Scorer::new(self);
        let total: f64 = chunked(data, self.d, |chunk| {
            let mut post = vec![0.0; self.k];
            chunk
                .chunks_exact(self.d)
                .map(|x| scorer.posteriors_into(x, &mut post))
                .sum::<f64>()
        })
        .into_iter()
        .sum();
        total / n as f64
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.k * self.d;
        if self.k == 0
            || self.d == 0
            || self.weights.len() != self.k
            || self.means.len() != n
            || self.variances.len() != n
        {
            return Err(Error::InvalidGmm("inconsistent sizes".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-10 || self.weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::InvalidGmm(format!("weights sum to {s}")));
        }
        if self.variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidGmm("nonpositive variance".into()));
        }
        if self.means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }
}

/// Per-cluster constants of a model, computed once per pass over the data.
struct Scorer<'a> {
    model: &'a GmmModel,
    /// `ln π_k − ½(d ln 2π + Σ ln σ²_k)`.
    offset: Vec<f64>,
    inv_var: Vec<f64>,
}

impl<'a> Scorer<'a> {
    fn new(model: &'a GmmModel) -> Self {
        let c = model.d as f64 * (2.0 * PI).ln();
        let offset = (0..model.k)
            .map(|k| {
                let logdet: f64 = model.var(k).iter().map(|v| v.ln()).sum();
                model.weights[k].ln() - 0.5 * (c + logdet)
            })
            .collect();
        Self {
            model,
            offset,
            inv_var: model.variances.iter().map(|v| 1.0 / v).collect(),
        }
    }

    fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let d = self.model.d;
        for (k, o) in out.iter_mut().enumerate() {
            let m = self.model.mean(k);
            let iv = &self.inv_var[k * d..(k + 1) * d];
            let q: f64 = (0..d).map(|i| (x[i] - m[i]) * (x[i] - m[i]) * iv[i]).sum();
            *o = self.offset[k] - 0.5 * q;
        }
        let top = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - top).exp();
            sum += *v;
        }
        out.iter_mut().for_each(|v| *v /= sum);
        top + sum.ln()
    }
}

/// Maps fixed-size sample chunks in parallel and returns results in order.
fn chunked<T: Send>(data: &[f64], d: usize, f: impl Fn(&[f64]) -> T + Sync + Send) -> Vec<T> {
    data.par_chunks(CHUNK * d).map(f).collect()
}

struct Stats {
    n: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    ll: f64,
}

impl Stats {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            n: vec![0.0; k],
            s1: vec![0.0; k * d],
            s2: vec![0.0; k * d],
            ll: 0.0,
        }
    }

    fn add(&mut self, o: &Stats) {
        for (a, b) in self.n.iter_mut().zip(&o.n) {
            *a += b;
        }
        for (a, b) in self.s1.iter_mut().zip(&o.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&o.s2) {
            *a += b;
        }
        self.ll += o.ll;
    }
}

fn e_step(model: &GmmModel, data: &[f64]) -> Stats {
    let (k, d) = (model.k, model.d);
    let scorer = Scorer::new(model);
    let parts = chunked(data, d, |chunk| {
        let mut st = Stats::zeros(k, d);
        let mut post = vec![0.0; k];
        for x in chunk.chunks_exact(d) {
            st.ll += scorer.posteriors_into(x, &mut post);
            for (c, &g) in post.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                st.n[c] += g;
                let m = model.mean(c);
                for i in 0..d {
                    // Centered on the current mean to limit cancellation.
                    let z = x[i] - m[i];
                    st.s1[c * d + i] += g * z;
                    st.s2[c * d + i] += g * z * z;
                }
            }
        }
        st
    });
    let mut total = Stats::zeros(k, d);
    for p in &parts {
        total.add(p);
    }
    total
}

fn global_moments(data: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (data.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for x in data.chunks_exact(d) {
        for i in 0..d {
            mean[i] += x[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in data.chunks_exact(d) {
        for i in 0..d {
            var[i] += (x[i] - mean[i]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means++ centers.
fn kmeans_pp(data: &[f64], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / d;
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&data[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = data.chunks_exact(d).map(|x| sq_dist(x, &centers[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, &v) in dist.iter().enumerate() {
                acc += v;
                if acc > u {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = data[pick * d..(pick + 1) * d].to_vec();
        for (x, dv) in data.chunks_exact(d).zip(dist.iter_mut()) {
            *dv = dv.min(sq_dist(x, &c));
        }
        centers.extend(c);
    }
    centers
}

/// Index of the sample farthest from every current mean.
fn farthest_point(model: &GmmModel, data: &[f64]) -> usize {
    let d = model.d;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in data.chunks_exact(d).enumerate() {
        let near = (0..model.k)
            .map(|k| sq_dist(x, model.mean(k)))
            .fold(f64::INFINITY, f64::min);
        if near > best.1 {
            best = (i, near);
        }
    }
    best.0
}

/// EM for a diagonal-covariance mixture on column-major `data` (`d` values
/// per sample). Initialized from seeded k-means++ centers, uniform weights
/// and the global variances; variances are floored at `1e-6` times the mean
/// global variance.
pub fn fit_gmm(data: &[f64], d: usize, opts: &GmmOptions) -> Result<GmmFit> {
    let k = opts.k;
    if k == 0 || d == 0 || data.len() % d != 0 {
        return Err(Error::InvalidGmm(format!("bad sizes k={k} d={d}")));
    }
    let n = data.len() / d;
    if n < 10 * k {
        return Err(Error::TooFewSamples { needed: 10 * k, got: n });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (_, gvar) = global_moments(data, d);
    let mean_var = gvar.iter().sum::<f64>() / d as f64;
    let var_floor = if mean_var > 0.0 { 1e-6 * mean_var } else { 1e-12 };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = GmmModel {
        k,
        d,
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp(data, d, k, &mut rng),
        variances: (0..k).flat_map(|_| gvar.iter().map(|&v| v.max(var_floor))).collect(),
        var_floor,
    };
    let mut lls: Vec<f64> = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    let mut best: Option<(f64, GmmModel)> = None;
    for _ in 0..opts.max_iters {
        let st = e_step(&model, data);
        let ll = st.ll / n as f64;
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, model.clone()));
        }
        if let Some(&prev) = lls.last() {
            if (ll - prev).abs() < opts.tol && !reseeded.last().copied().unwrap_or(false) {
                lls.push(ll);
                converged = true;
                break;
            }
        }
        lls.push(ll);
        let mut did_reseed = false;
        let mut next = model.clone();
        for c in 0..k {
            let nc = st.n[c];
            if nc < 1e-8 * n as f64 || nc < 1e-300 {
                let far = farthest_point(&next, data);
                log::warn!("GMM cluster {c} is empty; reseeding from sample {far}");
                next.means[c * d..(c + 1) * d].copy_from_slice(&data[far * d..(far + 1) * d]);
                for i in 0..d {
                    next.variances[c * d + i] = gvar[i].max(var_floor);
                }
                next.weights[c] = 1.0 / n as f64;
                did_reseed = true;
                continue;
            }
            next.weights[c] = nc / n as f64;
            for i in 0..d {
                let shift = st.s1[c * d + i] / nc;
                next.means[c * d + i] = model.means[c * d + i] + shift;
                let v = st.s2[c * d + i] / nc - shift * shift;
                next.variances[c * d + i] = v.max(var_floor);
            }
        }
        let wsum: f64 = next.weights.iter().sum();
        next.weights.iter_mut().for_each(|w| *w /= wsum);
        model = next;
        reseeded.push(did_reseed);
    }
    if !converged {
        let ll = model.mean_log_likelihood(data);
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, model.clone()));
        }
        lls.push(ll);
        log::warn!(
            "GMM EM did not converge in {} iterations; keeping the best model",
            opts.max_iters
        );
        model = best.map(|(_, m)| m).unwrap_or(model);
    }
    Ok(GmmFit {
        model,
        log_likelihoods: lls,
        reseeded,
        converged,
    })
}

/// Unnormalized Fisher vector `[G_μ; G_σ]`, each `K × d` cluster-major.
pub fn fisher_vector(data: &[f64], gmm: &GmmModel) -> Result<Vec<f64>> {
    let (k, d) = (gmm.k, gmm.d);
    if data.is_empty() {
        return Err(Error::EmptyFeatureSet);
    }
    if data.len() % d != 0 {
        return Err(Error::DimMismatch { expected: d, got: data.len() % d });
    }
    let n = data.len() / d;
    let inv_sd: Vec<f64> = gmm.variances.iter().map(|v| 1.0 / v.sqrt()).collect();
    let scorer = Scorer::new(gmm);
    let parts = chunked(data, d, |chunk| {
        let mut acc = vec![0.0; 2 * k * d];
        let mut post = vec![0.0; k];
        for x in chunk.chunks_exact(d) {
            scorer.posteriors_into(x, &mut post);
            for (c, &g) in post.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let m = gmm.mean(c);
                for i in 0..d {
                    let z = (x[i] - m[i]) * inv_sd[c * d + i];
                    acc[c * d + i] += g * z;
                    acc[k * d + c * d + i] += g * (z * z - 1.0);
                }
            }
        }
        acc
    });
    let mut fv = vec![0.0; 2 * k * d];
    for p in &parts {
        for (a, b) in fv.iter_mut().zip(p) {
            *a += b;
        }
    }
    for c in 0..k {
        let s_mu = 1.0 / (n as f64 * gmm.weights[c].sqrt());
        let s_sigma = 1.0 / (n as f64 * (2.0 * gmm.weights[c]).sqrt());
        for i in 0..d {
            fv[c * d + i] *= s_mu;
            fv[k * d + c * d + i] *= s_sigma;
        }
    }
    Ok(fv)
}

/// Signed power normalization followed by L2 normalization.
pub fn normalize_fv(v: &[f64], power_alpha: f64) -> Vec<f64> {
    let mut out: Vec<f64> = v
        .iter()
        .map(|&x| x.signum() * x.abs().powf(power_alpha))
        .collect();
    l2_normalize(&mut out);
    out
}

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Identifies a feature set by filter group and channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SetKey {
    pub group: usize,
    pub channel: Channel,
}

impl SetKey {
    pub fn of(set: &LocalFeatureSet) -> Self {
        Self {
            group: set.group,
            channel: set.channel,
        }
    }
}

impl std::fmt::Display for SetKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = match self.channel {
            Channel::Appearance => "AF",
            Channel::Variation => "VF",
        };
        write!(f, "{c}{}", self.group + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherEncoder {
    pub key: SetKey,
    pub reducer: WhiteningTransform,
    pub gmm: GmmModel,
    pub power_alpha: f64,
}

impl FisherEncoder {
    /// Reducer and GMM fitted on a sample of training features.
    pub fn fit(
        train: &LocalFeatureSet,
        reduced_dim: usize,
        opts: &GmmOptions,
        power_alpha: f64,
    ) -> Result<Self> {
        let reducer = fit_reducer(train, reduced_dim)?;
        let reduced = reduce48(train, &reducer)?;
        let fit = fit_gmm(&reduced.data, reduced.dim, opts)?;
        Ok(Self {
            key: SetKey::of(train),
            reducer,
            gmm: fit.model,
            power_alpha,
        })
    }

    pub fn fv_dim(&self) -> usize {
        2 * self.gmm.k * self.gmm.d
    }

    /// Normalized Fisher vector of one video's feature set.
    pub fn encode(&self, set: &LocalFeatureSet) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Err(Error::EmptyFeatureSet);
        }
        let reduced = reduce48(set, &self.reducer)?;
        Ok(normalize_fv(&fisher_vector(&reduced.data, &self.gmm)?, self.power_alpha))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRepresentation {
    pub vector: Vec<f64>,
    /// Start offset of each set's block, in encoder order.
    pub offsets: Vec<usize>,
}

/// One encoder per feature set, in a fixed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEncoder {
    pub encoders: Vec<FisherEncoder>,
    pub config_json: Option<String>,
}

impl VideoEncoder {
    pub fn dim(&self) -> usize {
        self.encoders.iter().map(|e| e.fv_dim()).sum()
    }

    pub fn keys(&self) -> Vec<SetKey> {
        self.encoders.iter().map(|e| e.key).collect()
    }

    /// Restricts the layout to the given keys, keeping encoder order.
    pub fn subset(&self, keep: impl Fn(&SetKey) -> bool) -> Self {
        Self {
            encoders: self.encoders.iter().filter(|e| keep(&e.key)).cloned().collect(),
            config_json: self.config_json.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let first = self.encoders.first();
        let mut w = ByteWriter::new(SFE_MAGIC);
        w.u32(self.encoders.len());
        w.u32(first.map_or(0, |e| e.gmm.k));
        w.u32(first.map_or(0, |e| e.gmm.d));
        w.f64s([first.map_or(0.5, |e| e.power_alpha)].iter());
        for e in &self.encoders {
            w.u32(e.key.group);
            w.u32(match e.key.channel {
                Channel::Appearance => 0,
                Channel::Variation => 1,
            });
            w.u32(e.reducer.in_dim());
            w.u32(e.reducer.out_dim());
            w.f64s(e.reducer.mean.iter());
            w.f64s(e.reducer.projection.transpose().iter());
            w.f64s(e.gmm.weights.iter());
            w.f64s(e.gmm.means.iter());
            w.f64s(e.gmm.variances.iter());
            w.f64s([e.gmm.var_floor].iter());
        }
        w.string(self.config_json.as_deref().unwrap_or(""));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, SFE_MAGIC, "encoder.sfe")?;
        let (n_sets, k, _d) = (r.u32()?, r.u32()?, r.u32()?);
        let alpha = r.f64s(1)?[0];
        let mut encoders = Vec::with_capacity(n_sets);
        for _ in 0..n_sets {
            let group = r.u32()?;
            let channel = match r.u32()? {
                0 => Channel::Appearance,
                1 => Channel::Variation,
                c => return Err(Error::BadModel(format!("encoder.sfe: unknown channel {c}"))),
            };
            let (in_dim, out_dim) = (r.u32()?, r.u32()?);
            let mean = DVector::from_vec(r.f64s(in_dim)?);
            let projection = DMatrix::from_vec(in_dim, out_dim, r.f64s(in_dim * out_dim)?).transpose();
            let gmm = GmmModel {
                k,
                d: out_dim,
                weights: r.f64s(k)?,
                means: r.f64s(k * out_dim)?,
                variances: r.f64s(k * out_dim)?,
                var_floor: r.f64s(1)?[0],
            };
            gmm.validate()
                .map_err(|e| Error::BadModel(format!("encoder.sfe: {e}")))?;
            encoders.push(FisherEncoder {
                key: SetKey { group, channel },
                reducer: WhiteningTransform {
                    mean,
                    projection,
                    eigen_floor: 0.0,
                },
                gmm,
                power_alpha: alpha,
            });
        }
        let config = r.string()?;
        r.expect_end()?;
        Ok(Self {
            encoders,
            config_json: (!config.is_empty()).then_some(config),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Encodes each configured set, concatenates in layout order and
/// L2-normalizes the result.
pub fn encode_video(sets: &[LocalFeatureSet], encoder: &VideoEncoder) -> Result<VideoRepresentation> {
    let blocks = encoder
        .encoders
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let set = sets
                .iter()
                .find(|s| SetKey::of(s) == e.key)
                .ok_or(Error::MissingSet(i))?;
            e.encode(set)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut vector = Vec::with_capacity(encoder.dim());
    for b in blocks {
        offsets.push(vector.len());
        vector.extend(b);
    }
    l2_normalize(&mut vector);
    Ok(VideoRepresentation { vector, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_features::FeaturePosition;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_blobs(seed: u64, n: usize, d: usize, centers: &[f64]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let c = centers[i % centers.len()];
            out.extend((0..d).map(|_| c + noise.sample(&mut rng)));
        }
        out
    }

    #[test]
    fn single_component_is_closed_form() {
        let data = gaussian_blobs(1, 300, 3, &[2.0]);
        let fit = fit_gmm(&data, 3, &GmmOptions { k: 1, ..Default::default() }).unwrap();
        let (mean, var) = global_moments(&data, 3);
        let m = &fit.model;
        assert_eq!(m.weights, vec![1.0]);
        for i in 0..3 {
            assert!((m.means[i] - mean[i]).abs() < 1e-10);
            assert!((m.variances[i] - var[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let data = gaussian_blobs(2, 2000, 4, &[-5.0, 5.0]);
        let fit = fit_gmm(&data, 4, &GmmOptions { k: 2, seed: 3, ..Default::default() }).unwrap();
        let m = &fit.model;
        let mut firsts: Vec<f64> = (0..2).map(|k| m.means[k * 4]).collect();
        firsts.sort_by(f64::total_cmp);
        for k in 0..2 {
            let c = if m.means[k * 4] < 0.0 { -5.0 } else { 5.0 };
            for i in 0..4 {
                assert!((m.means[k * 4 + i] - c).abs() < 0.1);
            }
        }
        assert!(firsts[0] < 0.0 && firsts[1] > 0.0);
        m.validate().unwrap();
    }

    #[test]
    fn seeded_fit_is_deterministic_and_monotone() {
        let data = gaussian_blobs(4, 1000, 5, &[-1.0, 0.0, 2.0]);
        let opts = GmmOptions { k: 4, seed: 9, ..Default::default() };
        let a = fit_gmm(&data, 5, &opts).unwrap();
        let b = fit_gmm(&data, 5, &opts).unwrap();
        assert_eq!(a.model, b.model);
        for (i, w) in a.log_likelihoods.windows(2).enumerate() {
            if !a.reseeded.get(i).copied().unwrap_or(false) {
                assert!(w[1] >= w[0] - 1e-9, "step {i}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let data = vec![0.0; 2 * 50];
        assert!(matches!(
            fit_gmm(&data, 2, &GmmOptions { k: 16, ..Default::default() }),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn fv_at_the_mean_of_one_cluster() {
        let gmm = GmmModel {
            k: 1,
            d: 3,
            weights: vec![1.0],
            means: vec![1.0, -2.0, 0.5],
            variances: vec![1.0, 4.0, 0.25],
            var_floor: 1e-9,
        };
        let data: Vec<f64> = (0..7).flat_map(|_| gmm.means.clone()).collect();
        let fv = fisher_vector(&data, &gmm).unwrap();
        assert!(fv[..3].iter().all(|&v| v == 0.0));
        for &v in &fv[3..] {
            assert!((v + 1.0 / 2f64.sqrt()).abs() < 1e-15);
        }
        assert!(matches!(fisher_vector(&[], &gmm), Err(Error::EmptyFeatureSet)));
    }

    #[test]
    fn power_l2_normalization() {
        let v = normalize_fv(&[4.0, -9.0], 0.5);
        let s = 13f64.sqrt();
        assert!((v[0] - 2.0 / s).abs() < 1e-15 && (v[1] + 3.0 / s).abs() < 1e-15);
        let v = normalize_fv(&[3.0, -4.0], 1.0);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] + 0.8).abs() < 1e-15);
        assert_eq!(normalize_fv(&[0.0, 0.0], 0.5), vec![0.0, 0.0]);
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, group: usize, channel: Channel) -> LocalFeatureSet {
        let mut s = LocalFeatureSet::empty(dim, group, channel);
        for i in 0..n {
            s.data.extend((0..dim).map(|_| rng.random_range(-1.0..1.0)));
            s.positions.push(FeaturePosition { scale: 0, y: i, x: 0, t: 0 });
        }
        s
    }

    fn small_encoder(seed: u64) -> (VideoEncoder, Vec<LocalFeatureSet>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoders = Vec::new();
        let mut sets = Vec::new();
        for g in 0..3 {
            for ch in [Channel::Appearance, Channel::Variation] {
                let train = random_set(&mut rng, 400, 12, g, ch);
                let opts = GmmOptions { k: 4, seed: seed + g as u64, ..Default::default() };
                encoders.push(FisherEncoder::fit(&train, 6, &opts, 0.5).unwrap());
                sets.push(random_set(&mut rng, 30, 12, g, ch));
            }
        }
        (VideoEncoder { encoders, config_json: Some("{}".into()) }, sets)
    }

    #[test]
    fn video_encoding_layout_and_norm() {
        let (enc, sets) = small_encoder(5);
        assert_eq!(enc.dim(), 6 * 2 * 4 * 6);
        let rep = encode_video(&sets, &enc).unwrap();
        assert_eq!(rep.vector.len(), enc.dim());
        assert_eq!(rep.offsets, vec![0, 48, 96, 144, 192, 240]);
        let norm: f64 = rep.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let one = enc.subset(|k| k.group == 0 && k.channel == Channel::Appearance);
        let rep1 = encode_video(&sets, &one).unwrap();
        for (a, b) in rep1.vector.iter().zip(enc.encoders[0].encode(&sets[0]).unwrap()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(matches!(encode_video(&sets[1..], &enc), Err(Error::MissingSet(0))));
    }

    #[test]
    fn encoder_file_round_trip() {
        let (enc, _) = small_encoder(6);
        let bytes = enc.to_bytes();
        let back = VideoEncoder::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.encoders[2].gmm, enc.encoders[2].gmm);
        assert_eq!(back.keys(), enc.keys());
        assert!(VideoEncoder::from_bytes(&bytes[..40]).is_err());
    }

    /// Straight-line evaluation of the Fisher-vector statistics.
    fn fv_oracle(data: &[Vec<f64>], g: &GmmModel) -> Vec<f64> {
        let (k, d) = (g.k, g.d);
        let n = data.len() as f64;
        let mut mu = vec![0.0; k * d];
        let mut sg = vec![0.0; k * d];
        for x in data {
            let dens: Vec<f64> = (0..k)
                .map(|c| {
                    let mut p = g.weights[c];
                    for i in 0..d {
                        let v = g.variances[c * d + i];
                        let z = x[i] - g.means[c * d + i];
                        p *= (-z * z / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                    }
                    p
                })
                .collect();
            let tot: f64 = dens.iter().sum();
            for c in 0..k {
                let gamma = dens[c] / tot;
                for i in 0..d {
                    let sd = g.variances[c * d + i].sqrt();
                    let z = (x[i] - g.means[c * d + i]) / sd;
                    mu[c * d + i] += gamma * z / (n * g.weights[c].sqrt());
                    sg[c * d + i] += gamma * (z * z - 1.0) / (n * (2.0 * g.weights[c]).sqrt());
                }
            }
        }
        mu.extend(sg);
        mu
    }

    fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmModel {
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        GmmModel {
            k,
            d,
            weights: w,
            means: (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            variances: (0..k * d).map(|_| rng.random_range(0.3..2.0)).collect(),
            var_floor: 1e-9,
        }
    }

    #[test]
    fn tiny_instance_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_gmm(&mut rng, 2, 2);
        let pts: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let fv = fisher_vector(&pts.concat(), &g).unwrap();
        for (a, b) in fv.iter().zip(fv_oracle(&pts, &g)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn fv_matches_oracle(seed in 0u64..5000, n in 1usize..6, k in 1usize..4, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gmm(&mut rng, k, d);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let fv = fisher_vector(&pts.concat(), &g).unwrap();
            for (a, b) in fv.iter().zip(fv_oracle(&pts, &g)) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn posteriors_sum_to_one(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gmm(&mut rng, 5, 3);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-30.0..30.0)).collect();
            let p = g.posteriors(&x);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn encoding_ignores_feature_order(seed in 0u64..200) {
            let (enc, sets) = small_encoder(11);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..sets[0].len()).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let shuffled: Vec<LocalFeatureSet> = sets.iter().map(|s| s.select(&idx)).collect();
            let a = encode_video(&sets, &enc).unwrap();
            let b = encode_video(&shuffled, &enc).unwrap();
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
