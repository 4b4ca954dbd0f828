//! One-against-all linear SVM and the evaluation protocols.
//!
//! Each binary problem is the L2-regularized hinge-loss SVM with the bias
//! folded in as a constant feature 1, solved by dual coordinate descent with
//! a seeded permutation per epoch.
//!
//! Model file `svm.ssm` (u32 and f64 little endian):
//!
//! ```text
//! "SSM1" n_classes dim C:f64 then per class a length-prefixed UTF-8 label,
//! then per class dim + 1 weights (bias last), then config_len config_json
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::derive_seed;
use crate::error::{Error, Result};

pub const SSM_MAGIC: &[u8; 4] = b"SSM1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmOptions {
    pub c: f64,
    /// Stop when the projected-gradient spread drops below this.
    pub eps: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            c: 1.0,
            eps: 1e-4,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearOvaSvm {
    pub labels: Vec<String>,
    pub dim: usize,
    /// One row of `dim + 1` values per class, bias last.
    pub weights: Vec<Vec<f64>>,
    pub c: f64,
    pub config_json: Option<String>,
}

/// Per-class training record.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDiagnostics {
    pub epochs: usize,
    pub converged: bool,
    /// Dual objective `½‖w‖² − Σα` after each epoch.
    pub dual_objective: Vec<f64>,
    /// `½‖w‖² + C Σ max(0, 1 − y f(x))` at the end.
    pub primal_objective: f64,
    pub margin_violations: usize,
    pub training_errors: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Decision value with the bias stored last in `w`.
#[inline]
fn decision(w: &[f64], x: &[f64]) -> f64 {
    dot(&w[..x.len()], x) + w[x.len()]
}

fn train_binary(xs: &[Vec<f64>], ys: &[f64], dim: usize, opts: &SvmOptions, seed: u64) -> (Vec<f64>, BinaryDiagnostics) {
    let n = xs.len();
    let mut w = vec![0.0; dim + 1];
    let mut alpha = vec![0.0; n];
    let qd: Vec<f64> = xs.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut epochs = 0;
    while epochs < opts.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let g = ys[i] * decision(&w, &xs[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == opts.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, opts.c);
                let step = (alpha[i] - old) * ys[i];
                for (wj, xj) in w.iter_mut().zip(&xs[i]) {
                    *wj += step * xj;
                }
                w[dim] += step;
            }
        }
        trace.push(0.5 * dot(&w, &w) - alpha.iter().sum::<f64>());
        if pg_max - pg_min < opts.eps {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("SVM did not reach tolerance {} in {} epochs", opts.eps, opts.max_epochs);
    }
    let mut hinge = 0.0;
    let mut violations = 0;
    let mut errors = 0;
    for (x, &y) in xs.iter().zip(ys) {
        let m = y * decision(&w, x);
        if m < 1.0 {
            violations += 1;
            hinge += 1.0 - m;
        }
        if m <= 0.0 {
            errors += 1;
        }
    }
    let diag = BinaryDiagnostics {
        epochs,
        converged,
        dual_objective: trace,
        primal_objective: 0.5 * dot(&w, &w) + opts.c * hinge,
        margin_violations: violations,
        training_errors: errors,
    };
    (w, diag)
}

/// Trains one binary SVM per class. `labels[i]` indexes `class_names`.
pub fn train_svm(
    reps: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
    opts: &SvmOptions,
) -> Result<(LinearOvaSvm, Vec<BinaryDiagnostics>)> {
    if reps.is_empty() {
        return Err(Error::EmptyData);
    }
    if reps.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: reps.len(),
            got: labels.len(),
        });
    }
    let dim = reps[0].len();
    if let Some(bad) = reps.iter().find(|r| r.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if reps.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n_classes = class_names.len();
    if labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::InvalidConfig("label index out of range".into()));
    }
    let mut present = vec![false; n_classes];
    labels.iter().for_each(|&l| present[l] = true);
    if n_classes < 2 || present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::SingleClass);
    }
    let results: Vec<(Vec<f64>, BinaryDiagnostics)> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let ys: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            train_binary(reps, &ys, dim, opts, derive_seed(opts.seed, "svm", c as u64))
        })
        .collect();
    let diags: Vec<BinaryDiagnostics> = results.iter().map(|r| r.1.clone()).collect();
    let total_viol: usize = diags.iter().map(|d| d.training_errors).sum();
    if total_viol > 0 {
        log::info!("SVM training set is not separable: {total_viol} one-vs-all training errors");
    }
    Ok((
        LinearOvaSvm {
            labels: class_names.to_vec(),
            dim,
            weights: results.into_iter().map(|r| r.0).collect(),
            c: opts.c,
            config_json: None,
        },
        diags,
    ))
}

/// Class index of the largest decision value (lowest index on ties) and all
/// decision values.
pub fn predict(model: &LinearOvaSvm, rep: &[f64]) -> Result<(usize, Vec<f64>)> {
    if rep.len() != model.dim {
        return Err(Error::DimMismatch {
            expected: model.dim,
            got: rep.len(),
        });
    }
    let values: Vec<f64> = model.weights.iter().map(|w| decision(w, rep)).collect();
    Ok((argmax(&values), values))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl LinearOvaSvm {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(SSM_MAGIC);
        w.u32(self.labels.len());
        w.u32(self.dim);
        w.f64s([self.c].iter());
        for l in &self.labels {
            w.string(l);
        }
        for row in &self.weights {
            w.f64s(row.iter());
        }
        w.string(self.config_json.as_deref().unwrap_or(""));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, SSM_MAGIC, "svm.ssm")?;
        let (n, dim) = (r.u32()?, r.u32()?);
        let c = r.f64s(1)?[0];
        let labels = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let weights = (0..n).map(|_| r.f64s(dim + 1)).collect::<Result<Vec<_>>>()?;
        let config = r.string()?;
        r.expect_end()?;
        Ok(Self {
            labels,
            dim,
            weights,
            c,
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Protocol {
    /// Leave one video out.
    Loo,
    /// Half of each class for training, `n_splits` random splits.
    Half { n_splits: usize },
    /// `n_train` videos of each class for training, the rest for testing.
    Fixed { n_train: usize, n_splits: usize },
}

impl Protocol {
    pub fn name(&self) -> String {
        match self {
            Protocol::Loo => "loo".into(),
            Protocol::Half { .. } => "half".into(),
            Protocol::Fixed { n_train, .. } => format!("fixed:{n_train}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn class_members(labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

/// Train/test index splits for a protocol; stratified per class.
pub fn make_splits(labels: &[usize], class_names: &[String], protocol: &Protocol, seed: u64) -> Result<Vec<Split>> {
    if labels.is_empty() {
        return Err(Error::EmptyData);
    }
    let members = class_members(labels, class_names.len());
    match *protocol {
        Protocol::Loo => {
            if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| m.len() < 2) {
                return Err(Error::TooFewVideos(format!(
                    "class {:?} has {} video(s); leave-one-out needs 2",
                    class_names[c],
                    m.len()
                )));
            }
            Ok((0..labels.len())
                .map(|i| Split {
                    train: (0..labels.len()).filter(|&j| j != i).collect(),
                    test: vec![i],
                })
                .collect())
        }
        Protocol::Half { n_splits } | Protocol::Fixed { n_splits, .. } => {
            let per_class = |m: &Vec<usize>| match *protocol {
                Protocol::Fixed { n_train, .. } => n_train,
                _ => m.len() / 2,
            };
            for (c, m) in members.iter().enumerate() {
                let need = per_class(m).max(1) + 1;
                if m.len() < need || per_class(m) == 0 {
                    return Err(Error::InsufficientPerClass {
                        class: class_names[c].clone(),
                        have: m.len(),
                        need,
                    });
                }
            }
            Ok((0..n_splits)
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", s as u64));
                    let mut split = Split { train: Vec::new(), test: Vec::new() };
                    for m in &members {
                        let mut idx = m.clone();
                        idx.shuffle(&mut rng);
                        let k = per_class(m);
                        split.train.extend_from_slice(&idx[..k]);
                        split.test.extend_from_slice(&idx[k..]);
                    }
                    split.train.sort_unstable();
                    split.test.sort_unstable();
                    split
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub per_split: Vec<f64>,
    pub mean: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    /// Aggregates `(truth, prediction)` pairs per split. For leave-one-out the
    /// single-video folds are pooled into one accuracy and listed per fold.
    pub fn from_predictions(
        protocol: &Protocol,
        seed: u64,
        labels: &[String],
        splits: &[Vec<(usize, usize)>],
    ) -> Self {
        let n = labels.len();
        let mut confusion = vec![vec![0u64; n]; n];
        let per_split: Vec<f64> = splits
            .iter()
            .map(|preds| {
                let mut right = 0usize;
                for &(t, p) in preds {
                    confusion[t][p] += 1;
                    right += (t == p) as usize;
                }
                right as f64 / preds.len().max(1) as f64
            })
            .collect();
        let mean = per_split.iter().sum::<f64>() / per_split.len().max(1) as f64;
        Self {
            protocol: protocol.name(),
            seed,
            labels: labels.to_vec(),
            per_split,
            mean,
            confusion,
            config: None,
        }
    }

    /// Confusion matrix as CSV with a header row of predicted labels.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (l, row) in self.labels.iter().zip(&self.confusion) {
            let mut rec = vec![l.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn separable() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            xs.push(vec![s + rng.random_range(-0.2..0.2), rng.random_range(-0.3..0.3), 0.0]);
            ys.push(i % 2);
        }
        (xs, ys)
    }

    #[test]
    fn separable_two_class_problem() {
        let (xs, ys) = separable();
        let (m, diag) = train_svm(&xs, &ys, &names(2), &SvmOptions::default()).unwrap();
        assert!(diag.iter().all(|d| d.converged && d.training_errors == 0));
        for (x, &y) in xs.iter().zip(&ys) {
            let (p, vals) = predict(&m, x).unwrap();
            assert_eq!(p, y);
            assert_eq!(vals.len(), 2);
            let sign = decision(&m.weights[0], x).signum();
            assert_eq!(sign > 0.0, y == 0);
        }
        assert!(matches!(predict(&m, &[1.0, 0.0]), Err(Error::DimMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn dual_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..60).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<usize> = (0..60).map(|_| rng.random_range(0..3)).collect();
        let (_, diag) = train_svm(&xs, &ys, &names(3), &SvmOptions { seed: 4, ..Default::default() }).unwrap();
        for d in &diag {
            for w in d.dual_objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let x = vec![vec![0.5, 0.5]];
        assert!(matches!(train_svm(&[], &[], &names(2), &SvmOptions::default()), Err(Error::EmptyData)));
        assert!(matches!(
            train_svm(&[x[0].clone(), x[0].clone()], &[0, 0], &names(2), &SvmOptions::default()),
            Err(Error::SingleClass)
        ));
        let (_, diag) = train_svm(
            &[x[0].clone(), x[0].clone(), vec![3.0, 0.0]],
            &[0, 1, 1],
            &names(2),
            &SvmOptions::default(),
        )
        .unwrap();
        assert!(diag.iter().any(|d| d.margin_violations > 0));
        assert_eq!(SvmOptions::default().c, 1.0);
    }

    #[test]
    fn ties_go_to_first_class() {
        let m = LinearOvaSvm {
            labels: names(3),
            dim: 2,
            weights: vec![vec![0.0; 3]; 3],
            c: 1.0,
            config_json: None,
        };
        assert_eq!(predict(&m, &[1.0, 2.0]).unwrap().0, 0);
    }

    #[test]
    fn ssm_round_trip_and_determinism() {
        let (xs, ys) = separable();
        let opts = SvmOptions { seed: 3, ..Default::default() };
        let (mut a, _) = train_svm(&xs, &ys, &names(2), &opts).unwrap();
        let (b, _) = train_svm(&xs, &ys, &names(2), &opts).unwrap();
        assert_eq!(a, b);
        a.config_json = Some("{\"c\":1}".into());
        let bytes = a.to_bytes();
        let back = LinearOvaSvm::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert!(LinearOvaSvm::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn loo_partitions_dataset() {
        let labels = vec![0, 0, 1, 1, 2, 2, 2];
        let splits = make_splits(&labels, &names(3), &Protocol::Loo, 0).unwrap();
        assert_eq!(splits.len(), 7);
        let mut tested: Vec<usize> = splits.iter().flat_map(|s| s.test.clone()).collect();
        tested.sort_unstable();
        assert_eq!(tested, (0..7).collect::<Vec<_>>());
        assert!(splits.iter().all(|s| s.train.len() == 6 && !s.train.contains(&s.test[0])));
        assert!(matches!(
            make_splits(&[0, 1, 1], &names(2), &Protocol::Loo, 0),
            Err(Error::TooFewVideos(_))
        ));
    }

    #[test]
    fn stratified_splits() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p = Protocol::Half { n_splits: 20 };
        let a = make_splits(&labels, &names(3), &p, 5).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, make_splits(&labels, &names(3), &p, 5).unwrap());
        for s in &a {
            for c in 0..3 {
                assert_eq!(s.train.iter().filter(|&&i| labels[i] == c).count(), 5);
                assert_eq!(s.test.iter().filter(|&&i| labels[i] == c).count(), 5);
            }
        }
        let f = make_splits(&labels, &names(3), &Protocol::Fixed { n_train: 4, n_splits: 2 }, 1).unwrap();
        assert!(f.iter().all(|s| s.train.len() == 12 && s.test.len() == 18));
        assert!(matches!(
            make_splits(&labels, &names(3), &Protocol::Fixed { n_train: 10, n_splits: 1 }, 1),
            Err(Error::InsufficientPerClass { .. })
        ));
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_predictions(
            &Protocol::Half { n_splits: 2 },
            7,
            &names(2),
            &[vec![(0, 0), (1, 0)], vec![(0, 0), (1, 1)]],
        );
        assert_eq!(r.per_split, vec![0.5, 1.0]);
        assert!((r.mean - 0.75).abs() < 1e-12);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![1, 1]]);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        r.write_confusion_csv(&p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("c1,1,1"));
    }

    proptest! {
        #[test]
        fn argmax_ignores_common_shift(vals in proptest::collection::vec(-10.0f64..10.0, 1..8), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let a = argmax(&vals);
            let b = argmax(&shifted);
            prop_assert!(a == b || (vals[a] - vals[b]).abs() < 1e-9);
        }
    }
}
