use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use mrsfa::classifier::{EvalReport, LinearOvaSvm, Protocol};
use mrsfa::config::{FeatureSelection, Method, PipelineConfig};
use mrsfa::filter_bank::{export_filters, FilterBank};
use mrsfa::fisher::{SetKey, VideoEncoder};
use mrsfa::local_features::write_features_bin;
use mrsfa::pipeline::{classify, evaluate, extract_video, learn_filters, train_models, Dataset};
use mrsfa::synth::{write_dataset, SynthSpec};
use mrsfa::video_io::{load_video, read_manifest_csv, scan_manifest, FormatHint, ManifestLayout, VideoManifest};

const FILTERS_FILE: &str = "filters.slf";
const ENCODER_FILE: &str = "encoder.sfe";
const SVM_FILE: &str = "svm.ssm";
const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(name = "mrsfa", version, about = "Learned slow-feature filters for dynamic texture recognition")]
struct Cli {
    /// JSON config file; keys not present keep the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings: large, small or synth.
    #[arg(long, global = true, default_value = "large")]
    preset: String,
    /// Override one config key (repeatable), e.g. `--set lambda=0.2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic dataset (.dtv videos + manifest.csv).
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        /// JSON dataset description; defaults to the 6-class benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        videos_per_class: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learn the filter bank from a dataset.
    LearnFilters {
        /// manifest.csv or a directory of class subdirectories.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Write every 2D filter as a PGM image.
    ExportFilters {
        #[arg(long)]
        filters: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the local features of one video, one file per set.
    Extract {
        #[arg(long)]
        filters: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit encoders and the SVM on the training videos.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        filters: PathBuf,
        /// Directory receiving filters.slf, encoder.sfe and svm.ssm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify with saved models, or run a protocol end to end.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding filters.slf, encoder.sfe and svm.ssm.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Filters to share across folds (end-to-end mode).
        #[arg(long)]
        filters: Option<PathBuf>,
        /// loo, half or fixed:N.
        #[arg(long, default_value = "half")]
        protocol: String,
        /// Random splits for half and fixed protocols.
        #[arg(long, default_value_t = 20)]
        splits: usize,
        /// Refit encoders and SVM per split.
        #[arg(long)]
        end_to_end: bool,
        /// Feature selections to compare (repeatable): af, vf, af+vf.
        #[arg(long)]
        ablate: Vec<FeatureSelection>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the protocol end to end, then fit final models on the training videos.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "half")]
        protocol: String,
        #[arg(long, default_value_t = 5)]
        splits: usize,
        #[arg(long)]
        ablate: Vec<FeatureSelection>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure feature extraction throughput.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        filters: PathBuf,
        /// Videos to process (0 = all).
        #[arg(long, default_value_t = 10)]
        videos: usize,
    },
}

fn config_help() -> String {
    let mut s = String::from("Config keys (large preset defaults; override with --set KEY=VALUE):\n");
    for (k, v) in PipelineConfig::default().keys_with_values() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn parse_protocol(name: &str, splits: usize) -> Result<Protocol> {
    Ok(match name {
        "loo" => Protocol::Loo,
        "half" => Protocol::Half { n_splits: splits },
        _ => match name.strip_prefix("fixed:").map(str::parse) {
            Some(Ok(n_train)) => Protocol::Fixed { n_train, n_splits: splits },
            _ => bail!(mrsfa::Error::InvalidConfig(format!("unknown protocol {name:?} (loo|half|fixed:N)"))),
        },
    })
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut doc = serde_json::to_value(PipelineConfig::preset(&cli.preset)?)?;
            let given: serde_json::Value = serde_json::from_str(&text)?;
            let Some(given) = given.as_object() else {
                bail!(mrsfa::Error::InvalidConfig("config file must hold a JSON object".into()));
            };
            for (k, v) in given {
                doc[k] = v.clone();
            }
            serde_json::from_value(doc).map_err(mrsfa::Error::from)?
        }
        None => PipelineConfig::preset(&cli.preset)?,
    };
    for kv in &cli.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!(mrsfa::Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn load_manifest(path: &Path) -> Result<VideoManifest> {
    Ok(if path.is_dir() {
        let csv = path.join(mrsfa::video_io::MANIFEST_FILE);
        if csv.is_file() {
            read_manifest_csv(&csv)?
        } else {
            scan_manifest(path, ManifestLayout::ClassSubdirs)?
        }
    } else {
        read_manifest_csv(path)?
    })
}

fn load_dataset(path: &Path, cfg: &PipelineConfig) -> Result<Dataset> {
    Ok(Dataset::from_manifest(&load_manifest(path)?, cfg.max_frames)?)
}

/// Filters carry the config they were learned with; extraction settings
/// must agree with their shape.
fn load_filters(path: &Path, cfg: &PipelineConfig) -> Result<FilterBank> {
    let fb = FilterBank::load(path).with_context(|| format!("loading {}", path.display()))?;
    if fb.groups.iter().any(|g| g.len() > cfg.group_size) {
        log::warn!("filters were grouped by {}, config says {}", fb.group_size, cfg.group_size);
    }
    Ok(fb)
}

fn write_reports(out: &Path, main: FeatureSelection, reports: &[(FeatureSelection, EvalReport)]) -> Result<()> {
    for (sel, r) in reports {
        let (json, csv) = if *sel == main {
            (REPORT_FILE.to_string(), "confusion.csv".to_string())
        } else {
            let tag = sel.name().replace('+', "_");
            (format!("report_{tag}.json"), format!("confusion_{tag}.csv"))
        };
        fs::write(out.join(json), serde_json::to_string_pretty(r)?)?;
        r.write_confusion_csv(&out.join(csv))?;
        println!("{} mean accuracy {:.4} over {} splits {:?}", sel.name(), r.mean, r.per_split.len(), r.per_split);
    }
    Ok(())
}

fn run_evaluation(
    ds: &Dataset,
    cfg: &PipelineConfig,
    protocol: &Protocol,
    filters: Option<&FilterBank>,
    ablate: &[FeatureSelection],
    out: &Path,
) -> Result<()> {
    let mut selections = vec![cfg.features];
    selections.extend(ablate.iter().copied().filter(|a| *a != cfg.features));
    let ev = evaluate(ds, cfg, protocol, filters, &selections)?;
    println!("feature extraction throughput: {:.1} frames/s", ev.fps);
    write_reports(out, cfg.features, &ev.reports)

}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::SynthGen { out, spec, videos_per_class, noise_sigma, seed } => {
            let mut s = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)?,
                None => SynthSpec::default(),
            };
            if let Some(v) = videos_per_class {
                s.videos_per_class = v;
            }
            if let Some(v) = noise_sigma {
                s.noise_sigma = v;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            fs::create_dir_all(&out)?;
            let m = write_dataset(&s, &out)?;
            fs::write(out.join("synth_spec.json"), serde_json::to_string_pretty(&s)?)?;
            println!("wrote {} videos to {}", m.len(), out.display());
        }
        Command::LearnFilters { manifest, out, method } => {
            if let Some(m) = method {
                cfg.method = m;
            }
            cfg.validate()?;
            let ds = load_dataset(&manifest, &cfg)?;
            let fb = learn_filters(&ds, &ds.filter_indices(), &cfg)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fb.save(&out)?;
            println!("{} filters in {} groups -> {}", fb.len(), fb.groups.len(), out.display());
        }
        Command::ExportFilters { filters, out } => {
            let fb = FilterBank::load(&filters)?;
            let paths = export_filters(&fb, &out)?;
            println!("wrote {} images to {}", paths.len(), out.display());
        }
        Command::Extract { filters, video, out } => {
            cfg.validate()?;
            let fb = load_filters(&filters, &cfg)?;
            let v = load_video(&video, FormatHint::Auto, cfg.max_frames)?;
            let sets = extract_video(&v, &fb, &cfg)?;
            fs::create_dir_all(&out)?;
            for s in &sets {
                let path = out.join(format!("features_{}.bin", SetKey::of(s)));
                write_features_bin(&path, s)?;
                println!("{}: {} features of dim {} -> {}", SetKey::of(s), s.len(), s.dim, path.display());
            }
        }
        Command::Train { manifest, filters, out } => {
            cfg.validate()?;
            let fb = load_filters(&filters, &cfg)?;
            let ds = load_dataset(&manifest, &cfg)?;
            let train = ds.training_indices();
            let (enc, svm) = train_models(&ds, &train, &fb, &cfg)?;
            fs::create_dir_all(&out)?;
            fb.save(&out.join(FILTERS_FILE))?;
            enc.save(&out.join(ENCODER_FILE))?;
            svm.save(&out.join(SVM_FILE))?;
            fs::write(out.join("config.json"), cfg.to_json())?;
            println!(
                "trained on {} videos: {} sets, representation dim {}",
                train.len(),
                enc.encoders.len(),
                enc.dim()
            );
        }
        Command::Evaluate { manifest, models, filters, protocol, splits, end_to_end, ablate, out } => {
            cfg.validate()?;
            let ds = load_dataset(&manifest, &cfg)?;
            fs::create_dir_all(&out)?;
            if end_to_end {
                let protocol = parse_protocol(&protocol, splits)?;
                let fb = match (&filters, &models) {
                    (Some(f), _) => Some(load_filters(f, &cfg)?),
                    (None, Some(m)) if m.join(FILTERS_FILE).is_file() => Some(load_filters(&m.join(FILTERS_FILE), &cfg)?),
                    _ => None,
                };
                run_evaluation(&ds, &cfg, &protocol, fb.as_ref(), &ablate, &out)?;
            } else {
                let Some(dir) = models else {
                    bail!(mrsfa::Error::InvalidConfig("evaluate needs --models or --end-to-end".into()));
                };
                let fb = load_filters(filters.as_deref().unwrap_or(&dir.join(FILTERS_FILE)), &cfg)?;
                let enc = VideoEncoder::load(&dir.join(ENCODER_FILE))?;
                let svm = LinearOvaSvm::load(&dir.join(SVM_FILE))?;
                let test = ds.split_indices("test");
                let started = Instant::now();
                let preds = classify(&ds, &test, &fb, &enc, &svm, &cfg)?;
                let secs = started.elapsed().as_secs_f64();
                let frames: usize = test
                    .iter()
                    .map(|&v| ds.video(v).map(|s| s.length()))
                    .sum::<mrsfa::Result<usize>>()?;
                println!("feature extraction throughput: {:.1} frames/s", frames as f64 / secs.max(1e-9));
                let mut r = EvalReport::from_predictions(&Protocol::Fixed { n_train: 0, n_splits: 1 }, cfg.seed, &svm.labels, &[preds]);
                r.protocol = "models".into();
                r.config = Some(serde_json::to_value(&cfg)?);
                write_reports(&out, cfg.features, &[(cfg.features, r)])?;
            }
        }
        Command::Pipeline { manifest, protocol, splits, ablate, out } => {
            cfg.validate()?;
            let protocol = parse_protocol(&protocol, splits)?;
            let ds = load_dataset(&manifest, &cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.json"), cfg.to_json())?;
            run_evaluation(&ds, &cfg, &protocol, None, &ablate, &out)?;
            let fb = learn_filters(&ds, &ds.filter_indices(), &cfg)?;
            fb.save(&out.join(FILTERS_FILE))?;
            let (enc, svm) = train_models(&ds, &ds.training_indices(), &fb, &cfg)?;
            enc.save(&out.join(ENCODER_FILE))?;
            svm.save(&out.join(SVM_FILE))?;
            println!("models written to {}", out.display());
        }
        Command::Bench { manifest, filters, videos } => {
            cfg.validate()?;
            let fb = load_filters(&filters, &cfg)?;
            let ds = load_dataset(&manifest, &cfg)?;
            let n = if videos == 0 { ds.len() } else { videos.min(ds.len()) };
            let loaded = (0..n).map(|i| ds.video(i)).collect::<mrsfa::Result<Vec<_>>>()?;
            let frames: usize = loaded.iter().map(|v| v.length()).sum();
            let started = Instant::now();
            let features: usize = loaded
                .par_iter()
                .map(|v| extract_video(v, &fb, &cfg).map(|sets| sets.iter().map(|s| s.len()).sum::<usize>()))
                .sum::<mrsfa::Result<usize>>()?;
            let secs = started.elapsed().as_secs_f64();
            println!(
                "{}",
                serde_json::json!({
                    "videos": n,
                    "frames": frames,
                    "local_features": features,
                    "seconds": secs,
                    "frames_per_second": frames as f64 / secs.max(1e-9),
                    "threads": rayon::current_num_threads(),
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().after_help(config_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<mrsfa::Error>().map_or("Other", |m| m.kind());
            let mut message = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !message.ends_with(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
