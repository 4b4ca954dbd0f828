use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mrsfa::config::PipelineConfig;
use mrsfa::synth::SynthSpec;

const TINY: &[&str] = &[
    "--preset", "synth",
    "--set", "n_cubes=400",
    "--set", "transition_budget=2000",
    "--set", "gmm_k=2",
    "--set", "gmm_subsample=400",
    "--set", "scales=[1]",
];

fn mrsfa(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mrsfa"));
    cmd.args(args).env("RUST_LOG", "warn");
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_dataset(dir: &Path) {
    let spec = SynthSpec {
        classes: SynthSpec::default().classes[..2].to_vec(),
        videos_per_class: 3,
        height: 28,
        width: 28,
        length: 20,
        ..SynthSpec::default()
    };
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    ok(&mrsfa(&["synth-gen", "--spec"], &[&path, Path::new("--out"), &dir.join("data")]));
}

#[test]
fn help_lists_every_config_key() {
    let out = ok(&mrsfa(&["--help"], &[]));
    for (k, v) in PipelineConfig::default().keys_with_values() {
        assert!(out.contains(&format!("{k} = {v}")), "missing {k}");
    }
    for sub in ["synth-gen", "learn-filters", "export-filters", "extract", "train", "evaluate", "pipeline", "bench"] {
        assert!(out.contains(sub), "missing subcommand {sub}");
    }
}

#[test]
fn failures_emit_a_json_error_line() {
    let out = mrsfa(&["export-filters", "--filters", "/nonexistent/filters.slf", "--out", "/tmp/x"], &[]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"]["kind"], "IoError");
    let msg = v["error"]["message"].as_str().unwrap();
    assert_eq!(msg.matches("No such file").count(), 1, "{msg}");

    let out = mrsfa(&["pipeline", "--set", "pca_dim=0", "--manifest", "x", "--out", "y"], &[]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(v["error"]["kind"], "InvalidConfig");

    let out = mrsfa(&["train", "--set", "no_such_key=1", "--manifest", "x", "--filters", "y", "--out", "z"], &[]);
    assert!(!out.status.success());
}

#[test]
fn stepwise_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    tiny_dataset(t);
    let data = t.join("data");
    assert!(data.join("manifest.csv").is_file());

    let filters = t.join("filters.slf");
    let mut args = vec!["learn-filters", "--method", "sfa"];
    args.extend_from_slice(TINY);
    ok(&mrsfa(&args, &[Path::new("--manifest"), &data, Path::new("--out"), &filters]));
    let fb = mrsfa::filter_bank::FilterBank::load(&filters).unwrap();
    assert_eq!((fb.len(), fb.groups.len()), (24, 3));
    let cfg = PipelineConfig::from_json(fb.config_json.as_deref().unwrap()).unwrap();
    assert_eq!(cfg.method, mrsfa::config::Method::Sfa);

    ok(&mrsfa(&["export-filters"], &[Path::new("--filters"), &filters, Path::new("--out"), &t.join("png")]));
    assert!(t.join("png/filter_023.pgm").is_file());

    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let first = manifest.lines().nth(1).unwrap().split(',').next().unwrap();
    let video = data.join(first);
    let mut args = vec!["extract"];
    args.extend_from_slice(TINY);
    let out = ok(&mrsfa(&args, &[Path::new("--filters"), &filters, Path::new("--video"), &video, Path::new("--out"), &t.join("feat")]));
    assert_eq!(out.lines().count(), 6);
    let (dim, _) = mrsfa::local_features::read_features_bin(&t.join("feat/features_VF3.bin")).unwrap();
    assert_eq!(dim, 96);

    let models = t.join("models");
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    let out = ok(&mrsfa(&args, &[Path::new("--manifest"), &data, Path::new("--filters"), &filters, Path::new("--out"), &models]));
    assert!(out.contains("representation dim 1152"), "{out}");
    assert_eq!(fs::read(models.join("filters.slf")).unwrap(), fs::read(&filters).unwrap());

    let mut args = vec!["evaluate"];
    args.extend_from_slice(TINY);
    ok(&mrsfa(&args, &[Path::new("--manifest"), &data, Path::new("--models"), &models, Path::new("--out"), &t.join("eval")]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "models");
    assert!(report["config"].is_object());
    let counts: u64 = report["confusion"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(counts, 6);

    let mut args = vec!["evaluate", "--end-to-end", "--protocol", "loo", "--ablate", "af", "--ablate", "vf"];
    args.extend_from_slice(TINY);
    ok(&mrsfa(&args, &[Path::new("--manifest"), &data, Path::new("--filters"), &filters, Path::new("--out"), &t.join("loo")]));
    for f in ["report.json", "report_af.json", "report_vf.json", "confusion.csv"] {
        assert!(t.join("loo").join(f).is_file(), "{f}");
    }
    let loo: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("loo/report.json")).unwrap()).unwrap();
    assert_eq!(loo["per_split"].as_array().unwrap().len(), 6);

    let mut args = vec!["bench", "--videos", "2"];
    args.extend_from_slice(TINY);
    let out = ok(&mrsfa(&args, &[Path::new("--manifest"), &data, Path::new("--filters"), &filters]));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["frames"], 40);
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    fs::write(&cfg_path, r#"{"lambda": 0.3, "scales": [1.0]}"#).unwrap();
    tiny_dataset(tmp.path());
    let out = tmp.path().join("run");
    let mut args = vec!["pipeline", "--splits", "1", "--set", "gmm_k=2", "--set", "gmm_subsample=400"];
    args.extend_from_slice(&["--set", "n_cubes=400", "--set", "transition_budget=2000", "--preset", "synth"]);
    ok(&mrsfa(&args, &[Path::new("--config"), &cfg_path, Path::new("--manifest"), &tmp.path().join("data"), Path::new("--out"), &out]));
    let saved = PipelineConfig::load(&out.join("config.json")).unwrap();
    assert_eq!((saved.lambda, saved.gmm_k, saved.pool_size), (0.3, 2, 2));
    assert_eq!(saved.scales, vec![1.0]);
    for f in ["filters.slf", "encoder.sfe", "svm.ssm", "report.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}
