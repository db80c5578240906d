use std::path::Path;
use std::process::{Command, Output};

use tfsod_detector::RunConfig;
use tfsod_harness::config::{load_config, parse_override, with_overrides};
use tfsod_harness::pipeline::{run_dir_name, RunPaths};
use tfsod_harness::HarnessError;

const SMALL: [&str; 6] = [
    "--set",
    "data_pretrain_images=4",
    "--set",
    "data_test_images=6",
    "--set",
    "data_novel_pool=5",
];

fn tfsod(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfsod"))
        .args(args)
        .arg("--runs")
        .arg(runs)
        .args(SMALL)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn invalid_config_exits_2_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let o = tfsod(dir.path(), &["gen-data", "--set", "thre_cls=2.0", "--set", "tau=0"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("thre_cls") && e.contains("tau"), "{e}");

    let o = tfsod(dir.path(), &["gen-data", "--set", "bogus_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_key"));

    let file = dir.path().join("bad.toml");
    std::fs::write(&file, "sampler = \"fancy\"\n").unwrap();
    let o = tfsod(dir.path(), &["gen-data", "--config", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tfsod(dir.path(), &["finetune"]).status.code(), Some(3));
    assert_eq!(tfsod(dir.path(), &["eval"]).status.code(), Some(3));
    assert_eq!(tfsod(dir.path(), &["plot"]).status.code(), Some(3));
    let o = tfsod(dir.path(), &["gen-data", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "pretrain",
        "--set",
        "lr=1e30",
        "--set",
        "grad_clip=0",
        "--set",
        "warmup_iters=0",
        "--set",
        "pretrain_iters=30",
    ];
    let o = tfsod(dir.path(), &args);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let found = walk(dir.path())
        .into_iter()
        .any(|p| p.ends_with("pretrain.last-good.ckpt"));
    assert!(found);
}

fn walk(p: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn untrained_pipeline_evaluates_near_zero_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let iters = ["--set", "pretrain_iters=0", "--set", "finetune_iters=0"];
    for cmd in ["gen-data", "pretrain", "finetune", "eval"] {
        let mut args = vec![cmd];
        args.extend(iters);
        let o = tfsod(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        if cmd == "eval" {
            let out = String::from_utf8_lossy(&o.stdout);
            let line = out.lines().find(|l| l.starts_with("bAP50")).unwrap();
            let nums: Vec<f64> = line.split_whitespace().filter_map(|w| w.parse().ok()).collect();
            assert!(nums.iter().all(|&v| v < 5.0), "{line}");
        }
    }

    let mut args = vec!["pretrain", "--set", "pretrain_iters=5"];
    args.extend(&iters[2..]);
    assert!(tfsod(dir.path(), &args).status.success());
    let mut args = vec!["plot", "--set", "pretrain_iters=5"];
    args.extend(&iters[2..]);
    let o = tfsod(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let svgs: Vec<String> = String::from_utf8_lossy(&o.stdout).lines().map(String::from).collect();
    assert_eq!(svgs.len(), 3);
    for s in svgs {
        let text = std::fs::read_to_string(&s).unwrap();
        assert!(text.starts_with("<svg") || text.contains("<svg"), "{s}");
    }
}

#[test]
fn run_directories_are_content_addressed() {
    let root = Path::new("/runs");
    let a = RunConfig::default();
    let b = RunConfig::default();
    assert_eq!(RunPaths::new(root, &a).dir, RunPaths::new(root, &b).dir);
    let c = RunConfig { seed: 1, ..a.clone() };
    assert_ne!(run_dir_name(&a), run_dir_name(&c));
    assert!(run_dir_name(&c).ends_with("-seed1"));
    let d = RunConfig {
        thre_cls: 0.5,
        ..a.clone()
    };
    assert_ne!(run_dir_name(&a), run_dir_name(&d));
    // The dataset depends only on data keys and the seed.
    assert_eq!(RunPaths::new(root, &a).data, RunPaths::new(root, &d).data);
    assert_ne!(RunPaths::new(root, &a).data, RunPaths::new(root, &c).data);
}

#[test]
fn overrides_parse_typed_values() {
    assert_eq!(parse_override("topk=12").unwrap().1, toml::Value::Integer(12));
    assert_eq!(
        parse_override("combine_op=max").unwrap().1,
        toml::Value::String("max".into())
    );
    assert_eq!(parse_override(" hflip = false ").unwrap().0, "hflip");
    assert!(parse_override("novalue").is_err());

    let cfg = load_config(None, &["thre_cls=0.5".into(), "sampler=random".into()]).unwrap();
    assert_eq!(cfg.thre_cls, 0.5);
    let back = with_overrides(&cfg, &["lr=0.02".into()]).unwrap();
    assert_eq!(back.lr, 0.02);
    assert_eq!(back.thre_cls, 0.5);
    assert!(matches!(
        with_overrides(&cfg, &["budget=0".into()]),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let cfg = RunConfig {
        seed: 9,
        alpha: 0.25,
        ..RunConfig::default()
    };
    std::fs::write(&path, tfsod_harness::config::to_toml(&cfg)).unwrap();
    assert_eq!(load_config(Some(&path), &[]).unwrap(), cfg);
}
