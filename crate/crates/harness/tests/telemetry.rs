use std::fs::{self, File, OpenOptions};

use tfsod_core::Stage;
use tfsod_detector::{DetectorError, FileSink, RunConfig};
use tfsod_harness::pipeline::{ensure_dataset, run_pretrain, run_pretrain_with, RunPaths};
use tfsod_harness::plot::read_jsonl;
use tfsod_harness::HarnessError;

fn small(iters: usize) -> RunConfig {
    RunConfig {
        data_pretrain_images: 6,
        data_test_images: 4,
        data_novel_pool: 5,
        pretrain_iters: iters,
        warmup_iters: 10,
        ..RunConfig::default()
    }
}

#[test]
fn hundred_iterations_give_hundred_rows_that_conserve_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        thre_cls: 1.0,
        ..small(100)
    };
    let paths = RunPaths::new(dir.path(), &cfg);
    let data = ensure_dataset(&paths, &cfg).unwrap();
    run_pretrain(&paths, &cfg, &data).unwrap();

    let csv = fs::read_to_string(paths.dir.join("pretrain.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 100);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let num = |r: &Vec<&str>, name: &str| r[col(name)].parse::<usize>().unwrap();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(num(r, "iteration"), i);
        assert_eq!(num(r, "potential"), 0, "gate closed");
        let total = num(r, "active") + num(r, "negative") + num(r, "potential");
        assert_eq!(total, cfg.budget * num(r, "images"));
        let per_level: usize = header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.contains("_l"))
            .map(|(k, _)| r[k].parse::<usize>().unwrap())
            .sum();
        assert_eq!(per_level, total);
    }
    let log = read_jsonl(&paths.dir.join("pretrain.jsonl")).unwrap();
    assert_eq!(log.len(), 100);
    assert_eq!(log[7].csv_row(), csv.lines().nth(8).unwrap());
}

#[test]
fn disk_full_aborts_cleanly_with_partial_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(40);
    let paths = RunPaths::new(dir.path(), &cfg);
    let data = ensure_dataset(&paths, &cfg).unwrap();
    fs::create_dir_all(&paths.dir).unwrap();
    let jsonl_path = paths.dir.join("pretrain.jsonl");
    let full = OpenOptions::new().write(true).open("/dev/full").unwrap();
    let mut sink = FileSink::from_files(
        full,
        File::create(&jsonl_path).unwrap(),
        "/dev/full".into(),
        jsonl_path.clone(),
        4,
        10,
    )
    .unwrap();
    let err = run_pretrain_with(&paths, &cfg, &data, &mut sink).unwrap_err();
    drop(sink);
    match &err {
        HarnessError::Training {
            stage: Stage::Pretrain,
            source: DetectorError::Telemetry(_),
            last_good: Some(p),
        } => assert!(p.exists()),
        other => panic!("unexpected {other}"),
    }
    assert_ne!(err.exit_code(), 0);
    // The records written before the failure are whole and in order.
    let log = read_jsonl(&jsonl_path).unwrap();
    assert_eq!(log.len(), 10);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.iteration as usize, i);
    }
    assert!(!paths.checkpoint(Stage::Pretrain).exists());
}
