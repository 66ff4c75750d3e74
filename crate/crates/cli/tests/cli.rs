use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ilc_core::infer::{read_maps, read_prediction_dump};
use ilc_core::mask::read_mask_archive;
use ilc_core::metrics::read_report;

const SMALL: &str = "\
[network]
input_size = 32
channels = [8, 16]
strides = [2, 2]
density_scale = 0.0625

[train]
backbone_lr = 0.005
head_lr = 0.005
batch_size = 8
stage1_epochs = 1
stage2_epochs = 1

[synth]
image_size = 32
num_images = 24
test_fraction = 0.25
min_radius = 2.0
max_radius = 3.0
";

fn ilc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ilc(args);
    assert!(
        out.status.success(),
        "ilc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: String,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("small.toml");
        fs::write(&config, SMALL).unwrap();
        let f = Fixture {
            config: config.to_string_lossy().into_owned(),
            dir,
        };
        ok(&["--config", &f.config, "gen-synth", "--out", &f.p("data")]);
        f
    }

    fn p(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn with_config<'a>(&'a self, args: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec!["--config", self.config.as_str()];
        v.extend_from_slice(args);
        v
    }

    fn trained(self) -> Self {
        let data = self.p("data");
        let run = self.p("run");
        ok(&self.with_config(&["train", "--data", &data, "--out", &run]));
        self
    }

    fn predicted(self) -> Self {
        let (ck, data, out, dens) = (self.p("run/stage2.ilck"), self.p("data"), self.p("pred.csv"), self.p("dens"));
        ok(&self.with_config(&[
            "predict",
            "--checkpoint",
            &ck,
            "--data",
            &data,
            "--split",
            "test",
            "--out",
            &out,
            "--export-density",
            &dens,
        ]));
        self
    }
}

fn log_steps(path: &Path) -> Vec<(u8, u64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn gen_synth_manifest_lists_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/new/data");
    let stdout = ok(&[
        "--seed",
        "7",
        "gen-synth",
        "--out",
        out.to_str().unwrap(),
        "--images",
        "200",
        "--size",
        "32",
    ]);
    assert!(stdout.contains("wrote 200 images"), "{stdout}");
    let manifest = fs::read_to_string(out.join("splits.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 201);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 200);
}

#[test]
fn invalid_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ilc(&["gen-synth", "--out", dir.path().to_str().unwrap(), "--size", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = ilc(&["gen-synth", "--out", dir.path().to_str().unwrap(), "--size", "many"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_problems_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_size = 0\nhead_lr = -1.0\n[score]\ngamma = -2.0\n").unwrap();
    let out = ilc(&[
        "--config",
        cfg.to_str().unwrap(),
        "gen-synth",
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    for key in ["batch_size", "head_lr", "gamma"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }

    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = ilc(&[
        "--config",
        cfg.to_str().unwrap(),
        "gen-synth",
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_all_writes_two_checkpoints_and_one_log() {
    let f = Fixture::new().trained();
    assert!(f.path("run/stage1.ilck").is_file());
    assert!(f.path("run/stage2.ilck").is_file());
    let steps = log_steps(&f.path("run/loss_log.csv"));
    assert!(steps.iter().any(|s| s.0 == 1) && steps.iter().any(|s| s.0 == 2));
    assert!(steps.windows(2).all(|w| w[1].1 == w[0].1 + 1), "{steps:?}");
}

#[test]
fn resume_continues_the_step_counter() {
    let f = Fixture::new();
    let (data, run) = (f.p("data"), f.p("run"));
    ok(&f.with_config(&["train", "--data", &data, "--out", &run, "--stage", "1"]));
    let first = log_steps(&f.path("run/loss_log.csv"));
    let ck = f.p("run/stage1.ilck");
    ok(&f.with_config(&["train", "--data", &data, "--out", &run, "--stage", "2", "--resume", &ck]));
    let all = log_steps(&f.path("run/loss_log.csv"));
    assert!(all.len() > first.len());
    assert_eq!(&all[..first.len()], first.as_slice());
    assert_eq!(all[first.len()], (2, first.last().unwrap().1 + 1));
}

#[test]
fn stage_two_needs_a_checkpoint() {
    let f = Fixture::new();
    let (data, run) = (f.p("data"), f.p("run"));
    let out = ilc(&f.with_config(&["train", "--data", &data, "--out", &run, "--stage", "2"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_runtime_code() {
    let f = Fixture::new();
    let (data, run) = (f.p("data"), f.p("run"));
    let out = ilc(&f.with_config(&["train", "--data", &data, "--out", &run, "--head-lr", "1e8", "--backbone-lr", "1e8"]));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
}

#[test]
fn predict_single_image_and_empty_list() {
    let f = Fixture::new().trained();
    let list = f.path("one.txt");
    fs::write(&list, "data/images/img00000.png\n").unwrap();
    let (ck, cats, out) = (f.p("run/stage2.ilck"), f.p("data/categories.txt"), f.p("one.csv"));
    ok(&[
        "predict",
        "--checkpoint",
        &ck,
        "--images",
        list.to_str().unwrap(),
        "--categories",
        &cats,
        "--out",
        &out,
    ]);
    let recs = read_prediction_dump(Path::new(&out)).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.image_id == "img00000"));
    assert_eq!(
        recs.iter().map(|r| r.category.as_str()).collect::<Vec<_>>(),
        ["disc", "square", "triangle"]
    );
    assert!(!f.path("dens").exists());

    let empty = f.path("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = f.p("empty.csv");
    ok(&["predict", "--checkpoint", &ck, "--images", empty.to_str().unwrap(), "--out", &out]);
    assert!(read_prediction_dump(Path::new(&out)).unwrap().is_empty());
}

#[test]
fn export_density_writes_map_dumps() {
    let f = Fixture::new().trained().predicted();
    let recs = read_prediction_dump(&f.path("pred.csv")).unwrap();
    assert_eq!(recs.len(), 6 * 3);
    let maps = read_maps(&f.path("dens/img00018.density.ilcd")).unwrap();
    assert_eq!((maps.channels(), maps.height(), maps.width()), (3, 8, 8));
    assert!(f.path("dens/img00018.category.ilcd").is_file());
    let r = recs.iter().find(|r| r.image_id == "img00018" && r.category == "disc").unwrap();
    assert!((maps.channel_sum(0) - r.raw_sum).abs() < 1e-4);
}

#[test]
fn evaluate_reports_and_plots() {
    let f = Fixture::new().trained().predicted();
    let (pred, data, dens, report) = (f.p("pred.csv"), f.p("data"), f.p("dens"), f.p("report.csv"));
    let plots = f.p("plots");
    ok(&[
        "evaluate",
        "--predictions",
        &pred,
        "--data",
        &data,
        "--metrics",
        "mrmse,game",
        "--density-dir",
        &dens,
        "--out",
        &report,
        "--plot",
        "density,rmse-by-count",
        "--image",
        "img00019",
        "--plot-dir",
        &plots,
    ]);
    let rows = read_report(Path::new(&report)).unwrap();
    for metric in ["mrmse", "game"] {
        assert!(rows.iter().any(|r| r.metric == metric && r.category == "mean"), "{metric} missing");
    }
    assert_eq!(rows.iter().filter(|r| r.metric == "game" && r.category == "mean").count(), 4);
    for cat in ["disc", "square", "triangle"] {
        let png = f.path(&format!("plots/img00019_{cat}_density.png"));
        let img = image::open(&png).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
    }
    let svg = fs::read_to_string(f.path("plots/rmse_by_count.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn evaluate_game_needs_density_dir() {
    let f = Fixture::new().trained().predicted();
    let (pred, data, report) = (f.p("pred.csv"), f.p("data"), f.p("report.csv"));
    let out = ilc(&[
        "evaluate",
        "--predictions",
        &pred,
        "--data",
        &data,
        "--metrics",
        "game",
        "--out",
        &report,
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn score_masks_with_and_without_density_penalty() {
    let f = Fixture::new().trained().predicted();
    let (dens, pred, props, data) = (f.p("dens"), f.p("pred.csv"), f.p("data/proposals.txt"), f.p("data"));
    let (out, scores) = (f.p("masks.txt"), f.p("scores.csv"));
    ok(&[
        "score-masks",
        "--density-dir",
        &dens,
        "--predictions",
        &pred,
        "--proposals",
        &props,
        "--data",
        &data,
        "--out",
        &out,
        "--breakdown",
        &scores,
    ]);
    let masks = read_mask_archive(Path::new(&out)).unwrap();
    let dump = read_prediction_dump(Path::new(&pred)).unwrap();
    let expected: u32 = dump.iter().map(|r| r.count).sum();
    assert_eq!(masks.len() as u32, expected);
    for m in &masks {
        assert_eq!((m.mask.height(), m.mask.width()), (32, 32));
        assert!(m.category.is_some());
    }

    let (out0, scores0) = (f.p("masks0.txt"), f.p("scores0.csv"));
    ok(&[
        "score-masks",
        "--density-dir",
        &dens,
        "--predictions",
        &pred,
        "--proposals",
        &props,
        "--data",
        &data,
        "--out",
        &out0,
        "--breakdown",
        &scores0,
        "--gamma",
        "0",
    ]);
    for line in fs::read_to_string(&scores0).unwrap().lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(6).map(|s| s.parse().unwrap()).collect();
        let (instance, boundary, background, total) = (v[0], v[1], v[2], v[4]);
        assert!((total - (instance + boundary - background)).abs() < 1e-9, "{line}");
    }
}

#[test]
fn score_masks_missing_proposals_is_explicit() {
    let f = Fixture::new().trained().predicted();
    let (dens, pred, out) = (f.p("dens"), f.p("pred.csv"), f.p("masks.txt"));
    let missing = f.p("nowhere/proposals.txt");
    let res = ilc(&[
        "score-masks",
        "--density-dir",
        &dens,
        "--predictions",
        &pred,
        "--proposals",
        &missing,
        "--out",
        &out,
    ]);
    assert_ne!(res.status.code(), Some(0));
    assert!(stderr(&res).contains("proposal file"), "{}", stderr(&res));
    assert!(!Path::new(&out).exists());
}

#[test]
fn help_documents_file_formats() {
    let out = ok(&["--help"]);
    for word in ["prediction dump", "mask archive", "ilcd", "Precedence"] {
        assert!(out.contains(word), "{word}");
    }
}
