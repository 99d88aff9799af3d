use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use depthmark::io::{read_annotation, write_annotation};
use depthmark::model_io;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthmark")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Small corpus plus a fast model config, shared by the tests below.
struct Shared {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let config = root.join("fast.cfg");
        fs::write(&config, "# quick settings\nstages = 2\nbits = 8\nsmuf.patch_side = 5\njitter.count = 3\n").unwrap();
        let out = bin(&["synth", "--n", "40", "--yaw-range", "-90:90", "--seed", "5", "--out", &s(&data)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Shared { _dir: dir, root, data, config }
    })
}

fn train(name: &str, extra: &[&str]) -> (PathBuf, String) {
    let sh = shared();
    let out_dir = sh.root.join(name);
    let mut args = vec!["train", "--config", &*sh.config.to_str().unwrap(), "--seed", "5"];
    let data = s(&sh.data);
    let od = s(&out_dir);
    args.extend(["--data", &data, "--out", &od]);
    args.extend(extra);
    let out = bin(&args);
    let log = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "{log}");
    (out_dir.join("model.gmdl"), log)
}

#[test]
fn synth_writes_a_deterministic_corpus() {
    let sh = shared();
    let again = sh.root.join("again");
    assert!(bin(&["synth", "--n", "40", "--yaw-range", "-90:90", "--seed", "5", "--out", &s(&again)]).status.success());
    let mut names: Vec<_> = fs::read_dir(&sh.data).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 81);
    for n in &names {
        assert_eq!(fs::read(sh.data.join(n)).unwrap(), fs::read(again.join(n)).unwrap(), "{n:?}");
    }
    let manifest = fs::read_to_string(sh.data.join("manifest.tsv")).unwrap();
    assert!(manifest.starts_with("# seed=5\n"));
    assert_eq!(manifest.lines().count(), 42);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["synth", "--n", "0", "--out", &s(dir.path())]).status.code(), Some(2));
    assert_eq!(bin(&["synth", "--yaw-range", "-100:90", "--out", &s(dir.path())]).status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "stagez = 3\n").unwrap();
    let out = bin(&["synth", "--config", &s(&cfg), "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stagez"));
    // data errors are 3
    assert_eq!(bin(&["train", "--data", &s(&dir.path().join("nope")), "--out", &s(dir.path())]).status.code(), Some(3));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "seed = 1\nsynth.n = 3\n").unwrap();
    let out = dir.path().join("o");
    assert!(bin(&["synth", "--config", &s(&cfg), "--seed", "2", "--out", &s(&out)]).status.success());
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert!(manifest.starts_with("# seed=2\n"));
    assert_eq!(manifest.lines().count(), 5);
}

#[test]
fn grid_training_traces_do_not_increase() {
    let (model, log) = train("grid5", &["--method", "grid", "--dms", "5"]);
    let traces: Vec<Vec<f64>> = log
        .lines()
        .filter_map(|l| l.split_once("error trace (px) "))
        .map(|(_, t)| t.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(traces.len(), 5);
    for t in &traces {
        assert_eq!(t.len(), 3);
        assert!(t.windows(2).all(|w| w[1] <= w[0]), "{t:?}");
    }
    let file = model_io::load(&model).unwrap();
    assert_eq!(file.model.subsets.len(), 5);
    assert_eq!(file.info["seed"], "5");
}

#[test]
fn one_dm_is_a_single_full_face_cascade() {
    let (model, _) = train("grid1", &["--dms", "1"]);
    let file = model_io::load(&model).unwrap();
    assert_eq!(file.model.subsets.len(), 1);
    let bin = &file.model.subsets[0].bin;
    assert_eq!((bin.yaw_min, bin.yaw_max, bin.landmark_ids.len()), (-90.0, 90.0, 22));
}

#[test]
fn smuf_training_logs_projection_and_map_sizes() {
    let (_, log) = train("smuf", &["--method", "smuf", "--dms", "3"]);
    // 5x5 patch -> 24 differences; 8 bits per landmark
    assert!(log.contains("22 landmarks, W 24x8, R 44x176"), "{log}");
    assert!(log.contains("14 landmarks, W 24x8, R 28x112"), "{log}");
}

#[test]
fn predict_eval_round_trip() {
    let sh = shared();
    let (model, _) = train("grid3", &["--dms", "3"]);
    let pred = sh.root.join("pred3");
    let out = bin(&["predict", "--model", &s(&model), "--data", &s(&sh.data), "--threads", "3", "--out", &s(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ann = read_annotation(pred.join("sample_0000.lm")).unwrap();
    assert!(ann.subset.is_some());
    assert_eq!(ann.records.len(), 22);

    // the trained corpus is fitted closely, so evaluation on it is near zero
    let eval = sh.root.join("eval3");
    let out = bin(&["eval", "--data", &s(&sh.data), "--model", &s(&model), "--bench", "--out", &s(&eval)]);
    assert!(out.status.success());
    let summary = fs::read_to_string(eval.join("summary.csv")).unwrap();
    let overall: f64 = summary.lines().find(|l| l.starts_with("overall,")).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(overall < 0.05, "{summary}");
    let timing = fs::read_to_string(eval.join("timing.csv")).unwrap();
    for phase in ["dm_selection,", "feature_extraction,", "location_update,"] {
        assert!(timing.contains(phase), "{timing}");
    }
    assert!(fs::read_to_string(eval.join("ced.csv")).unwrap().starts_with("threshold_mm,fraction\n"));

    // evaluating the written predictions gives the same summary
    let eval_p = sh.root.join("eval3p");
    assert!(bin(&["eval", "--data", &s(&sh.data), "--predictions", &s(&pred), "--out", &s(&eval_p)]).status.success());
    assert_eq!(summary, fs::read_to_string(eval_p.join("summary.csv")).unwrap());
}

#[test]
fn perfect_predictions_score_zero() {
    let sh = shared();
    let pred = sh.root.join("perfect");
    fs::create_dir_all(&pred).unwrap();
    for line in fs::read_to_string(sh.data.join("manifest.tsv")).unwrap().lines().skip(2) {
        let f: Vec<&str> = line.split('\t').collect();
        let mut ann = read_annotation(sh.data.join(f[1])).unwrap();
        ann.subset = Some(0);
        ann.meta = vec![
            ("subset_yaw".into(), "-90:90".into()),
            ("box".into(), format!("{},{},{},{}", f[4], f[5], f[6], f[7])),
        ];
        write_annotation(pred.join(f[1]), &ann).unwrap();
    }
    let eval = sh.root.join("eval_perfect");
    let out = bin(&["eval", "--data", &s(&sh.data), "--predictions", &s(&pred), "--out", &s(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(eval.join("summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        match f[0] {
            "detection_rate_pct" | "selection_rate_pct" => assert_eq!(f[1], "100.00"),
            "seed" => assert_eq!(f[1], "0"),
            _ if f[3] != "0" => assert_eq!(f[1], "0.0000", "{line}"),
            _ => {}
        }
    }
}

#[test]
fn box_flag_bypasses_detection() {
    let sh = shared();
    let (model, _) = train("grid1b", &["--dms", "1"]);
    let image = s(&sh.data.join("sample_0001.pgm"));
    let run = |b: &str, out: &str| {
        let dir = sh.root.join(out);
        assert!(bin(&["predict", "--model", &s(&model), "--image", &image, "--box", b, "--out", &s(&dir)]).status.success());
        fs::read_to_string(dir.join("sample_0001.lm")).unwrap()
    };
    let a = run("60,20,120,160", "box_a");
    assert_eq!(a, run("60,20,120,160", "box_b"));
    assert_ne!(a, run("70,25,110,150", "box_c"));
    assert!(a.contains("box=60,20,120,160\n"));
    assert_eq!(bin(&["predict", "--model", &s(&model), "--image", &image, "--box", "1,2,3", "--out", &s(&sh.root)]).status.code(), Some(2));
}
