//! Command-line front end: `synth`, `train`, `predict` and `eval`.
//!
//! Settings come from defaults, then `--config`, then flags. Logs go to
//! standard error; data products go to files under `--out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{Features, Method, RunConfig};
use crate::detect::{detect_face, DetectConfig};
use crate::error::{Error, Result};
use crate::eval::{bench_predict, ced_csv, detection_ok, localization_error, summarize, summary_csv, timing_csv, EvalRecord};
use crate::gating::{GatedModel, PoseBin};
use crate::image::{DepthImage, FaceBox, LandmarkTable, Shape};
use crate::io::{load_depth_image, read_annotation, write_annotation, write_depth_image, Annotation, DEFAULT_SCALE_MM_PER_UNIT};
use crate::model_io::{self, ModelFile};
use crate::pipeline::{predict_full, prepare, train_gated, Prepared};
use crate::preprocess::PreprocessConfig;
use crate::synth::make_dataset;

pub const MANIFEST: &str = "manifest.tsv";
pub const MODEL_FILE: &str = "model.gmdl";
pub const PREDICTIONS: &str = "predictions.tsv";

#[derive(Debug, Parser)]
#[command(name = "depthmark", version, about = "Facial landmarks on depth images")]
pub struct Cli {
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus with annotations and a manifest.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        /// Yaw range in degrees, `min:max`.
        #[arg(long, allow_hyphen_values = true)]
        yaw_range: Option<String>,
    },
    /// Train a gated GRID or SMUF model from a corpus.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        features: Option<String>,
        /// Number of pose subsets (1, 3 or 5).
        #[arg(long)]
        dms: Option<usize>,
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Localize landmarks with a trained model.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Corpus directory with a manifest.
        #[arg(long, conflicts_with = "image")]
        data: Option<PathBuf>,
        /// A single depth image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Face box `x,y,w,h`; skips detection.
        #[arg(long = "box", requires = "image")]
        face_box: Option<String>,
    },
    /// Score predictions (or a model) against a corpus.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "model")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also time the prediction phases (needs `--model`).
        #[arg(long)]
        bench: bool,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    match cli.command {
        Command::Synth { n, yaw_range } => {
            if let Some(n) = n {
                cfg.synth_n = n;
            }
            if let Some(r) = yaw_range {
                (cfg.yaw_min, cfg.yaw_max) = parse_range(&r)?;
            }
            cfg.validate()?;
            cmd_synth(&cfg)
        }
        Command::Train {
            data,
            method,
            features,
            dms,
            stages,
        } => {
            set_path(&mut cfg.data, data);
            if let Some(m) = method {
                cfg.method = m.parse::<Method>()?;
            }
            if let Some(f) = features {
                cfg.features = f.parse::<Features>()?;
            }
            if let Some(d) = dms {
                cfg.dms = d;
                cfg.bins = None;
            }
            if let Some(k) = stages {
                cfg.stages = k;
            }
            cfg.validate()?;
            cmd_train(&cfg)
        }
        Command::Predict {
            model,
            data,
            image,
            face_box,
        } => {
            set_path(&mut cfg.model, model);
            set_path(&mut cfg.data, data);
            let face = face_box.as_deref().map(parse_box).transpose()?;
            cfg.validate()?;
            match image {
                Some(img) => cmd_predict_image(&cfg, &img, face),
                None => cmd_predict(&cfg),
            }
        }
        Command::Eval {
            data,
            predictions,
            model,
            bench,
        } => {
            set_path(&mut cfg.data, data);
            set_path(&mut cfg.predictions, predictions);
            set_path(&mut cfg.model, model);
            cfg.validate()?;
            cmd_eval(&cfg, bench)
        }
    }
}

fn set_path(field: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *field = flag;
    }
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("yaw range must look like -90:90, found {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_box(s: &str) -> Result<FaceBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("box must be x,y,w,h, found {s:?}")))?;
    if v.len() != 4 {
        return Err(Error::Config(format!("box must have four numbers, found {s:?}")));
    }
    FaceBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Config(e.to_string()))
}

fn box_text(b: &FaceBox) -> String {
    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing --{what}")))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = required(&cfg.out, "out")?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// First bin that contains the yaw and admits the visibility pattern.
fn subset_of(bins: &[PoseBin], yaw: f64, gt: &Shape) -> Option<usize> {
    let all = gt.visible.iter().all(|&v| v);
    bins.iter().position(|b| b.contains(yaw) && (all || !b.require_all_visible))
}

/// One corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub image: String,
    pub annotation: String,
    pub yaw: f64,
    pub subset: Option<usize>,
    pub face: FaceBox,
}

const MANIFEST_HEADER: &str = "image\tannotation\tyaw_deg\tsubset\tbox_x\tbox_y\tbox_w\tbox_h";

pub fn render_manifest(rows: &[ManifestRow], seed: u64) -> String {
    let mut s = format!("# seed={seed}\n{MANIFEST_HEADER}\n");
    for r in rows {
        let subset = r.subset.map_or("-".to_string(), |z| z.to_string());
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{subset}\t{}\t{}\t{}\t{}",
            r.image, r.annotation, r.yaw, r.face.x, r.face.y, r.face.w, r.face.h
        );
    }
    s
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            if line != MANIFEST_HEADER {
                return Err(Error::MalformedAnnotation(format!("{}: unexpected header {line:?}", path.display())));
            }
            header = true;
            continue;
        }
        let bad = |what: &str| Error::MalformedAnnotation(format!("{} line {}: bad {what}", path.display(), i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad("field count"));
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad("number"));
        rows.push(ManifestRow {
            image: f[0].to_string(),
            annotation: f[1].to_string(),
            yaw: num(2)?,
            subset: if f[3] == "-" { None } else { Some(f[3].parse().map_err(|_| bad("subset"))?) },
            face: FaceBox::new(num(4)?, num(5)?, num(6)?, num(7)?)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("manifest lists no samples"));
    }
    Ok(rows)
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let bins = cfg.bins()?;
    let table = LandmarkTable::face22();
    let samples = make_dataset(cfg.synth_n, &cfg.dataset_config(), cfg.seed)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("sample_{i:04}.pgm");
        let annotation = format!("sample_{i:04}.lm");
        let subset = subset_of(&bins, s.yaw, &s.gt);
        write_depth_image(dir.join(&image), &s.image, DEFAULT_SCALE_MM_PER_UNIT)?;
        let mut ann = Annotation::from_shape(&s.gt, &table.names);
        ann.yaw_deg = Some(s.yaw);
        ann.subset = subset;
        ann.meta.push(("seed".into(), cfg.seed.to_string()));
        write_annotation(dir.join(&annotation), &ann)?;
        rows.push(ManifestRow {
            image,
            annotation,
            yaw: s.yaw,
            subset,
            face: s.face,
        });
    }
    write(dir.join(MANIFEST), &render_manifest(&rows, cfg.seed))?;
    eprintln!("wrote {} samples to {}", rows.len(), dir.display());
    Ok(())
}

/// Loads and preprocesses every manifest entry, using the manifest boxes.
pub fn load_corpus(dir: &Path, table: &LandmarkTable) -> Result<Vec<Prepared>> {
    let pre = PreprocessConfig::default();
    read_manifest(dir)?
        .iter()
        .map(|r| {
            let raw = load_depth_image(dir.join(&r.image))?;
            let gt = read_annotation(dir.join(&r.annotation))?.to_shape(table.len())?;
            prepare(&raw, gt, r.yaw, Some(r.face), &pre, &DetectConfig::default())
        })
        .collect()
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = required(&cfg.data, "data")?;
    let dir = out_dir(cfg)?;
    let table = LandmarkTable::face22();
    let samples = load_corpus(data, &table)?;
    let gated = cfg.gated_config()?;
    eprintln!(
        "training {} on {} samples ({} subsets, seed {})",
        gated.method.name(),
        samples.len(),
        gated.bins.len(),
        cfg.seed
    );
    let (model, reports) = train_gated(&samples, &table, &gated)?;
    for (z, r) in reports.iter().enumerate() {
        let trace: Vec<String> = r.trace.iter().map(|e| format!("{e:.3}")).collect();
        eprintln!(
            "subset {z} {}: {} samples, {} landmarks, {}; error trace (px) {}",
            r.name,
            r.samples,
            r.landmarks,
            r.dims,
            trace.join(" ")
        );
    }
    let info = cfg
        .training_summary()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let path = dir.join(MODEL_FILE);
    model_io::save(&ModelFile { model, table, info }, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Runs `f` over `items` on up to `threads` scoped workers, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Prediction for one raw depth image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub shape: Shape,
    pub subset: usize,
    pub face: FaceBox,
}

pub fn predict_raw(model: &GatedModel, raw: &DepthImage, face: Option<FaceBox>) -> Result<Prediction> {
    let face = match face {
        Some(f) => f,
        None => detect_face(raw, &DetectConfig::default())?.face,
    };
    let img = crate::preprocess::preprocess(raw, &PreprocessConfig::default())?.image;
    let (shape, subset) = predict_full(model, &img, &face);
    Ok(Prediction { shape, subset, face })
}

fn prediction_annotation(p: &Prediction, file: &ModelFile, seed: u64) -> Annotation {
    let bin = &file.model.subsets[p.subset].bin;
    let mut ann = Annotation::from_shape(&p.shape, &file.table.names);
    ann.subset = Some(p.subset);
    ann.meta = vec![
        ("subset_name".into(), bin.name.clone()),
        ("subset_yaw".into(), format!("{}:{}", bin.yaw_min, bin.yaw_max)),
        ("box".into(), box_text(&p.face)),
        ("model_kind".into(), file.kind().name().into()),
        ("seed".into(), seed.to_string()),
    ];
    ann
}

fn lm_name(image: &str) -> String {
    let stem = Path::new(image).file_stem().map_or(image.into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}.lm")
}

fn cmd_predict_image(cfg: &RunConfig, image: &Path, face: Option<FaceBox>) -> Result<()> {
    let file = model_io::load(required(&cfg.model, "model")?)?;
    let dir = out_dir(cfg)?;
    let raw = load_depth_image(image)?;
    let p = predict_raw(&file.model, &raw, face)?;
    let name = lm_name(&image.to_string_lossy());
    write_annotation(dir.join(&name), &prediction_annotation(&p, &file, cfg.seed))?;
    eprintln!("subset {} ({}), wrote {name}", p.subset, file.model.subsets[p.subset].bin.name);
    Ok(())
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let file = model_io::load(required(&cfg.model, "model")?)?;
    let data = required(&cfg.data, "data or --image")?;
    let dir = out_dir(cfg)?;
    let rows = read_manifest(data)?;
    let preds = par_map(&rows, cfg.threads, |r| {
        let raw = load_depth_image(data.join(&r.image))?;
        predict_raw(&file.model, &raw, None)
    });
    let mut tsv = format!("# seed={}\nimage\tprediction\tsubset\tbox\n", cfg.seed);
    for (r, p) in rows.iter().zip(preds) {
        let p = p?;
        let name = lm_name(&r.image);
        write_annotation(dir.join(&name), &prediction_annotation(&p, &file, cfg.seed))?;
        let _ = writeln!(tsv, "{}\t{name}\t{}\t{}", r.image, p.subset, box_text(&p.face));
    }
    write(dir.join(PREDICTIONS), &tsv)?;
    eprintln!("wrote {} predictions to {}", rows.len(), dir.display());
    Ok(())
}

fn meta<'a>(ann: &'a Annotation, key: &str, path: &Path) -> Result<&'a str> {
    ann.meta
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::MalformedAnnotation(format!("{}: missing `{key}`", path.display())))
}

/// Evaluation record from a prediction file written by `predict`.
fn record_from_file(row: &ManifestRow, gt: &Shape, pitch: f64, path: &Path, margin: f64, len: usize) -> Result<EvalRecord> {
    let ann = read_annotation(path)?;
    let pred = ann.to_shape(len)?;
    let subset = ann
        .subset
        .ok_or_else(|| Error::MalformedAnnotation(format!("{}: missing subset", path.display())))?;
    let (lo, hi) = parse_range(meta(&ann, "subset_yaw", path)?).map_err(|_| Error::MalformedAnnotation(format!("{}: bad subset_yaw", path.display())))?;
    let face = parse_box(meta(&ann, "box", path)?).map_err(|_| Error::MalformedAnnotation(format!("{}: bad box", path.display())))?;
    Ok(EvalRecord {
        errors: localization_error(&pred, gt, pitch)?,
        selected_subset: subset,
        selection_correct: PoseBin::new("", lo, hi, vec![]).contains(row.yaw),
        detection_ok: detection_ok(&face, gt, margin),
        predict_time: 0.0,
    })
}

fn cmd_eval(cfg: &RunConfig, bench: bool) -> Result<()> {
    let data = required(&cfg.data, "data")?;
    let rows = read_manifest(data)?;
    let table = LandmarkTable::face22();
    let model = match (&cfg.model, &cfg.predictions) {
        (Some(m), _) => Some(model_io::load(m)?),
        (None, Some(_)) => None,
        (None, None) => return Err(Error::Config("eval needs --predictions or --model".into())),
    };
    if bench && model.is_none() {
        return Err(Error::Config("--bench needs --model".into()));
    }
    let dir = out_dir(cfg)?;
    let mut records = Vec::with_capacity(rows.len());
    let mut bench_inputs = Vec::new();
    for r in &rows {
        let raw = load_depth_image(data.join(&r.image))?;
        let gt = read_annotation(data.join(&r.annotation))?.to_shape(table.len())?;
        let record = match &model {
            Some(file) => {
                let start = std::time::Instant::now();
                let p = predict_raw(&file.model, &raw, None)?;
                let predict_time = start.elapsed().as_secs_f64();
                if bench {
                    bench_inputs.push((crate::preprocess::preprocess(&raw, &PreprocessConfig::default())?.image, p.face));
                }
                EvalRecord {
                    errors: localization_error(&p.shape, &gt, raw.pitch_mm)?,
                    selected_subset: p.subset,
                    selection_correct: file.model.subsets[p.subset].bin.contains(r.yaw),
                    detection_ok: detection_ok(&p.face, &gt, cfg.detection_margin),
                    predict_time,
                }
            }
            None => {
                let preds = required(&cfg.predictions, "predictions")?;
                let path = preds.join(lm_name(&r.image));
                if !path.exists() {
                    return Err(Error::MalformedAnnotation(format!("no prediction for {} (looked for {})", r.image, path.display())));
                }
                record_from_file(r, &gt, raw.pitch_mm, &path, cfg.detection_margin, table.len())?
            }
        };
        records.push(record);
    }
    let summary = summarize(&records, &table.names)?;
    write(dir.join("summary.csv"), &summary_csv(&summary, Some(cfg.seed)))?;
    write(dir.join("ced.csv"), &format!("{}# seed={}\n", ced_csv(&summary), cfg.seed))?;
    let overall = summary.overall.map_or("n/a".to_string(), |s| format!("{:.3}±{:.3} mm", s.mean, s.std));
    println!(
        "records={} detection_rate={:.2}% selection_rate={:.2}% mean_error={overall}",
        summary.records, summary.detection_rate, summary.selection_rate
    );
    if let Some(file) = &model {
        if bench {
            let inputs: Vec<(&DepthImage, FaceBox)> = bench_inputs.iter().map(|(i, f)| (i, *f)).collect();
            let b = bench_predict(&file.model, &inputs, cfg.bench_repetitions)?;
            write(dir.join("timing.csv"), &timing_csv(&b, Some(cfg.seed)))?;
            eprintln!("mean predict time {:.3} ms per image", b.measured.as_secs_f64() * 1e3);
        }
    }
    Ok(())
}
