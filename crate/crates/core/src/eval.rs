//! Localisation error, detection and selection bookkeeping, summary reports
//! and prediction timing.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::gating::{gated_predict_traced, GatedModel};
use crate::image::{DepthImage, FaceBox, Shape};
use crate::timing::PhaseTimes;

/// Default detection margin, as a fraction of the box size.
pub const DEFAULT_DETECTION_MARGIN: f64 = 0.1;

/// Per-landmark Euclidean error in mm; `None` where either shape marks the
/// landmark invisible.
pub fn localization_error(pred: &Shape, gt: &Shape, pitch: f64) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::InconsistentLandmarks(format!(
            "prediction has {} landmarks, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if !(pitch > 0.0) {
        return Err(Error::InvalidParameter(format!("pitch {pitch}")));
    }
    Ok(pred
        .points
        .iter()
        .zip(&gt.points)
        .zip(pred.visible.iter().zip(&gt.visible))
        .map(|((p, g), (&vp, &vg))| (vp && vg).then(|| pitch * (p[0] - g[0]).hypot(p[1] - g[1])))
        .collect())
}

/// Every visible ground-truth landmark lies inside the box grown by `margin`
/// on each side (closed boundary).
pub fn detection_ok(face: &FaceBox, gt: &Shape, margin: f64) -> bool {
    let grown = face.expanded(margin);
    gt.points
        .iter()
        .zip(&gt.visible)
        .filter(|(_, &v)| v)
        .all(|(p, _)| grown.contains(p[0], p[1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub errors: Vec<Option<f64>>,
    pub selected_subset: usize,
    pub selection_correct: bool,
    pub detection_ok: bool,
    /// Seconds.
    pub predict_time: f64,
}

impl EvalRecord {
    /// Mean over the included landmarks; `None` when there are none.
    pub fn mean_error(&self) -> Option<f64> {
        let (s, n) = self.errors.iter().flatten().fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
        (n > 0).then(|| s / n as f64)
    }

    fn gated(&self) -> bool {
        self.detection_ok && self.selection_correct
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// One-decimal `mean±std`.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{mean:.1}±{std:.1}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub names: Vec<String>,
    /// Per landmark; `None` where no gated record includes it.
    pub per_landmark: Vec<Option<Stat>>,
    /// Over all included landmark errors of the gated records.
    pub overall: Option<Stat>,
    pub detection_rate: f64,
    pub selection_rate: f64,
    pub records: usize,
    pub gated_records: usize,
    /// `(threshold_mm, fraction)` over the per-record mean errors of gated
    /// records.
    pub ced: Vec<(f64, f64)>,
    /// Mean per-image phase times, when measured.
    pub timing: Option<PhaseTimes>,
}

/// Aggregates records. Statistics use only records that pass both the
/// detection and the selection check.
pub fn summarize(records: &[EvalRecord], names: &[String]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no evaluation records"));
    }
    let l = names.len();
    if let Some(r) = records.iter().find(|r| r.errors.len() != l) {
        return Err(Error::InconsistentLandmarks(format!(
            "record has {} errors for {l} landmark names",
            r.errors.len()
        )));
    }
    let gated: Vec<&EvalRecord> = records.iter().filter(|r| r.gated()).collect();
    let per_landmark = (0..l)
        .map(|i| Stat::of(&gated.iter().filter_map(|r| r.errors[i]).collect::<Vec<_>>()))
        .collect();
    let all: Vec<f64> = gated.iter().flat_map(|r| r.errors.iter().flatten().copied()).collect();
    let n = records.len() as f64;
    let pct = |k: usize| 100.0 * k as f64 / n;
    let mut means: Vec<f64> = gated.iter().filter_map(|r| r.mean_error()).collect();
    means.sort_by(f64::total_cmp);
    Ok(EvalSummary {
        names: names.to_vec(),
        per_landmark,
        overall: Stat::of(&all),
        detection_rate: pct(records.iter().filter(|r| r.detection_ok).count()),
        selection_rate: pct(records.iter().filter(|r| r.selection_correct).count()),
        records: records.len(),
        gated_records: gated.len(),
        ced: ced_curve(&means, 0.5),
        timing: None,
    })
}

/// Fraction of values at or below each threshold `0, step, 2·step, ...`
/// until every value is covered.
pub fn ced_curve(sorted: &[f64], step: f64) -> Vec<(f64, f64)> {
    if sorted.is_empty() {
        return Vec::new();
    }
    let max = sorted[sorted.len() - 1];
    let steps = (max / step).ceil().max(0.0) as usize;
    let n = sorted.len() as f64;
    (0..=steps)
        .map(|k| {
            let t = k as f64 * step;
            let below = sorted.partition_point(|&v| v <= t);
            (t, below as f64 / n)
        })
        .collect()
}

const EMPTY_MARKER: &str = "# no records passed detection and selection";

/// Summary CSV: one row per landmark, then footer rows.
pub fn summary_csv(s: &EvalSummary, seed: Option<u64>) -> String {
    let mut out = String::from("name,mean_mm,std_mm,n\n");
    if s.gated_records == 0 {
        out.push_str(EMPTY_MARKER);
        out.push('\n');
    }
    for (name, stat) in s.names.iter().zip(&s.per_landmark) {
        match stat {
            Some(st) => writeln!(out, "{name},{:.4},{:.4},{}", st.mean, st.std, st.n),
            None => writeln!(out, "{name},,,0"),
        }
        .expect("write to string");
    }
    match &s.overall {
        Some(st) => writeln!(out, "overall,{:.4},{:.4},{}", st.mean, st.std, st.n),
        None => writeln!(out, "overall,,,0"),
    }
    .expect("write to string");
    writeln!(out, "detection_rate_pct,{:.2},,{}", s.detection_rate, s.records).expect("write to string");
    writeln!(out, "selection_rate_pct,{:.2},,{}", s.selection_rate, s.records).expect("write to string");
    if let Some(t) = &s.timing {
        for (name, d) in timing_rows(t) {
            writeln!(out, "time_{name}_s,{:.6},,", d.as_secs_f64()).expect("write to string");
        }
    }
    if let Some(seed) = seed {
        writeln!(out, "seed,{seed},,").expect("write to string");
    }
    out
}

pub fn ced_csv(s: &EvalSummary) -> String {
    let mut out = String::from("threshold_mm,fraction\n");
    for (t, f) in &s.ced {
        writeln!(out, "{t:.2},{f:.6}").expect("write to string");
    }
    out
}

fn timing_rows(t: &PhaseTimes) -> [(&'static str, Duration); 4] {
    [
        ("dm_selection", t.gate_selection),
        ("feature_extraction", t.feature_extraction),
        ("location_update", t.location_update),
        ("total", t.total()),
    ]
}

/// Timing CSV with one row per prediction phase.
pub fn timing_csv(b: &BenchResult, seed: Option<u64>) -> String {
    let mut out = String::from("phase,mean_s\n");
    for (name, d) in timing_rows(&b.phases) {
        writeln!(out, "{name},{:.9}", d.as_secs_f64()).expect("write to string");
    }
    writeln!(out, "measured_total,{:.9}", b.measured.as_secs_f64()).expect("write to string");
    if let Some(seed) = seed {
        writeln!(out, "# seed={seed}").expect("write to string");
    }
    out
}

/// Mean per-image prediction time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub phases: PhaseTimes,
    /// Wall clock around the whole prediction.
    pub measured: Duration,
    pub images: usize,
}

/// Times gated prediction on `(image, box)` pairs. One warm-up pass is run
/// and discarded; then `repetitions` passes are averaged per image.
pub fn bench_predict(model: &GatedModel, samples: &[(&DepthImage, FaceBox)], repetitions: usize) -> Result<BenchResult> {
    if repetitions == 0 {
        return Err(Error::InvalidParameter("repetitions must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("no benchmark images"));
    }
    for (img, face) in samples {
        std::hint::black_box(gated_predict_traced(img, face, model, None));
    }
    let mut phases = PhaseTimes::default();
    let mut measured = Duration::ZERO;
    for _ in 0..repetitions {
        for (img, face) in samples {
            let mut t = PhaseTimes::default();
            let start = Instant::now();
            std::hint::black_box(gated_predict_traced(img, face, model, Some(&mut t)));
            measured += start.elapsed();
            phases.add(&t);
        }
    }
    let count = (repetitions * samples.len()) as u32;
    Ok(BenchResult {
        phases: PhaseTimes {
            gate_selection: phases.gate_selection / count,
            feature_extraction: phases.feature_extraction / count,
            location_update: phases.location_update / count,
        },
        measured: measured / count,
        images: samples.len(),
    })
}
