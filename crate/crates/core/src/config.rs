//! Flat `key = value` run configuration shared by every subcommand.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear once;
//! unknown keys are rejected. Command-line flags override file values.
//!
//! ```text
//! method = smuf
//! dms = 5
//! stages = 7
//! bin.0 = frontal -45 45 all visible
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cascade::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, HogConfig, LbpConfig};
use crate::gating::{pose_layout, PoseBin, VARIANCE_FLOOR};
use crate::image::{FACE22_LEFT_AND_MIDLINE, FACE22_RIGHT_AND_MIDLINE};
use crate::pipeline::{GatedTrainConfig, MethodConfig};
use crate::smuf::{SmufConfig, SMUF_GAMMA};
use crate::synth::{DatasetConfig, YawDistribution};

/// Ordered `key = value` pairs that must all be consumed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, found {line:?}", i + 1)));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(key.to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    /// Removes and parses `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{}bad value {v:?} for `{key}`", at(line)))),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    /// Removes every key starting with `prefix`, in key order.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let (_, v) = self.entries.remove(&k).expect("key listed above");
                (k, v)
            })
            .collect()
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("{}unknown key `{k}`", at(line)))),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn at(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!("line {line}: ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Grid,
    Smuf,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Method::Grid),
            "smuf" => Ok(Method::Smuf),
            _ => Err(Error::Config(format!("method must be grid or smuf, found {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Features {
    Hog,
    Lbp,
}

impl FromStr for Features {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hog" => Ok(Features::Hog),
            "lbp" => Ok(Features::Lbp),
            _ => Err(Error::Config(format!("features must be hog or lbp, found {s:?}"))),
        }
    }
}

/// Everything a run can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub features: Features,
    pub dms: usize,
    /// Explicit pose bins; replace the `dms` layout when present.
    pub bins: Option<Vec<PoseBin>>,
    pub stages: usize,
    /// Relative ridge strength; the method's default when unset.
    pub gamma: Option<f64>,
    pub lambda: f64,
    pub bits: usize,
    pub alternations: usize,
    pub smuf_patch_side: usize,
    pub hog: HogConfig,
    pub lbp: LbpConfig,
    pub jitter_count: usize,
    pub jitter_scale_sigma: f64,
    pub jitter_shift_sigma: f64,
    pub seed: u64,
    pub flip: bool,
    pub variance_floor: f64,
    pub relative_floor: f64,
    pub threads: usize,
    pub synth_n: usize,
    pub yaw_min: f64,
    pub yaw_max: f64,
    pub max_expression: f64,
    pub occlusion_probability: f64,
    pub noise_sigma: f64,
    pub detection_margin: f64,
    pub bench_repetitions: usize,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let smuf = SmufConfig::default();
        let synth = DatasetConfig::default();
        Self {
            method: Method::Grid,
            features: Features::Hog,
            dms: 5,
            bins: None,
            stages: train.stages,
            gamma: None,
            lambda: smuf.lambda,
            bits: smuf.bits,
            alternations: smuf.alternations,
            smuf_patch_side: smuf.patch_side,
            hog: HogConfig::default(),
            lbp: LbpConfig::default(),
            jitter_count: train.jitter_count,
            jitter_scale_sigma: train.jitter_scale_sigma,
            jitter_shift_sigma: train.jitter_shift_sigma,
            seed: 0,
            flip: true,
            variance_floor: VARIANCE_FLOOR,
            relative_floor: 1.0,
            threads: 1,
            synth_n: 100,
            yaw_min: -90.0,
            yaw_max: 90.0,
            max_expression: synth.max_expression,
            occlusion_probability: synth.occlusion_probability,
            noise_sigma: synth.template.noise_sigma,
            detection_margin: crate::eval::DEFAULT_DETECTION_MARGIN,
            bench_repetitions: 3,
            data: None,
            model: None,
            predictions: None,
            out: None,
        }
    }
}

/// `name yaw_min yaw_max all|right|left|i+j+.. [visible]`
fn parse_bin(key: &str, v: &str) -> Result<PoseBin> {
    let bad = |why: &str| Error::Config(format!("`{key}`: {why} in {v:?}"));
    let f: Vec<&str> = v.split_whitespace().collect();
    if !(4..=5).contains(&f.len()) {
        return Err(bad("expected `name yaw_min yaw_max landmarks [visible]`"));
    }
    let lo: f64 = f[1].parse().map_err(|_| bad("bad yaw_min"))?;
    let hi: f64 = f[2].parse().map_err(|_| bad("bad yaw_max"))?;
    let ids = match f[3] {
        "all" => (0..22).collect(),
        "right" => FACE22_RIGHT_AND_MIDLINE.to_vec(),
        "left" => FACE22_LEFT_AND_MIDLINE.to_vec(),
        list => list
            .split('+')
            .map(|t| t.parse::<usize>().map_err(|_| bad("bad landmark list")))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut bin = PoseBin::new(f[0], lo, hi, ids);
    match f.get(4) {
        None => {}
        Some(&"visible") => bin.require_all_visible = true,
        Some(_) => return Err(bad("trailing field must be `visible`")),
    }
    Ok(bin)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(KeyValues::parse(text)?)?;
        Ok(c)
    }

    /// Overrides fields with the given pairs; all of them must be known keys.
    pub fn apply(&mut self, mut kv: KeyValues) -> Result<()> {
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.take($key)? {
                    $field = v;
                }
            };
        }
        set!("method", self.method);
        set!("features", self.features);
        set!("dms", self.dms);
        set!("stages", self.stages);
        if let Some(g) = kv.take("gamma")? {
            self.gamma = Some(g);
        }
        set!("lambda", self.lambda);
        set!("bits", self.bits);
        set!("alternations", self.alternations);
        set!("smuf.patch_side", self.smuf_patch_side);
        set!("hog.patch_side", self.hog.patch_side);
        set!("hog.cells", self.hog.cells_per_side);
        set!("hog.bins", self.hog.bins);
        set!("hog.epsilon", self.hog.epsilon);
        set!("lbp.patch_side", self.lbp.patch_side);
        set!("jitter.count", self.jitter_count);
        set!("jitter.scale_sigma", self.jitter_scale_sigma);
        set!("jitter.shift_sigma", self.jitter_shift_sigma);
        set!("seed", self.seed);
        set!("flip", self.flip);
        set!("gate.variance_floor", self.variance_floor);
        set!("gate.relative_floor", self.relative_floor);
        set!("threads", self.threads);
        set!("synth.n", self.synth_n);
        set!("synth.yaw_min", self.yaw_min);
        set!("synth.yaw_max", self.yaw_max);
        set!("synth.max_expression", self.max_expression);
        set!("synth.occlusion", self.occlusion_probability);
        set!("synth.noise_sigma", self.noise_sigma);
        set!("eval.margin", self.detection_margin);
        set!("bench.repetitions", self.bench_repetitions);
        for (key, field) in [
            ("data", &mut self.data),
            ("model", &mut self.model),
            ("predictions", &mut self.predictions),
            ("out", &mut self.out),
        ] {
            if let Some(p) = kv.take::<PathBuf>(key)? {
                *field = Some(p);
            }
        }
        let bins = kv.take_prefixed("bin.");
        if !bins.is_empty() {
            let mut indexed = bins
                .iter()
                .map(|(k, v)| {
                    let i: usize = k["bin.".len()..]
                        .parse()
                        .map_err(|_| Error::Config(format!("bad bin key `{k}`")))?;
                    Ok((i, parse_bin(k, v)?))
                })
                .collect::<Result<Vec<_>>>()?;
            indexed.sort_by_key(|(i, _)| *i);
            if indexed.iter().enumerate().any(|(want, (i, _))| *i != want) {
                return Err(Error::Config("bins must be numbered bin.0, bin.1, ... without gaps".into()));
            }
            self.bins = Some(indexed.into_iter().map(|(_, b)| b).collect());
        }
        kv.finish()
    }

    /// Checks every field that a command could trip over later.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.synth_n == 0 {
            return bad("synth.n must be at least 1".into());
        }
        if !(self.yaw_min <= self.yaw_max && self.yaw_min >= -90.0 && self.yaw_max <= 90.0) {
            return bad(format!("yaw range {}:{} must lie within [-90, 90]", self.yaw_min, self.yaw_max));
        }
        if !(self.detection_margin >= 0.0) {
            return bad(format!("eval.margin {}", self.detection_margin));
        }
        if self.bench_repetitions == 0 {
            return bad("bench.repetitions must be at least 1".into());
        }
        if !(self.variance_floor > 0.0) || !(self.relative_floor >= 0.0) {
            return bad("gate floors must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return bad(format!("synth.occlusion {}", self.occlusion_probability));
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_expression >= 0.0) {
            return bad("synth noise and expression must be non-negative".into());
        }
        self.bins()?;
        self.method_config().validate()
    }

    pub fn bins(&self) -> Result<Vec<PoseBin>> {
        match &self.bins {
            Some(b) if b.is_empty() => Err(Error::Config("no pose bins".into())),
            Some(b) => Ok(b.clone()),
            None => pose_layout(self.dms).map_err(|e| Error::Config(e.to_string())),
        }
    }

    pub fn feature(&self) -> FeatureKind {
        match self.features {
            Features::Hog => FeatureKind::Hog(self.hog),
            Features::Lbp => FeatureKind::Lbp(self.lbp),
        }
    }

    pub fn method_config(&self) -> MethodConfig {
        let default_gamma = match self.method {
            Method::Grid => TrainConfig::default().gamma,
            Method::Smuf => SMUF_GAMMA,
        };
        let train = TrainConfig {
            stages: self.stages,
            gamma: self.gamma.unwrap_or(default_gamma),
            jitter_count: self.jitter_count,
            jitter_scale_sigma: self.jitter_scale_sigma,
            jitter_shift_sigma: self.jitter_shift_sigma,
            seed: self.seed,
        };
        match self.method {
            Method::Grid => MethodConfig::Grid {
                feature: self.feature(),
                train,
            },
            Method::Smuf => MethodConfig::Smuf(SmufConfig {
                train,
                bits: self.bits,
                lambda: self.lambda,
                alternations: self.alternations,
                patch_side: self.smuf_patch_side,
            }),
        }
    }

    pub fn gated_config(&self) -> Result<GatedTrainConfig> {
        Ok(GatedTrainConfig {
            bins: self.bins()?,
            method: self.method_config(),
            variance_floor: self.variance_floor,
            relative_floor: self.relative_floor,
            flip: self.flip,
        })
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let mut d = DatasetConfig {
            yaw: if self.yaw_min == self.yaw_max {
                YawDistribution::Fixed(self.yaw_min)
            } else {
                YawDistribution::Uniform {
                    min: self.yaw_min,
                    max: self.yaw_max,
                }
            },
            max_expression: self.max_expression,
            occlusion_probability: self.occlusion_probability,
            ..DatasetConfig::default()
        };
        d.template.noise_sigma = self.noise_sigma;
        d
    }

    /// Training settings as `key=value` lines, for model metadata.
    pub fn training_summary(&self) -> String {
        let m = self.method_config();
        let mut s = String::new();
        let _ = writeln!(s, "method={}", m.name());
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "stages={}", self.stages);
        let _ = writeln!(s, "flip={}", self.flip);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_match_the_library() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.bins().unwrap(), pose_layout(5).unwrap());
        match c.method_config() {
            MethodConfig::Grid { train, feature } => {
                assert_eq!(train, TrainConfig::default());
                assert_eq!(feature, FeatureKind::default());
            }
            other => panic!("{other:?}"),
        }
        let smuf = RunConfig {
            method: Method::Smuf,
            ..RunConfig::default()
        };
        assert_eq!(smuf.method_config(), MethodConfig::Smuf(SmufConfig::default()));
    }

    #[test]
    fn parses_keys_comments_and_bins() {
        let c = RunConfig::parse(
            "# a comment\nmethod = smuf\n\nlambda=0.5\nseed = 9\nbin.1 = side 0 90 right\nbin.0 = front -30 30 all visible\nflip=false\n",
        )
        .unwrap();
        assert_eq!(c.method, Method::Smuf);
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.seed, 9);
        assert!(!c.flip);
        let bins = c.bins().unwrap();
        assert_eq!(bins[0].name, "front");
        assert!(bins[0].require_all_visible);
        assert_eq!(bins[1].landmark_ids, FACE22_RIGHT_AND_MIDLINE.to_vec());
        assert_eq!((bins[1].yaw_min, bins[1].yaw_max), (0.0, 90.0));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for (text, needle) in [
            ("methd = grid", "unknown key `methd`"),
            ("seed = 1\nseed = 2", "duplicate key"),
            ("stages = seven", "bad value"),
            ("just words", "expected key = value"),
            ("method = sift", "bad value"),
            ("bin.0 = a 0 1 all\nbin.2 = b 0 1 all", "without gaps"),
            ("bin.0 = a 0 1 all maybe", "visible"),
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.to_string().contains(needle), "{text:?}: {err}");
            assert_eq!(err.exit_code(), 2);
        }
    }

    #[test]
    fn validation_catches_bad_values() {
        for text in ["threads = 0", "synth.n = 0", "synth.yaw_min = -100", "dms = 4", "method = smuf\nbits = 0", "hog.bins = 0"] {
            let c = RunConfig::parse(text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
    }

    #[test]
    fn key_values_track_consumption() {
        let mut kv = KeyValues::parse("a=1\nb.x=2\nb.y=3").unwrap();
        assert_eq!(kv.take::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.take_prefixed("b.").len(), 2);
        assert!(kv.is_empty());
        kv.finish().unwrap();
        assert_eq!(KeyValues::parse("z=1").unwrap().require::<u8>("q").unwrap_err().to_string(), "config: missing key `q`");
    }
}
