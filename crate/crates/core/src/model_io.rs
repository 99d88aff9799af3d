//! Checksummed binary container for trained models.
//!
//! All integers are little-endian; offsets are absolute.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GMDL"
//! 4       2     version (1)
//! 6       2     model kind (1 = GRID, 2 = SMUF)
//! 8       4     metadata length M
//! 12      M     metadata, UTF-8 `key=value` lines sorted by key
//! 12+M    4     chunk count C
//! ...           C table entries:
//!                 u16 chunk type (1 = matrix)  u16 element kind (1 = f64)
//!                 u32 rows  u32 cols  u64 offset  u64 byte length
//!                 u32 CRC32 of the chunk bytes  u16 name length  name (UTF-8)
//! ...           chunk payloads, f64 row-major, in table order
//! end-4   4     CRC32 of every preceding byte
//! ```
//!
//! Everything structural (bins, landmark ids, feature settings, stage
//! scalars) lives in the metadata; matrices live in chunks. The writer is
//! canonical: the same model always produces the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::cascade::{CascadeModel, StageModel};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, HogConfig, LbpConfig};
use crate::gating::{GatedModel, GatingStats, PoseBin, Regressor, Subset};
use crate::image::{LandmarkTable, Shape};
use crate::smuf::{SmufModel, SmufStage};

pub const MAGIC: [u8; 4] = *b"GMDL";
pub const VERSION: u16 = 1;
pub const CHUNK_MATRIX: u16 = 1;
pub const ELEM_F64: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Grid = 1,
    Smuf = 2,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Grid => "GRID",
            ModelKind::Smuf => "SMUF",
        }
    }

    fn from_code(code: u16) -> Result<Self> {
        match code {
            1 => Ok(ModelKind::Grid),
            2 => Ok(ModelKind::Smuf),
            other => Err(Error::MalformedModel(format!("unknown model kind {other}"))),
        }
    }
}

/// A gated model together with the landmark table it predicts and free-form
/// provenance (`info.*` keys: seed, method settings and the like).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: GatedModel,
    pub table: LandmarkTable,
    pub info: BTreeMap<String, String>,
}

impl ModelFile {
    pub fn kind(&self) -> ModelKind {
        if self.model.is_grid() {
            ModelKind::Grid
        } else {
            ModelKind::Smuf
        }
    }
}

struct Chunk {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

fn matrix_chunk(name: String, m: &DMatrix<f64>) -> Chunk {
    let mut data = Vec::with_capacity(m.len() * 8);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    Chunk {
        name,
        rows: m.nrows(),
        cols: m.ncols(),
        data,
    }
}

fn row_chunk(name: String, v: &[f64]) -> Chunk {
    matrix_chunk(name, &DMatrix::from_row_slice(1, v.len(), v))
}

fn shape_matrix(s: &Shape) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), 2, |r, c| s.points[r][c])
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `{:?}` prints the shortest string that parses back to the same `f64`.
fn float(x: f64) -> String {
    format!("{x:?}")
}

fn feature_meta(meta: &mut BTreeMap<String, String>, prefix: &str, f: &FeatureKind) {
    match f {
        FeatureKind::Hog(h) => {
            meta.insert(format!("{prefix}.kind"), "hog".into());
            meta.insert(format!("{prefix}.patch_side"), h.patch_side.to_string());
            meta.insert(format!("{prefix}.cells"), h.cells_per_side.to_string());
            meta.insert(format!("{prefix}.bins"), h.bins.to_string());
            meta.insert(format!("{prefix}.epsilon"), float(h.epsilon));
        }
        FeatureKind::Lbp(l) => {
            meta.insert(format!("{prefix}.kind"), "lbp".into());
            meta.insert(format!("{prefix}.patch_side"), l.patch_side.to_string());
        }
    }
}

fn encode_parts(file: &ModelFile) -> (BTreeMap<String, String>, Vec<Chunk>) {
    let mut meta = BTreeMap::new();
    let mut chunks = Vec::new();
    let t = &file.table;
    meta.insert("landmarks.names".into(), t.names.join(","));
    meta.insert("landmarks.mirror".into(), join(&t.mirror));
    meta.insert("subsets".into(), file.model.subsets.len().to_string());
    feature_meta(&mut meta, "gate.feature", &file.model.gate_feature);
    for (k, v) in &file.info {
        meta.insert(format!("info.{k}"), v.clone());
    }
    for (z, s) in file.model.subsets.iter().enumerate() {
        let p = format!("subset.{z}");
        let b = &s.bin;
        meta.insert(format!("{p}.name"), b.name.clone());
        meta.insert(format!("{p}.yaw_min"), float(b.yaw_min));
        meta.insert(format!("{p}.yaw_max"), float(b.yaw_max));
        meta.insert(format!("{p}.landmarks"), join(&b.landmark_ids));
        meta.insert(format!("{p}.all_visible"), b.require_all_visible.to_string());
        meta.insert(format!("{p}.gate.floor"), float(s.gate.floor));
        let init = s.regressor.init_shape();
        meta.insert(format!("{p}.init_visible"), join(&init.visible.iter().map(|&v| v as u8).collect::<Vec<_>>()));
        meta.insert(format!("{p}.stages"), s.regressor.stage_count().to_string());
        chunks.push(matrix_chunk(format!("{p}.init_shape"), &shape_matrix(init)));
        chunks.push(row_chunk(format!("{p}.gate.mean"), &s.gate.mean));
        chunks.push(row_chunk(format!("{p}.gate.var"), &s.gate.var));
        match &s.regressor {
            Regressor::Grid(m) => {
                for (k, st) in m.stages.iter().enumerate() {
                    meta.insert(format!("{p}.stage.{k}.gamma"), float(st.gamma));
                    chunks.push(matrix_chunk(format!("{p}.stage.{k}.descent"), &st.descent));
                    chunks.push(row_chunk(format!("{p}.stage.{k}.mean_feature"), &st.mean_feature));
                }
            }
            Regressor::Smuf(m) => {
                meta.insert(format!("{p}.patch_side"), m.patch_side.to_string());
                meta.insert(format!("{p}.bits"), m.bits.to_string());
                for (k, st) in m.stages.iter().enumerate() {
                    meta.insert(format!("{p}.stage.{k}.gamma"), float(st.gamma));
                    meta.insert(format!("{p}.stage.{k}.lambda"), float(st.lambda));
                    chunks.push(matrix_chunk(format!("{p}.stage.{k}.w"), &st.w));
                    chunks.push(matrix_chunk(format!("{p}.stage.{k}.r"), &st.r));
                    chunks.push(matrix_chunk(format!("{p}.stage.{k}.mean_diff"), &st.mean_diff));
                }
            }
        }
    }
    (meta, chunks)
}

/// Serialises a model file to container bytes.
pub fn encode(file: &ModelFile) -> Result<Vec<u8>> {
    if let Some(k) = file.info.keys().find(|k| k.contains(['=', '\n']) || k.is_empty()) {
        return Err(Error::InvalidParameter(format!("bad info key {k:?}")));
    }
    if file.info.values().any(|v| v.contains('\n')) || file.table.names.iter().any(|n| n.contains([',', '\n'])) {
        return Err(Error::InvalidParameter("metadata values may not contain newlines or commas in names".into()));
    }
    let (meta, chunks) = encode_parts(file);
    let mut text = String::new();
    for (k, v) in &meta {
        let _ = writeln!(text, "{k}={v}");
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(file.kind() as u16).to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(chunks.len() as u32).to_le_bytes());
    let table_len: usize = chunks.iter().map(|c| 34 + c.name.len()).sum();
    let mut offset = (out.len() + table_len) as u64;
    for c in &chunks {
        out.extend_from_slice(&CHUNK_MATRIX.to_le_bytes());
        out.extend_from_slice(&ELEM_F64.to_le_bytes());
        out.extend_from_slice(&(c.rows as u32).to_le_bytes());
        out.extend_from_slice(&(c.cols as u32).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(c.data.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&c.data).to_le_bytes());
        out.extend_from_slice(&(c.name.len() as u16).to_le_bytes());
        out.extend_from_slice(c.name.as_bytes());
        offset += c.data.len() as u64;
    }
    for c in &chunks {
        out.extend_from_slice(&c.data);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save(file: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(file)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a container and checks it holds the expected kind of model.
pub fn load_expect(path: impl AsRef<Path>, kind: ModelKind) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = peek_kind(&bytes)?;
    if found != kind {
        return Err(Error::WrongKind {
            expected: kind.name().into(),
            found: found.name().into(),
        });
    }
    decode(&bytes)
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::MalformedModel(format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Magic, version and kind, checked in that order.
fn peek_kind(bytes: &[u8]) -> Result<ModelKind> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    ModelKind::from_code(r.u16("model kind")?)
}

struct Entry {
    kind: u16,
    elem: u16,
    rows: usize,
    cols: usize,
    offset: usize,
    len: usize,
    crc: u32,
    name: String,
}

fn read_table(r: &mut Reader<'_>) -> Result<(String, Vec<Entry>)> {
    let meta_len = r.u32("metadata length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| Error::MalformedModel("metadata is not UTF-8".into()))?
        .to_string();
    let count = r.u32("chunk count")? as usize;
    let mut entries = Vec::new();
    for i in 0..count {
        let what = format!("chunk table entry {i}");
        let kind = r.u16(&what)?;
        let elem = r.u16(&what)?;
        let rows = r.u32(&what)? as usize;
        let cols = r.u32(&what)? as usize;
        let offset = r.u64(&what)? as usize;
        let len = r.u64(&what)? as usize;
        let crc = r.u32(&what)?;
        let name_len = r.u16(&what)? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, &what)?).into_owned();
        entries.push(Entry {
            kind,
            elem,
            rows,
            cols,
            offset,
            len,
            crc,
            name,
        });
    }
    Ok((meta, entries))
}

fn chunk_bytes<'a>(bytes: &'a [u8], e: &Entry) -> Option<&'a [u8]> {
    bytes.get(e.offset..e.offset.checked_add(e.len)?)
}

/// Parses container bytes. Chunk checksums are verified before the trailing
/// one so that a corrupted matrix is reported by name.
pub fn decode(bytes: &[u8]) -> Result<ModelFile> {
    let kind = peek_kind(bytes)?;
    if bytes.len() < 16 {
        return Err(Error::MalformedModel("file too short".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let parsed = read_table(&mut Reader { bytes: body, pos: 8 });
    if let Ok((_, entries)) = &parsed {
        for e in entries {
            if let Some(data) = chunk_bytes(body, e) {
                if crc32fast::hash(data) != e.crc {
                    return Err(Error::Checksum(format!("chunk {}", e.name)));
                }
            }
        }
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum("header, metadata or chunk table".into()));
    }
    let (meta, entries) = parsed?;
    let mut chunks = BTreeMap::new();
    let mut expected_offset = 8 + 4 + meta.len() + 4 + entries.iter().map(|e| 34 + e.name.len()).sum::<usize>();
    for e in &entries {
        let bad = |reason: String| Error::BadChunk {
            name: e.name.clone(),
            reason,
        };
        if e.kind != CHUNK_MATRIX {
            return Err(Error::UnknownChunk {
                kind: e.kind,
                name: e.name.clone(),
            });
        }
        if e.elem != ELEM_F64 {
            return Err(bad(format!("unsupported element kind {}", e.elem)));
        }
        if e.rows.checked_mul(e.cols).and_then(|n| n.checked_mul(8)) != Some(e.len) {
            return Err(bad(format!("{}x{} f64 needs {} bytes, table says {}", e.rows, e.cols, e.rows * e.cols * 8, e.len)));
        }
        if e.offset != expected_offset {
            return Err(bad(format!("offset {} where {expected_offset} was expected", e.offset)));
        }
        let data = chunk_bytes(body, e).ok_or_else(|| bad("extends past the end of the file".into()))?;
        expected_offset += e.len;
        let m = DMatrix::from_row_iterator(
            e.rows,
            e.cols,
            data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))),
        );
        if chunks.insert(e.name.clone(), m).is_some() {
            return Err(bad("duplicate chunk name".into()));
        }
    }
    if expected_offset != body.len() {
        return Err(Error::MalformedModel(format!("{} unreferenced payload bytes", body.len() - expected_offset)));
    }
    let file = Builder {
        meta: KeyValues::parse(&meta).map_err(|e| Error::MalformedModel(format!("metadata: {e}")))?,
        chunks,
    }
    .build()?;
    if file.kind() != kind {
        return Err(Error::MalformedModel("declared kind disagrees with the subsets".into()));
    }
    Ok(file)
}

struct Builder {
    meta: KeyValues,
    chunks: BTreeMap<String, DMatrix<f64>>,
}

fn malformed(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::MalformedModel(m),
        other => other,
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| t.parse().map_err(|_| Error::MalformedModel(format!("bad list entry {t:?} in `{key}`"))))
        .collect()
}

impl Builder {
    fn get<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.meta.require(key).map_err(malformed)
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let v: String = self.get(key)?;
        list(key, &v)
    }

    fn matrix(&mut self, name: &str, rows: Option<usize>, cols: Option<usize>) -> Result<DMatrix<f64>> {
        let m = self.chunks.remove(name).ok_or_else(|| Error::BadChunk {
            name: name.into(),
            reason: "missing".into(),
        })?;
        if rows.is_some_and(|r| r != m.nrows()) || cols.is_some_and(|c| c != m.ncols()) {
            return Err(Error::BadChunk {
                name: name.into(),
                reason: format!("is {}x{}, expected {}x{}", m.nrows(), m.ncols(), fmt_dim(rows), fmt_dim(cols)),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadChunk {
                name: name.into(),
                reason: "non-finite entry".into(),
            });
        }
        Ok(m)
    }

    fn row(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.matrix(name, Some(1), Some(len))?.iter().copied().collect())
    }

    fn feature(&mut self, prefix: &str) -> Result<FeatureKind> {
        let kind: String = self.get(&format!("{prefix}.kind"))?;
        let f = match kind.as_str() {
            "hog" => FeatureKind::Hog(HogConfig {
                patch_side: self.get(&format!("{prefix}.patch_side"))?,
                cells_per_side: self.get(&format!("{prefix}.cells"))?,
                bins: self.get(&format!("{prefix}.bins"))?,
                epsilon: self.get(&format!("{prefix}.epsilon"))?,
            }),
            "lbp" => FeatureKind::Lbp(LbpConfig {
                patch_side: self.get(&format!("{prefix}.patch_side"))?,
            }),
            other => return Err(Error::MalformedModel(format!("unknown feature kind {other:?}"))),
        };
        f.validate().map_err(|e| Error::MalformedModel(e.to_string()))?;
        Ok(f)
    }

    fn build(mut self) -> Result<ModelFile> {
        let names: String = self.get("landmarks.names")?;
        let names: Vec<String> = names.split(',').map(str::to_string).collect();
        let mirror = self.list("landmarks.mirror")?;
        let table = LandmarkTable::new(names, mirror).map_err(|e| Error::MalformedModel(e.to_string()))?;
        let count: usize = self.get("subsets")?;
        let gate_feature = self.feature("gate.feature")?;
        let mut subsets = Vec::with_capacity(count);
        for z in 0..count {
            subsets.push(self.subset(z, &gate_feature)?);
        }
        let info = self
            .meta
            .take_prefixed("info.")
            .into_iter()
            .map(|(k, v)| (k["info.".len()..].to_string(), v))
            .collect();
        if let Some(name) = self.chunks.keys().next() {
            return Err(Error::BadChunk {
                name: name.clone(),
                reason: "not referenced by the metadata".into(),
            });
        }
        self.meta.finish().map_err(malformed)?;
        let model = GatedModel::new(subsets, table.len(), gate_feature)?;
        Ok(ModelFile { model, table, info })
    }

    fn subset(&mut self, z: usize, gate_feature: &FeatureKind) -> Result<Subset> {
        let p = format!("subset.{z}");
        let mut bin = PoseBin::new(
            &self.get::<String>(&format!("{p}.name"))?,
            self.get(&format!("{p}.yaw_min"))?,
            self.get(&format!("{p}.yaw_max"))?,
            self.list(&format!("{p}.landmarks"))?,
        );
        bin.require_all_visible = self.get(&format!("{p}.all_visible"))?;
        let l = bin.landmark_ids.len();
        let init = self.matrix(&format!("{p}.init_shape"), Some(l), Some(2))?;
        let visible: Vec<u8> = self.list(&format!("{p}.init_visible"))?;
        let init_shape = Shape::with_visibility(
            (0..l).map(|i| [init[(i, 0)], init[(i, 1)]]).collect(),
            visible.iter().map(|&v| v != 0).collect(),
        )
        .map_err(|e| Error::MalformedModel(format!("{p}.init_visible: {e}")))?;
        let m = gate_feature.len(l);
        let gate = GatingStats {
            mean: self.row(&format!("{p}.gate.mean"), m)?,
            var: self.row(&format!("{p}.gate.var"), m)?,
            floor: self.get(&format!("{p}.gate.floor"))?,
        };
        if !(gate.floor > 0.0) || gate.var.iter().any(|&v| !(v >= gate.floor)) {
            return Err(Error::MalformedModel(format!("{p} gate variances below the floor")));
        }
        let stages: usize = self.get(&format!("{p}.stages"))?;
        let landmark_ids = bin.landmark_ids.clone();
        let regressor = if self.meta_has(&format!("{p}.bits")) {
            let patch_side: usize = self.get(&format!("{p}.patch_side"))?;
            let bits: usize = self.get(&format!("{p}.bits"))?;
            let d = crate::features::binary::diff_len(patch_side);
            let mut out = Vec::with_capacity(stages);
            for k in 0..stages {
                let s = format!("{p}.stage.{k}");
                out.push(SmufStage {
                    w: self.matrix(&format!("{s}.w"), Some(d), Some(bits))?,
                    r: self.matrix(&format!("{s}.r"), Some(2 * l), Some(bits * l))?,
                    mean_diff: self.matrix(&format!("{s}.mean_diff"), Some(d), Some(l))?,
                    lambda: self.get(&format!("{s}.lambda"))?,
                    gamma: self.get(&format!("{s}.gamma"))?,
                });
            }
            Regressor::Smuf(SmufModel {
                stages: out,
                init_shape,
                landmark_ids,
                patch_side,
                bits,
            })
        } else {
            let mut out = Vec::with_capacity(stages);
            for k in 0..stages {
                let s = format!("{p}.stage.{k}");
                out.push(StageModel {
                    descent: self.matrix(&format!("{s}.descent"), Some(2 * l), Some(m))?,
                    mean_feature: self.row(&format!("{s}.mean_feature"), m)?,
                    gamma: self.get(&format!("{s}.gamma"))?,
                });
            }
            Regressor::Grid(CascadeModel {
                stages: out,
                init_shape,
                landmark_ids,
                feature: *gate_feature,
            })
        };
        Ok(Subset { bin, regressor, gate })
    }

    fn meta_has(&mut self, key: &str) -> bool {
        // probe without consuming
        match self.meta.take::<String>(key) {
            Ok(Some(v)) => {
                self.meta.insert(key, v);
                true
            }
            _ => false,
        }
    }
}

fn fmt_dim(d: Option<usize>) -> String {
    d.map_or("*".into(), |v| v.to_string())
}
