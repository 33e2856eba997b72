//! Feature files: little-endian binary, or JSON lines when the path ends in `.jsonl`.
//!
//! One file holds one split together with the full class table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassLabel, Dataset, Sample, TextEmbedding};
use crate::error::{DaanError, Result};

const MAGIC: &[u8; 4] = b"DAAN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Only seen-class samples allowed.
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitFile {
    pub classes: Vec<ClassLabel>,
    pub texts: Vec<TextEmbedding>,
    pub samples: Vec<Sample>,
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn format_err(offset: usize, msg: impl Into<String>) -> DaanError {
    DaanError::Format { offset: offset as u64, msg: msg.into() }
}

pub fn save_split(path: &Path, ds: &Dataset, kind: SplitKind) -> Result<()> {
    let samples = match kind {
        SplitKind::Train => &ds.train,
        SplitKind::Test => &ds.test,
    };
    let bytes = if is_jsonl(path) { encode_jsonl(ds, samples)? } else { encode_binary(ds, samples) };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_split(path: &Path, kind: SplitKind) -> Result<SplitFile> {
    let bytes = fs::read(path)?;
    let split = if is_jsonl(path) { decode_jsonl(&bytes)? } else { decode_binary(&bytes)? };
    if kind == SplitKind::Train {
        if let Some(s) = split.samples.iter().find(|s| !split.classes[s.label].seen) {
            return Err(DaanError::Generation(format!(
                "{} holds a sample of unseen class {}",
                path.display(),
                s.label
            )));
        }
    }
    Ok(split)
}

/// Writes `train.<ext>` and `test.<ext>` under `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset, ext: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_split(&dir.join(format!("train.{ext}")), ds, SplitKind::Train)?;
    save_split(&dir.join(format!("test.{ext}")), ds, SplitKind::Test)
}

pub fn load_dataset(train: &Path, test: &Path) -> Result<Dataset> {
    let tr = load_split(train, SplitKind::Train)?;
    let te = load_split(test, SplitKind::Test)?;
    if tr.classes != te.classes || tr.texts != te.texts {
        return Err(DaanError::Contract("train and test files disagree on the class table".into()));
    }
    let ds = Dataset { classes: tr.classes, texts: tr.texts, train: tr.samples, test: te.samples };
    ds.validate()?;
    Ok(ds)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for &x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn encode_binary(ds: &Dataset, samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, samples.len());
    put_u32(&mut out, ds.input_dim());
    put_u32(&mut out, ds.text_dim());
    put_u32(&mut out, ds.classes.len());
    put_u32(&mut out, ds.classes.iter().filter(|c| c.seen).count());
    for (c, t) in ds.classes.iter().zip(&ds.texts) {
        put_f32s(&mut out, &t.w);
        out.push(c.seen as u8);
    }
    for s in samples {
        put_u32(&mut out, s.label);
        put_f32s(&mut out, &s.audio);
        put_f32s(&mut out, &s.visual);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!("truncated payload: {what} needs {n} bytes, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let b = self.take(4 * n, what)?;
        let v: Vec<f64> =
            b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(format_err(start + 4 * i, format!("non-finite value in {what}")));
        }
        Ok(v)
    }
}

fn normalize_text(w: Vec<f64>) -> Vec<f64> {
    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && (n - 1.0).abs() > 1e-6 {
        w.into_iter().map(|x| x / n).collect()
    } else {
        w
    }
}

fn build_classes(flags: &[bool], num_seen: usize, offset: usize) -> Result<Vec<ClassLabel>> {
    let declared = flags.iter().filter(|&&s| s).count();
    if declared != num_seen {
        return Err(format_err(offset, format!("header declares {num_seen} seen classes, flags mark {declared}")));
    }
    Ok(flags
        .iter()
        .enumerate()
        .map(|(id, &seen)| ClassLabel { id, name: format!("class{id:03}"), seen })
        .collect())
}

fn decode_binary(buf: &[u8]) -> Result<SplitFile> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic (expected \"DAAN\")"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let num_samples = r.u32("num_samples")?;
    let input_dim = r.u32("input_dim")?;
    let text_dim = r.u32("text_dim")?;
    let num_classes = r.u32("num_classes")?;
    let num_seen = r.u32("num_seen")?;
    if input_dim == 0 || text_dim == 0 || num_classes == 0 {
        return Err(format_err(12, "zero dimension in header"));
    }
    let class_start = r.pos;
    let mut texts = Vec::with_capacity(num_classes);
    let mut flags = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let w = r.f32s(text_dim, "text embedding")?;
        let flag_at = r.pos;
        let flag = r.take(1, "seen flag")?[0];
        if flag > 1 {
            return Err(format_err(flag_at, format!("seen flag {flag} is not 0 or 1")));
        }
        texts.push(TextEmbedding { class_id: c, w: normalize_text(w) });
        flags.push(flag == 1);
    }
    let classes = build_classes(&flags, num_seen, class_start)?;
    let mut samples = Vec::with_capacity(num_samples.min(1 << 20));
    for _ in 0..num_samples {
        let at = r.pos;
        let label = r.u32("sample label")?;
        if label >= num_classes {
            return Err(format_err(at, format!("label {label} exceeds {num_classes} classes")));
        }
        let audio = r.f32s(input_dim, "audio features")?;
        let visual = r.f32s(input_dim, "visual features")?;
        samples.push(Sample { audio, visual, label });
    }
    if r.pos != buf.len() {
        return Err(format_err(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(SplitFile { classes, texts, samples })
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    version: u32,
    num_samples: usize,
    input_dim: usize,
    text_dim: usize,
    num_classes: usize,
    num_seen: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonClass {
    class: usize,
    seen: bool,
    text: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonSample {
    label: usize,
    audio: Vec<f64>,
    visual: Vec<f64>,
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn encode_jsonl(ds: &Dataset, samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let header = JsonHeader {
        version: VERSION,
        num_samples: samples.len(),
        input_dim: ds.input_dim(),
        text_dim: ds.text_dim(),
        num_classes: ds.classes.len(),
        num_seen: ds.classes.iter().filter(|c| c.seen).count(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for (c, t) in ds.classes.iter().zip(&ds.texts) {
        serde_json::to_writer(&mut out, &JsonClass { class: c.id, seen: c.seen, text: round_f32(&t.w) })?;
        out.push(b'\n');
    }
    for s in samples {
        let row = JsonSample { label: s.label, audio: round_f32(&s.audio), visual: round_f32(&s.visual) };
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn decode_jsonl(buf: &[u8]) -> Result<SplitFile> {
    let mut lines = Vec::new();
    let mut start = 0;
    for (i, &b) in buf.iter().enumerate() {
        if b == b'\n' {
            lines.push((start, &buf[start..i]));
            start = i + 1;
        }
    }
    if start < buf.len() {
        lines.push((start, &buf[start..]));
    }
    let mut it = lines.into_iter().filter(|(_, l)| !l.iter().all(u8::is_ascii_whitespace));
    let (at, line) = it.next().ok_or_else(|| format_err(0, "empty file"))?;
    let h: JsonHeader = serde_json::from_slice(line).map_err(|e| format_err(at, format!("header: {e}")))?;
    if h.version != VERSION {
        return Err(format_err(at, format!("unsupported version {}", h.version)));
    }
    let mut texts = Vec::with_capacity(h.num_classes);
    let mut flags = Vec::with_capacity(h.num_classes);
    let mut class_at = buf.len();
    for c in 0..h.num_classes {
        let (at, line) = it.next().ok_or_else(|| format_err(buf.len(), format!("truncated: class {c} missing")))?;
        class_at = class_at.min(at);
        let row: JsonClass = serde_json::from_slice(line).map_err(|e| format_err(at, format!("class line: {e}")))?;
        if row.class != c || row.text.len() != h.text_dim || row.text.iter().any(|x| !x.is_finite()) {
            return Err(format_err(at, format!("class line {c} has wrong id, size or values")));
        }
        texts.push(TextEmbedding { class_id: c, w: normalize_text(row.text) });
        flags.push(row.seen);
    }
    let classes = build_classes(&flags, h.num_seen, class_at)?;
    let mut samples = Vec::with_capacity(h.num_samples.min(1 << 20));
    for i in 0..h.num_samples {
        let (at, line) = it.next().ok_or_else(|| format_err(buf.len(), format!("truncated: sample {i} missing")))?;
        let s: JsonSample = serde_json::from_slice(line).map_err(|e| format_err(at, format!("sample line: {e}")))?;
        let ok = s.label < h.num_classes
            && s.audio.len() == h.input_dim
            && s.visual.len() == h.input_dim
            && s.audio.iter().chain(&s.visual).all(|x| x.is_finite());
        if !ok {
            return Err(format_err(at, format!("sample {i} has a bad label, size or value")));
        }
        samples.push(Sample { audio: s.audio, visual: s.visual, label: s.label });
    }
    if let Some((at, _)) = it.next() {
        return Err(format_err(at, "more lines than the header declares"));
    }
    Ok(SplitFile { classes, texts, samples })
}
