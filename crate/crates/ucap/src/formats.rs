//! On-disk formats: UFEA1 features, JSON-lines detections, captions and
//! references, word lists, the corpus, the evaluation report and the
//! training log.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use ucap_core::evalkit::{Caption, EvalReport};
use ucap_core::trainer::{TrainLog, TrainRecord};
use ucap_core::worldsim::{ConceptDetection, ImageFeature};

pub const FEATURES_MAGIC: &[u8; 5] = b"UFEA1";

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Vectors are stored as f32; truth concepts are not part of the format.
pub fn encode_features(features: &[ImageFeature]) -> Result<Vec<u8>> {
    let d = features.first().map_or(0, |f| f.vector.len());
    let mut out = Vec::with_capacity(9 + features.len() * (2 + 8 + 4 * d));
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&u32::try_from(d)?.to_le_bytes());
    for f in features {
        ensure!(f.vector.len() == d, "feature {} has dimension {}, expected {d}", f.id, f.vector.len());
        let id = f.id.as_bytes();
        out.extend_from_slice(&u16::try_from(id.len()).context("image id longer than 65535 bytes")?.to_le_bytes());
        out.extend_from_slice(id);
        for &x in &f.vector {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<ImageFeature>> {
    ensure!(bytes.len() >= 9 && &bytes[..5] == FEATURES_MAGIC, "not a UFEA1 features file");
    let d = u32::from_le_bytes(bytes[5..9].try_into()?) as usize;
    let mut pos = 9;
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        ensure!(*pos + n <= bytes.len(), "truncated features file at byte {}", *pos);
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let n = u16::from_le_bytes(take(&mut pos, 2)?.try_into()?) as usize;
        let id = std::str::from_utf8(take(&mut pos, n)?).context("image id is not UTF-8")?.to_string();
        let raw = take(&mut pos, 4 * d)?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(ImageFeature { id, vector, truth_concepts: None });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConcept {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub id: String,
    pub concepts: Vec<ScoredConcept>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub caption: String,
}

/// Ground-truth concept names of a synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLine {
    pub id: String,
    pub concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub id: String,
    pub references: Vec<String>,
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("line {}", i + 1)))
        .collect()
}

pub fn detection_lines(ids: &[String], dets: &[ConceptDetection]) -> Vec<DetectionLine> {
    ids.iter()
        .zip(dets)
        .map(|(id, d)| DetectionLine {
            id: id.clone(),
            concepts: d
                .concepts()
                .iter()
                .map(|(name, score)| ScoredConcept { name: name.clone(), score: *score })
                .collect(),
        })
        .collect()
}

/// Detections aligned to `ids`; a missing entry is an error.
pub fn align_detections(ids: &[String], lines: Vec<DetectionLine>) -> Result<Vec<ConceptDetection>> {
    let mut by_id: std::collections::HashMap<String, DetectionLine> =
        lines.into_iter().map(|l| (l.id.clone(), l)).collect();
    ids.iter()
        .map(|id| {
            let l = by_id.remove(id).with_context(|| format!("no detections for image {id}"))?;
            ConceptDetection::new(l.concepts.into_iter().map(|c| (c.name, c.score)))
                .with_context(|| format!("bad detections for image {id}"))
        })
        .collect()
}

pub fn caption_lines(captions: &[Caption]) -> Vec<CaptionLine> {
    captions.iter().map(|c| CaptionLine { id: c.id.clone(), caption: c.text() }).collect()
}

pub fn captions_from_lines(lines: Vec<CaptionLine>) -> Vec<Caption> {
    lines
        .into_iter()
        .map(|l| Caption { id: l.id, words: l.caption.split_whitespace().map(String::from).collect() })
        .collect()
}

/// One word per line.
pub fn encode_words<S: AsRef<str>>(words: &[S]) -> Vec<u8> {
    let mut out = String::new();
    for w in words {
        out.push_str(w.as_ref());
        out.push('\n');
    }
    out.into_bytes()
}

pub fn decode_words(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let w = l.trim();
        if w.is_empty() {
            continue;
        }
        if w.contains(char::is_whitespace) {
            bail!("line {}: {w:?} is not a single word", i + 1);
        }
        out.push(w.to_string());
    }
    Ok(out)
}

pub fn decode_lines(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub avg_correct_concepts: f64,
    pub num_images: usize,
    pub captions: Vec<CaptionLine>,
}

impl From<&EvalReport> for ReportJson {
    fn from(r: &EvalReport) -> Self {
        ReportJson {
            bleu1: r.bleu1,
            bleu2: r.bleu2,
            bleu3: r.bleu3,
            bleu4: r.bleu4,
            avg_correct_concepts: r.avg_correct_concepts,
            num_images: r.num_images,
            captions: caption_lines(&r.captions),
        }
    }
}

#[derive(Debug, Serialize)]
struct LogRow {
    step: usize,
    l_adv: f64,
    l_im: f64,
    l_sen: f64,
    mean_r_adv: f64,
    mean_r_c: f64,
    mean_r_im: f64,
    avg_concepts: f64,
    pg_loss: f64,
}

impl From<&TrainRecord> for LogRow {
    fn from(r: &TrainRecord) -> Self {
        LogRow {
            step: r.step,
            l_adv: r.l_adv,
            l_im: r.l_im,
            l_sen: r.l_sen,
            mean_r_adv: r.mean_r_adv,
            mean_r_c: r.mean_r_c,
            mean_r_im: r.mean_r_im,
            avg_concepts: r.avg_concepts,
            pg_loss: r.pg_loss,
        }
    }
}

pub fn trainlog_csv(log: &TrainLog) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if log.is_empty() {
        w.write_record([
            "step", "l_adv", "l_im", "l_sen", "mean_r_adv", "mean_r_c", "mean_r_im", "avg_concepts", "pg_loss",
        ])?;
    }
    for r in &log.records {
        w.serialize(LogRow::from(r))?;
    }
    Ok(w.into_inner()?)
}

pub fn trainlog_jsonl(log: &TrainLog) -> Result<Vec<u8>> {
    let rows: Vec<LogRow> = log.records.iter().map(LogRow::from).collect();
    to_jsonl(&rows)
}
