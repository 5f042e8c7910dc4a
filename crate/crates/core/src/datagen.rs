//! Streaming dataset construction from offline caption annotations.
//!
//! Offline caption tracks repeat a caption for as long as it holds; the
//! streaming form wants each event once, anchored to its first timestamp,
//! with every frame labeled silence or response. Adjacent identical
//! captions merge; each merged event anchors to the earliest frame not
//! before its timestamp; exactly that frame is labeled response.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::{load_feature_file, write_feature_file, FeatureError, FeatureFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    pub time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameLabel {
    Silence,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnchor {
    pub text: String,
    pub anchor_frame: usize,
}

/// One labeled streaming training sample, frames loaded in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub prompt: String,
    pub frames: Vec<FeatureFrame>,
    pub events: Vec<EventAnchor>,
    pub labels: Vec<FrameLabel>,
}

impl StreamSample {
    pub fn response_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l == FrameLabel::Response)
            .count()
    }
}

/// On-disk form: one JSON object per line, features by reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub prompt: String,
    pub feature_file: String,
    pub events: Vec<EventAnchor>,
    pub labels: Vec<FrameLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceStats {
    pub silence_count: usize,
    pub response_count: usize,
    /// Silence-to-response ratio, floored at 1 (a warning is logged when
    /// responses outnumber silences).
    pub ratio_r: f64,
}

#[derive(Debug)]
pub enum DatagenError {
    UnorderedCaptions { index: usize },
    EventOutsideRange { text: String, time_s: f64 },
    AnchorCollision { text: String, frame: usize },
    LabelLengthMismatch { labels: usize, frames: usize },
    DegenerateDataset,
    EmptyDataset,
    Feature(FeatureError),
    Io(std::io::Error),
    Json { line: usize, detail: String },
}

impl fmt::Display for DatagenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatagenError::UnorderedCaptions { index } => {
                write!(f, "caption timestamps go backwards at record {index}")
            }
            DatagenError::EventOutsideRange { text, time_s } => {
                write!(f, "event '{text}' at {time_s}s lies outside the frame range")
            }
            DatagenError::AnchorCollision { text, frame } => {
                write!(f, "event '{text}' collides with another event at frame {frame}")
            }
            DatagenError::LabelLengthMismatch { labels, frames } => {
                write!(f, "{labels} labels for {frames} frames")
            }
            DatagenError::DegenerateDataset => {
                write!(f, "dataset has no response labels")
            }
            DatagenError::EmptyDataset => write!(f, "dataset is empty"),
            DatagenError::Feature(e) => write!(f, "{e}"),
            DatagenError::Io(e) => write!(f, "dataset io: {e}"),
            DatagenError::Json { line, detail } => {
                write!(f, "dataset line {line}: {detail}")
            }
        }
    }
}

impl std::error::Error for DatagenError {}

impl From<FeatureError> for DatagenError {
    fn from(e: FeatureError) -> Self {
        DatagenError::Feature(e)
    }
}

impl From<std::io::Error> for DatagenError {
    fn from(e: std::io::Error) -> Self {
        DatagenError::Io(e)
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Collapses maximal runs of equal captions (whitespace-normalized exact
/// match) to one record carrying the run's first timestamp. Non-adjacent
/// repeats survive.
pub fn dedup_captions(captions: &[CaptionRecord]) -> Result<Vec<CaptionRecord>, DatagenError> {
    for (i, pair) in captions.windows(2).enumerate() {
        if pair[1].time_s < pair[0].time_s {
            return Err(DatagenError::UnorderedCaptions { index: i + 1 });
        }
    }
    let mut out: Vec<CaptionRecord> = Vec::new();
    for c in captions {
        let text = normalize(&c.text);
        match out.last() {
            Some(prev) if prev.text == text => {}
            _ => out.push(CaptionRecord {
                text,
                time_s: c.time_s,
            }),
        }
    }
    Ok(out)
}

/// Labels every frame: for each event, the earliest frame whose time is not
/// before the event time becomes response; everything else is silence.
pub fn label_frames(
    events: &[CaptionRecord],
    frame_times: &[f64],
) -> Result<Vec<FrameLabel>, DatagenError> {
    let mut labels = vec![FrameLabel::Silence; frame_times.len()];
    for e in events {
        if frame_times.is_empty()
            || e.time_s < frame_times[0]
            || e.time_s > *frame_times.last().unwrap()
        {
            return Err(DatagenError::EventOutsideRange {
                text: e.text.clone(),
                time_s: e.time_s,
            });
        }
        let idx = frame_times.partition_point(|t| *t < e.time_s);
        if labels[idx] == FrameLabel::Response {
            return Err(DatagenError::AnchorCollision {
                text: e.text.clone(),
                frame: idx,
            });
        }
        labels[idx] = FrameLabel::Response;
    }
    Ok(labels)
}

/// Deduplicates captions, anchors them to frames, labels the stream.
pub fn build_sample(
    prompt: &str,
    frames: Vec<FeatureFrame>,
    captions: &[CaptionRecord],
) -> Result<StreamSample, DatagenError> {
    let deduped = dedup_captions(captions)?;
    let times: Vec<f64> = frames.iter().map(|f| f.timestamp_s).collect();
    let labels = label_frames(&deduped, &times)?;
    let events = deduped
        .iter()
        .map(|e| EventAnchor {
            text: e.text.clone(),
            anchor_frame: times.partition_point(|t| *t < e.time_s),
        })
        .collect();
    Ok(StreamSample {
        prompt: prompt.to_string(),
        frames,
        events,
        labels,
    })
}

/// Exact counts over every sample's labels.
pub fn imbalance_stats(samples: &[StreamSample]) -> Result<ImbalanceStats, DatagenError> {
    if samples.is_empty() {
        return Err(DatagenError::EmptyDataset);
    }
    let mut silence = 0usize;
    let mut response = 0usize;
    for s in samples {
        for l in &s.labels {
            match l {
                FrameLabel::Silence => silence += 1,
                FrameLabel::Response => response += 1,
            }
        }
    }
    if response == 0 {
        return Err(DatagenError::DegenerateDataset);
    }
    let raw = silence as f64 / response as f64;
    let ratio_r = if raw < 1.0 {
        log::warn!("responses outnumber silences ({silence}:{response}); ratio floored at 1");
        1.0
    } else {
        raw
    };
    Ok(ImbalanceStats {
        silence_count: silence,
        response_count: response,
        ratio_r,
    })
}

// ---------------------------------------------------------------------------
// JSONL io
// ---------------------------------------------------------------------------

/// One caption object per line: `{"text": ..., "time_s": ...}`.
pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>, DatagenError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord =
            serde_json::from_str(&line).map_err(|e| DatagenError::Json {
                line: i + 1,
                detail: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DatagenError::Json {
            line: 0,
            detail: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL dataset, loading each referenced feature file (relative
/// paths resolve against the dataset's directory).
pub fn load_dataset(path: &Path) -> Result<Vec<StreamSample>, DatagenError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| DatagenError::Json {
                line: i + 1,
                detail: e.to_string(),
            })?;
        let feature_path = {
            let p = Path::new(&rec.feature_file);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let frames = load_feature_file(&feature_path)?;
        if frames.len() != rec.labels.len() {
            return Err(DatagenError::LabelLengthMismatch {
                labels: rec.labels.len(),
                frames: frames.len(),
            });
        }
        out.push(StreamSample {
            prompt: rec.prompt,
            frames,
            events: rec.events,
            labels: rec.labels,
        });
    }
    Ok(out)
}

/// Writes samples as `<stem>.0.sgf, ...` plus `<stem>.jsonl` beside them.
pub fn save_dataset(dir: &Path, stem: &str, samples: &[StreamSample]) -> Result<std::path::PathBuf, DatagenError> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let fname = format!("{stem}.{i}.sgf");
        write_feature_file(&dir.join(&fname), &s.frames)?;
        records.push(DatasetRecord {
            prompt: s.prompt.clone(),
            feature_file: fname,
            events: s.events.clone(),
            labels: s.labels.clone(),
        });
    }
    let jsonl = dir.join(format!("{stem}.jsonl"));
    write_dataset(&jsonl, &records)?;
    Ok(jsonl)
}
