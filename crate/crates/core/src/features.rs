//! Per-frame spatial feature vectors: synthetic generation and file ingest.
//!
//! Stands in for a frozen image encoder. Real encoder outputs can be dumped
//! to the `SGF1` file format offline and replayed through the same loader.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FEATURE_MAGIC: &[u8; 4] = b"SGF1";

/// Default spatial feature width for toy runs.
pub const DEFAULT_D_SPAT: usize = 64;

/// Default simulation rate; benchmark sweeps override it.
pub const DEFAULT_FPS: f64 = 2.0;

/// One frame's encoder output with its position in the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub frame_index: u64,
    pub timestamp_s: f64,
    pub features: Vec<f64>,
}

/// Contiguous run of frames carrying one event class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSegment {
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub event_class: usize,
}

/// Recipe for a deterministic synthetic stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticStreamSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub fps: f64,
    pub event_segments: Vec<EventSegment>,
    pub noise_std: f64,
    #[serde(default = "default_d_spat")]
    pub d_spat: usize,
}

fn default_d_spat() -> usize {
    DEFAULT_D_SPAT
}

#[derive(Debug)]
pub enum FeatureError {
    Io(std::io::Error),
    BadMagic { found: [u8; 4] },
    Truncated { offset: u64 },
    TimestampRegression { frame: u64, offset: u64 },
    OverlappingSegments { first: EventSegment, second: EventSegment },
    SegmentOutOfRange { segment: EventSegment, num_frames: usize },
}

impl fmt::Display for FeatureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureError::Io(e) => write!(f, "feature io: {e}"),
            FeatureError::BadMagic { found } => {
                write!(f, "bad feature-file magic {found:?}, expected SGF1")
            }
            FeatureError::Truncated { offset } => {
                write!(f, "truncated feature file at byte {offset}")
            }
            FeatureError::TimestampRegression { frame, offset } => {
                write!(f, "timestamp regression at frame {frame} (byte {offset})")
            }
            FeatureError::OverlappingSegments { first, second } => {
                write!(f, "overlapping event segments {first:?} and {second:?}")
            }
            FeatureError::SegmentOutOfRange { segment, num_frames } => {
                write!(f, "segment {segment:?} outside stream of {num_frames} frames")
            }
        }
    }
}

impl std::error::Error for FeatureError {}

impl From<std::io::Error> for FeatureError {
    fn from(e: std::io::Error) -> Self {
        FeatureError::Io(e)
    }
}

/// Fixed per-class anchor direction, independent of any stream seed.
pub fn class_anchor(event_class: usize, d_spat: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA7C4_0000 + event_class as u64);
    let mut v: Vec<f64> = (0..d_spat).map(|_| normal(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Generates a stream as a pure function of its spec.
///
/// Frames inside a segment are the class anchor plus Gaussian noise of
/// `noise_std`; frames outside any segment are pure noise at the same std.
pub fn generate_synthetic_stream(
    spec: &SyntheticStreamSpec,
) -> Result<Vec<FeatureFrame>, FeatureError> {
    let mut segs = spec.event_segments.clone();
    segs.sort_by_key(|s| s.start_frame);
    for s in &segs {
        if s.end_frame > spec.num_frames || s.start_frame >= s.end_frame {
            return Err(FeatureError::SegmentOutOfRange {
                segment: *s,
                num_frames: spec.num_frames,
            });
        }
    }
    for pair in segs.windows(2) {
        if pair[1].start_frame < pair[0].end_frame {
            return Err(FeatureError::OverlappingSegments {
                first: pair[0],
                second: pair[1],
            });
        }
    }

    let anchors: Vec<(usize, Vec<f64>)> = {
        let mut classes: Vec<usize> = segs.iter().map(|s| s.event_class).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
            .into_iter()
            .map(|c| (c, class_anchor(c, spec.d_spat)))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(spec.num_frames);
    for i in 0..spec.num_frames {
        let seg = segs.iter().find(|s| s.start_frame <= i && i < s.end_frame);
        let mut features = vec![0.0; spec.d_spat];
        if let Some(s) = seg {
            let anchor = &anchors
                .iter()
                .find(|(c, _)| *c == s.event_class)
                .expect("collected above")
                .1;
            features.copy_from_slice(anchor);
        }
        // noise drawn for every frame keeps the stream a pure function of
        // the spec regardless of segment layout
        for x in &mut features {
            *x += spec.noise_std * normal(&mut rng);
        }
        frames.push(FeatureFrame {
            frame_index: i as u64,
            timestamp_s: i as f64 / spec.fps,
            features,
        });
    }
    Ok(frames)
}

/// Box-Muller standard normal; ChaCha keeps it reproducible across platforms.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `SGF1` layout: magic, `d_spat: u32 LE`, `frame_count: u64 LE`, then per
/// frame `(frame_index: u64 LE, timestamp_s: f64 LE, d_spat * f64 LE)`.
pub fn write_feature_file(path: &Path, frames: &[FeatureFrame]) -> Result<(), FeatureError> {
    let d_spat = frames.first().map_or(0, |f| f.features.len());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(d_spat as u32).to_le_bytes())?;
    w.write_all(&(frames.len() as u64).to_le_bytes())?;
    for f in frames {
        w.write_all(&f.frame_index.to_le_bytes())?;
        w.write_all(&f.timestamp_s.to_le_bytes())?;
        for x in &f.features {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_feature_file(path: &Path) -> Result<Vec<FeatureFrame>, FeatureError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset: u64 = 0;

    let mut magic = [0u8; 4];
    read_or_truncated(&mut r, &mut magic, &mut offset)?;
    if &magic != FEATURE_MAGIC {
        return Err(FeatureError::BadMagic { found: magic });
    }
    let mut u4 = [0u8; 4];
    read_or_truncated(&mut r, &mut u4, &mut offset)?;
    let d_spat = u32::from_le_bytes(u4) as usize;
    let mut u8b = [0u8; 8];
    read_or_truncated(&mut r, &mut u8b, &mut offset)?;
    let count = u64::from_le_bytes(u8b) as usize;

    let mut frames = Vec::with_capacity(count.min(1 << 20));
    let mut last_ts = f64::NEG_INFINITY;
    for _ in 0..count {
        read_or_truncated(&mut r, &mut u8b, &mut offset)?;
        let frame_index = u64::from_le_bytes(u8b);
        let ts_offset = offset;
        read_or_truncated(&mut r, &mut u8b, &mut offset)?;
        let timestamp_s = f64::from_le_bytes(u8b);
        if timestamp_s <= last_ts {
            return Err(FeatureError::TimestampRegression {
                frame: frame_index,
                offset: ts_offset,
            });
        }
        last_ts = timestamp_s;
        let mut features = Vec::with_capacity(d_spat);
        for _ in 0..d_spat {
            read_or_truncated(&mut r, &mut u8b, &mut offset)?;
            features.push(f64::from_le_bytes(u8b));
        }
        frames.push(FeatureFrame {
            frame_index,
            timestamp_s,
            features,
        });
    }
    Ok(frames)
}

fn read_or_truncated(
    r: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
) -> Result<(), FeatureError> {
    match r.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Err(FeatureError::Truncated { offset: *offset })
        }
        Err(e) => Err(e.into()),
    }
}

/// Plain cosine similarity; finite for nonzero inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(segments: Vec<EventSegment>, noise_std: f64) -> SyntheticStreamSpec {
        SyntheticStreamSpec {
            seed: 11,
            num_frames: 20,
            fps: 2.0,
            event_segments: segments,
            noise_std,
            d_spat: 16,
        }
    }

    #[test]
    fn zero_noise_single_segment_yields_anchor_everywhere() {
        let s = spec(
            vec![EventSegment {
                start_frame: 0,
                end_frame: 20,
                event_class: 0,
            }],
            0.0,
        );
        let frames = generate_synthetic_stream(&s).unwrap();
        let anchor = class_anchor(0, 16);
        assert_eq!(frames.len(), 20);
        for f in &frames {
            assert_eq!(f.features, anchor);
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let s = spec(
            vec![EventSegment {
                start_frame: 3,
                end_frame: 9,
                event_class: 1,
            }],
            0.05,
        );
        let a = generate_synthetic_stream(&s).unwrap();
        let b = generate_synthetic_stream(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn within_segment_similarity_beats_cross_segment() {
        let s = SyntheticStreamSpec {
            seed: 5,
            num_frames: 40,
            fps: 2.0,
            event_segments: vec![
                EventSegment { start_frame: 0, end_frame: 15, event_class: 0 },
                EventSegment { start_frame: 20, end_frame: 35, event_class: 1 },
            ],
            noise_std: 0.01,
            d_spat: 32,
        };
        let frames = generate_synthetic_stream(&s).unwrap();
        let seg0: Vec<usize> = (0..15).collect();
        let seg1: Vec<usize> = (20..35).collect();
        let mut within = vec![];
        let mut cross = vec![];
        for &i in &seg0 {
            for &j in &seg0 {
                if i < j {
                    within.push(cosine(&frames[i].features, &frames[j].features));
                }
            }
        }
        for &i in &seg0 {
            for &j in &seg1 {
                cross.push(cosine(&frames[i].features, &frames[j].features));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&within) > mean(&cross));
    }

    #[test]
    fn overlapping_segments_rejected() {
        let s = spec(
            vec![
                EventSegment { start_frame: 0, end_frame: 10, event_class: 0 },
                EventSegment { start_frame: 8, end_frame: 15, event_class: 1 },
            ],
            0.0,
        );
        assert!(matches!(
            generate_synthetic_stream(&s),
            Err(FeatureError::OverlappingSegments { .. })
        ));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.sgf");
        let s = spec(
            vec![EventSegment { start_frame: 2, end_frame: 6, event_class: 2 }],
            0.3,
        );
        let frames = generate_synthetic_stream(&s).unwrap();
        write_feature_file(&path, &frames).unwrap();
        let loaded = load_feature_file(&path).unwrap();
        assert_eq!(frames, loaded);
    }

    #[test]
    fn empty_file_round_trips_to_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.sgf");
        write_feature_file(&path, &[]).unwrap();
        assert!(load_feature_file(&path).unwrap().is_empty());
    }

    #[test]
    fn timestamp_regression_cites_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sgf");
        let mut frames: Vec<FeatureFrame> = (0..10)
            .map(|i| FeatureFrame {
                frame_index: i,
                timestamp_s: i as f64 * 0.5,
                features: vec![1.0, 2.0],
            })
            .collect();
        frames[7].timestamp_s = frames[6].timestamp_s - 0.25;
        write_feature_file(&path, &frames).unwrap();
        match load_feature_file(&path) {
            Err(FeatureError::TimestampRegression { frame: 7, .. }) => {}
            other => panic!("expected regression at frame 7, got {other:?}"),
        }
        assert!(load_feature_file(&path)
            .unwrap_err()
            .to_string()
            .contains("frame 7"));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.sgf");
        let frames = vec![FeatureFrame {
            frame_index: 0,
            timestamp_s: 0.0,
            features: vec![1.0; 8],
        }];
        write_feature_file(&path, &frames).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_feature_file(&path),
            Err(FeatureError::Truncated { .. })
        ));
    }
}
