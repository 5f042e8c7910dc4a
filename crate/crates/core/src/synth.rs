//! Synthetic benchmark corpus: class-anchored event streams with caption
//! tracks, labeled through the dataset construction pipeline.
//!
//! Three event classes with fixed feature anchors and fixed two-word
//! captions. Offline-style caption tracks repeat the caption on every frame
//! of an event, so dedup and anchor labeling are exercised on every stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cognition::Vocab;
use crate::datagen::{build_sample, CaptionRecord, DatagenError, StreamSample};
use crate::features::{generate_synthetic_stream, EventSegment, SyntheticStreamSpec};

pub const CLASS_CAPTIONS: [&str; 3] = ["red circle", "green square", "blue triangle"];

pub fn class_caption(class: usize) -> String {
    CLASS_CAPTIONS
        .get(class)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("event kind{class}"))
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub train_streams: usize,
    pub test_streams: usize,
    pub frames_per_stream: usize,
    pub fps: f64,
    pub noise_std: f64,
    pub num_classes: usize,
    pub d_spat: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    pub min_gap: usize,
    pub prompt: String,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 0,
            train_streams: 60,
            test_streams: 20,
            frames_per_stream: 200,
            fps: 2.0,
            noise_std: 0.02,
            num_classes: 3,
            d_spat: 64,
            min_events: 2,
            max_events: 4,
            min_event_len: 6,
            max_event_len: 18,
            min_gap: 8,
            prompt: "narrate the notable events".to_string(),
        }
    }
}

impl BenchmarkConfig {
    /// Smaller corpus for ablations and weight sweeps.
    pub fn compact(seed: u64) -> Self {
        BenchmarkConfig {
            seed,
            train_streams: 24,
            test_streams: 10,
            frames_per_stream: 100,
            ..Self::default()
        }
    }
}

/// Random non-overlapping event layout; consecutive events always change
/// class so adjacent identical captions only ever repeat within one event.
fn random_segments(cfg: &BenchmarkConfig, rng: &mut ChaCha8Rng) -> Vec<EventSegment> {
    let count = rng.gen_range(cfg.min_events..=cfg.max_events);
    let mut segments = Vec::with_capacity(count);
    let mut cursor = rng.gen_range(3..3 + cfg.min_gap);
    let mut prev_class: Option<usize> = None;
    for _ in 0..count {
        let len = rng.gen_range(cfg.min_event_len..=cfg.max_event_len);
        if cursor + len + 1 >= cfg.frames_per_stream {
            break;
        }
        let class = loop {
            let c = rng.gen_range(0..cfg.num_classes);
            if prev_class != Some(c) {
                break c;
            }
        };
        segments.push(EventSegment {
            start_frame: cursor,
            end_frame: cursor + len,
            event_class: class,
        });
        prev_class = Some(class);
        cursor += len + cfg.min_gap + rng.gen_range(0..cfg.min_gap);
    }
    segments
}

/// One labeled stream; deterministic in `(cfg.seed, index)`.
pub fn build_stream(cfg: &BenchmarkConfig, index: u64) -> Result<StreamSample, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(index));
    let segments = random_segments(cfg, &mut rng);
    let spec = SyntheticStreamSpec {
        seed: rng.gen(),
        num_frames: cfg.frames_per_stream,
        fps: cfg.fps,
        event_segments: segments.clone(),
        noise_std: cfg.noise_std,
        d_spat: cfg.d_spat,
    };
    let frames = generate_synthetic_stream(&spec).map_err(DatagenError::Feature)?;

    // offline-style caption track: the caption repeats on every frame of
    // its event
    let mut captions = Vec::new();
    for seg in &segments {
        let text = class_caption(seg.event_class);
        for f in seg.start_frame..seg.end_frame {
            captions.push(CaptionRecord {
                text: text.clone(),
                time_s: frames[f].timestamp_s,
            });
        }
    }
    build_sample(&cfg.prompt, frames, &captions)
}

/// Train and test splits; test stream indices start after the train range.
pub fn build_benchmark(
    cfg: &BenchmarkConfig,
) -> Result<(Vec<StreamSample>, Vec<StreamSample>), DatagenError> {
    let train = (0..cfg.train_streams as u64)
        .map(|i| build_stream(cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    let test = (0..cfg.test_streams as u64)
        .map(|i| build_stream(cfg, 1_000_000 + i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((train, test))
}

/// Vocabulary over the prompt and every class caption.
pub fn benchmark_vocab(cfg: &BenchmarkConfig) -> Vocab {
    let mut texts: Vec<String> = (0..cfg.num_classes).map(class_caption).collect();
    texts.push(cfg.prompt.clone());
    Vocab::from_corpus(texts.iter().map(|s| s.as_str()))
}

/// A corpus with a controlled silence-to-response ratio for the imbalance
/// sweeps: each stream has one event and `ratio` silence frames per
/// response frame.
pub fn build_ratio_corpus(
    seed: u64,
    streams: usize,
    ratio: usize,
    d_spat: usize,
) -> Result<Vec<StreamSample>, DatagenError> {
    let frames_per_stream = ratio + 1;
    let cfg = BenchmarkConfig {
        seed,
        frames_per_stream,
        ..BenchmarkConfig::default()
    };
    let mut out = Vec::with_capacity(streams);
    for i in 0..streams as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(i));
        // one event somewhere past the first few frames, running to the end
        let start = rng.gen_range(3..frames_per_stream - 3);
        let class = rng.gen_range(0..cfg.num_classes);
        let spec = SyntheticStreamSpec {
            seed: rng.gen(),
            num_frames: frames_per_stream,
            fps: cfg.fps,
            event_segments: vec![EventSegment {
                start_frame: start,
                end_frame: frames_per_stream,
                event_class: class,
            }],
            noise_std: cfg.noise_std,
            d_spat,
        };
        let frames = generate_synthetic_stream(&spec).map_err(DatagenError::Feature)?;
        let captions: Vec<CaptionRecord> = (start..frames_per_stream)
            .map(|f| CaptionRecord {
                text: class_caption(class),
                time_s: frames[f].timestamp_s,
            })
            .collect();
        out.push(build_sample(&cfg.prompt, frames, &captions)?);
    }
    Ok(out)
}
