//! The streaming runner: per frame, extractor step, memory append, gate
//! judgment; on a respond decision, pool and invoke the cognition backend.
//! Also the per-step-invocation baseline (the contrasted paradigm where the
//! full decoder reprocesses the whole history every frame) and the
//! throughput benchmark harness.

use std::fmt;

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::cognition::{
    CognitionBackend, CognitionContext, CognitionError, DecoderLeaves, ToyBackend, ToyDecoder,
    Vocab, RESPONSE, SILENCE,
};
use crate::datagen::DatagenError;
use crate::epfe::{epfe_step, PerceptionToken, SsmParams, SsmState};
use crate::features::{generate_synthetic_stream, EventSegment, FeatureFrame, SyntheticStreamSpec};
use crate::gate::{Decision, GateDecision, GateNet};
use crate::memory::{PerceptionMemory, PoolingPolicy};
use crate::metrics::DialogueTurn;
use crate::numerics::{ParamSet, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Perception,
    GateJudgment,
    Cognition,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Perception => write!(f, "perception"),
            Phase::GateJudgment => write!(f, "gate judgment"),
            Phase::Cognition => write!(f, "cognition"),
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub frame_index: u64,
    pub phase: Phase,
    pub detail: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stream aborted at frame {} during {}: {}",
            self.frame_index, self.phase, self.detail
        )
    }
}

impl std::error::Error for PipelineError {}

fn at(frame_index: u64, phase: Phase, e: impl fmt::Display) -> PipelineError {
    PipelineError {
        frame_index,
        phase,
        detail: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub frame_index: u64,
    pub perception_us: f64,
    pub gate_us: f64,
    pub cognition_us: Option<f64>,
}

/// Everything one stream run produced.
#[derive(Debug, Clone, Default)]
pub struct StreamRun {
    pub turns: Vec<DialogueTurn>,
    pub decisions: Vec<GateDecision>,
    pub latency: Vec<LatencyRecord>,
    /// Set when a per-step baseline hit its context limit and stopped.
    pub truncated_at_frame: Option<u64>,
}

/// Static pieces of a deployable system (parameters live in a `ParamSet`).
#[derive(Debug, Clone)]
pub struct StreamSystem {
    pub epfe: SsmParams,
    pub gate: GateNet,
    pub decoder: ToyDecoder,
    pub policy: PoolingPolicy,
    pub prompt: String,
    pub max_response_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CognitionMode {
    /// Cognition runs inline on the stream thread.
    Blocking,
    /// Cognition runs on a worker; the pooled snapshot is still taken
    /// synchronously at decision time, and calls execute in trigger order.
    Async,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SessionOptions<'a> {
    pub cognition: Option<CognitionMode>,
    /// Cap perception memory (benchmark harness); unbounded when `None`.
    pub ring_capacity: Option<usize>,
    /// Skip the backend entirely: decisions and latency only.
    pub disable_backend: bool,
    /// Forced per-frame decisions (oracle schedules in tests and paired
    /// baseline runs). The gate still executes so costs stay honest.
    pub gate_override: Option<&'a [bool]>,
}

impl Default for CognitionMode {
    fn default() -> Self {
        CognitionMode::Blocking
    }
}

struct CognitionJob {
    trigger_frame: u64,
    trigger_time_s: f64,
    pooled: Vec<Vec<f64>>,
}

fn decode_turn(
    backend: &dyn CognitionBackend,
    vocab: &Vocab,
    prompt_ids: &[usize],
    prior_turns: &[Vec<usize>],
    job: &CognitionJob,
    max_len: usize,
) -> Result<(DialogueTurn, Vec<usize>), CognitionError> {
    let ctx = CognitionContext {
        prompt_tokens: prompt_ids.to_vec(),
        pooled_tokens: job.pooled.clone(),
        prior_turns: prior_turns.to_vec(),
    };
    let words = backend.decode_response(&ctx, max_len)?;
    let text = words.join(" ");
    let ids = vocab.encode(&text)?;
    Ok((
        DialogueTurn {
            trigger_frame: job.trigger_frame,
            trigger_time_s: job.trigger_time_s,
            text,
        },
        ids,
    ))
}

/// Runs the event-gated loop over a stream.
///
/// Per frame: extractor step, memory append, gate judgment; on respond the
/// pooled snapshot is taken, the trigger is marked, and the backend is
/// invoked (inline or on the worker). Exactly one decision per frame;
/// cognition is invoked iff the decision is respond.
pub fn run_stream(
    params: &ParamSet,
    system: &StreamSystem,
    vocab: &Vocab,
    frames: &[FeatureFrame],
    opts: &SessionOptions,
) -> Result<StreamRun, PipelineError> {
    let prompt_ids = vocab
        .encode(&system.prompt)
        .map_err(|e| at(0, Phase::Cognition, e))?;
    let backend = ToyBackend {
        params,
        decoder: &system.decoder,
        vocab,
    };
    let mode = opts.cognition.unwrap_or_default();
    match mode {
        CognitionMode::Blocking => run_loop(
            params, system, vocab, frames, opts, &prompt_ids,
            &mut InlineSink {
                backend: if opts.disable_backend { None } else { Some(&backend) },
                vocab,
                prompt_ids: prompt_ids.clone(),
                max_len: system.max_response_len,
                prior_turns: Vec::new(),
                turns: Vec::new(),
                cognition_us: Vec::new(),
            },
        ),
        CognitionMode::Async => run_async(params, system, vocab, frames, opts, &prompt_ids, &backend),
    }
}

/// Inline cognition execution (single-threaded reference behavior).
struct InlineSink<'a> {
    backend: Option<&'a dyn CognitionBackend>,
    vocab: &'a Vocab,
    prompt_ids: Vec<usize>,
    max_len: usize,
    prior_turns: Vec<Vec<usize>>,
    turns: Vec<DialogueTurn>,
    cognition_us: Vec<(u64, f64)>,
}

impl InlineSink<'_> {
    fn submit(&mut self, job: CognitionJob) -> Result<(), CognitionError> {
        let Some(backend) = self.backend else {
            return Ok(());
        };
        let t0 = Instant::now();
        let (turn, ids) = decode_turn(
            backend,
            self.vocab,
            &self.prompt_ids,
            &self.prior_turns,
            &job,
            self.max_len,
        )?;
        self.cognition_us
            .push((job.trigger_frame, t0.elapsed().as_secs_f64() * 1e6));
        self.turns.push(turn);
        self.prior_turns.push(ids);
        Ok(())
    }
}

fn run_loop(
    params: &ParamSet,
    system: &StreamSystem,
    _vocab: &Vocab,
    frames: &[FeatureFrame],
    opts: &SessionOptions,
    prompt_ids: &[usize],
    sink: &mut InlineSink,
) -> Result<StreamRun, PipelineError> {
    let mut state = SsmState::zero(system.epfe.cfg.d_state);
    let mut memory = match opts.ring_capacity {
        Some(cap) => PerceptionMemory::with_ring_capacity(cap),
        None => PerceptionMemory::new(),
    };
    let mut decisions = Vec::with_capacity(frames.len());
    let mut latency = Vec::with_capacity(frames.len());

    for frame in frames {
        let fi = frame.frame_index;
        let t0 = Instant::now();
        let (token, next) = epfe_step(params, &system.epfe, &state, frame)
            .map_err(|e| at(fi, Phase::Perception, e))?;
        state = next;
        memory
            .append(token.clone())
            .map_err(|e| at(fi, Phase::Perception, e))?;
        let perception_us = t0.elapsed().as_secs_f64() * 1e6;

        let t1 = Instant::now();
        let mut decision = system
            .gate
            .decide(params, prompt_ids, &token)
            .map_err(|e| at(fi, Phase::GateJudgment, e))?;
        let gate_us = t1.elapsed().as_secs_f64() * 1e6;
        if let Some(forced) = opts.gate_override {
            let want = forced
                .get(fi as usize)
                .copied()
                .unwrap_or(false);
            decision.decision = if want { Decision::Respond } else { Decision::Silence };
        }

        if decision.decision == Decision::Respond {
            let pooled = memory
                .pool(&system.policy)
                .map_err(|e| at(fi, Phase::Cognition, e))?;
            memory.mark_trigger(fi);
            let job = CognitionJob {
                trigger_frame: fi,
                trigger_time_s: frame.timestamp_s,
                pooled: pooled.into_iter().map(|t| t.vector).collect(),
            };
            sink.submit(job).map_err(|e| at(fi, Phase::Cognition, e))?;
        }

        decisions.push(decision);
        latency.push(LatencyRecord {
            frame_index: fi,
            perception_us,
            gate_us,
            cognition_us: None,
        });
    }

    let mut run = StreamRun {
        turns: std::mem::take(&mut sink.turns),
        decisions,
        latency,
        truncated_at_frame: None,
    };
    for (frame, us) in sink.cognition_us.drain(..) {
        if let Some(rec) = run.latency.iter_mut().find(|r| r.frame_index == frame) {
            rec.cognition_us = Some(us);
        }
    }
    Ok(run)
}

#[cfg(not(target_arch = "wasm32"))]
fn run_async(
    params: &ParamSet,
    system: &StreamSystem,
    vocab: &Vocab,
    frames: &[FeatureFrame],
    opts: &SessionOptions,
    prompt_ids: &[usize],
    backend: &ToyBackend,
) -> Result<StreamRun, PipelineError> {
    use std::sync::mpsc;

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<CognitionJob>();
        let worker = scope.spawn(move || -> Result<(Vec<DialogueTurn>, Vec<(u64, f64)>), PipelineError> {
            // one call in flight at a time, in trigger order, each with the
            // snapshot taken at its own decision time
            let mut prior_turns: Vec<Vec<usize>> = Vec::new();
            let mut turns = Vec::new();
            let mut cognition_us = Vec::new();
            while let Ok(job) = rx.recv() {
                let t0 = Instant::now();
                let (turn, ids) = decode_turn(
                    backend,
                    vocab,
                    prompt_ids,
                    &prior_turns,
                    &job,
                    system.max_response_len,
                )
                .map_err(|e| at(job.trigger_frame, Phase::Cognition, e))?;
                cognition_us.push((job.trigger_frame, t0.elapsed().as_secs_f64() * 1e6));
                turns.push(turn);
                prior_turns.push(ids);
            }
            Ok((turns, cognition_us))
        });

        // perception loop stays on this thread at frame cadence
        let mut state = SsmState::zero(system.epfe.cfg.d_state);
        let mut memory = match opts.ring_capacity {
            Some(cap) => PerceptionMemory::with_ring_capacity(cap),
            None => PerceptionMemory::new(),
        };
        let mut decisions = Vec::with_capacity(frames.len());
        let mut latency = Vec::with_capacity(frames.len());

        for frame in frames {
            let fi = frame.frame_index;
            let t0 = Instant::now();
            let (token, next) = epfe_step(params, &system.epfe, &state, frame)
                .map_err(|e| at(fi, Phase::Perception, e))?;
            state = next;
            memory
                .append(token.clone())
                .map_err(|e| at(fi, Phase::Perception, e))?;
            let perception_us = t0.elapsed().as_secs_f64() * 1e6;

            let t1 = Instant::now();
            let mut decision = system
                .gate
                .decide(params, prompt_ids, &token)
                .map_err(|e| at(fi, Phase::GateJudgment, e))?;
            let gate_us = t1.elapsed().as_secs_f64() * 1e6;
            if let Some(forced) = opts.gate_override {
                let want = forced.get(fi as usize).copied().unwrap_or(false);
                decision.decision = if want { Decision::Respond } else { Decision::Silence };
            }

            if decision.decision == Decision::Respond && !opts.disable_backend {
                let pooled = memory
                    .pool(&system.policy)
                    .map_err(|e| at(fi, Phase::Cognition, e))?;
                memory.mark_trigger(fi);
                let job = CognitionJob {
                    trigger_frame: fi,
                    trigger_time_s: frame.timestamp_s,
                    pooled: pooled.into_iter().map(|t| t.vector).collect(),
                };
                if tx.send(job).is_err() {
                    return Err(at(fi, Phase::Cognition, "cognition worker hung up"));
                }
            } else if decision.decision == Decision::Respond {
                memory.mark_trigger(fi);
            }

            decisions.push(decision);
            latency.push(LatencyRecord {
                frame_index: fi,
                perception_us,
                gate_us,
                cognition_us: None,
            });
        }
        drop(tx);
        let (turns, cognition_us) = worker
            .join()
            .map_err(|_| at(0, Phase::Cognition, "cognition worker panicked"))??;

        let mut run = StreamRun {
            turns,
            decisions,
            latency,
            truncated_at_frame: None,
        };
        for (frame, us) in cognition_us {
            if let Some(rec) = run.latency.iter_mut().find(|r| r.frame_index == frame) {
                rec.cognition_us = Some(us);
            }
        }
        Ok(run)
    })
}

#[cfg(target_arch = "wasm32")]
fn run_async(
    _params: &ParamSet,
    _system: &StreamSystem,
    _vocab: &Vocab,
    _frames: &[FeatureFrame],
    _opts: &SessionOptions,
    _prompt_ids: &[usize],
    _backend: &ToyBackend,
) -> Result<StreamRun, PipelineError> {
    Err(at(
        0,
        Phase::Cognition,
        "async cognition needs threads; use blocking mode on wasm",
    ))
}

/// The contrasted paradigm: at every frame the full decoder consumes the
/// prompt plus ALL past frame projections and emits silence/response from
/// the two special head rows. Respond decisions generate text through the
/// same pooled path as the gated pipeline, so identical schedules produce
/// identical turns.
///
/// Context overflow does not abort: the stream is truncated there and the
/// frame recorded, since hitting the window limit is part of the finding.
pub fn run_per_step_baseline(
    params: &ParamSet,
    system: &StreamSystem,
    vocab: &Vocab,
    frames: &[FeatureFrame],
    oracle_schedule: Option<&[bool]>,
) -> Result<StreamRun, PipelineError> {
    let prompt_ids = vocab
        .encode(&system.prompt)
        .map_err(|e| at(0, Phase::Cognition, e))?;
    let backend = ToyBackend {
        params,
        decoder: &system.decoder,
        vocab,
    };
    let decoder = &system.decoder;

    let mut state = SsmState::zero(system.epfe.cfg.d_state);
    let mut memory = PerceptionMemory::new();
    let mut tokens: Vec<PerceptionToken> = Vec::new();
    let mut run = StreamRun::default();
    let mut prior_turns: Vec<Vec<usize>> = Vec::new();

    for frame in frames {
        let fi = frame.frame_index;
        let t0 = Instant::now();
        let (token, next) = epfe_step(params, &system.epfe, &state, frame)
            .map_err(|e| at(fi, Phase::Perception, e))?;
        state = next;
        memory
            .append(token.clone())
            .map_err(|e| at(fi, Phase::Perception, e))?;
        tokens.push(token);
        let perception_us = t0.elapsed().as_secs_f64() * 1e6;

        // full-context judgment: the decoder rereads every past projection
        let t1 = Instant::now();
        let logits = {
            let mut tape = Tape::new();
            let leaves = DecoderLeaves::new(&mut tape, params, decoder);
            let mut rows = Vec::with_capacity(tokens.len());
            let build = (|| -> Result<[f64; 2], CognitionError> {
                for t in &tokens {
                    let tok = tape.constant(Tensor::col(t.vector.clone()));
                    rows.push(leaves.project_perception(&mut tape, tok)?);
                }
                let prefix = tape.concat_rows(&rows)?;
                let hidden =
                    leaves.hidden_rows(&mut tape, Some(prefix), &prompt_ids, decoder.cfg.max_seq)?;
                let t = tape.value(hidden).rows();
                let last = tape.slice_rows(hidden, t - 1, 1)?;
                let all_logits = leaves.logits(&mut tape, last)?;
                let row = tape.value(all_logits).data();
                Ok([row[SILENCE], row[RESPONSE]])
            })();
            match build {
                Ok(l) => l,
                Err(CognitionError::ContextOverflow { .. }) => {
                    run.truncated_at_frame = Some(fi);
                    break;
                }
                Err(e) => return Err(at(fi, Phase::GateJudgment, e)),
            }
        };
        let gate_us = t1.elapsed().as_secs_f64() * 1e6;

        let mut decision = GateDecision {
            frame_index: fi,
            decision: if logits[1] > logits[0] {
                Decision::Respond
            } else {
                Decision::Silence
            },
            logits,
        };
        if let Some(forced) = oracle_schedule {
            let want = forced.get(fi as usize).copied().unwrap_or(false);
            decision.decision = if want { Decision::Respond } else { Decision::Silence };
        }

        let mut cognition_us = None;
        if decision.decision == Decision::Respond {
            let pooled = memory
                .pool(&system.policy)
                .map_err(|e| at(fi, Phase::Cognition, e))?;
            memory.mark_trigger(fi);
            let job = CognitionJob {
                trigger_frame: fi,
                trigger_time_s: frame.timestamp_s,
                pooled: pooled.into_iter().map(|t| t.vector).collect(),
            };
            let t2 = Instant::now();
            let (turn, ids) = decode_turn(
                &backend,
                vocab,
                &prompt_ids,
                &prior_turns,
                &job,
                system.max_response_len,
            )
            .map_err(|e| at(fi, Phase::Cognition, e))?;
            cognition_us = Some(t2.elapsed().as_secs_f64() * 1e6);
            run.turns.push(turn);
            prior_turns.push(ids);
        }

        run.decisions.push(decision);
        run.latency.push(LatencyRecord {
            frame_index: fi,
            perception_us,
            gate_us,
            cognition_us,
        });
    }
    Ok(run)
}

// ---------------------------------------------------------------------------
// Throughput bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    EventGated,
    PerStep,
}

impl BenchMode {
    pub fn name(&self) -> &'static str {
        match self {
            BenchMode::EventGated => "event_gated",
            BenchMode::PerStep => "per_step",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub fps_in: f64,
    pub wall_s_per_video_second: f64,
}

/// Synthesizes `fps * duration` frames per configuration and measures wall
/// seconds per second of video. Under 1.0 means real time.
pub fn bench_throughput(
    params: &ParamSet,
    system: &StreamSystem,
    vocab: &Vocab,
    modes: &[BenchMode],
    fps_list: &[f64],
    duration_s: f64,
) -> Result<Vec<BenchResult>, PipelineError> {
    let mut out = Vec::new();
    for &mode in modes {
        for &fps in fps_list {
            let num_frames = (fps * duration_s).round() as usize;
            if num_frames == 0 {
                continue;
            }
            // a couple of events so the gated path occasionally pays for
            // cognition, as it would in service
            let third = num_frames / 3;
            let spec = SyntheticStreamSpec {
                seed: 42,
                num_frames,
                fps,
                event_segments: vec![
                    EventSegment {
                        start_frame: third / 2,
                        end_frame: third / 2 + (num_frames / 10).max(1),
                        event_class: 0,
                    },
                    EventSegment {
                        start_frame: 2 * third,
                        end_frame: 2 * third + (num_frames / 10).max(1),
                        event_class: 1,
                    },
                ],
                noise_std: 0.02,
                d_spat: system.epfe.cfg.d_spat,
            };
            let frames = generate_synthetic_stream(&spec)
                .map_err(|e| at(0, Phase::Perception, e))?;

            let t0 = Instant::now();
            match mode {
                BenchMode::EventGated => {
                    let opts = SessionOptions {
                        ring_capacity: Some(4096),
                        ..Default::default()
                    };
                    run_stream(params, system, vocab, &frames, &opts)?;
                }
                BenchMode::PerStep => {
                    run_per_step_baseline(params, system, vocab, &frames, None)?;
                }
            }
            let wall = t0.elapsed().as_secs_f64();
            out.push(BenchResult {
                mode,
                fps_in: fps,
                wall_s_per_video_second: wall / duration_s,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run serialization (one JSON object per line)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunRecord {
    Frame {
        frame_index: u64,
        decision: String,
        perception_us: f64,
        gate_us: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        cognition_us: Option<f64>,
    },
    Turn {
        trigger_frame: u64,
        trigger_time_s: f64,
        text: String,
    },
}

pub fn run_to_records(run: &StreamRun) -> Vec<RunRecord> {
    let mut out = Vec::with_capacity(run.decisions.len() + run.turns.len());
    for (d, l) in run.decisions.iter().zip(&run.latency) {
        out.push(RunRecord::Frame {
            frame_index: d.frame_index,
            decision: match d.decision {
                Decision::Respond => "respond".to_string(),
                Decision::Silence => "silence".to_string(),
            },
            perception_us: l.perception_us,
            gate_us: l.gate_us,
            cognition_us: l.cognition_us,
        });
    }
    for t in &run.turns {
        out.push(RunRecord::Turn {
            trigger_frame: t.trigger_frame,
            trigger_time_s: t.trigger_time_s,
            text: t.text.clone(),
        });
    }
    out
}

/// Parses run records back into per-frame decisions and turns (the eval
/// entrypoint consumes this).
pub fn records_to_run(records: &[RunRecord]) -> Result<(Vec<Decision>, Vec<DialogueTurn>), DatagenError> {
    let mut decisions = Vec::new();
    let mut turns = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r {
            RunRecord::Frame { decision, .. } => match decision.as_str() {
                "respond" => decisions.push(Decision::Respond),
                "silence" => decisions.push(Decision::Silence),
                other => {
                    return Err(DatagenError::Json {
                        line: i + 1,
                        detail: format!("unknown decision '{other}'"),
                    })
                }
            },
            RunRecord::Turn {
                trigger_frame,
                trigger_time_s,
                text,
            } => turns.push(DialogueTurn {
                trigger_frame: *trigger_frame,
                trigger_time_s: *trigger_time_s,
                text: text.clone(),
            }),
        }
    }
    Ok((decisions, turns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cognition::{init_decoder, DecoderConfig};
    use crate::epfe::{init_epfe, EpfeConfig, SsmMode};
    use crate::gate::{gate_init, InitStrategy};
    use crate::synth::{benchmark_vocab, build_benchmark, BenchmarkConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_system() -> (ParamSet, StreamSystem, Vocab, Vec<FeatureFrame>) {
        let bench = BenchmarkConfig {
            train_streams: 1,
            test_streams: 0,
            frames_per_stream: 40,
            d_spat: 12,
            ..Default::default()
        };
        let (train, _) = build_benchmark(&bench).unwrap();
        let vocab = benchmark_vocab(&bench);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let epfe = init_epfe(
            &mut ps,
            EpfeConfig {
                d_spat: 12,
                d_in: 12,
                d_state: 12,
                d_out: 12,
                mode: SsmMode::Selective,
            },
            &mut rng,
        )
        .unwrap();
        let decoder = init_decoder(
            &mut ps,
            DecoderConfig {
                vocab_size: vocab.len(),
                d_model: 16,
                n_blocks: 4,
                n_heads: 2,
                d_ff: 32,
                max_seq: 256,
                d_percep: 12,
            },
            &mut rng,
        )
        .unwrap();
        let gate = gate_init(&mut ps, &decoder, 2, InitStrategy::EarlyBlock, &mut rng).unwrap();
        let system = StreamSystem {
            epfe,
            gate: GateNet::shallow(gate),
            decoder,
            policy: PoolingPolicy::default(),
            prompt: bench.prompt.clone(),
            max_response_len: 8,
        };
        let frames = train[0].frames.clone();
        (ps, system, vocab, frames)
    }

    #[test]
    fn always_silence_override_yields_no_turns() {
        let (ps, system, vocab, frames) = tiny_system();
        let forced = vec![false; frames.len()];
        let opts = SessionOptions {
            gate_override: Some(&forced),
            ..Default::default()
        };
        let run = run_stream(&ps, &system, &vocab, &frames, &opts).unwrap();
        assert!(run.turns.is_empty());
        assert_eq!(run.decisions.len(), frames.len());
        assert_eq!(run.latency.len(), frames.len());
    }

    #[test]
    fn single_forced_trigger_yields_one_turn_at_that_frame() {
        let (ps, system, vocab, frames) = tiny_system();
        let mut forced = vec![false; frames.len()];
        forced[5] = true;
        let opts = SessionOptions {
            gate_override: Some(&forced),
            ..Default::default()
        };
        let run = run_stream(&ps, &system, &vocab, &frames, &opts).unwrap();
        assert_eq!(run.turns.len(), 1);
        assert_eq!(run.turns[0].trigger_frame, 5);
        assert!(run.latency[5].cognition_us.is_some());
    }

    #[test]
    fn cognition_count_equals_respond_count() {
        let (ps, system, vocab, frames) = tiny_system();
        let mut forced = vec![false; frames.len()];
        forced[4] = true;
        forced[20] = true;
        forced[33] = true;
        let opts = SessionOptions {
            gate_override: Some(&forced),
            ..Default::default()
        };
        let run = run_stream(&ps, &system, &vocab, &frames, &opts).unwrap();
        let responds = run
            .decisions
            .iter()
            .filter(|d| d.decision == Decision::Respond)
            .count();
        assert_eq!(run.turns.len(), responds);
        assert_eq!(responds, 3);
    }

    #[test]
    fn removing_backend_leaves_decisions_unchanged() {
        let (ps, system, vocab, frames) = tiny_system();
        let with = run_stream(&ps, &system, &vocab, &frames, &SessionOptions::default()).unwrap();
        let without = run_stream(
            &ps,
            &system,
            &vocab,
            &frames,
            &SessionOptions {
                disable_backend: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(with.decisions, without.decisions);
        assert!(without.turns.is_empty());
    }

    #[test]
    fn async_and_blocking_produce_identical_output() {
        let (ps, system, vocab, frames) = tiny_system();
        let mut forced = vec![false; frames.len()];
        forced[6] = true;
        forced[18] = true;
        let blocking = run_stream(
            &ps,
            &system,
            &vocab,
            &frames,
            &SessionOptions {
                gate_override: Some(&forced),
                cognition: Some(CognitionMode::Blocking),
                ..Default::default()
            },
        )
        .unwrap();
        let asynchronous = run_stream(
            &ps,
            &system,
            &vocab,
            &frames,
            &SessionOptions {
                gate_override: Some(&forced),
                cognition: Some(CognitionMode::Async),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(blocking.turns, asynchronous.turns);
        assert_eq!(blocking.decisions, asynchronous.decisions);
    }

    #[test]
    fn per_step_matches_gated_turns_on_identical_schedule() {
        let (ps, system, vocab, frames) = tiny_system();
        let mut forced = vec![false; frames.len()];
        forced[10] = true;
        forced[25] = true;
        let gated = run_stream(
            &ps,
            &system,
            &vocab,
            &frames,
            &SessionOptions {
                gate_override: Some(&forced),
                ..Default::default()
            },
        )
        .unwrap();
        let per_step =
            run_per_step_baseline(&ps, &system, &vocab, &frames, Some(&forced)).unwrap();
        let texts = |run: &StreamRun| {
            run.turns
                .iter()
                .map(|t| (t.trigger_frame, t.text.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(texts(&gated), texts(&per_step));
    }

    #[test]
    fn per_step_truncates_at_context_limit_and_records_it() {
        let (mut ps, mut system, vocab, _) = tiny_system();
        // shrink the window so the limit is hit quickly
        system.decoder.cfg.max_seq = 24;
        let long = BenchmarkConfig {
            train_streams: 1,
            test_streams: 0,
            frames_per_stream: 60,
            d_spat: 12,
            ..Default::default()
        };
        let (streams, _) = build_benchmark(&long).unwrap();
        // keep ids stable; ps unchanged
        let run = run_per_step_baseline(&mut ps, &system, &vocab, &streams[0].frames, None)
            .unwrap();
        let cut = run.truncated_at_frame.expect("must hit the context limit");
        assert!(run.decisions.len() == cut as usize);
    }

    #[test]
    fn run_records_round_trip() {
        let (ps, system, vocab, frames) = tiny_system();
        let mut forced = vec![false; frames.len()];
        forced[7] = true;
        let run = run_stream(
            &ps,
            &system,
            &vocab,
            &frames,
            &SessionOptions {
                gate_override: Some(&forced),
                ..Default::default()
            },
        )
        .unwrap();
        let records = run_to_records(&run);
        let jsonl: String = records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let parsed: Vec<RunRecord> = jsonl
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let (decisions, turns) = records_to_run(&parsed).unwrap();
        assert_eq!(decisions.len(), run.decisions.len());
        assert_eq!(turns, run.turns);
    }

    #[test]
    fn bench_produces_results_for_every_cell() {
        let (ps, system, vocab, _) = tiny_system();
        let results = bench_throughput(
            &ps,
            &system,
            &vocab,
            &[BenchMode::EventGated],
            &[5.0, 10.0],
            1.0,
        )
        .unwrap();
        assert_eq!(results.len(), 2);
        for r in results {
            assert!(r.wall_s_per_video_second > 0.0);
        }
    }
}
