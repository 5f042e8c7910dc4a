//! Two-stage training.
//!
//! Stage 1 aligns the feature extractor with the decoder: for every event,
//! the extractor runs over the frames up to the anchor, the pooled tokens
//! become a perception prefix, and the caption is scored under teacher
//! forcing. Gradient flows through the whole unroll, so the extractor
//! learns event representations the decoder can read.
//!
//! Stage 2 trains only the gate on per-frame silence/response labels with a
//! class-weighted cross entropy (silence weight `w_s`, response `1 - w_s`),
//! the extractor and decoder frozen.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cognition::{
    mean_of, nll_terms_on_tape, CognitionError, DecoderLeaves, ToyDecoder, Vocab,
};
use crate::datagen::{DatagenError, FrameLabel, ImbalanceStats, StreamSample};
use crate::epfe::{run_extractor, EpfeError, EpfeLeaves, SsmParams};
use crate::gate::{GateError, GateNet};
use crate::memory::{pool_indices, PoolingPolicy};
use crate::numerics::{
    clip_grad_norm, sgd_step, NumericsError, ParamId, ParamSet, Tape, Tensor, Var,
};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    pub cosine: bool,
    /// Silence-class weight in (0, 1); stage 2 only.
    pub w_s: f64,
    pub seed: u64,
    /// Streams folded into one gradient step.
    pub batch: usize,
}

impl TrainConfig {
    pub fn stage1(epochs: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            stage: 1,
            epochs,
            lr,
            cosine: true,
            w_s: 0.5,
            seed,
            batch: 4,
        }
    }

    pub fn stage2(epochs: usize, lr: f64, w_s: f64, seed: u64) -> Self {
        TrainConfig {
            stage: 2,
            epochs,
            lr,
            cosine: true,
            w_s,
            seed,
            batch: 2,
        }
    }
}

pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub final_checksum: u64,
    pub wall_s: f64,
}

#[derive(Debug)]
pub enum TrainError {
    BadConfig { detail: String },
    Diverged { step: usize },
    Numerics(NumericsError),
    Cognition(CognitionError),
    Epfe(EpfeError),
    Gate(GateError),
    Data(DatagenError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig { detail } => write!(f, "train config: {detail}"),
            TrainError::Diverged { step } => {
                write!(f, "loss went non-finite at step {step}; parameters rolled back")
            }
            TrainError::Numerics(e) => write!(f, "{e}"),
            TrainError::Cognition(e) => write!(f, "{e}"),
            TrainError::Epfe(e) => write!(f, "{e}"),
            TrainError::Gate(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Numerics(e)
    }
}
impl From<CognitionError> for TrainError {
    fn from(e: CognitionError) -> Self {
        TrainError::Cognition(e)
    }
}
impl From<EpfeError> for TrainError {
    fn from(e: EpfeError) -> Self {
        TrainError::Epfe(e)
    }
}
impl From<GateError> for TrainError {
    fn from(e: GateError) -> Self {
        TrainError::Gate(e)
    }
}
impl From<DatagenError> for TrainError {
    fn from(e: DatagenError) -> Self {
        TrainError::Data(e)
    }
}

/// Empirical silence-weight recommendation from the dataset imbalance:
/// `10 / ratio`, clamped into [0.01, 0.5].
pub fn recommend_ws(stats: &ImbalanceStats) -> f64 {
    if stats.ratio_r < 1.0 {
        log::warn!("imbalance ratio below 1; using unweighted 0.5");
        return 0.5;
    }
    (10.0 / stats.ratio_r).clamp(0.01, 0.5)
}

fn cosine_lr(base: f64, step: usize, total: usize, enabled: bool) -> f64 {
    if !enabled || total <= 1 {
        return base;
    }
    let t = step as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Zero-fills gradients for listed parameters that received none this step
/// (an architecture may have dead branches; they simply do not move).
fn ensure_grads(params: &mut ParamSet, ids: &[ParamId]) {
    for id in ids {
        if params.value(*id).grad().is_none() {
            let zeros = vec![0.0; params.value(*id).numel()];
            params.get_mut(*id).value.accumulate_grad(&zeros);
        }
    }
}

struct StepOutcome {
    loss: f64,
}

/// Per-event supervision slices for one stream: pooled window indices and
/// caption ids, mirroring what the live pipeline pools at a trigger.
fn event_windows(
    sample: &StreamSample,
    policy: &PoolingPolicy,
) -> Vec<(Vec<usize>, usize)> {
    // (absolute token indices pooled for event, event index)
    let mut out = Vec::with_capacity(sample.events.len());
    let mut prev_anchor: Option<usize> = None;
    for (ei, e) in sample.events.iter().enumerate() {
        let start = prev_anchor.map_or(0, |p| p + 1);
        let end = e.anchor_frame + 1; // inclusive of the anchor frame
        let window: Vec<usize> = (start..end).collect();
        let picks = if window.is_empty() {
            vec![e.anchor_frame]
        } else {
            pool_indices(window.len(), policy)
                .into_iter()
                .map(|i| window[i])
                .collect()
        };
        out.push((picks, ei));
        prev_anchor = Some(e.anchor_frame);
    }
    out
}

/// Stage 1: jointly trains the extractor and decoder on captioned streams.
/// The gate does not exist yet at this stage.
pub fn train_stage1(
    params: &mut ParamSet,
    epfe: &SsmParams,
    decoder: &ToyDecoder,
    dataset: &[StreamSample],
    vocab: &Vocab,
    policy: &PoolingPolicy,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if cfg.stage != 1 {
        return Err(TrainError::BadConfig {
            detail: format!("stage {} passed to train_stage1", cfg.stage),
        });
    }
    let started = web_time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut trainable: Vec<ParamId> = crate::cognition::decoder_param_ids(decoder);
    trainable.extend(epfe_param_ids(epfe));

    // encode captions and prompt once
    let encoded: Vec<(Vec<usize>, Vec<Vec<usize>>)> = dataset
        .iter()
        .map(|s| {
            let prompt = vocab.encode(&s.prompt)?;
            let captions = s
                .events
                .iter()
                .map(|e| vocab.encode(&e.text))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((prompt, captions))
        })
        .collect::<Result<Vec<_>, CognitionError>>()?;

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();

    for _epoch in 0..cfg.epochs {
        let snapshot = params.snapshot(&trainable);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;

        for chunk in order.chunks(cfg.batch) {
            let outcome = stage1_step(params, epfe, decoder, dataset, &encoded, chunk, policy)?;
            if !outcome.loss.is_finite() {
                params.restore(&snapshot);
                return Err(TrainError::Diverged { step });
            }
            let lr = cosine_lr(cfg.lr, step, total_steps, cfg.cosine);
            clip_grad_norm(params, &trainable, GRAD_CLIP_NORM);
            ensure_grads(params, &trainable);
            sgd_step(params, &trainable, lr)?;
            epoch_total += outcome.loss;
            step_losses.push(outcome.loss);
            step += 1;
        }
        epoch_losses.push(epoch_total / steps_per_epoch as f64);
    }

    Ok(TrainReport {
        epoch_losses,
        step_losses,
        final_checksum: params.checksum(),
        wall_s: started.elapsed().as_secs_f64(),
    })
}

fn stage1_step(
    params: &mut ParamSet,
    epfe: &SsmParams,
    decoder: &ToyDecoder,
    dataset: &[StreamSample],
    encoded: &[(Vec<usize>, Vec<Vec<usize>>)],
    chunk: &[usize],
    policy: &PoolingPolicy,
) -> Result<StepOutcome, TrainError> {
    let mut tape = Tape::new();
    let epfe_leaves = EpfeLeaves::new(&mut tape, params, epfe);
    let dec_leaves = DecoderLeaves::new(&mut tape, params, decoder);
    let mut event_losses: Vec<Var> = Vec::new();

    for &si in chunk {
        let sample = &dataset[si];
        let (prompt_ids, caption_ids) = &encoded[si];
        let windows = event_windows(sample, policy);
        let last_anchor = sample.events.last().map_or(0, |e| e.anchor_frame);

        // unroll the extractor over the frames that matter for this stream
        let mut h = epfe_leaves.zero_state(&mut tape);
        let mut tokens: Vec<Var> = Vec::with_capacity(last_anchor + 1);
        for frame in &sample.frames[..=last_anchor] {
            let fx = tape.constant(Tensor::col(frame.features.clone()));
            let (y, h_next) = epfe_leaves.step(&mut tape, h, fx)?;
            tokens.push(y);
            h = h_next;
        }

        let mut prior_turns: Vec<Vec<usize>> = Vec::new();
        for (picks, ei) in windows {
            let mut rows = Vec::with_capacity(picks.len());
            for t in &picks {
                rows.push(dec_leaves.project_perception(&mut tape, tokens[*t])?);
            }
            let prefix = tape.concat_rows(&rows)?;

            let mut ctx_ids = prompt_ids.clone();
            let keep = prior_turns
                .len()
                .saturating_sub(crate::cognition::MAX_PRIOR_TURNS);
            for turn in &prior_turns[keep..] {
                ctx_ids.push(crate::cognition::BOS);
                ctx_ids.extend_from_slice(turn);
                ctx_ids.push(crate::cognition::EOS);
            }
            ctx_ids.push(crate::cognition::BOS);

            let caption = &caption_ids[ei];
            let terms = nll_terms_on_tape(
                &mut tape,
                &dec_leaves,
                Some(prefix),
                &ctx_ids,
                caption,
                decoder.cfg.max_seq,
            )?;
            event_losses.push(mean_of(&mut tape, &terms)?);
            prior_turns.push(caption.clone());
        }
    }

    let loss = mean_of(&mut tape, &event_losses)?;
    let loss_value = tape.value(loss).data()[0];
    if loss_value.is_finite() {
        tape.backward(loss)?;
        tape.accumulate_param_grads(params);
    }
    Ok(StepOutcome { loss: loss_value })
}

pub fn epfe_param_ids(epfe: &SsmParams) -> Vec<ParamId> {
    let mut ids = vec![epfe.input_proj, epfe.a, epfe.b, epfe.c];
    if let Some(s) = &epfe.selectivity {
        ids.extend([s.w_dt, s.b_dt, s.w_c]);
    }
    ids
}

/// Stage 2: trains only the gate with imbalance-weighted cross entropy.
/// Perception tokens are precomputed with the frozen extractor.
pub fn train_stage2(
    params: &mut ParamSet,
    epfe: &SsmParams,
    gate: &GateNet,
    dataset: &[StreamSample],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if cfg.stage != 2 {
        return Err(TrainError::BadConfig {
            detail: format!("stage {} passed to train_stage2", cfg.stage),
        });
    }
    if !(cfg.w_s > 0.0 && cfg.w_s < 1.0) {
        return Err(TrainError::BadConfig {
            detail: format!("w_s {} outside (0, 1)", cfg.w_s),
        });
    }
    let started = web_time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trainable = gate.param_ids();
    let weights = [cfg.w_s, 1.0 - cfg.w_s];

    // frozen extractor: tokens once per stream
    let mut tokens_per_stream = Vec::with_capacity(dataset.len());
    let mut prompts = Vec::with_capacity(dataset.len());
    for s in dataset {
        tokens_per_stream.push(run_extractor(params, epfe, &s.frames)?);
        prompts.push(vocab.encode(&s.prompt)?);
    }

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();

    for _epoch in 0..cfg.epochs {
        let snapshot = params.snapshot(&trainable);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;

        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let leaves = gate.leaves(&mut tape, params);
            let mut losses: Vec<Var> = Vec::new();
            for &si in chunk {
                let sample = &dataset[si];
                for (f, label) in sample.labels.iter().enumerate() {
                    let tok = tape.constant(Tensor::col(tokens_per_stream[si][f].vector.clone()));
                    let logits = leaves.logits(&mut tape, &prompts[si], tok)?;
                    let target = usize::from(*label == FrameLabel::Response);
                    losses.push(tape.softmax_cross_entropy(logits, target, Some(&weights))?);
                }
            }
            let loss = mean_of(&mut tape, &losses)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                params.restore(&snapshot);
                return Err(TrainError::Diverged { step });
            }
            tape.backward(loss)?;
            tape.accumulate_param_grads(params);
            let lr = cosine_lr(cfg.lr, step, total_steps, cfg.cosine);
            clip_grad_norm(params, &trainable, GRAD_CLIP_NORM);
            ensure_grads(params, &trainable);
            sgd_step(params, &trainable, lr)?;
            epoch_total += loss_value;
            step_losses.push(loss_value);
            step += 1;
        }
        epoch_losses.push(epoch_total / steps_per_epoch as f64);
    }

    Ok(TrainReport {
        epoch_losses,
        step_losses,
        final_checksum: params.checksum(),
        wall_s: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Flat key-value config files
// ---------------------------------------------------------------------------

/// Parses `key = value` lines (`#` comments allowed) into a config.
/// Unknown keys are rejected so typos fail loudly.
pub fn parse_train_config(text: &str) -> Result<TrainConfig, TrainError> {
    let mut cfg = TrainConfig {
        stage: 1,
        epochs: 1,
        lr: 2e-3,
        cosine: true,
        w_s: 0.5,
        seed: 0,
        batch: 4,
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| TrainError::BadConfig {
            detail: format!("line {}: expected key = value", i + 1),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |d: String| TrainError::BadConfig { detail: d };
        match key {
            "stage" => cfg.stage = value.parse().map_err(|_| bad(format!("stage '{value}'")))?,
            "epochs" => {
                cfg.epochs = value.parse().map_err(|_| bad(format!("epochs '{value}'")))?
            }
            "lr" => cfg.lr = value.parse().map_err(|_| bad(format!("lr '{value}'")))?,
            "cosine" => {
                cfg.cosine = value.parse().map_err(|_| bad(format!("cosine '{value}'")))?
            }
            "w_s" => cfg.w_s = value.parse().map_err(|_| bad(format!("w_s '{value}'")))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad(format!("seed '{value}'")))?,
            "batch" => cfg.batch = value.parse().map_err(|_| bad(format!("batch '{value}'")))?,
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }
    if cfg.stage != 1 && cfg.stage != 2 {
        return Err(TrainError::BadConfig {
            detail: format!("stage must be 1 or 2, got {}", cfg.stage),
        });
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cognition::{init_decoder, DecoderConfig};
    use crate::epfe::{init_epfe, EpfeConfig, SsmMode};
    use crate::gate::{gate_init, GateNet, InitStrategy};
    use crate::synth::{benchmark_vocab, build_benchmark, BenchmarkConfig};

    fn tiny_bench() -> BenchmarkConfig {
        BenchmarkConfig {
            train_streams: 3,
            test_streams: 0,
            frames_per_stream: 60,
            d_spat: 12,
            ..Default::default()
        }
    }

    fn tiny_system(
        cfg: &BenchmarkConfig,
    ) -> (ParamSet, SsmParams, ToyDecoder, Vocab) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let vocab = benchmark_vocab(cfg);
        let epfe = init_epfe(
            &mut ps,
            EpfeConfig {
                d_spat: cfg.d_spat,
                d_in: 12,
                d_state: 12,
                d_out: 12,
                mode: SsmMode::Selective,
            },
            &mut rng,
        )
        .unwrap();
        let dec = init_decoder(
            &mut ps,
            DecoderConfig {
                vocab_size: vocab.len(),
                d_model: 16,
                n_blocks: 6,
                n_heads: 2,
                d_ff: 32,
                max_seq: 128,
                d_percep: 12,
            },
            &mut rng,
        )
        .unwrap();
        (ps, epfe, dec, vocab)
    }

    #[test]
    fn stage1_zero_lr_keeps_parameters() {
        let bench = tiny_bench();
        let (train, _) = build_benchmark(&bench).unwrap();
        let (mut ps, epfe, dec, vocab) = tiny_system(&bench);
        let before = ps.checksum();
        let cfg = TrainConfig {
            lr: 0.0,
            cosine: false,
            epochs: 1,
            ..TrainConfig::stage1(1, 0.0, 7)
        };
        let report = train_stage1(
            &mut ps,
            &epfe,
            &dec,
            &train,
            &vocab,
            &PoolingPolicy::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(ps.checksum(), before);
        assert!(report.epoch_losses[0].is_finite());
    }

    #[test]
    fn stage1_same_seed_same_checksum() {
        let bench = tiny_bench();
        let (train, _) = build_benchmark(&bench).unwrap();
        let cfg = TrainConfig::stage1(2, 1e-2, 99);
        let run = || {
            let (mut ps, epfe, dec, vocab) = tiny_system(&bench);
            train_stage1(
                &mut ps,
                &epfe,
                &dec,
                &train,
                &vocab,
                &PoolingPolicy::default(),
                &cfg,
            )
            .unwrap()
            .final_checksum
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage1_loss_decreases() {
        let bench = tiny_bench();
        let (train, _) = build_benchmark(&bench).unwrap();
        let (mut ps, epfe, dec, vocab) = tiny_system(&bench);
        let cfg = TrainConfig::stage1(6, 0.05, 3);
        let report = train_stage1(
            &mut ps,
            &epfe,
            &dec,
            &train,
            &vocab,
            &PoolingPolicy::default(),
            &cfg,
        )
        .unwrap();
        let first = report.epoch_losses.first().unwrap();
        let last = report.epoch_losses.last().unwrap();
        assert!(last < first, "losses {:?}", report.epoch_losses);
    }

    #[test]
    fn stage2_only_touches_gate_parameters() {
        let bench = tiny_bench();
        let (train, _) = build_benchmark(&bench).unwrap();
        let (mut ps, epfe, dec, vocab) = tiny_system(&bench);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gate = gate_init(&mut ps, &dec, 2, InitStrategy::EarlyBlock, &mut rng).unwrap();
        let net = GateNet::shallow(gate);

        let epfe_ids = epfe_param_ids(&epfe);
        let dec_ids = crate::cognition::decoder_param_ids(&dec);
        let frozen_before: Vec<Vec<f64>> = epfe_ids
            .iter()
            .chain(&dec_ids)
            .map(|id| ps.value(*id).data().to_vec())
            .collect();

        let cfg = TrainConfig::stage2(1, 1e-2, 0.2, 11);
        let report = train_stage2(&mut ps, &epfe, &net, &train, &vocab, &cfg).unwrap();
        assert!(report.epoch_losses[0].is_finite());

        let frozen_after: Vec<Vec<f64>> = epfe_ids
            .iter()
            .chain(&dec_ids)
            .map(|id| ps.value(*id).data().to_vec())
            .collect();
        assert_eq!(frozen_before, frozen_after);
    }

    #[test]
    fn weighted_ce_at_half_is_half_of_unweighted() {
        // w_s = 0.5 puts weight 0.5 on both classes: exactly half the
        // unweighted loss on every sample
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::col(vec![0.3, -0.2]).with_grad());
        let unweighted = tape.softmax_cross_entropy(logits, 1, None).unwrap();
        let weighted = tape
            .softmax_cross_entropy(logits, 1, Some(&[0.5, 0.5]))
            .unwrap();
        let u = tape.value(unweighted).data()[0];
        let w = tape.value(weighted).data()[0];
        assert!((w - 0.5 * u).abs() < 1e-12);
    }

    #[test]
    fn recommend_ws_matches_hand_arithmetic() {
        let stats = |ratio: f64| ImbalanceStats {
            silence_count: 0,
            response_count: 0,
            ratio_r: ratio,
        };
        assert!((recommend_ws(&stats(310.0)) - 10.0 / 310.0).abs() < 1e-12);
        assert!((recommend_ws(&stats(71.0)) - 10.0 / 71.0).abs() < 1e-12);
        assert_eq!(recommend_ws(&stats(20.0)), 0.5);
        assert_eq!(recommend_ws(&stats(0.5)), 0.5);
        assert_eq!(recommend_ws(&stats(5000.0)), 0.01);
    }

    #[test]
    fn config_file_round_trip_and_unknown_key() {
        let cfg = parse_train_config(
            "# stage two settings\nstage = 2\nepochs = 3\nlr = 0.01\nw_s = 0.13\nseed = 42\nbatch = 8\ncosine = false\n",
        )
        .unwrap();
        assert_eq!(cfg.stage, 2);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.w_s, 0.13);
        assert_eq!(cfg.batch, 8);
        assert!(!cfg.cosine);
        assert!(parse_train_config("stage = 1\nbogus = 2\n").is_err());
        assert!(parse_train_config("stage = 7\n").is_err());
    }

    #[test]
    fn stage_mismatch_rejected() {
        let bench = tiny_bench();
        let (train, _) = build_benchmark(&bench).unwrap();
        let (mut ps, epfe, dec, vocab) = tiny_system(&bench);
        let cfg = TrainConfig::stage2(1, 1e-2, 0.2, 1);
        assert!(matches!(
            train_stage1(
                &mut ps,
                &epfe,
                &dec,
                &train,
                &vocab,
                &PoolingPolicy::default(),
                &cfg
            ),
            Err(TrainError::BadConfig { .. })
        ));
    }
}
