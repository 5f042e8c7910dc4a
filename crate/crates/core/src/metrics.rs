//! Timing-alignment and language-quality evaluation.
//!
//! Timing metrics score the gate's decisions against per-frame ground
//! truth; language metrics score generated turn text against event
//! captions. Every function here is pure, so reports are byte-identical
//! across runs on identical inputs.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datagen::FrameLabel;
use crate::gate::Decision;

/// One realized response emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub trigger_frame: u64,
    pub trigger_time_s: f64,
    pub text: String,
}

/// All metrics for one evaluated stream. `None` marks a metric that was not
/// computed (serialized as JSON null).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trigger_acc: Option<f64>,
    pub tim_val: Option<f64>,
    pub fluency: Option<f64>,
    pub time_diff_s: Option<f64>,
    pub ppl: Option<f64>,
    pub bleu1: Option<f64>,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
}

#[derive(Debug)]
pub enum MetricsError {
    LengthMismatch { predicted: usize, labels: usize },
    SingleClassLabels,
    NoEvents,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { predicted, labels } => {
                write!(f, "{predicted} decisions against {labels} labels")
            }
            MetricsError::SingleClassLabels => {
                write!(f, "labels contain a single class; balanced accuracy undefined")
            }
            MetricsError::NoEvents => write!(f, "no ground-truth events"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Greedy one-to-one matching of two index/time lists by ascending
/// distance. Returns `(pred_idx, truth_idx, distance)` triples.
fn greedy_match(preds: &[f64], truths: &[f64], max_dist: Option<f64>) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let d = (p - t).abs();
            if max_dist.map_or(true, |m| d <= m) {
                pairs.push((d, j, i));
            }
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pred_used = vec![false; preds.len()];
    let mut truth_used = vec![false; truths.len()];
    let mut out = Vec::new();
    for (d, j, i) in pairs {
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

/// Windowed set-F1 over trigger events: ground-truth response frames with a
/// predicted response within `window_w` count as matched (each prediction
/// matches at most one truth, greedy by distance); spurious predictions
/// count against the score.
pub fn trigger_acc(
    predicted: &[Decision],
    labels: &[FrameLabel],
    window_w: usize,
) -> Result<f64, MetricsError> {
    if predicted.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            labels: labels.len(),
        });
    }
    let pred_frames: Vec<f64> = predicted
        .iter()
        .enumerate()
        .filter(|(_, d)| **d == Decision::Respond)
        .map(|(i, _)| i as f64)
        .collect();
    let truth_frames: Vec<f64> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == FrameLabel::Response)
        .map(|(i, _)| i as f64)
        .collect();

    let matched = greedy_match(&pred_frames, &truth_frames, Some(window_w as f64)).len();
    let unmatched_predictions = pred_frames.len() - matched;
    let denom = truth_frames.len() + unmatched_predictions;
    if denom == 0 {
        return Ok(1.0); // nothing to trigger on and nothing triggered
    }
    Ok(matched as f64 / denom as f64)
}

/// Balanced per-frame accuracy: mean of response recall and silence recall.
pub fn tim_val(predicted: &[Decision], labels: &[FrameLabel]) -> Result<f64, MetricsError> {
    if predicted.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            labels: labels.len(),
        });
    }
    let mut hit = [0usize; 2];
    let mut total = [0usize; 2];
    for (d, l) in predicted.iter().zip(labels) {
        let class = usize::from(*l == FrameLabel::Response);
        total[class] += 1;
        let said_response = *d == Decision::Respond;
        if said_response == (class == 1) {
            hit[class] += 1;
        }
    }
    if total[0] == 0 || total[1] == 0 {
        return Err(MetricsError::SingleClassLabels);
    }
    let recall_silence = hit[0] as f64 / total[0] as f64;
    let recall_response = hit[1] as f64 / total[1] as f64;
    Ok((recall_silence + recall_response) / 2.0)
}

/// Mean absolute trigger-to-event gap in seconds under greedy nearest-time
/// matching. Each unmatched event contributes `penalty_s` (default: stream
/// duration / event count).
pub fn time_diff(
    trigger_times: &[f64],
    event_times: &[f64],
    stream_duration_s: f64,
    penalty_s: Option<f64>,
) -> Result<f64, MetricsError> {
    if event_times.is_empty() {
        return Err(MetricsError::NoEvents);
    }
    let matches = greedy_match(trigger_times, event_times, None);
    let penalty = penalty_s.unwrap_or(stream_duration_s / event_times.len() as f64);
    let unmatched_events = event_times.len() - matches.len();
    let total: f64 =
        matches.iter().map(|(_, _, d)| d).sum::<f64>() + penalty * unmatched_events as f64;
    Ok(total / event_times.len() as f64)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_string()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for i in 0..=tokens.len() - n {
            *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    map
}

/// Clipped n-gram precision BLEU with brevity penalty, geometric mean over
/// orders `1..=max_n`.
///
/// Zero-match orders above 1 are add-one smoothed; a zero-match unigram
/// order scores 0 outright, so on single-token candidate/reference pairs
/// `max_n = 1` reduces to an exact-match indicator. Orders longer than the
/// candidate are skipped. An empty candidate scores 0.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    if candidate.is_empty() || references.iter().all(|r| r.is_empty()) {
        log::warn!("bleu on empty candidate or references; scoring 0");
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            continue;
        }
        let mut clipped = 0usize;
        for (gram, count) in &cand {
            let best_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += (*count).min(best_ref);
        }
        let p = match (clipped, n) {
            (0, 1) => return 0.0,
            (0, _) => 1.0 / (total + 1) as f64,
            _ => clipped as f64 / total as f64,
        };
        log_sum += p.ln();
    }
    let precision_geo = (log_sum / max_n as f64).exp();

    // brevity penalty against the closest reference length
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|len| ((*len as f64 - c).abs() * 1e6) as u64)
        .unwrap() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * precision_geo
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let tmp = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = tmp;
        }
    }
    dp[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with recall weighted by `ROUGE_BETA`.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Bag-of-tokens F1 between two token lists.
pub fn token_f1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&String, usize> = HashMap::new();
    for t in reference {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in candidate {
        if let Some(c) = ref_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Timing-gated language overlap: mean over ground-truth events of the
/// token-F1 of the turn matched to the event (0 for unmatched events).
/// Matching is the same greedy nearest-time rule as [`time_diff`].
pub fn fluency(
    turns: &[DialogueTurn],
    event_times: &[f64],
    reference_texts: &[String],
) -> Result<f64, MetricsError> {
    if event_times.is_empty() {
        return Err(MetricsError::NoEvents);
    }
    assert_eq!(event_times.len(), reference_texts.len());
    let turn_times: Vec<f64> = turns.iter().map(|t| t.trigger_time_s).collect();
    let matches = greedy_match(&turn_times, event_times, None);
    let mut total = 0.0;
    for (pred_i, truth_j, _) in matches {
        let cand = tokenize(&turns[pred_i].text);
        let reference = tokenize(&reference_texts[truth_j]);
        total += token_f1(&cand, &reference);
    }
    Ok(total / event_times.len() as f64)
}

pub fn ppl_from_mean_nll(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Options for assembling a full report.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub trigger_window: usize,
    pub time_diff_penalty_s: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            trigger_window: 0,
            time_diff_penalty_s: None,
        }
    }
}

/// Assembles the full report for one stream.
///
/// Language metrics average sentence scores over matched turn/event pairs;
/// `mean_event_nll`, when given, fills PPL. Metrics whose preconditions do
/// not hold (single-class labels) come back as `None` rather than failing
/// the whole report.
pub fn evaluate_stream(
    decisions: &[Decision],
    labels: &[FrameLabel],
    turns: &[DialogueTurn],
    event_times: &[f64],
    event_texts: &[String],
    stream_duration_s: f64,
    mean_event_nll: Option<f64>,
    opts: &EvalOptions,
) -> Result<EvalReport, MetricsError> {
    let trig = trigger_acc(decisions, labels, opts.trigger_window)?;
    let tv = match tim_val(decisions, labels) {
        Ok(v) => Some(v),
        Err(MetricsError::SingleClassLabels) => None,
        Err(e) => return Err(e),
    };
    let td = if event_times.is_empty() {
        None
    } else {
        let times: Vec<f64> = turns.iter().map(|t| t.trigger_time_s).collect();
        Some(time_diff(
            &times,
            event_times,
            stream_duration_s,
            opts.time_diff_penalty_s,
        )?)
    };
    let fl = if event_times.is_empty() {
        None
    } else {
        Some(fluency(turns, event_times, event_texts)?)
    };

    // sentence-level language scores over matched pairs
    let turn_times: Vec<f64> = turns.iter().map(|t| t.trigger_time_s).collect();
    let matches = greedy_match(&turn_times, event_times, None);
    let (mut b1, mut b4, mut rl) = (0.0, 0.0, 0.0);
    let m = matches.len();
    for (pred_i, truth_j, _) in &matches {
        let cand = tokenize(&turns[*pred_i].text);
        let reference = vec![tokenize(&event_texts[*truth_j])];
        b1 += bleu(&cand, &reference, 1);
        b4 += bleu(&cand, &reference, 4);
        rl += rouge_l(&cand, &reference[0]);
    }
    let lang = |x: f64| if m == 0 { Some(0.0) } else { Some(x / m as f64) };

    Ok(EvalReport {
        trigger_acc: Some(trig),
        tim_val: tv,
        fluency: fl,
        time_diff_s: td,
        ppl: mean_event_nll.map(ppl_from_mean_nll),
        bleu1: lang(b1),
        bleu4: lang(b4),
        rouge_l: lang(rl),
    })
}
