//! Toy autoregressive decoder standing in for the cognition LLM, plus the
//! pluggable backend interface an external service could satisfy.
//!
//! The decoder is a pre-norm causal transformer over a word-level
//! vocabulary. Perception vectors enter through a learned projection and are
//! prepended to the token context, so generation cost depends on the pooled
//! token count and output length, never on total stream length.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{init_matrix, NumericsError, ParamId, ParamSet, Tape, Tensor, Var};

/// Special token indices are fixed so checkpoints and files agree.
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SILENCE: usize = 2;
pub const RESPONSE: usize = 3;

pub const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "</silence>", "</response>"];

/// How many previous turns stay in the rolling context.
pub const MAX_PRIOR_TURNS: usize = 4;

#[derive(Debug)]
pub enum CognitionError {
    UnknownToken { token: String },
    ContextOverflow { rows: usize, max_seq: usize },
    EmptyContext,
    VocabFormat { detail: String },
    NonFinite { position: usize },
    Numerics(NumericsError),
    Io(std::io::Error),
}

impl fmt::Display for CognitionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CognitionError::UnknownToken { token } => {
                write!(f, "token '{token}' is not in the vocabulary")
            }
            CognitionError::ContextOverflow { rows, max_seq } => {
                write!(f, "context of {rows} rows exceeds max sequence length {max_seq}")
            }
            CognitionError::EmptyContext => write!(f, "cognition context is empty"),
            CognitionError::VocabFormat { detail } => write!(f, "vocabulary file: {detail}"),
            CognitionError::NonFinite { position } => {
                write!(f, "non-finite logits at position {position}")
            }
            CognitionError::Numerics(e) => write!(f, "cognition numerics: {e}"),
            CognitionError::Io(e) => write!(f, "cognition io: {e}"),
        }
    }
}

impl std::error::Error for CognitionError {}

impl From<NumericsError> for CognitionError {
    fn from(e: NumericsError) -> Self {
        CognitionError::Numerics(e)
    }
}

impl From<std::io::Error> for CognitionError {
    fn from(e: std::io::Error) -> Self {
        CognitionError::Io(e)
    }
}

/// Word-level vocabulary with the four specials pinned to indices 0-3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds from whitespace-tokenized corpus text; words are sorted for
    /// reproducibility.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                if !SPECIALS.contains(&w) {
                    words.insert(w.to_string());
                }
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, CognitionError> {
        text.split_whitespace()
            .map(|w| {
                self.lookup(w).ok_or_else(|| CognitionError::UnknownToken {
                    token: w.to_string(),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, specials first.
    pub fn save(&self, path: &Path) -> Result<(), CognitionError> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CognitionError> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() {
            return Err(CognitionError::VocabFormat {
                detail: format!("only {} lines, specials missing", tokens.len()),
            });
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(CognitionError::VocabFormat {
                    detail: format!("line {i} must be '{s}', found '{}'", tokens[i]),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for t in &tokens {
            if !seen.insert(t) {
                return Err(CognitionError::VocabFormat {
                    detail: format!("duplicate token '{t}'"),
                });
            }
        }
        Ok(Vocab { tokens })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Incoming perception-vector width.
    pub d_percep: usize,
}

impl DecoderConfig {
    pub fn toy(vocab_size: usize, d_percep: usize) -> Self {
        DecoderConfig {
            vocab_size,
            d_model: 64,
            n_blocks: 6,
            n_heads: 2,
            d_ff: 256,
            max_seq: 512,
            d_percep,
        }
    }
}

/// Parameter handles for one decoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct ToyDecoder {
    pub cfg: DecoderConfig,
    pub embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lm_head: ParamId,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
    pub percep_proj: ParamId,
}

pub(crate) fn init_block(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BlockParams, NumericsError> {
    let mat = |params: &mut ParamSet, name: &str, rows, cols, rng: &mut ChaCha8Rng| {
        params.add(&format!("{prefix}.{name}"), init_matrix(rng, rows, cols))
    };
    let wq = mat(params, "wq", d, d, rng)?;
    let wk = mat(params, "wk", d, d, rng)?;
    let wv = mat(params, "wv", d, d, rng)?;
    let wo = mat(params, "wo", d, d, rng)?;
    let w1 = mat(params, "w1", d, d_ff, rng)?;
    let w2 = mat(params, "w2", d_ff, d, rng)?;
    let zeros = |params: &mut ParamSet, name: &str, n: usize| {
        params.add(&format!("{prefix}.{name}"), Tensor::zeros(&[n]))
    };
    let ones = |params: &mut ParamSet, name: &str, n: usize| {
        params.add(&format!("{prefix}.{name}"), Tensor::vector(vec![1.0; n]))
    };
    Ok(BlockParams {
        wq,
        bq: zeros(params, "bq", d)?,
        wk,
        bk: zeros(params, "bk", d)?,
        wv,
        bv: zeros(params, "bv", d)?,
        wo,
        bo: zeros(params, "bo", d)?,
        ln1_g: ones(params, "ln1.g", d)?,
        ln1_b: zeros(params, "ln1.b", d)?,
        ln2_g: ones(params, "ln2.g", d)?,
        ln2_b: zeros(params, "ln2.b", d)?,
        w1,
        b1: zeros(params, "b1", d_ff)?,
        w2,
        b2: zeros(params, "b2", d)?,
    })
}

/// Registers a fresh decoder under `llm.*` names.
pub fn init_decoder(
    params: &mut ParamSet,
    cfg: DecoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ToyDecoder, NumericsError> {
    assert!(
        cfg.d_model % cfg.n_heads == 0,
        "d_model must divide into heads"
    );
    let embed = params.add("llm.embed", init_matrix(rng, cfg.vocab_size, cfg.d_model))?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        blocks.push(init_block(
            params,
            &format!("llm.blocks.{i}"),
            cfg.d_model,
            cfg.d_ff,
            rng,
        )?);
    }
    let lm_head = params.add("llm.lm_head", init_matrix(rng, cfg.vocab_size, cfg.d_model))?;
    let ln_f_g = params.add("llm.ln_f.g", Tensor::vector(vec![1.0; cfg.d_model]))?;
    let ln_f_b = params.add("llm.ln_f.b", Tensor::zeros(&[cfg.d_model]))?;
    let percep_proj = params.add(
        "llm.percep_proj",
        init_matrix(rng, cfg.d_model, cfg.d_percep),
    )?;
    Ok(ToyDecoder {
        cfg,
        embed,
        blocks,
        lm_head,
        ln_f_g,
        ln_f_b,
        percep_proj,
    })
}

/// Ids of every decoder parameter (for sgd over the whole module).
pub fn decoder_param_ids(d: &ToyDecoder) -> Vec<ParamId> {
    let mut ids = vec![d.embed, d.lm_head, d.ln_f_g, d.ln_f_b, d.percep_proj];
    for b in &d.blocks {
        ids.extend(block_param_ids(b));
    }
    ids
}

pub fn block_param_ids(b: &BlockParams) -> [ParamId; 16] {
    [
        b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln1_g, b.ln1_b, b.ln2_g, b.ln2_b, b.w1,
        b.b1, b.w2, b.b2,
    ]
}

/// Standard sinusoidal positional table, `t x d`.
pub fn sinusoidal_pe(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(t, d, data).unwrap()
}

/// Additive causal mask: 0 on and below the diagonal, -1e9 above.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for r in 0..t {
        for c in (r + 1)..t {
            data[r * t + c] = -1e9;
        }
    }
    Tensor::matrix(t, t, data).unwrap()
}

/// Tape leaves for one block; shared by the decoder and the gate so copied
/// blocks reproduce activations bit for bit.
#[derive(Clone, Copy)]
pub struct BlockLeaves {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BlockLeaves {
    pub fn new(tape: &mut Tape, params: &ParamSet, b: &BlockParams) -> Self {
        BlockLeaves {
            wq: tape.param(params, b.wq),
            bq: tape.param(params, b.bq),
            wk: tape.param(params, b.wk),
            bk: tape.param(params, b.bk),
            wv: tape.param(params, b.wv),
            bv: tape.param(params, b.bv),
            wo: tape.param(params, b.wo),
            bo: tape.param(params, b.bo),
            ln1_g: tape.param(params, b.ln1_g),
            ln1_b: tape.param(params, b.ln1_b),
            ln2_g: tape.param(params, b.ln2_g),
            ln2_b: tape.param(params, b.ln2_b),
            w1: tape.param(params, b.w1),
            b1: tape.param(params, b.b1),
            w2: tape.param(params, b.w2),
            b2: tape.param(params, b.b2),
        }
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn run_block(
    tape: &mut Tape,
    x: Var,
    blk: &BlockLeaves,
    n_heads: usize,
    mask: Var,
) -> Result<Var, NumericsError> {
    let d = tape.value(x).cols();
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let ln1 = tape.layer_norm_rows(x, blk.ln1_g, blk.ln1_b)?;
    let q = tape.matmul(ln1, blk.wq)?;
    let q = tape.add_bias_row(q, blk.bq)?;
    let k = tape.matmul(ln1, blk.wk)?;
    let k = tape.add_bias_row(k, blk.bk)?;
    let v = tape.matmul(ln1, blk.wv)?;
    let v = tape.add_bias_row(v, blk.bv)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let masked = tape.add(scores, mask)?;
        let attn = tape.softmax_rows(masked)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let proj = tape.matmul(merged, blk.wo)?;
    let proj = tape.add_bias_row(proj, blk.bo)?;
    let x = tape.add(x, proj)?;

    let ln2 = tape.layer_norm_rows(x, blk.ln2_g, blk.ln2_b)?;
    let h1 = tape.matmul(ln2, blk.w1)?;
    let h1 = tape.add_bias_row(h1, blk.b1)?;
    let h1 = tape.gelu(h1);
    let h2 = tape.matmul(h1, blk.w2)?;
    let h2 = tape.add_bias_row(h2, blk.b2)?;
    tape.add(x, h2)
}

/// Token context assembled for one cognition call.
#[derive(Debug, Clone, Default)]
pub struct CognitionContext {
    pub prompt_tokens: Vec<usize>,
    pub pooled_tokens: Vec<Vec<f64>>,
    /// Most recent first-to-last; only the final [`MAX_PRIOR_TURNS`] count.
    pub prior_turns: Vec<Vec<usize>>,
}

impl CognitionContext {
    pub fn is_empty(&self) -> bool {
        self.prompt_tokens.is_empty() && self.pooled_tokens.is_empty()
    }

    /// Text ids: prompt, then each kept turn wrapped in `<bos> ... <eos>`,
    /// then the generation `<bos>`.
    pub fn text_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt_tokens.clone();
        let keep = self.prior_turns.len().saturating_sub(MAX_PRIOR_TURNS);
        for turn in &self.prior_turns[keep..] {
            ids.push(BOS);
            ids.extend_from_slice(turn);
            ids.push(EOS);
        }
        ids.push(BOS);
        ids
    }
}

/// Decoder parameter leaves on a tape.
pub struct DecoderLeaves {
    pub embed: Var,
    pub blocks: Vec<BlockLeaves>,
    pub lm_head: Var,
    pub ln_f_g: Var,
    pub ln_f_b: Var,
    pub percep_proj: Var,
    n_heads: usize,
}

impl DecoderLeaves {
    pub fn new(tape: &mut Tape, params: &ParamSet, d: &ToyDecoder) -> Self {
        DecoderLeaves {
            embed: tape.param(params, d.embed),
            blocks: d
                .blocks
                .iter()
                .map(|b| BlockLeaves::new(tape, params, b))
                .collect(),
            lm_head: tape.param(params, d.lm_head),
            ln_f_g: tape.param(params, d.ln_f_g),
            ln_f_b: tape.param(params, d.ln_f_b),
            percep_proj: tape.param(params, d.percep_proj),
            n_heads: d.cfg.n_heads,
        }
    }

    /// Projects one perception vector (`d_percep x 1` on the tape) into a
    /// single model-space row.
    pub fn project_perception(
        &self,
        tape: &mut Tape,
        token: Var,
    ) -> Result<Var, NumericsError> {
        let col = tape.matmul(self.percep_proj, token)?;
        tape.transpose(col)
    }

    /// Runs the full stack over `[prefix_rows; embedded ids]` with causal
    /// masking and positions over the combined sequence. Returns final
    /// hidden rows (after the last norm).
    pub fn hidden_rows(
        &self,
        tape: &mut Tape,
        prefix_rows: Option<Var>,
        ids: &[usize],
        max_seq: usize,
    ) -> Result<Var, CognitionError> {
        let embedded = tape.embed_rows(self.embed, ids)?;
        let rows = match prefix_rows {
            Some(p) => tape.concat_rows(&[p, embedded])?,
            None => embedded,
        };
        let t = tape.value(rows).rows();
        if t > max_seq {
            return Err(CognitionError::ContextOverflow { rows: t, max_seq });
        }
        let d = tape.value(rows).cols();
        let pe = tape.constant(sinusoidal_pe(t, d));
        let mut x = tape.add(rows, pe)?;
        let mask = tape.constant(causal_mask(t));
        for blk in &self.blocks {
            x = run_block(tape, x, blk, self.n_heads, mask)?;
        }
        Ok(tape.layer_norm_rows(x, self.ln_f_g, self.ln_f_b)?)
    }

    /// Logits for every row, `t x vocab`.
    pub fn logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var, NumericsError> {
        let head_t = tape.transpose(self.lm_head)?;
        tape.matmul(hidden, head_t)
    }
}

impl ToyDecoder {
    /// Builds prefix rows from plain (non-trainable) perception vectors.
    fn const_prefix(
        &self,
        tape: &mut Tape,
        leaves: &DecoderLeaves,
        pooled: &[Vec<f64>],
    ) -> Result<Option<Var>, CognitionError> {
        if pooled.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(pooled.len());
        for v in pooled {
            let tok = tape.constant(Tensor::col(v.clone()));
            rows.push(leaves.project_perception(tape, tok)?);
        }
        Ok(Some(tape.concat_rows(&rows)?))
    }

    /// Greedy decoding until `<eos>` or `max_len` emitted tokens.
    pub fn decode_response(
        &self,
        params: &ParamSet,
        ctx: &CognitionContext,
        max_len: usize,
    ) -> Result<Vec<usize>, CognitionError> {
        assert!(max_len >= 1, "max_len must be at least 1");
        if ctx.is_empty() {
            return Err(CognitionError::EmptyContext);
        }
        let mut ids = ctx.text_ids();
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut tape = Tape::new();
            let leaves = DecoderLeaves::new(&mut tape, params, self);
            let prefix = self.const_prefix(&mut tape, &leaves, &ctx.pooled_tokens)?;
            let hidden = leaves.hidden_rows(&mut tape, prefix, &ids, self.cfg.max_seq)?;
            let t = tape.value(hidden).rows();
            let last = tape.slice_rows(hidden, t - 1, 1)?;
            let logits = leaves.logits(&mut tape, last)?;
            let row = tape.value(logits).data();
            if !row.iter().all(|x| x.is_finite()) {
                return Err(CognitionError::NonFinite { position: t - 1 });
            }
            let next = argmax(row);
            if next == EOS {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }

    /// Mean NLL of `reference ++ <eos>` under teacher forcing.
    pub fn sequence_nll(
        &self,
        params: &ParamSet,
        ctx: &CognitionContext,
        reference: &[usize],
    ) -> Result<f64, CognitionError> {
        let terms = self.sequence_nll_terms(params, ctx, reference)?;
        Ok(terms.iter().sum::<f64>() / terms.len() as f64)
    }

    /// Per-target NLL terms for `reference ++ <eos>`.
    pub fn sequence_nll_terms(
        &self,
        params: &ParamSet,
        ctx: &CognitionContext,
        reference: &[usize],
    ) -> Result<Vec<f64>, CognitionError> {
        assert!(!reference.is_empty(), "reference must be non-empty");
        let mut tape = Tape::new();
        let leaves = DecoderLeaves::new(&mut tape, params, self);
        let prefix = self.const_prefix(&mut tape, &leaves, &ctx.pooled_tokens)?;
        let losses = nll_terms_on_tape(
            &mut tape,
            &leaves,
            prefix,
            &ctx.text_ids(),
            reference,
            self.cfg.max_seq,
        )?;
        Ok(losses
            .iter()
            .map(|v| tape.value(*v).data()[0])
            .collect())
    }
}

/// Teacher-forced NLL terms on an existing tape; shared by evaluation and
/// the stage-1 trainer (where `prefix_rows` carries gradient back into the
/// extractor).
pub fn nll_terms_on_tape(
    tape: &mut Tape,
    leaves: &DecoderLeaves,
    prefix_rows: Option<Var>,
    ctx_ids: &[usize],
    reference: &[usize],
    max_seq: usize,
) -> Result<Vec<Var>, CognitionError> {
    let k = prefix_rows.map_or(0, |p| tape.value(p).rows());
    let mut full_ids = ctx_ids.to_vec();
    full_ids.extend_from_slice(reference);
    let hidden = leaves.hidden_rows(tape, prefix_rows, &full_ids, max_seq)?;
    let logits = leaves.logits(tape, hidden)?;

    // row predicting reference[i] sits right before it; the last reference
    // row predicts <eos>
    let base = k + ctx_ids.len() - 1;
    let mut targets: Vec<usize> = reference.to_vec();
    targets.push(EOS);
    let mut losses = Vec::with_capacity(targets.len());
    for (i, target) in targets.iter().enumerate() {
        let row = tape.slice_rows(logits, base + i, 1)?;
        losses.push(tape.softmax_cross_entropy(row, *target, None)?);
    }
    Ok(losses)
}

/// Mean of scalar tape vars.
pub fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var, NumericsError> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Anything that can serve the cognition phase.
pub trait CognitionBackend: Sync {
    fn decode_response(
        &self,
        ctx: &CognitionContext,
        max_len: usize,
    ) -> Result<Vec<String>, CognitionError>;

    fn sequence_nll(
        &self,
        ctx: &CognitionContext,
        reference: &[String],
    ) -> Result<f64, CognitionError>;
}

/// The in-process toy backend.
pub struct ToyBackend<'a> {
    pub params: &'a ParamSet,
    pub decoder: &'a ToyDecoder,
    pub vocab: &'a Vocab,
}

impl CognitionBackend for ToyBackend<'_> {
    fn decode_response(
        &self,
        ctx: &CognitionContext,
        max_len: usize,
    ) -> Result<Vec<String>, CognitionError> {
        let ids = self.decoder.decode_response(self.params, ctx, max_len)?;
        Ok(ids.iter().map(|&i| self.vocab.token(i).to_string()).collect())
    }

    fn sequence_nll(
        &self,
        ctx: &CognitionContext,
        reference: &[String],
    ) -> Result<f64, CognitionError> {
        let mut ids = Vec::with_capacity(reference.len());
        for w in reference {
            ids.push(self.vocab.lookup(w).ok_or_else(|| CognitionError::UnknownToken {
                token: w.clone(),
            })?);
        }
        self.decoder.sequence_nll(self.params, ctx, &ids)
    }
}

/// Wire format for a remote cognition backend.
///
/// A service receiving this JSON replies with [`RemoteResponse`]; any such
/// service is a valid backend behind [`CognitionBackend`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RemoteRequest {
    pub prompt: String,
    pub pooled: Vec<Vec<f64>>,
    pub max_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RemoteResponse {
    pub tokens: Vec<String>,
}

impl RemoteRequest {
    pub fn from_context(ctx: &CognitionContext, vocab: &Vocab, max_len: usize) -> Self {
        RemoteRequest {
            prompt: vocab.decode(&ctx.prompt_tokens),
            pooled: ctx.pooled_tokens.clone(),
            max_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};

    fn tiny_decoder(vocab_size: usize) -> (ParamSet, ToyDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let cfg = DecoderConfig {
            vocab_size,
            d_model: 16,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 64,
            d_percep: 8,
        };
        let dec = init_decoder(&mut ps, cfg, &mut rng).unwrap();
        (ps, dec)
    }

    #[test]
    fn vocab_specials_are_pinned() {
        let v = Vocab::from_corpus(["red circle", "green square"]);
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.token(SILENCE), "</silence>");
        assert_eq!(v.token(RESPONSE), "</response>");
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn vocab_round_trip_and_unknown_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::from_corpus(["blue triangle appears"]);
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v, loaded);

        let err = v.encode("blue hexagon").unwrap_err();
        assert!(err.to_string().contains("hexagon"));
    }

    #[test]
    fn vocab_load_rejects_shuffled_specials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "<eos>\n<bos>\n</silence>\n</response>\n").unwrap();
        assert!(matches!(
            Vocab::load(&path),
            Err(CognitionError::VocabFormat { .. })
        ));
    }

    #[test]
    fn uniform_logits_give_ln_v_per_token() {
        let (mut ps, dec) = tiny_decoder(8);
        // zero head makes every logit row identical (all zeros)
        let head = dec.lm_head;
        for x in ps.get_mut(head).value.data_mut() {
            *x = 0.0;
        }
        let ctx = CognitionContext {
            prompt_tokens: vec![4, 5],
            pooled_tokens: vec![],
            prior_turns: vec![],
        };
        let nll = dec.sequence_nll(&ps, &ctx, &[6, 7, 4]).unwrap();
        assert!((nll - (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn appending_tokens_never_decreases_total_nll() {
        let (ps, dec) = tiny_decoder(10);
        let ctx = CognitionContext {
            prompt_tokens: vec![4],
            pooled_tokens: vec![vec![0.1; 8]],
            prior_turns: vec![],
        };
        let short = dec.sequence_nll_terms(&ps, &ctx, &[5, 6]).unwrap();
        let long = dec.sequence_nll_terms(&ps, &ctx, &[5, 6, 7]).unwrap();
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        assert!(sum(&long) >= sum(&short) - 1e-9);
    }

    #[test]
    fn nll_causality_prefix_terms_unchanged_by_suffix_edit() {
        let (ps, dec) = tiny_decoder(10);
        let ctx = CognitionContext {
            prompt_tokens: vec![4, 9],
            pooled_tokens: vec![vec![0.2; 8]],
            prior_turns: vec![],
        };
        let a = dec.sequence_nll_terms(&ps, &ctx, &[5, 6, 7]).unwrap();
        let b = dec.sequence_nll_terms(&ps, &ctx, &[5, 6, 8]).unwrap();
        // terms at positions before the edited token are identical
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn greedy_decode_is_deterministic_and_caps_length() {
        let (ps, dec) = tiny_decoder(10);
        let ctx = CognitionContext {
            prompt_tokens: vec![4, 5],
            pooled_tokens: vec![vec![0.5; 8]],
            prior_turns: vec![],
        };
        let a = dec.decode_response(&ps, &ctx, 5).unwrap();
        let b = dec.decode_response(&ps, &ctx, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5);
        let one = dec.decode_response(&ps, &ctx, 1).unwrap();
        assert!(one.len() <= 1);
        if !a.is_empty() {
            assert_eq!(one.len(), 1);
            assert_eq!(one[0], a[0]);
        }
    }

    #[test]
    fn context_overflow_reported() {
        let (ps, dec) = tiny_decoder(10);
        let ctx = CognitionContext {
            prompt_tokens: vec![4; 70],
            pooled_tokens: vec![],
            prior_turns: vec![],
        };
        match dec.sequence_nll(&ps, &ctx, &[5]) {
            Err(CognitionError::ContextOverflow { .. }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn empty_context_rejected() {
        let (ps, dec) = tiny_decoder(10);
        let ctx = CognitionContext::default();
        assert!(matches!(
            dec.decode_response(&ps, &ctx, 3),
            Err(CognitionError::EmptyContext)
        ));
    }

    #[test]
    fn prior_turns_are_capped() {
        let ctx = CognitionContext {
            prompt_tokens: vec![4],
            pooled_tokens: vec![],
            prior_turns: (0..7).map(|i| vec![4 + (i % 2)]).collect(),
        };
        let ids = ctx.text_ids();
        // prompt + 4 turns of (<bos> w <eos>) + final <bos>
        assert_eq!(ids.len(), 1 + MAX_PRIOR_TURNS * 3 + 1);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut ps = ParamSet::new();
        let cfg = DecoderConfig {
            vocab_size: 9,
            d_model: 32,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 48,
            max_seq: 32,
            d_percep: 6,
        };
        let dec = init_decoder(&mut ps, cfg, &mut rng).unwrap();
        let pooled: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ctx_ids = vec![4, 5, BOS];
        let reference = vec![6, 7];

        let dec_c = dec.clone();
        let pooled_c = pooled.clone();
        let mut forward = move |ps: &ParamSet, tape: &mut Tape| {
            let leaves = DecoderLeaves::new(tape, ps, &dec_c);
            let mut rows = Vec::new();
            for v in &pooled_c {
                let tok = tape.constant(Tensor::col(v.clone()));
                rows.push(leaves.project_perception(tape, tok).unwrap());
            }
            let prefix = tape.concat_rows(&rows).unwrap();
            let terms = nll_terms_on_tape(tape, &leaves, Some(prefix), &ctx_ids, &reference, 32)
                .unwrap();
            mean_of(tape, &terms).unwrap()
        };

        let ids = decoder_param_ids(&dec);
        let cfg_check = GradCheckConfig {
            coords_per_param: 3,
            ..GradCheckConfig::default()
        };
        check_gradients(&mut ps, &ids, &mut forward, &cfg_check, &mut rng).unwrap();
    }

    #[test]
    fn remote_wire_format_round_trips() {
        let v = Vocab::from_corpus(["watch the game"]);
        let ctx = CognitionContext {
            prompt_tokens: v.encode("watch the game").unwrap(),
            pooled_tokens: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            prior_turns: vec![],
        };
        let req = RemoteRequest::from_context(&ctx, &v, 12);
        assert_eq!(req.prompt, "watch the game");
        let json = serde_json::to_string(&req).unwrap();
        let back: RemoteRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(req, back);

        let resp = RemoteResponse {
            tokens: vec!["a".into(), "goal".into()],
        };
        let json = serde_json::to_string(&resp).unwrap();
        assert_eq!(json, r#"{"tokens":["a","goal"]}"#);
    }
}
