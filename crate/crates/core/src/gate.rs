//! Cognition gate: a small causal network that reads the prompt plus the
//! current perception token and decides, every frame, whether to invoke the
//! cognition backend.
//!
//! The default gate is built by shallow layer transfer: its embedding,
//! its first `k` blocks, and its two-row head are copies of the decoder's
//! early layers and of the `</silence>` / `</response>` head rows. The
//! alternatives (linear, MLP, fresh transformer, cross-attention) exist for
//! the architecture ablation and share the same decision signature.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::cognition::{
    block_param_ids, causal_mask, init_block, run_block, sinusoidal_pe, BlockLeaves, BlockParams,
    ToyDecoder, RESPONSE, SILENCE,
};
use crate::epfe::PerceptionToken;
use crate::numerics::{init_matrix, NumericsError, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    Random,
    SkipBlock,
    EarlyBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Respond,
    Silence,
}

/// Per-frame gate output. `logits` is `[silence, response]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub frame_index: u64,
    pub decision: Decision,
    pub logits: [f64; 2],
}

impl GateDecision {
    fn from_logits(frame_index: u64, logits: [f64; 2]) -> Self {
        // tie goes to silence: a false silence is recoverable next frame,
        // a false response costs a cognition call
        let decision = if logits[1] > logits[0] {
            Decision::Respond
        } else {
            Decision::Silence
        };
        GateDecision {
            frame_index,
            decision,
            logits,
        }
    }
}

#[derive(Debug)]
pub enum GateError {
    EmptyPrompt,
    NonFinite { frame_index: u64 },
    Config { detail: String },
    Numerics(NumericsError),
}

impl fmt::Display for GateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateError::EmptyPrompt => write!(f, "gate needs a non-empty prompt"),
            GateError::NonFinite { frame_index } => {
                write!(f, "non-finite gate logits at frame {frame_index}")
            }
            GateError::Config { detail } => write!(f, "gate configuration: {detail}"),
            GateError::Numerics(e) => write!(f, "gate numerics: {e}"),
        }
    }
}

impl std::error::Error for GateError {}

impl From<NumericsError> for GateError {
    fn from(e: NumericsError) -> Self {
        GateError::Numerics(e)
    }
}

/// Shallow-transfer gate: embedding + first `k` decoder blocks + the two
/// relevant head rows + the perception projection.
#[derive(Debug, Clone)]
pub struct GateModel {
    pub k: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_percep: usize,
    pub embed: ParamId,
    pub blocks: Vec<BlockParams>,
    /// `2 x d_model`; row 0 scores silence, row 1 response.
    pub head: ParamId,
    pub percep_proj: ParamId,
}

/// Source decoder layers for a `k`-block gate: `floor(i * L / k)`.
///
/// Uniform striding over the stack; for k = 3, L = 6 this picks {0, 2, 4}.
pub fn skip_block_sources(l: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * l / k).collect()
}

/// Builds a gate from the decoder under `gate.*` names.
pub fn gate_init(
    params: &mut ParamSet,
    decoder: &ToyDecoder,
    k: usize,
    strategy: InitStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<GateModel, GateError> {
    let l = decoder.blocks.len();
    if k == 0 || k > l {
        return Err(GateError::Config {
            detail: format!("gate depth {k} outside 1..={l}"),
        });
    }
    let cfg = &decoder.cfg;
    let copy = |params: &mut ParamSet, name: String, src: ParamId| -> Result<ParamId, GateError> {
        let value = params.value(src).clone();
        Ok(params.add(&name, value)?)
    };

    let (embed, percep_proj, head) = match strategy {
        InitStrategy::Random => {
            let embed = params.add(
                "gate.embed",
                init_matrix(rng, cfg.vocab_size, cfg.d_model),
            )?;
            let percep_proj = params.add(
                "gate.percep_proj",
                init_matrix(rng, cfg.d_model, cfg.d_percep),
            )?;
            let head = params.add("gate.head", init_matrix(rng, 2, cfg.d_model))?;
            (embed, percep_proj, head)
        }
        _ => {
            let embed = copy(params, "gate.embed".into(), decoder.embed)?;
            let percep_proj = copy(params, "gate.percep_proj".into(), decoder.percep_proj)?;
            // restricted head: the lm_head rows for the two specials
            let lm = params.value(decoder.lm_head);
            let d = cfg.d_model;
            let mut rows = Vec::with_capacity(2 * d);
            rows.extend_from_slice(&lm.data()[SILENCE * d..(SILENCE + 1) * d]);
            rows.extend_from_slice(&lm.data()[RESPONSE * d..(RESPONSE + 1) * d]);
            let head = params.add("gate.head", Tensor::matrix(2, d, rows).unwrap())?;
            (embed, percep_proj, head)
        }
    };

    let sources: Vec<Option<usize>> = match strategy {
        InitStrategy::Random => vec![None; k],
        InitStrategy::EarlyBlock => (0..k).map(Some).collect(),
        InitStrategy::SkipBlock => skip_block_sources(l, k).into_iter().map(Some).collect(),
    };
    let mut blocks = Vec::with_capacity(k);
    for (i, src) in sources.iter().enumerate() {
        let prefix = format!("gate.blocks.{i}");
        let blk = match src {
            Some(s) => copy_block(params, &prefix, &decoder.blocks[*s])?,
            None => init_block(params, &prefix, cfg.d_model, cfg.d_ff, rng)?,
        };
        blocks.push(blk);
    }

    Ok(GateModel {
        k,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        d_percep: cfg.d_percep,
        embed,
        blocks,
        head,
        percep_proj,
    })
}

fn copy_block(
    params: &mut ParamSet,
    prefix: &str,
    src: &BlockParams,
) -> Result<BlockParams, NumericsError> {
    let copy = |name: &str, id: ParamId, params: &mut ParamSet| {
        let value = params.value(id).clone();
        params.add(&format!("{prefix}.{name}"), value)
    };
    Ok(BlockParams {
        wq: copy("wq", src.wq, params)?,
        bq: copy("bq", src.bq, params)?,
        wk: copy("wk", src.wk, params)?,
        bk: copy("bk", src.bk, params)?,
        wv: copy("wv", src.wv, params)?,
        bv: copy("bv", src.bv, params)?,
        wo: copy("wo", src.wo, params)?,
        bo: copy("bo", src.bo, params)?,
        ln1_g: copy("ln1.g", src.ln1_g, params)?,
        ln1_b: copy("ln1.b", src.ln1_b, params)?,
        ln2_g: copy("ln2.g", src.ln2_g, params)?,
        ln2_b: copy("ln2.b", src.ln2_b, params)?,
        w1: copy("w1", src.w1, params)?,
        b1: copy("b1", src.b1, params)?,
        w2: copy("w2", src.w2, params)?,
        b2: copy("b2", src.b2, params)?,
    })
}

/// Gate leaves on a tape, reused across frames during training.
pub struct GateLeaves {
    embed: Var,
    blocks: Vec<BlockLeaves>,
    head: Var,
    percep_proj: Var,
    n_heads: usize,
}

impl GateModel {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.head, self.percep_proj];
        for b in &self.blocks {
            ids.extend(block_param_ids(b));
        }
        ids
    }

    pub fn leaves(&self, tape: &mut Tape, params: &ParamSet) -> GateLeaves {
        GateLeaves {
            embed: tape.param(params, self.embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockLeaves::new(tape, params, b))
                .collect(),
            head: tape.param(params, self.head),
            percep_proj: tape.param(params, self.percep_proj),
            n_heads: self.n_heads,
        }
    }
}

impl GateLeaves {
    /// Hidden rows after the gate blocks for `[prompt ; projected token]`.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        prompt: &[usize],
        token: Var,
    ) -> Result<Var, NumericsError> {
        let text = tape.embed_rows(self.embed, prompt)?;
        let col = tape.matmul(self.percep_proj, token)?;
        let tok_row = tape.transpose(col)?;
        let rows = tape.concat_rows(&[text, tok_row])?;
        let t = tape.value(rows).rows();
        let d = tape.value(rows).cols();
        let pe = tape.constant(sinusoidal_pe(t, d));
        let mut x = tape.add(rows, pe)?;
        let mask = tape.constant(causal_mask(t));
        for blk in &self.blocks {
            x = run_block(tape, x, blk, self.n_heads, mask)?;
        }
        Ok(x)
    }

    /// Two logits (`[silence, response]` as a 2x1 column) at the final
    /// position.
    pub fn logits(
        &self,
        tape: &mut Tape,
        prompt: &[usize],
        token: Var,
    ) -> Result<Var, NumericsError> {
        let hidden = self.hidden(tape, prompt, token)?;
        let t = tape.value(hidden).rows();
        let last = tape.slice_rows(hidden, t - 1, 1)?;
        let last_col = tape.transpose(last)?;
        tape.matmul(self.head, last_col)
    }
}

/// One gate judgment; cost depends on prompt length and model width only.
pub fn gate_step(
    params: &ParamSet,
    gate: &GateModel,
    prompt: &[usize],
    token: &PerceptionToken,
) -> Result<GateDecision, GateError> {
    if prompt.is_empty() {
        return Err(GateError::EmptyPrompt);
    }
    let mut tape = Tape::new();
    let leaves = gate.leaves(&mut tape, params);
    let tok = tape.constant(Tensor::col(token.vector.clone()));
    let logits = leaves.logits(&mut tape, prompt, tok)?;
    let data = tape.value(logits).data();
    if !data.iter().all(|x| x.is_finite()) {
        return Err(GateError::NonFinite {
            frame_index: token.frame_index,
        });
    }
    Ok(GateDecision::from_logits(
        token.frame_index,
        [data[0], data[1]],
    ))
}

/// Decoder hidden rows after its first `k` blocks on a bare prompt (no
/// perception prefix, no final norm). The gate's prompt rows reproduce this
/// exactly when initialized by early-block transfer.
pub fn decoder_prompt_activations(
    params: &ParamSet,
    decoder: &ToyDecoder,
    prompt: &[usize],
    k: usize,
) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let embed = tape.param(params, decoder.embed);
    let rows = tape.embed_rows(embed, prompt)?;
    let t = prompt.len();
    let pe = tape.constant(sinusoidal_pe(t, decoder.cfg.d_model));
    let mut x = tape.add(rows, pe)?;
    let mask = tape.constant(causal_mask(t));
    for b in decoder.blocks.iter().take(k) {
        let leaves = BlockLeaves::new(&mut tape, params, b);
        x = run_block(&mut tape, x, &leaves, decoder.cfg.n_heads, mask)?;
    }
    Ok(tape.value(x).clone())
}

/// Gate hidden rows at the prompt positions (the appended perception token
/// is causally invisible to them).
pub fn gate_prompt_activations(
    params: &ParamSet,
    gate: &GateModel,
    prompt: &[usize],
    token: &PerceptionToken,
) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let leaves = gate.leaves(&mut tape, params);
    let tok = tape.constant(Tensor::col(token.vector.clone()));
    let hidden = leaves.hidden(&mut tape, prompt, tok)?;
    let rows = tape.slice_rows(hidden, 0, prompt.len())?;
    Ok(tape.value(rows).clone())
}

// ---------------------------------------------------------------------------
// Architecture alternatives for the gate ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateArchKind {
    Shallow,
    Linear,
    Mlp,
    Transformer,
    CrossAttention,
}

impl GateArchKind {
    pub fn parse(name: &str) -> Result<Self, GateError> {
        match name {
            "shallow" => Ok(GateArchKind::Shallow),
            "linear" => Ok(GateArchKind::Linear),
            "mlp" => Ok(GateArchKind::Mlp),
            "transformer" => Ok(GateArchKind::Transformer),
            "xattn" | "cross_attention" => Ok(GateArchKind::CrossAttention),
            other => Err(GateError::Config {
                detail: format!("unknown gate architecture '{other}'"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GateArchKind::Shallow => "shallow",
            GateArchKind::Linear => "linear",
            GateArchKind::Mlp => "mlp",
            GateArchKind::Transformer => "transformer",
            GateArchKind::CrossAttention => "xattn",
        }
    }
}

/// Direct linear read-out of the perception token; ignores the prompt.
#[derive(Debug, Clone)]
pub struct LinearGate {
    pub w: ParamId, // 2 x d_percep
    pub b: ParamId, // 2 x 1
}

/// Two-layer perceptron over the perception token; ignores the prompt.
#[derive(Debug, Clone)]
pub struct MlpGate {
    pub w1: ParamId, // hidden x d_percep
    pub b1: ParamId, // hidden x 1
    pub w2: ParamId, // 2 x hidden
    pub b2: ParamId, // 2 x 1
}

/// From-scratch causal transformer classifier over `[prompt ; token]`.
#[derive(Debug, Clone)]
pub struct TransformerGate {
    pub inner: GateModel,
}

/// Prompt rows attend to the projected token, mean-pool, linear head.
#[derive(Debug, Clone)]
pub struct XAttnGate {
    pub embed: ParamId,       // vocab x d_model
    pub percep_proj: ParamId, // d_model x d_percep
    pub wq: ParamId,          // d_model x d_model
    pub head: ParamId,        // 2 x d_model
    pub d_model: usize,
}

/// A gate of any architecture, sharing the decision signature.
#[derive(Debug, Clone)]
pub enum GateNet {
    Shallow(GateModel),
    Linear(LinearGate),
    Mlp(MlpGate),
    Transformer(TransformerGate),
    CrossAttention(XAttnGate),
}

/// Builds an alternative classifier for the architecture ablation.
/// `Shallow` is built by [`gate_init`] instead, since it needs a strategy.
pub fn gate_alternatives(
    params: &mut ParamSet,
    kind: GateArchKind,
    decoder: &ToyDecoder,
    rng: &mut ChaCha8Rng,
) -> Result<GateNet, GateError> {
    let d_percep = decoder.cfg.d_percep;
    let d_model = decoder.cfg.d_model;
    match kind {
        GateArchKind::Shallow => Err(GateError::Config {
            detail: "build the shallow gate with gate_init".into(),
        }),
        GateArchKind::Linear => Ok(GateNet::Linear(LinearGate {
            w: params.add("gate.alt.linear.w", init_matrix(rng, 2, d_percep))?,
            b: params.add("gate.alt.linear.b", Tensor::zeros(&[2, 1]))?,
        })),
        GateArchKind::Mlp => {
            let hidden = 32;
            Ok(GateNet::Mlp(MlpGate {
                w1: params.add("gate.alt.mlp.w1", init_matrix(rng, hidden, d_percep))?,
                b1: params.add("gate.alt.mlp.b1", Tensor::zeros(&[hidden, 1]))?,
                w2: params.add("gate.alt.mlp.w2", init_matrix(rng, 2, hidden))?,
                b2: params.add("gate.alt.mlp.b2", Tensor::zeros(&[2, 1]))?,
            }))
        }
        GateArchKind::Transformer => {
            let k = 2;
            let embed = params.add(
                "gate.alt.tr.embed",
                init_matrix(rng, decoder.cfg.vocab_size, d_model),
            )?;
            let percep_proj = params.add(
                "gate.alt.tr.percep_proj",
                init_matrix(rng, d_model, d_percep),
            )?;
            let head = params.add("gate.alt.tr.head", init_matrix(rng, 2, d_model))?;
            let mut blocks = Vec::with_capacity(k);
            for i in 0..k {
                blocks.push(init_block(
                    params,
                    &format!("gate.alt.tr.blocks.{i}"),
                    d_model,
                    decoder.cfg.d_ff,
                    rng,
                )?);
            }
            Ok(GateNet::Transformer(TransformerGate {
                inner: GateModel {
                    k,
                    d_model,
                    n_heads: decoder.cfg.n_heads,
                    d_percep,
                    embed,
                    blocks,
                    head,
                    percep_proj,
                },
            }))
        }
        GateArchKind::CrossAttention => Ok(GateNet::CrossAttention(XAttnGate {
            embed: params.add(
                "gate.alt.xattn.embed",
                init_matrix(rng, decoder.cfg.vocab_size, d_model),
            )?,
            percep_proj: params.add(
                "gate.alt.xattn.percep_proj",
                init_matrix(rng, d_model, d_percep),
            )?,
            wq: params.add("gate.alt.xattn.wq", init_matrix(rng, d_model, d_model))?,
            head: params.add("gate.alt.xattn.head", init_matrix(rng, 2, d_model))?,
            d_model,
        })),
    }
}

impl GateNet {
    pub fn shallow(gate: GateModel) -> Self {
        GateNet::Shallow(gate)
    }

    pub fn kind(&self) -> GateArchKind {
        match self {
            GateNet::Shallow(_) => GateArchKind::Shallow,
            GateNet::Linear(_) => GateArchKind::Linear,
            GateNet::Mlp(_) => GateArchKind::Mlp,
            GateNet::Transformer(_) => GateArchKind::Transformer,
            GateNet::CrossAttention(_) => GateArchKind::CrossAttention,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            GateNet::Shallow(g) => g.param_ids(),
            GateNet::Linear(g) => vec![g.w, g.b],
            GateNet::Mlp(g) => vec![g.w1, g.b1, g.w2, g.b2],
            GateNet::Transformer(g) => g.inner.param_ids(),
            GateNet::CrossAttention(g) => vec![g.embed, g.percep_proj, g.wq, g.head],
        }
    }

    pub fn leaves(&self, tape: &mut Tape, params: &ParamSet) -> GateNetLeaves {
        match self {
            GateNet::Shallow(g) => GateNetLeaves::Causal(g.leaves(tape, params)),
            GateNet::Linear(g) => GateNetLeaves::Linear {
                w: tape.param(params, g.w),
                b: tape.param(params, g.b),
            },
            GateNet::Mlp(g) => GateNetLeaves::Mlp {
                w1: tape.param(params, g.w1),
                b1: tape.param(params, g.b1),
                w2: tape.param(params, g.w2),
                b2: tape.param(params, g.b2),
            },
            GateNet::Transformer(g) => GateNetLeaves::Causal(g.inner.leaves(tape, params)),
            GateNet::CrossAttention(g) => GateNetLeaves::XAttn {
                embed: tape.param(params, g.embed),
                percep_proj: tape.param(params, g.percep_proj),
                wq: tape.param(params, g.wq),
                head: tape.param(params, g.head),
                d_model: g.d_model,
            },
        }
    }

    /// One decision through whatever architecture this is.
    pub fn decide(
        &self,
        params: &ParamSet,
        prompt: &[usize],
        token: &PerceptionToken,
    ) -> Result<GateDecision, GateError> {
        if prompt.is_empty() {
            return Err(GateError::EmptyPrompt);
        }
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, params);
        let tok = tape.constant(Tensor::col(token.vector.clone()));
        let logits = leaves.logits(&mut tape, prompt, tok)?;
        let data = tape.value(logits).data();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(GateError::NonFinite {
                frame_index: token.frame_index,
            });
        }
        Ok(GateDecision::from_logits(
            token.frame_index,
            [data[0], data[1]],
        ))
    }
}

pub enum GateNetLeaves {
    Causal(GateLeaves),
    Linear {
        w: Var,
        b: Var,
    },
    Mlp {
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
    },
    XAttn {
        embed: Var,
        percep_proj: Var,
        wq: Var,
        head: Var,
        d_model: usize,
    },
}

impl GateNetLeaves {
    /// `[silence, response]` logits as a 2x1 column.
    pub fn logits(
        &self,
        tape: &mut Tape,
        prompt: &[usize],
        token: Var,
    ) -> Result<Var, NumericsError> {
        match self {
            GateNetLeaves::Causal(g) => g.logits(tape, prompt, token),
            GateNetLeaves::Linear { w, b } => {
                let wx = tape.matmul(*w, token)?;
                tape.add(wx, *b)
            }
            GateNetLeaves::Mlp { w1, b1, w2, b2 } => {
                let h = tape.matmul(*w1, token)?;
                let h = tape.add(h, *b1)?;
                let h = tape.gelu(h);
                let out = tape.matmul(*w2, h)?;
                tape.add(out, *b2)
            }
            GateNetLeaves::XAttn {
                embed,
                percep_proj,
                wq,
                head,
                d_model,
            } => {
                let q_rows = tape.embed_rows(*embed, prompt)?;
                let q = tape.matmul(q_rows, *wq)?;
                let kv_col = tape.matmul(*percep_proj, token)?;
                let kv = tape.transpose(kv_col)?; // 1 x d
                let kt = tape.transpose(kv)?; // d x 1
                let scores = tape.matmul(q, kt)?; // p x 1
                let scale = 1.0 / (*d_model as f64).sqrt();
                let scores = tape.scale(scores, scale);
                // one perception token means one key, so the attention
                // weights collapse to 1; kept in the graph because this is
                // the declared wiring of the ablation arm
                let weights = tape.softmax_rows(scores)?;
                let attended = tape.matmul(weights, kv)?; // p x d
                let p = prompt.len();
                let ones = tape.constant(Tensor::matrix(1, p, vec![1.0 / p as f64; p]).unwrap());
                let pooled = tape.matmul(ones, attended)?; // 1 x d
                let pooled_col = tape.transpose(pooled)?;
                tape.matmul(*head, pooled_col)
            }
        }
    }
}
