//! A small trainable decoder-only transformer with exposed per-layer states
//! and hook points that substitute the MLP output at a chosen (layer, token).
//!
//! Block structure (pre-norm, no linear biases):
//!
//! ```text
//! a  = attn(ln1(h))
//! h' = h + a
//! k  = gelu(ln2(h') @ w_fc^T)        // the "key" read by editors
//! m  = k @ w_proj^T                  // hook point: m[i] may be replaced
//! h  = h' + m
//! ```
//!
//! Weight matrices are stored `[out, in]`; `w_proj` of the edited layer is
//! the only tensor editors mutate.

pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{log_sum_exp, NodeId, Tape};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LMConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_mlp: 512,
            context_len: 32,
            seed: 0,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_fc: Tensor,   // [d_mlp, d_model]
    pub w_proj: Tensor, // [d_model, d_mlp]
}

/// The trainable model: tokenizer, configuration, and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub cfg: LMConfig,
    pub vocab: Vocab,
    pub tok_emb: Tensor, // [V, d_model]
    pub pos_emb: Tensor, // [context_len, d_model]
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub unembed: Tensor, // [V, d_model]
}

/// Substitute `replacement` as the MLP output at (layer, token).
#[derive(Debug, Clone)]
pub struct HookSpec {
    pub layer: usize,
    pub token: usize,
    pub replacement: Tensor, // [d_model]
}

/// Everything one forward pass computed, in the order it was computed.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,        // [T, V]
    pub hidden: Vec<Tensor>,   // per layer, residual stream after the block
    pub attn_out: Vec<Tensor>, // per layer, attention output a
    pub mlp_in: Vec<Tensor>,   // per layer, post-layernorm MLP input
    pub mlp_act: Vec<Tensor>,  // per layer, first-layer activation ("keys")
    pub mlp_out: Vec<Tensor>,  // per layer, MLP output m (after any hook)
}

impl TinyLm {
    /// Seeded random initialization (weights N(0, 0.02), layernorm identity).
    pub fn new(cfg: LMConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let v = vocab.len();
        let d = cfg.d_model;
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            Tensor::matrix(
                rows,
                cols,
                (0..rows * cols).map(|_| gaussian(&mut rng) * std).collect(),
            )
        };
        let std = 0.02;
        let tok_emb = normal(v, d, std);
        let pos_emb = normal(cfg.context_len, d, std);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_g: Tensor::vector(vec![1.0; d]),
                ln1_b: Tensor::vector(vec![0.0; d]),
                w_q: normal(d, d, std),
                w_k: normal(d, d, std),
                w_v: normal(d, d, std),
                w_o: normal(d, d, std),
                ln2_g: Tensor::vector(vec![1.0; d]),
                ln2_b: Tensor::vector(vec![0.0; d]),
                w_fc: normal(cfg.d_mlp, d, std),
                w_proj: normal(d, cfg.d_mlp, std),
            });
        }
        let lnf_g = Tensor::vector(vec![1.0; d]);
        let lnf_b = Tensor::vector(vec![0.0; d]);
        let unembed = normal(v, d, std);
        Ok(TinyLm {
            cfg,
            vocab,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            unembed,
        })
    }

    /// Clone sharing all tensors except `w_proj` at `layer`.
    pub fn with_wproj(&self, layer: usize, w_proj: Tensor) -> TinyLm {
        let mut out = self.clone();
        out.layers[layer].w_proj = w_proj;
        out
    }

    /// Visit parameters in canonical (checkpoint) order.
    pub fn visit_params(&self, mut f: impl FnMut(String, &Tensor)) {
        f("tok_emb".into(), &self.tok_emb);
        f("pos_emb".into(), &self.pos_emb);
        for (l, lp) in self.layers.iter().enumerate() {
            f(format!("layer{l}.ln1_g"), &lp.ln1_g);
            f(format!("layer{l}.ln1_b"), &lp.ln1_b);
            f(format!("layer{l}.w_q"), &lp.w_q);
            f(format!("layer{l}.w_k"), &lp.w_k);
            f(format!("layer{l}.w_v"), &lp.w_v);
            f(format!("layer{l}.w_o"), &lp.w_o);
            f(format!("layer{l}.ln2_g"), &lp.ln2_g);
            f(format!("layer{l}.ln2_b"), &lp.ln2_b);
            f(format!("layer{l}.w_fc"), &lp.w_fc);
            f(format!("layer{l}.w_proj"), &lp.w_proj);
        }
        f("lnf_g".into(), &self.lnf_g);
        f("lnf_b".into(), &self.lnf_b);
        f("unembed".into(), &self.unembed);
    }

    /// Parameters in canonical order.
    pub fn ordered_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(|name, t| out.push((name, t.clone())));
        out
    }

    /// In-place `p -= lr * g` over parameters in canonical order.
    pub fn apply_gradient_step(&mut self, grads: &[Tensor], lr: f64) {
        let mut idx = 0;
        let mut step = |t: &mut Tensor| {
            t.axpy(-lr, &grads[idx]);
            idx += 1;
        };
        step(&mut self.tok_emb);
        step(&mut self.pos_emb);
        for lp in self.layers.iter_mut() {
            step(&mut lp.ln1_g);
            step(&mut lp.ln1_b);
            step(&mut lp.w_q);
            step(&mut lp.w_k);
            step(&mut lp.w_v);
            step(&mut lp.w_o);
            step(&mut lp.ln2_g);
            step(&mut lp.ln2_b);
            step(&mut lp.w_fc);
            step(&mut lp.w_proj);
        }
        step(&mut self.lnf_g);
        step(&mut self.lnf_b);
        step(&mut self.unembed);
        debug_assert_eq!(idx, grads.len());
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Which parameters become tracked (differentiable) tape leaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tracking {
    None,
    All,
    WProj(usize),
}

pub struct LayerNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w_fc: NodeId,
    pub w_proj: NodeId,
}

pub struct ParamNodes {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<LayerNodes>,
    pub lnf_g: NodeId,
    pub lnf_b: NodeId,
    pub unembed: NodeId,
}

impl ParamNodes {
    pub fn push(tape: &mut Tape, model: &TinyLm, tracking: Tracking) -> ParamNodes {
        let mut leaf = |t: &Tensor, tracked: bool| -> NodeId {
            if tracked {
                tape.tracked(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let all = matches!(tracking, Tracking::All);
        let tok_emb = leaf(&model.tok_emb, all);
        let pos_emb = leaf(&model.pos_emb, all);
        let mut layers = Vec::with_capacity(model.layers.len());
        for (l, lp) in model.layers.iter().enumerate() {
            let wp_tracked = all || tracking == Tracking::WProj(l);
            layers.push(LayerNodes {
                ln1_g: leaf(&lp.ln1_g, all),
                ln1_b: leaf(&lp.ln1_b, all),
                w_q: leaf(&lp.w_q, all),
                w_k: leaf(&lp.w_k, all),
                w_v: leaf(&lp.w_v, all),
                w_o: leaf(&lp.w_o, all),
                ln2_g: leaf(&lp.ln2_g, all),
                ln2_b: leaf(&lp.ln2_b, all),
                w_fc: leaf(&lp.w_fc, all),
                w_proj: leaf(&lp.w_proj, wp_tracked),
            });
        }
        let lnf_g = leaf(&model.lnf_g, all);
        let lnf_b = leaf(&model.lnf_b, all);
        let unembed = leaf(&model.unembed, all);
        ParamNodes {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            unembed,
        }
    }

    /// Node ids in the same canonical order as `TinyLm::visit_params`.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_g, l.ln1_b, l.w_q, l.w_k, l.w_v, l.w_o, l.ln2_g, l.ln2_b, l.w_fc, l.w_proj,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b, self.unembed]);
        out
    }
}

pub struct BlockNodes {
    pub attn_out: NodeId,
    pub mlp_in: NodeId,
    pub mlp_act: NodeId,
    pub mlp_out: NodeId,
    pub x_out: NodeId,
}

/// One transformer block; `hook` replaces the MLP output row at a token.
pub fn block_forward(
    tape: &mut Tape,
    cfg: &LMConfig,
    ln: &LayerNodes,
    x: NodeId,
    hooks: &[(usize, NodeId)],
) -> Result<BlockNodes> {
    let d_head = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let n1 = tape.layer_norm(x, ln.ln1_g, ln.ln1_b, LN_EPS)?;
    let q = tape.matmul_nt(n1, ln.w_q)?;
    let k = tape.matmul_nt(n1, ln.w_k)?;
    let v = tape.matmul_nt(n1, ln.w_v)?;
    let mut head_ctx = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let start = h * d_head;
        let qh = tape.slice_cols(q, start, d_head)?;
        let kh = tape.slice_cols(k, start, d_head)?;
        let vh = tape.slice_cols(v, start, d_head)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.causal_softmax(scores)?;
        head_ctx.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat_cols(&head_ctx)?;
    let attn_out = tape.matmul_nt(ctx, ln.w_o)?;
    let x1 = tape.add(x, attn_out)?;

    let mlp_in = tape.layer_norm(x1, ln.ln2_g, ln.ln2_b, LN_EPS)?;
    let pre = tape.matmul_nt(mlp_in, ln.w_fc)?;
    let mlp_act = tape.gelu(pre);
    let mut mlp_out = tape.matmul_nt(mlp_act, ln.w_proj)?;
    for &(token, rep) in hooks {
        mlp_out = tape.replace_row(mlp_out, token, rep)?;
    }
    let x_out = tape.add(x1, mlp_out)?;
    Ok(BlockNodes {
        attn_out,
        mlp_in,
        mlp_act,
        mlp_out,
        x_out,
    })
}

/// Token + position embedding.
pub fn embed(tape: &mut Tape, pn: &ParamNodes, tokens: &[TokenId]) -> Result<NodeId> {
    let tok = tape.gather_rows(pn.tok_emb, tokens.to_vec())?;
    let pos = tape.gather_rows(pn.pos_emb, (0..tokens.len()).collect())?;
    tape.add(tok, pos)
}

/// Final layernorm and unembedding.
pub fn logits_head(tape: &mut Tape, pn: &ParamNodes, x: NodeId) -> Result<NodeId> {
    let n = tape.layer_norm(x, pn.lnf_g, pn.lnf_b, LN_EPS)?;
    tape.matmul_nt(n, pn.unembed)
}

pub struct TraceNodes {
    pub logits: NodeId,
    pub hidden: Vec<NodeId>,
    pub attn_out: Vec<NodeId>,
    pub mlp_in: Vec<NodeId>,
    pub mlp_act: Vec<NodeId>,
    pub mlp_out: Vec<NodeId>,
}

/// Full forward pass on a tape. Hook replacements are supplied as node ids
/// so callers may track them.
pub fn forward_on_tape(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &LMConfig,
    tokens: &[TokenId],
    hooks: &[(usize, usize, NodeId)],
) -> Result<TraceNodes> {
    let mut x = embed(tape, pn, tokens)?;
    let mut trace = TraceNodes {
        logits: x, // placeholder, set below
        hidden: Vec::with_capacity(cfg.n_layers),
        attn_out: Vec::with_capacity(cfg.n_layers),
        mlp_in: Vec::with_capacity(cfg.n_layers),
        mlp_act: Vec::with_capacity(cfg.n_layers),
        mlp_out: Vec::with_capacity(cfg.n_layers),
    };
    for (l, ln) in pn.layers.iter().enumerate() {
        let layer_hooks: Vec<(usize, NodeId)> = hooks
            .iter()
            .filter(|(hl, _, _)| *hl == l)
            .map(|&(_, tok, rep)| (tok, rep))
            .collect();
        let block = block_forward(tape, cfg, ln, x, &layer_hooks)?;
        x = block.x_out;
        trace.hidden.push(block.x_out);
        trace.attn_out.push(block.attn_out);
        trace.mlp_in.push(block.mlp_in);
        trace.mlp_act.push(block.mlp_act);
        trace.mlp_out.push(block.mlp_out);
    }
    trace.logits = logits_head(tape, pn, x)?;
    Ok(trace)
}

fn check_inputs(model: &TinyLm, tokens: &[TokenId], hooks: &[HookSpec]) -> Result<()> {
    if tokens.len() > model.cfg.context_len {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            context_len: model.cfg.context_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= model.vocab.len()) {
        return Err(Error::Domain(format!(
            "token id {bad} out of vocabulary size {}",
            model.vocab.len()
        )));
    }
    for h in hooks {
        if h.layer >= model.cfg.n_layers || h.token >= tokens.len() {
            return Err(Error::InvalidHook {
                layer: h.layer,
                token: h.token,
                n_layers: model.cfg.n_layers,
                seq_len: tokens.len(),
            });
        }
        if h.replacement.numel() != model.cfg.d_model {
            return Err(Error::ShapeMismatch {
                op: "hook replacement",
                lhs: h.replacement.shape().to_vec(),
                rhs: vec![model.cfg.d_model],
            });
        }
    }
    Ok(())
}

/// Causal forward pass; returns logits and all recorded per-layer states.
pub fn forward(model: &TinyLm, tokens: &[TokenId], hooks: &[HookSpec]) -> Result<ForwardTrace> {
    check_inputs(model, tokens, hooks)?;
    let mut tape = Tape::new();
    let pn = ParamNodes::push(&mut tape, model, Tracking::None);
    let hook_nodes: Vec<(usize, usize, NodeId)> = hooks
        .iter()
        .map(|h| (h.layer, h.token, tape.constant(h.replacement.clone())))
        .collect();
    let t = forward_on_tape(&mut tape, &pn, &model.cfg, tokens, &hook_nodes)?;
    let grab = |ids: &[NodeId]| ids.iter().map(|&i| tape.value(i).clone()).collect();
    Ok(ForwardTrace {
        logits: tape.value(t.logits).clone(),
        hidden: grab(&t.hidden),
        attn_out: grab(&t.attn_out),
        mlp_in: grab(&t.mlp_in),
        mlp_act: grab(&t.mlp_act),
        mlp_out: grab(&t.mlp_out),
    })
}

/// Length-normalized log-probability of `continuation` after `prompt`.
pub fn logprob_continuation(
    model: &TinyLm,
    prompt: &[TokenId],
    continuation: &[TokenId],
    hooks: &[HookSpec],
) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::Domain("empty continuation".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Domain("empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(continuation);
    let trace = forward(model, &seq, hooks)?;
    let mut total = 0.0;
    for (t, &tok) in continuation.iter().enumerate() {
        let row = trace.logits.row(prompt.len() - 1 + t);
        total += row[tok] - log_sum_exp(row);
    }
    Ok(total / continuation.len() as f64)
}

/// Next-token distribution after `prompt` (softmax of final-position logits).
pub fn next_token_dist(model: &TinyLm, prompt: &[TokenId], hooks: &[HookSpec]) -> Result<Tensor> {
    if prompt.is_empty() {
        return Err(Error::Domain("empty prompt".into()));
    }
    let trace = forward(model, prompt, hooks)?;
    let row = trace.logits.row(prompt.len() - 1);
    let lse = log_sum_exp(row);
    Ok(Tensor::vector(row.iter().map(|v| (v - lse).exp()).collect()))
}

/// Mean final-layer hidden state over `span` (half-open token range).
pub fn span_repr(
    model: &TinyLm,
    tokens: &[TokenId],
    span: (usize, usize),
    hooks: &[HookSpec],
) -> Result<Tensor> {
    let (start, end) = span;
    if start >= end || end > tokens.len() {
        return Err(Error::InvalidSpan {
            start,
            end,
            len: tokens.len(),
        });
    }
    let trace = forward(model, tokens, hooks)?;
    let h = trace.hidden.last().expect("at least one layer");
    let d = h.cols();
    let mut acc = vec![0.0; d];
    for r in start..end {
        for (a, v) in acc.iter_mut().zip(h.row(r)) {
            *a += v;
        }
    }
    let inv = 1.0 / (end - start) as f64;
    Ok(Tensor::vector(acc.into_iter().map(|v| v * inv).collect()))
}

/// Ancestral sampling at temperature 1.0; deterministic for a fixed seed.
pub fn generate(model: &TinyLm, prefix: &[TokenId], length: usize, seed: u64) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prefix.to_vec();
    for _ in 0..length {
        let dist = next_token_dist(model, &seq, &[])?;
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut cum = 0.0;
        let mut chosen = dist.numel() - 1;
        for (i, &p) in dist.data().iter().enumerate() {
            cum += p;
            if u < cum {
                chosen = i;
                break;
            }
        }
        seq.push(chosen);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;

    pub(crate) fn tiny_model(seed: u64) -> TinyLm {
        let vocab = Vocab::new((0..8).map(|i| format!("w{i}")));
        let cfg = LMConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_mlp: 24,
            context_len: 16,
            seed,
        };
        TinyLm::new(cfg, vocab).unwrap()
    }

    #[test]
    fn empty_hooks_equal_plain_forward_bitwise() {
        let m = tiny_model(1);
        let tokens = vec![1, 4, 2, 7, 3];
        let a = forward(&m, &tokens, &[]).unwrap();
        let b = forward(&m, &tokens, &[]).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn self_substitution_is_identity() {
        let m = tiny_model(2);
        let tokens = vec![1, 4, 2, 7, 3];
        let clean = forward(&m, &tokens, &[]).unwrap();
        let layer = m.cfg.n_layers - 1;
        let token = tokens.len() - 1;
        let rec = Tensor::vector(clean.mlp_out[layer].row(token).to_vec());
        let hooked = forward(
            &m,
            &tokens,
            &[HookSpec {
                layer,
                token,
                replacement: rec,
            }],
        )
        .unwrap();
        assert_eq!(clean.logits, hooked.logits);
    }

    #[test]
    fn hooks_respect_causality() {
        let m = tiny_model(3);
        let tokens = vec![1, 4, 2, 7, 3, 5];
        let clean = forward(&m, &tokens, &[]).unwrap();
        let token = 3;
        let mut delta = clean.mlp_out[1].row(token).to_vec();
        for v in delta.iter_mut() {
            *v += 0.5;
        }
        let hooked = forward(
            &m,
            &tokens,
            &[HookSpec {
                layer: 1,
                token,
                replacement: Tensor::vector(delta),
            }],
        )
        .unwrap();
        // positions before the hooked token are bit-identical
        for pos in 0..token {
            assert_eq!(clean.logits.row(pos), hooked.logits.row(pos), "position {pos}");
        }
        // and the hooked position itself changes
        assert_ne!(clean.logits.row(token), hooked.logits.row(token));
    }

    #[test]
    fn invalid_hook_is_rejected() {
        let m = tiny_model(4);
        let tokens = vec![1, 2];
        let bad = HookSpec {
            layer: 99,
            token: 0,
            replacement: Tensor::vector(vec![0.0; m.cfg.d_model]),
        };
        assert!(matches!(
            forward(&m, &tokens, &[bad]),
            Err(Error::InvalidHook { .. })
        ));
    }

    #[test]
    fn logprob_uniform_when_logits_flat() {
        let mut m = tiny_model(5);
        // zero unembedding gives exactly uniform next-token distributions
        m.unembed = Tensor::zeros(vec![m.vocab.len(), m.cfg.d_model]);
        let v = m.vocab.len() as f64;
        let lp = logprob_continuation(&m, &[1, 2], &[3], &[]).unwrap();
        assert!((lp - (1.0 / v).ln()).abs() < 1e-12);
        let dist = next_token_dist(&m, &[1, 2], &[]).unwrap();
        for &p in dist.data() {
            assert!((p - 1.0 / v).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_matches_exhaustive_softmax_oracle() {
        let m = tiny_model(6);
        let prompt = vec![1, 4, 2];
        let cont = vec![7, 3];
        let lp = logprob_continuation(&m, &prompt, &cont, &[]).unwrap();
        // oracle: enumerate softmax denominators directly from the trace
        let mut seq = prompt.clone();
        seq.extend_from_slice(&cont);
        let trace = forward(&m, &seq, &[]).unwrap();
        let mut expect = 0.0;
        for (t, &tok) in cont.iter().enumerate() {
            let row = trace.logits.row(prompt.len() - 1 + t);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect += (row[tok].exp() / denom).ln();
        }
        expect /= cont.len() as f64;
        assert!((lp - expect).abs() < 1e-10);
    }

    #[test]
    fn next_token_dist_sums_to_one() {
        let m = tiny_model(7);
        let dist = next_token_dist(&m, &[0, 5, 3], &[]).unwrap();
        let s: f64 = dist.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn whole_vocab_logprobs_sum_to_one() {
        let m = tiny_model(8);
        let prompt = vec![2, 6];
        let mut total = 0.0;
        for tok in 0..m.vocab.len() {
            total += logprob_continuation(&m, &prompt, &[tok], &[]).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn span_repr_single_token_matches_hidden_row() {
        let m = tiny_model(9);
        let tokens = vec![1, 4, 2, 7];
        let repr = span_repr(&m, &tokens, (2, 3), &[]).unwrap();
        let trace = forward(&m, &tokens, &[]).unwrap();
        assert_eq!(repr.data(), trace.hidden.last().unwrap().row(2));
    }

    #[test]
    fn span_repr_two_tokens_is_arithmetic_mean() {
        let m = tiny_model(10);
        let tokens = vec![1, 4, 2, 7];
        let repr = span_repr(&m, &tokens, (1, 3), &[]).unwrap();
        let trace = forward(&m, &tokens, &[]).unwrap();
        let h = trace.hidden.last().unwrap();
        for c in 0..m.cfg.d_model {
            let mean = 0.5 * (h.row(1)[c] + h.row(2)[c]);
            assert!((repr.data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_layer_hook_inside_causal_cone_changes_span_repr() {
        let m = tiny_model(11);
        let tokens = vec![1, 4, 2, 7];
        let clean = span_repr(&m, &tokens, (3, 4), &[]).unwrap();
        let trace = forward(&m, &tokens, &[]).unwrap();
        let mut rep = trace.mlp_out[0].row(1).to_vec();
        // a uniform shift would vanish under layer normalization; bump one
        // coordinate instead
        rep[2] += 1.0;
        let hooked = span_repr(
            &m,
            &tokens,
            (3, 4),
            &[HookSpec {
                layer: 0,
                token: 1,
                replacement: Tensor::vector(rep),
            }],
        )
        .unwrap();
        assert!(clean.sub(&hooked).unwrap().norm2() > 1e-9);
    }

    #[test]
    fn empty_span_is_rejected() {
        let m = tiny_model(12);
        assert!(matches!(
            span_repr(&m, &[1, 2, 3], (2, 2), &[]),
            Err(Error::InvalidSpan { .. })
        ));
    }

    #[test]
    fn generate_is_deterministic_and_length_zero_is_noop() {
        let m = tiny_model(13);
        let prefix = vec![1, 2];
        assert_eq!(generate(&m, &prefix, 0, 7).unwrap(), prefix);
        let a = generate(&m, &prefix, 6, 42).unwrap();
        let b = generate(&m, &prefix, 6, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn sampling_frequency_matches_distribution() {
        let m = tiny_model(14);
        let prefix = vec![3, 1];
        let dist = next_token_dist(&m, &prefix, &[]).unwrap();
        let n = 2000;
        let mut counts = vec![0usize; m.vocab.len()];
        for s in 0..n {
            let out = generate(&m, &prefix, 1, s as u64).unwrap();
            counts[out[2]] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = dist.data()[i];
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let diff = (c as f64 / n as f64 - p).abs();
            assert!(
                diff <= 3.0 * sigma + 1e-9,
                "token {i}: freq {} vs p {p} (3 sigma {})",
                c as f64 / n as f64,
                3.0 * sigma
            );
        }
    }

    #[test]
    fn context_overflow_is_rejected() {
        let m = tiny_model(15);
        let tokens = vec![0; m.cfg.context_len + 1];
        assert!(matches!(
            forward(&m, &tokens, &[]),
            Err(Error::ContextOverflow { .. })
        ));
    }
}
