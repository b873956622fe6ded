//! Mini-batch gradient descent training for the toy model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::{forward_on_tape, LMConfig, ParamNodes, TinyLm, Tracking};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Report the running loss every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 4000,
            lr: 0.5,
            batch: 32,
            seed: 0,
            log_every: 0,
        }
    }
}

/// Lines a chunk worker processes per task; fixed so results do not depend
/// on the worker count.
const CHUNK_LINES: usize = 4;

pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Train from a seeded initialization with constant-lr mini-batch gradient
/// descent, gradients clipped at global norm 1.0. Deterministic for fixed
/// (config, corpus, seed) regardless of worker parallelism.
pub fn train(
    cfg: &LMConfig,
    vocab: &Vocab,
    corpus: &[Vec<TokenId>],
    opts: &TrainOptions,
    mut on_log: impl FnMut(usize, f64, f64),
) -> Result<TinyLm> {
    if corpus.is_empty() {
        return Err(Error::TrainingFailure("empty corpus".into()));
    }
    for line in corpus {
        if line.len() > cfg.context_len {
            return Err(Error::ContextOverflow {
                len: line.len(),
                context_len: cfg.context_len,
            });
        }
        if line.len() < 2 {
            return Err(Error::TrainingFailure(
                "corpus line shorter than two tokens has no prediction targets".into(),
            ));
        }
    }
    let mut model = TinyLm::new(cfg.clone(), vocab.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut running = 0.0;
    let mut running_n = 0usize;
    let mut running_gnorm = 0.0;

    // epoch-shuffled order; reshuffle whenever the deck runs out
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();

    for step in 0..opts.steps {
        let batch: Vec<&Vec<TokenId>> = (0..opts.batch)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let line = &corpus[order[cursor]];
                cursor += 1;
                line
            })
            .collect();

        let chunks: Vec<&[&Vec<TokenId>]> = batch.chunks(CHUNK_LINES).collect();
        let partials: Vec<Result<(Vec<Tensor>, f64, usize)>> = chunks
            .par_iter()
            .map(|chunk| chunk_gradients(&model, chunk))
            .collect();

        let mut grads: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        let mut token_count = 0usize;
        for partial in partials {
            let (g, l, n) = partial?;
            loss_sum += l;
            token_count += n;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b);
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let loss = loss_sum / token_count as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "loss became non-finite at step {step}"
            )));
        }

        // normalize to mean cross-entropy, then clip at global norm
        let inv = 1.0 / token_count as f64;
        let mut sq_norm = 0.0;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= inv;
                sq_norm += *v * *v;
            }
        }
        let norm = sq_norm.sqrt();
        running_gnorm += norm;
        if norm > GRAD_CLIP_NORM {
            let s = GRAD_CLIP_NORM / norm;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        model.apply_gradient_step(&grads, opts.lr);

        running += loss;
        running_n += 1;
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            on_log(step + 1, running / running_n as f64, running_gnorm / running_n as f64);
            running = 0.0;
            running_gnorm = 0.0;
            running_n = 0;
        }
    }
    Ok(model)
}

/// Sum of next-token negative-log-likelihood gradients over a chunk of
/// lines, unnormalized, plus the summed loss and token count.
fn chunk_gradients(model: &TinyLm, chunk: &[&Vec<TokenId>]) -> Result<(Vec<Tensor>, f64, usize)> {
    let mut tape = Tape::new();
    let pn = ParamNodes::push(&mut tape, model, Tracking::All);
    let mut line_losses = Vec::with_capacity(chunk.len());
    let mut token_count = 0usize;
    for line in chunk {
        let trace = forward_on_tape(&mut tape, &pn, &model.cfg, line, &[])?;
        let picks: Vec<(usize, usize)> = line
            .iter()
            .enumerate()
            .skip(1)
            .map(|(t, &tok)| (t - 1, tok))
            .collect();
        token_count += picks.len();
        let lp = tape.pick_log_probs(trace.logits, picks)?;
        line_losses.push(lp);
    }
    let total_lp = tape.sum_scalars(&line_losses)?;
    let loss_node = tape.scale(total_lp, -1.0);
    let loss = tape.value(loss_node).item();

    let wrt = pn.ordered();
    let rec = tape.grad(loss_node, &wrt)?;
    let grads = wrt
        .iter()
        .map(|&id| rec.wrt(id).expect("tracked").clone())
        .collect();
    Ok((grads, loss, token_count))
}

/// Cross-entropy of the corpus under the model, averaged per predicted
/// token. Evaluation-only companion to `train`.
pub fn corpus_loss(model: &TinyLm, corpus: &[Vec<TokenId>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for line in corpus {
        let lp = crate::lm::logprob_continuation(model, &line[..1], &line[1..], &[])?;
        total += lp * (line.len() - 1) as f64;
        count += line.len() - 1;
    }
    Ok(-total / count as f64)
}
