//! Seed-model pretraining: next-token cross-entropy over an unlabeled
//! token corpus. The result plays the part of the instruction-tuned seed
//! model that downstream recipes start from (and that zero-shot expected
//! -value decoding is evaluated on).

use super::{
    apply_update, compute_gradients, init_params, ModelConfig, ModelParams, Optimizer,
    OptimizerState, TokenId, DEFAULT_LR,
};
use crate::error::{Error, Result};
use crate::seeds;
use rand::Rng;

const BATCH_SIZE: usize = 8;
/// Sequences used for the before/after CE measurement.
const EVAL_CAP: usize = 200;

#[derive(Debug)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    /// Mean per-token CE on the measurement subset at initialization.
    pub initial_ce: f64,
    /// Same measurement after the last step.
    pub final_ce: f64,
}

/// Mean per-token next-token CE of `params` over full sequences.
pub fn corpus_ce(params: &ModelParams, corpus: &[Vec<TokenId>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            continue;
        }
        let lp = super::sequence_logprob(params, &seq[..1], &seq[1..])?;
        total -= lp;
        count += seq.len() - 1;
    }
    if count == 0 {
        return Err(Error::Input("corpus has no next-token targets".into()));
    }
    Ok(total / count as f64)
}

/// Train a fresh model for `steps` Adam steps of language modeling on the
/// corpus. `steps = 0` returns the raw initialization. Deterministic.
pub fn pretrain_seed(
    config: &ModelConfig,
    corpus: &[Vec<TokenId>],
    steps: usize,
    seed: u64,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    for seq in corpus {
        if seq.len() > config.context_len {
            return Err(Error::Input(format!(
                "corpus sequence of length {} exceeds context_len {}",
                seq.len(),
                config.context_len
            )));
        }
    }
    let mut params = init_params(config)?;
    let eval: Vec<Vec<TokenId>> = corpus.iter().take(EVAL_CAP).cloned().collect();
    let initial_ce = corpus_ce(&params, &eval)?;
    if steps == 0 {
        return Ok(PretrainOutcome { params, initial_ce, final_ce: initial_ce });
    }

    let mut rng = seeds::rng(seeds::derive(seed, &[0x9e74]));
    let optimizer = Optimizer::default();
    let mut state = OptimizerState::new(&params);

    for _ in 0..steps {
        let batch: Vec<&Vec<TokenId>> =
            (0..BATCH_SIZE).map(|_| &corpus[rng.gen_range(0..corpus.len())]).collect();
        let (grads, _) = compute_gradients(&params, |graph| {
            let mut per_seq = Vec::new();
            let mut token_count = 0usize;
            for seq in &batch {
                if seq.len() < 2 {
                    continue;
                }
                let logits = graph.logits(seq)?;
                let tape = graph.tape_mut();
                let logp = tape.log_softmax_rows(logits);
                let coords: Vec<(usize, usize)> =
                    (1..seq.len()).map(|i| (i - 1, seq[i] as usize)).collect();
                token_count += coords.len();
                let picked = tape.pick_entries(logp, &coords);
                per_seq.push(tape.sum_all(picked));
            }
            let tape = graph.tape_mut();
            let mut acc = per_seq[0];
            for node in &per_seq[1..] {
                acc = tape.add(acc, *node);
            }
            Ok(tape.scale(acc, -1.0 / token_count as f64))
        })?;
        apply_update(&mut params, &grads, &mut state, &optimizer, DEFAULT_LR)?;
    }

    let final_ce = corpus_ce(&params, &eval)?;
    Ok(PretrainOutcome { params, initial_ce, final_ce })
}
