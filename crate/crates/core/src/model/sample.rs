//! Autoregressive sampling with temperature, nucleus filtering and
//! repetition penalty.

use super::forward::forward_last_logits;
use super::{ModelParams, TokenId};
use crate::error::{Error, Result};
use crate::seeds;
use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_p: 0.9,
            repetition_penalty: 1.03,
            max_new_tokens: 64,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        SamplingConfig { greedy: true, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0,1], got {}", self.top_p)));
        }
        if self.repetition_penalty < 1.0 {
            return Err(Error::Config(format!(
                "repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        if self.max_new_tokens < 2 {
            return Err(Error::Config("max_new_tokens must be >= 2".into()));
        }
        Ok(())
    }
}

/// When to stop emitting tokens.
#[derive(Debug, Clone)]
pub enum StopRule {
    /// Stop after the delimiter sequence plus exactly one more token
    /// (the score slot). This is the default rule for CoT generation.
    DelimiterPlusOne { delimiter: Vec<TokenId> },
    /// Only the max_new_tokens budget stops generation.
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    /// Generated continuation (the prefix is not repeated).
    pub tokens: Vec<TokenId>,
    /// True when generation hit max_new_tokens or the context limit
    /// before the stop rule was satisfied.
    pub truncated: bool,
}

fn terminator_hit(generated: &[TokenId], rule: &StopRule) -> bool {
    match rule {
        StopRule::MaxTokens => false,
        StopRule::DelimiterPlusOne { delimiter } => {
            let d = delimiter.len();
            generated.len() > d && generated[generated.len() - 1 - d..generated.len() - 1] == *delimiter
        }
    }
}

/// Argmax with ties broken by lowest token id.
fn argmax_token(logits: &Array1<f64>) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn apply_repetition_penalty(logits: &mut Array1<f64>, generated: &[TokenId], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let seen: HashSet<TokenId> = generated.iter().cloned().collect();
    for t in seen {
        let v = &mut logits[t as usize];
        if *v > 0.0 {
            *v /= penalty;
        } else {
            *v *= penalty;
        }
    }
}

/// Nucleus sampling step: softmax(logits / temperature), keep the smallest
/// prob-descending set with cumulative mass >= top_p, renormalize, draw.
fn sample_token(logits: &Array1<f64>, cfg: &SamplingConfig, rng: &mut impl Rng) -> TokenId {
    let scaled = logits.mapv(|v| v / cfg.temperature);
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }

    // Sort descending by prob; ties by ascending token id for determinism.
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });

    let mut nucleus = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        nucleus.push(i);
        mass += probs[i];
        if mass >= cfg.top_p {
            break;
        }
    }

    let u: f64 = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &nucleus {
        acc += probs[i];
        if u < acc {
            return i as TokenId;
        }
    }
    *nucleus.last().expect("nonempty nucleus") as TokenId
}

/// Sample a continuation of `prefix`. Deterministic given `rng_seed`;
/// `greedy` follows the argmax path (after repetition penalty), which is
/// the temperature→0 limit of the stochastic path.
pub fn sample_sequence(
    params: &ModelParams,
    prefix: &[TokenId],
    sampling: &SamplingConfig,
    stop: &StopRule,
    rng_seed: u64,
) -> Result<SampleResult> {
    sampling.validate()?;
    if prefix.is_empty() {
        return Err(Error::Input("empty prefix".into()));
    }
    if prefix.len() >= params.config.context_len {
        return Err(Error::Input("prefix leaves no room to generate".into()));
    }
    let mut rng = seeds::rng(rng_seed);
    let mut ctx = prefix.to_vec();
    let mut generated: Vec<TokenId> = Vec::new();

    loop {
        if generated.len() >= sampling.max_new_tokens {
            let truncated = matches!(stop, StopRule::DelimiterPlusOne { .. });
            return Ok(SampleResult { tokens: generated, truncated });
        }
        if ctx.len() >= params.config.context_len {
            return Ok(SampleResult { tokens: generated, truncated: true });
        }
        let mut logits = forward_last_logits(params, &ctx)?;
        apply_repetition_penalty(&mut logits, &generated, sampling.repetition_penalty);
        let tok = if sampling.greedy {
            argmax_token(&logits)
        } else {
            sample_token(&logits, sampling, &mut rng)
        };
        generated.push(tok);
        ctx.push(tok);
        if terminator_hit(&generated, stop) {
            return Ok(SampleResult { tokens: generated, truncated: false });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_next_token, init_params, ModelConfig};

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            context_len: 32,
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            seed: 11,
        }
    }

    fn plain(max_new: usize) -> SamplingConfig {
        SamplingConfig {
            temperature: 1.0,
            top_p: 1.0,
            repetition_penalty: 1.0,
            max_new_tokens: max_new,
            greedy: false,
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let p = init_params(&cfg(9)).unwrap();
        let sc = SamplingConfig { greedy: true, repetition_penalty: 1.0, ..plain(8) };
        let a = sample_sequence(&p, &[1, 2], &sc, &StopRule::MaxTokens, 0).unwrap();
        let b = sample_sequence(&p, &[1, 2], &sc, &StopRule::MaxTokens, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_matches_argmax_oracle() {
        let p = init_params(&cfg(9)).unwrap();
        let sc = SamplingConfig { greedy: true, repetition_penalty: 1.0, ..plain(6) };
        let got = sample_sequence(&p, &[3], &sc, &StopRule::MaxTokens, 0).unwrap();
        // Oracle: repeated argmax of forward_next_token.
        let mut ctx = vec![3u32];
        let mut expect = Vec::new();
        for _ in 0..6 {
            let d = forward_next_token(&p, &ctx).unwrap();
            let mut best = 0usize;
            for (i, &pr) in d.probs.iter().enumerate() {
                if pr > d.probs[best] {
                    best = i;
                }
            }
            expect.push(best as u32);
            ctx.push(best as u32);
        }
        assert_eq!(got.tokens, expect);
        assert!(!got.truncated);
    }

    #[test]
    fn fixed_seed_reproduces_stochastic_samples() {
        let p = init_params(&cfg(9)).unwrap();
        let sc = plain(10);
        let a = sample_sequence(&p, &[1], &sc, &StopRule::MaxTokens, 1234).unwrap();
        let b = sample_sequence(&p, &[1], &sc, &StopRule::MaxTokens, 1234).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn delimiter_rule_stops_after_score_slot() {
        // vocab 1 means every sampled token is 0, so the "delimiter" [0,0]
        // completes after two tokens and one more token is emitted.
        let mut c = cfg(1);
        c.num_heads = 1;
        let p = init_params(&c).unwrap();
        let sc = plain(16);
        let r = sample_sequence(
            &p,
            &[0],
            &sc,
            &StopRule::DelimiterPlusOne { delimiter: vec![0, 0] },
            7,
        )
        .unwrap();
        assert_eq!(r.tokens, vec![0, 0, 0]);
        assert!(!r.truncated);
    }

    #[test]
    fn budget_exhaustion_sets_truncated_under_delimiter_rule() {
        let p = init_params(&cfg(9)).unwrap();
        let sc = plain(4);
        let r = sample_sequence(
            &p,
            &[1],
            &sc,
            &StopRule::DelimiterPlusOne { delimiter: vec![8, 8, 8, 8, 8] },
            7,
        )
        .unwrap();
        assert_eq!(r.tokens.len(), 4);
        assert!(r.truncated);
    }

    #[test]
    fn empirical_frequencies_match_model_probs() {
        // Chi-square goodness of fit on a small vocab, top_p=1, temp=1.
        let mut c = cfg(3);
        c.num_heads = 1;
        let p = init_params(&c).unwrap();
        let probs = forward_next_token(&p, &[1]).unwrap().probs;
        let sc = plain(2);
        let n = 10_000usize;
        let mut counts = [0usize; 3];
        for i in 0..n {
            let r = sample_sequence(&p, &[1], &sc, &StopRule::MaxTokens, i as u64).unwrap();
            counts[r.tokens[0] as usize] += 1;
        }
        let chi2: f64 = (0..3)
            .map(|k| {
                let e = probs[k] * n as f64;
                let o = counts[k] as f64;
                (o - e) * (o - e) / e
            })
            .sum();
        // 99% quantile of chi-square with 2 degrees of freedom.
        assert!(chi2 < 9.21, "chi2={chi2}, counts={counts:?}, probs={probs:?}");
    }

    #[test]
    fn invalid_sampling_config_rejected() {
        let p = init_params(&cfg(9)).unwrap();
        let bad = SamplingConfig { temperature: 0.0, ..Default::default() };
        assert!(sample_sequence(&p, &[1], &bad, &StopRule::MaxTokens, 0).is_err());
        let bad = SamplingConfig { top_p: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SamplingConfig { repetition_penalty: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SamplingConfig { max_new_tokens: 1, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
