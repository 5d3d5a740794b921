//! Inference-time score predictors.
//!
//! Mode decoding picks the argmax score token; expected-value decoding
//! returns the probability-weighted mean of the score values, which is the
//! Bayes-optimal rule for squared error over a finite target set. Both
//! come in a no-rationale form and a form that first samples a rationale
//! and reads the score distribution right after its delimiter.

use crate::error::{Error, Result};
use crate::model::{
    forward_next_token, sample_sequence, ModelParams, SampleResult, SamplingConfig, StopRule,
    TokenId,
};
use crate::score_space::{locate_score_position, project_score_dist, ProjectionMode, ScoreSpace};
use crate::seeds;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    ModeNoCot,
    Rail,
    ModeCot,
    CotRail,
    /// Mean of K mode predictions; only used as a baseline in the
    /// multi-sample scaling analysis.
    ModeCotMean,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::ModeNoCot => "mode_no_cot",
            MethodTag::Rail => "rail",
            MethodTag::ModeCot => "mode_cot",
            MethodTag::CotRail => "cot_rail",
            MethodTag::ModeCotMean => "mode_cot_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: u64,
    pub predicted: f64,
    pub method: MethodTag,
    pub cot_tokens: Option<Vec<TokenId>>,
    pub k_samples: usize,
    pub truncated: bool,
}

fn check_record(record: &PredictionRecord, space: &ScoreSpace) -> Result<()> {
    match record.method {
        MethodTag::Rail | MethodTag::CotRail | MethodTag::ModeCotMean => {
            if record.predicted < space.min_value() || record.predicted > space.max_value() {
                return Err(Error::Internal(format!(
                    "prediction {} outside [{}, {}]",
                    record.predicted,
                    space.min_value(),
                    space.max_value()
                )));
            }
        }
        MethodTag::ModeNoCot | MethodTag::ModeCot => {
            if space.str_of(record.predicted).is_err() {
                return Err(Error::Internal(format!(
                    "mode prediction {} not a score value",
                    record.predicted
                )));
            }
        }
    }
    Ok(())
}

/// argmax over the score values of the raw projected next-token
/// distribution; ties go to the smallest value.
pub fn predict_mode_no_cot(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    example_id: u64,
) -> Result<PredictionRecord> {
    let dist = forward_next_token(params, x)?;
    let proj = project_score_dist(&dist, space, ProjectionMode::Raw)?;
    let record = PredictionRecord {
        example_id,
        predicted: proj.argmax_value(space),
        method: MethodTag::ModeNoCot,
        cot_tokens: None,
        k_samples: 0,
        truncated: false,
    };
    check_record(&record, space)?;
    Ok(record)
}

/// Expected score under the projected next-token distribution.
pub fn predict_rail(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    mode: ProjectionMode,
    example_id: u64,
) -> Result<PredictionRecord> {
    let dist = forward_next_token(params, x)?;
    let proj = project_score_dist(&dist, space, mode)?;
    let record = PredictionRecord {
        example_id,
        predicted: proj.expectation(space),
        method: MethodTag::Rail,
        cot_tokens: None,
        k_samples: 0,
        truncated: false,
    };
    check_record(&record, space)?;
    Ok(record)
}

/// Sample one rationale and return (conditioning prefix, stored rationale,
/// truncated flag). When the sample terminates properly the prefix ends
/// with the delimiter and the sampled score token is dropped; otherwise
/// the whole partial sample conditions the fallback prediction.
fn sample_rationale(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    sampling: &SamplingConfig,
    rng_seed: u64,
) -> Result<(Vec<TokenId>, Vec<TokenId>, bool)> {
    let stop = StopRule::DelimiterPlusOne { delimiter: space.delimiter.clone() };
    let SampleResult { tokens, truncated } = sample_sequence(params, x, sampling, &stop, rng_seed)?;
    let mut prefix = x.to_vec();
    if truncated {
        prefix.extend_from_slice(&tokens);
        return Ok((prefix, tokens, true));
    }
    match locate_score_position(&tokens, space) {
        Some(pos) => {
            let cot = tokens[..pos].to_vec();
            prefix.extend_from_slice(&cot);
            Ok((prefix, cot, false))
        }
        None => {
            // Stop rule satisfied without a delimiter can not happen, but
            // treat it as a truncation rather than panic.
            prefix.extend_from_slice(&tokens);
            Ok((prefix, tokens, true))
        }
    }
}

/// Sample a rationale, then take the argmax score token after it. A sample
/// that never produced the delimiter falls back to the no-rationale mode
/// prediction on the partial sequence and is flagged.
pub fn predict_mode_cot(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    sampling: &SamplingConfig,
    rng_seed: u64,
    example_id: u64,
) -> Result<PredictionRecord> {
    let (prefix, cot, truncated) = sample_rationale(params, space, x, sampling, rng_seed)?;
    let dist = forward_next_token(params, &prefix)?;
    let proj = project_score_dist(&dist, space, ProjectionMode::Raw)?;
    let record = PredictionRecord {
        example_id,
        predicted: proj.argmax_value(space),
        method: MethodTag::ModeCot,
        cot_tokens: Some(cot),
        k_samples: 1,
        truncated,
    };
    check_record(&record, space)?;
    Ok(record)
}

/// Sample a rationale, then take the expected score after it. Truncation
/// falls back to the no-rationale expectation on the partial sequence.
pub fn predict_cot_rail(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    sampling: &SamplingConfig,
    rng_seed: u64,
    mode: ProjectionMode,
    example_id: u64,
) -> Result<PredictionRecord> {
    let (prefix, cot, truncated) = sample_rationale(params, space, x, sampling, rng_seed)?;
    let dist = forward_next_token(params, &prefix)?;
    let proj = project_score_dist(&dist, space, mode)?;
    let record = PredictionRecord {
        example_id,
        predicted: proj.expectation(space),
        method: MethodTag::CotRail,
        cot_tokens: Some(cot),
        k_samples: 1,
        truncated,
    };
    check_record(&record, space)?;
    Ok(record)
}

/// Mean of K independent expected-score predictions, one rationale each.
/// Sample seeds derive from (rng_seed, sample index).
pub fn predict_cot_rail_multi(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    sampling: &SamplingConfig,
    rng_seed: u64,
    k: usize,
    mode: ProjectionMode,
    example_id: u64,
) -> Result<PredictionRecord> {
    if k < 1 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    let mut sum = 0.0;
    let mut first_cot = None;
    let mut any_truncated = false;
    for i in 0..k {
        let sub = predict_cot_rail(
            params,
            space,
            x,
            sampling,
            seeds::derive(rng_seed, &[i as u64]),
            mode,
            example_id,
        )?;
        sum += sub.predicted;
        any_truncated |= sub.truncated;
        if first_cot.is_none() {
            first_cot = sub.cot_tokens;
        }
    }
    let record = PredictionRecord {
        example_id,
        predicted: sum / k as f64,
        method: MethodTag::CotRail,
        cot_tokens: first_cot,
        k_samples: k,
        truncated: any_truncated,
    };
    check_record(&record, space)?;
    Ok(record)
}

/// Mean of K mode predictions — baseline counterpart of the multi-sample
/// expected-value predictor.
pub fn predict_mode_cot_multi(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    sampling: &SamplingConfig,
    rng_seed: u64,
    k: usize,
    example_id: u64,
) -> Result<PredictionRecord> {
    if k < 1 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    let mut sum = 0.0;
    let mut first_cot = None;
    let mut any_truncated = false;
    for i in 0..k {
        let sub = predict_mode_cot(
            params,
            space,
            x,
            sampling,
            seeds::derive(rng_seed, &[i as u64]),
            example_id,
        )?;
        sum += sub.predicted;
        any_truncated |= sub.truncated;
        if first_cot.is_none() {
            first_cot = sub.cot_tokens;
        }
    }
    let record = PredictionRecord {
        example_id,
        predicted: sum / k as f64,
        method: MethodTag::ModeCotMean,
        cot_tokens: first_cot,
        k_samples: k,
        truncated: any_truncated,
    };
    check_record(&record, space)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    // vocab: 0..4 filler, 5..9 score tokens (values 1..5), 10..11 delimiter.
    fn space() -> ScoreSpace {
        ScoreSpace::new(
            vec![(1.0, 5), (2.0, 6), (3.0, 7), (4.0, 8), (5.0, 9)],
            vec![10, 11],
        )
        .unwrap()
    }

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            context_len: 32,
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            seed: 31,
        }
    }

    /// Zero every weight and drive the output entirely from the output
    /// bias, so the next-token distribution equals softmax(bias) at every
    /// position. Tokens not mentioned get effectively zero probability.
    fn biased_params(bias: &[(usize, f64)]) -> ModelParams {
        let mut p = init_params(&config()).unwrap();
        let n = p.num_arrays();
        for i in 0..n {
            p.array_mut(i).fill(0.0);
        }
        p.array_mut(n - 1).fill(-1e4);
        for &(tok, v) in bias {
            p.array_mut(n - 1)[[0, tok]] = v;
        }
        p
    }

    #[test]
    fn mode_no_cot_takes_argmax() {
        let s = space();
        let p = biased_params(&[(5, 1.0), (6, 2.0), (7, 4.0), (8, 2.0), (9, 1.0)]);
        let r = predict_mode_no_cot(&p, &s, &[0, 1], 0).unwrap();
        assert_eq!(r.predicted, 3.0);
        assert!(r.cot_tokens.is_none());
    }

    #[test]
    fn mode_ties_break_to_smallest_value() {
        let s = space();
        let p = biased_params(&[]); // uniform distribution
        let r = predict_mode_no_cot(&p, &s, &[0], 0).unwrap();
        assert_eq!(r.predicted, 1.0);
    }

    #[test]
    fn point_mass_gives_exact_value_in_both_modes() {
        let s = space();
        let p = biased_params(&[(9, 60.0)]);
        for mode in [ProjectionMode::Raw, ProjectionMode::Renormalized] {
            let r = predict_rail(&p, &s, &[0, 1], mode, 0).unwrap();
            assert!((r.predicted - 5.0).abs() < 1e-9, "mode {mode:?}: {}", r.predicted);
        }
    }

    #[test]
    fn rail_renormalized_symmetric_distribution_is_centred() {
        let s = space();
        // softmax of ln-proportional biases reproduces the target ratios.
        let p = biased_params(&[
            (5, (0.1f64).ln()),
            (6, (0.2f64).ln()),
            (7, (0.3f64).ln()),
            (8, (0.2f64).ln()),
            (9, (0.1f64).ln()),
            (0, (0.1f64).ln()),
        ]);
        let r = predict_rail(&p, &s, &[0, 1], ProjectionMode::Renormalized, 0).unwrap();
        assert!((r.predicted - 3.0).abs() < 1e-12);
        let raw = predict_rail(&p, &s, &[0, 1], ProjectionMode::Raw, 0).unwrap();
        assert!((raw.predicted - 2.7).abs() < 1e-12);
    }

    #[test]
    fn rail_outputs_stay_in_score_range() {
        let s = space();
        let p = init_params(&config()).unwrap();
        for seed in 0..20u64 {
            let x = [(seed % 5) as u32, 1, 2];
            let r = predict_rail(&p, &s, &x, ProjectionMode::Renormalized, seed).unwrap();
            assert!(r.predicted >= 1.0 && r.predicted <= 5.0);
        }
    }

    #[test]
    fn cot_predictors_are_seed_deterministic() {
        let s = space();
        let p = init_params(&config()).unwrap();
        let sc = SamplingConfig { max_new_tokens: 8, ..Default::default() };
        let a = predict_cot_rail(&p, &s, &[0, 1], &sc, 42, ProjectionMode::Raw, 7).unwrap();
        let b = predict_cot_rail(&p, &s, &[0, 1], &sc, 42, ProjectionMode::Raw, 7).unwrap();
        assert_eq!(a, b);
        let c = predict_mode_cot(&p, &s, &[0, 1], &sc, 42, 7).unwrap();
        let d = predict_mode_cot(&p, &s, &[0, 1], &sc, 42, 7).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn truncated_sample_flags_record_and_falls_back() {
        let s = space();
        // All mass on token 0: the delimiter never appears.
        let p = biased_params(&[(0, 60.0)]);
        let sc = SamplingConfig { max_new_tokens: 6, ..Default::default() };
        let r = predict_mode_cot(&p, &s, &[0, 1], &sc, 3, 0).unwrap();
        assert!(r.truncated);
        assert_eq!(r.cot_tokens.as_ref().unwrap().len(), 6);
        // Fallback is the uniform-over-scores tie rule on [x, partial].
        assert_eq!(r.predicted, 1.0);
    }

    #[test]
    fn deterministic_delimiter_model_reads_score_after_cot() {
        let s = space();
        // Constant logits favour 10, then (once 10 is penalized) 11, then 8:
        // the greedy path with repetition penalty walks the delimiter and
        // stops on the score slot.
        let p = biased_params(&[(10, 8.0), (11, 6.0), (8, 4.0)]);
        let sc = SamplingConfig { greedy: true, repetition_penalty: 3.0, max_new_tokens: 8, ..Default::default() };
        let r = predict_mode_cot(&p, &s, &[0, 1], &sc, 0, 0).unwrap();
        assert!(!r.truncated);
        assert_eq!(r.cot_tokens.as_ref().unwrap().as_slice(), &[10, 11]);
        assert_eq!(r.predicted, 4.0);
    }

    #[test]
    fn multi_with_k1_matches_single_with_derived_seed() {
        let s = space();
        let p = init_params(&config()).unwrap();
        let sc = SamplingConfig { max_new_tokens: 8, ..Default::default() };
        let multi =
            predict_cot_rail_multi(&p, &s, &[0, 1], &sc, 5, 1, ProjectionMode::Raw, 9).unwrap();
        let single = predict_cot_rail(
            &p,
            &s,
            &[0, 1],
            &sc,
            seeds::derive(5, &[0]),
            ProjectionMode::Raw,
            9,
        )
        .unwrap();
        assert_eq!(multi.predicted, single.predicted);
        assert_eq!(multi.k_samples, 1);
    }

    #[test]
    fn greedy_multi_equals_single_for_all_k() {
        let s = space();
        // The delimiter dominates generation, so most probability mass sits
        // off the score tokens: project renormalized.
        let p = biased_params(&[(10, 8.0), (11, 6.0), (8, 4.0)]);
        let sc = SamplingConfig { greedy: true, repetition_penalty: 3.0, max_new_tokens: 8, ..Default::default() };
        let mode = ProjectionMode::Renormalized;
        let single = predict_cot_rail(&p, &s, &[0, 1], &sc, 0, mode, 0).unwrap();
        assert!((single.predicted - 4.0).abs() < 1e-9);
        for k in [1usize, 2, 4, 8] {
            let multi = predict_cot_rail_multi(&p, &s, &[0, 1], &sc, 0, k, mode, 0).unwrap();
            assert!((multi.predicted - single.predicted).abs() < 1e-15);
        }
    }

    #[test]
    fn mode_argmax_invariant_under_monotone_transform() {
        // Property of the argmax rule itself, exercised over random dists.
        use crate::score_space::ScoreDist;
        let s = space();
        let mut rng = crate::seeds::rng(123);
        use rand::Rng;
        for _ in 0..200 {
            let probs: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let d1 = ScoreDist { probs: probs.clone(), mode: ProjectionMode::Raw };
            // strictly monotone transforms: affine-positive and cube.
            let d2 = ScoreDist {
                probs: probs.iter().map(|p| 0.3 * p + 0.01).collect(),
                mode: ProjectionMode::Raw,
            };
            let d3 = ScoreDist {
                probs: probs.iter().map(|p| p * p * p).collect(),
                mode: ProjectionMode::Raw,
            };
            assert_eq!(d1.argmax_value(&s), d2.argmax_value(&s));
            assert_eq!(d1.argmax_value(&s), d3.argmax_value(&s));
        }
    }
}
