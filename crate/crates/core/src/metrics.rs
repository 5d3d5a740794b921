//! Correlation and error metrics, dataset-level evaluation, the
//! training-vs-self rationale shift analysis, pairwise preference
//! accuracy, perplexity, and rationale degeneracy statistics.
//!
//! Correlations return `None` instead of a number when either input is
//! constant or shorter than two elements; a silent 0 would read as "no
//! correlation", which is not what a degenerate input means.

use crate::error::{Error, Result};
use crate::model::{sequence_logprob, ModelParams, SamplingConfig, TokenId};
use crate::predictors::{
    predict_cot_rail, predict_cot_rail_multi, predict_mode_cot, predict_mode_cot_multi,
    predict_mode_no_cot, predict_rail, PredictionRecord,
};
use crate::score_space::{project_score_dist, ProjectionMode, ScoreSpace};
use crate::seeds;
use crate::taskgen::{Dataset, Split};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

/// Product-moment correlation. `None` if n < 2 or either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "length mismatch");
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Average ranks (1-based); tied values share the mean of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("no NaN in rank input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average 1-based rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "length mismatch");
    if xs.len() < 2 {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Tie-corrected Kendall rank correlation (τ-b):
/// (P − Q) / sqrt((n0 − n1)(n0 − n2)), with n1/n2 the tied pair counts of
/// each side. `None` when a side is entirely tied.
pub fn kendall(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "length mismatch");
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut ties_x = 0u64;
    let mut ties_y = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 {
                ties_x += 1;
            }
            if dy == 0.0 {
                ties_y += 1;
            }
            let s = dx * dy;
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = (n0 - ties_x as f64) * (n0 - ties_y as f64);
    if denom <= 0.0 {
        return None;
    }
    Some((concordant as f64 - discordant as f64) / denom.sqrt())
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len(), "length mismatch");
    assert!(!preds.is_empty(), "rmse of empty vectors");
    let sum: f64 = preds
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    (sum / preds.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub dataset: String,
    pub method: String,
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub rmse: f64,
    pub n: usize,
}

/// Which predictor to run over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PredictorSpec {
    ModeNoCot,
    Rail { mode: ProjectionMode },
    ModeCot { sampling: SamplingConfig },
    CotRail { sampling: SamplingConfig, mode: ProjectionMode, k: usize },
    /// Mean of k mode predictions (multi-sample baseline).
    ModeCotMean { sampling: SamplingConfig, k: usize },
}

impl PredictorSpec {
    pub fn method_name(&self) -> &'static str {
        match self {
            PredictorSpec::ModeNoCot => "mode_no_cot",
            PredictorSpec::Rail { .. } => "rail",
            PredictorSpec::ModeCot { .. } => "mode_cot",
            PredictorSpec::CotRail { .. } => "cot_rail",
            PredictorSpec::ModeCotMean { .. } => "mode_cot_mean",
        }
    }

    pub fn predict(
        &self,
        params: &ModelParams,
        space: &ScoreSpace,
        x: &[TokenId],
        seed: u64,
        example_id: u64,
    ) -> Result<PredictionRecord> {
        match self {
            PredictorSpec::ModeNoCot => predict_mode_no_cot(params, space, x, example_id),
            PredictorSpec::Rail { mode } => predict_rail(params, space, x, *mode, example_id),
            PredictorSpec::ModeCot { sampling } => {
                predict_mode_cot(params, space, x, sampling, seed, example_id)
            }
            PredictorSpec::CotRail { sampling, mode, k } => {
                if *k == 1 {
                    predict_cot_rail(params, space, x, sampling, seed, *mode, example_id)
                } else {
                    predict_cot_rail_multi(params, space, x, sampling, seed, *k, *mode, example_id)
                }
            }
            PredictorSpec::ModeCotMean { sampling, k } => {
                predict_mode_cot_multi(params, space, x, sampling, seed, *k, example_id)
            }
        }
    }
}

/// Run a predictor over every example (in id order) and correlate with the
/// ground truth. Per-example seeds derive from (base_seed, example id).
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &Dataset,
    spec: &PredictorSpec,
    base_seed: u64,
    dataset_tag: &str,
) -> Result<(CorrelationReport, Vec<PredictionRecord>)> {
    if dataset.examples.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut examples: Vec<_> = dataset.examples.iter().collect();
    examples.sort_by_key(|e| e.id);
    let space = &dataset.score_space;
    let mut records = Vec::with_capacity(examples.len());
    for ex in &examples {
        let seed = seeds::derive(base_seed, &[ex.id]);
        records.push(spec.predict(params, space, &ex.x, seed, ex.id)?);
    }
    let preds: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let targets: Vec<f64> = examples.iter().map(|e| e.score).collect();
    let report = CorrelationReport {
        dataset: dataset_tag.to_string(),
        method: spec.method_name().to_string(),
        pearson_r: pearson(&preds, &targets),
        spearman_rho: spearman(&preds, &targets),
        kendall_tau: kendall(&preds, &targets),
        rmse: rmse(&preds, &targets),
        n: preds.len(),
    };
    Ok((report, records))
}

// ---------------------------------------------------------------------------
// Distribution shift between stored and self-generated rationales
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    /// RMSE of expected scores conditioned on the stored rationales.
    pub rmse_on_training_cots: f64,
    /// RMSE of expected scores conditioned on freshly sampled rationales.
    pub rmse_on_self_cots: f64,
    /// rmse_on_self_cots − rmse_on_training_cots.
    pub gap: f64,
    pub n: usize,
}

/// Expected score after conditioning on a stored rationale (no sampling).
pub fn expectation_on_cot(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    cot: &[TokenId],
    mode: ProjectionMode,
) -> Result<f64> {
    let mut prefix = x.to_vec();
    prefix.extend_from_slice(cot);
    let dist = crate::model::forward_next_token(params, &prefix)?;
    Ok(project_score_dist(&dist, space, mode)?.expectation(space))
}

/// Compare prediction error when conditioning on the dataset rationales
/// versus rationales sampled from the model itself.
pub fn distribution_shift_analysis(
    params: &ModelParams,
    dataset: &Dataset,
    sampling: &SamplingConfig,
    mode: ProjectionMode,
    base_seed: u64,
) -> Result<ShiftReport> {
    let space = &dataset.score_space;
    let mut on_train = Vec::new();
    let mut on_self = Vec::new();
    let mut targets = Vec::new();
    for ex in &dataset.examples {
        let cot = ex
            .cot
            .as_ref()
            .ok_or_else(|| Error::Input(format!("example {} has no stored rationale", ex.id)))?;
        on_train.push(expectation_on_cot(params, space, &ex.x, cot, mode)?);
        let rec = predict_cot_rail(
            params,
            space,
            &ex.x,
            sampling,
            seeds::derive(base_seed, &[ex.id]),
            mode,
            ex.id,
        )?;
        on_self.push(rec.predicted);
        targets.push(ex.score);
    }
    let rmse_train = rmse(&on_train, &targets);
    let rmse_self = rmse(&on_self, &targets);
    Ok(ShiftReport {
        rmse_on_training_cots: rmse_train,
        rmse_on_self_cots: rmse_self,
        gap: rmse_self - rmse_train,
        n: targets.len(),
    })
}

// ---------------------------------------------------------------------------
// Pairwise preference accuracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_index: usize,
    pub truth_a: f64,
    pub truth_b: f64,
    pub pred_a: f64,
    pub pred_b: f64,
    /// 1 for a correct ranking, 0.5 for an exact predicted tie, else 0.
    pub credit: f64,
    pub gap: f64,
}

/// Score both sides of every pair independently and check the ranking.
pub fn pairwise_accuracy(
    params: &ModelParams,
    pairs: &Dataset,
    spec: &PredictorSpec,
    base_seed: u64,
) -> Result<(f64, Vec<PairRecord>)> {
    if pairs.split != Split::Pairwise {
        return Err(Error::Input("dataset is not a pairwise split".into()));
    }
    if pairs.examples.len() % 2 != 0 || pairs.examples.is_empty() {
        return Err(Error::Input("pairwise dataset must hold full pairs".into()));
    }
    let space = &pairs.score_space;
    let mut records = Vec::with_capacity(pairs.examples.len() / 2);
    for (i, pair) in pairs.examples.chunks(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let pa = spec
            .predict(params, space, &a.x, seeds::derive(base_seed, &[a.id]), a.id)?
            .predicted;
        let pb = spec
            .predict(params, space, &b.x, seeds::derive(base_seed, &[b.id]), b.id)?
            .predicted;
        let credit = if pa == pb {
            0.5
        } else if (pa > pb) == (a.score > b.score) {
            1.0
        } else {
            0.0
        };
        records.push(PairRecord {
            pair_index: i,
            truth_a: a.score,
            truth_b: b.score,
            pred_a: pa,
            pred_b: pb,
            credit,
            gap: (a.score - b.score).abs(),
        });
    }
    let accuracy = records.iter().map(|r| r.credit).sum::<f64>() / records.len() as f64;
    Ok((accuracy, records))
}

// ---------------------------------------------------------------------------
// Perplexity and degeneracy statistics
// ---------------------------------------------------------------------------

/// exp of the token-weighted mean negative log-likelihood of each
/// rationale given its input prefix. Token-weighted means one corpus-wide
/// mean over tokens, not a mean of per-sequence perplexities.
pub fn perplexity(params: &ModelParams, corpus: &[(&[TokenId], &[TokenId])]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Input("empty rationale corpus".into()));
    }
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for (x, cot) in corpus {
        if cot.is_empty() {
            continue;
        }
        total_nll -= sequence_logprob(params, x, cot)?;
        total_tokens += cot.len();
    }
    if total_tokens == 0 {
        return Err(Error::Input("rationale corpus has no tokens".into()));
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// Perplexity of the stored rationales of a dataset under `params`.
pub fn dataset_cot_perplexity(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    let pairs: Vec<(&[TokenId], &[TokenId])> = dataset
        .examples
        .iter()
        .filter_map(|e| e.cot.as_ref().map(|c| (e.x.as_slice(), c.as_slice())))
        .collect();
    perplexity(params, &pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyStats {
    /// Fraction of records whose sample never completed the delimiter.
    pub missing_delimiter_fraction: f64,
    pub mean_cot_len: f64,
    pub max_cot_len: usize,
    pub truncation_count: usize,
    pub n: usize,
}

pub fn cot_degeneracy_stats(records: &[PredictionRecord]) -> DegeneracyStats {
    let n = records.len();
    let truncation_count = records.iter().filter(|r| r.truncated).count();
    let lens: Vec<usize> = records
        .iter()
        .filter_map(|r| r.cot_tokens.as_ref().map(|c| c.len()))
        .collect();
    let mean = if lens.is_empty() {
        0.0
    } else {
        lens.iter().sum::<usize>() as f64 / lens.len() as f64
    };
    DegeneracyStats {
        missing_delimiter_fraction: if n == 0 { 0.0 } else { truncation_count as f64 / n as f64 },
        mean_cot_len: mean,
        max_cot_len: lens.iter().cloned().max().unwrap_or(0),
        truncation_count,
        n,
    }
}
