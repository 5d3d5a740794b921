//! Training loops, the two-stage self-distillation pipeline and the
//! sequential-schedule ablation.
//!
//! The two-stage pipeline: stage 1 fine-tunes a fresh copy of the seed
//! model on the annotation rationales with the composite objective; stage 2
//! samples one rationale per training input from the frozen stage-1 model,
//! pairs it with the original ground-truth score, and fine-tunes a second
//! fresh copy of the seed model on that self-generated set. Training the
//! final model from the seed (not from the stage-1 model) is the default;
//! an ablation flag flips that.

use crate::error::{Error, Result};
use crate::metrics::{cot_degeneracy_stats, DegeneracyStats};
use crate::model::{
    apply_update, ModelParams, Optimizer, OptimizerState, SampleResult, SamplingConfig, StopRule,
};
use crate::objectives::{batch_loss, batch_loss_and_gradients, LossInput, Objective};
use crate::predictors::predict_cot_rail;
use crate::score_space::ProjectionMode;
use crate::seeds;
use crate::taskgen::{Dataset, Example, Provenance};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    CeScore,
    CeCot,
    Raft,
    CotRaft,
    /// Squared term only over teacher-forced rationales; the second phase
    /// of the sequential schedule.
    CotSq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    /// Weight of the squared term in the composite objective.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
    pub projection: ProjectionMode,
    /// When false, the CE term of the composite objective skips the score
    /// token (ablation flag).
    pub include_score_ce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::CotRaft,
            lambda: 1.0,
            epochs: 2,
            batch_size: 8,
            learning_rate: crate::model::DEFAULT_LR,
            rng_seed: 0,
            projection: ProjectionMode::Raw,
            include_score_ce: true,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::CeScore => Objective::CeScore,
            ObjectiveKind::CeCot => Objective::CeCot { include_score_ce: self.include_score_ce },
            ObjectiveKind::Raft => Objective::Raft { mode: self.projection },
            ObjectiveKind::CotRaft => Objective::CotRaft {
                lambda: self.lambda,
                mode: self.projection,
                include_score_ce: self.include_score_ce,
            },
            ObjectiveKind::CotSq => Objective::CotSqOnly { mode: self.projection },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// One training-log row (batch means; clamp events summed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub sq: f64,
    pub lambda: f64,
    pub clamp_count: usize,
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,total,ce,sq,lambda,clamp_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.total, r.ce, r.sq, r.lambda, r.clamp_count
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LossRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// final_loss < initial_loss; a warning is printed when this is false.
    pub improved: bool,
}

fn mean_dataset_loss(
    params: &ModelParams,
    dataset: &Dataset,
    objective: &Objective,
) -> Result<f64> {
    let inputs: Vec<LossInput> =
        dataset.examples.iter().map(LossInput::from_example).collect();
    let mut total = 0.0;
    for chunk in inputs.chunks(64) {
        let (mean, _) = batch_loss(params, &dataset.score_space, objective, chunk)?;
        total += mean * chunk.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Fine-tune `p_init` on a dataset. Deterministic given the config seed;
/// the dataset must carry rationales when the objective teacher-forces
/// them.
pub fn train(p_init: &ModelParams, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.examples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let objective = config.objective();
    if objective.requires_cot() && !dataset.all_have_cots() {
        return Err(Error::Config(format!(
            "objective {:?} needs rationales but the dataset lacks them",
            config.objective
        )));
    }

    let mut params = p_init.clone();
    let initial_loss = mean_dataset_loss(&params, dataset, &objective)?;

    let optimizer = Optimizer::default();
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::new();
    let mut step = 0usize;
    let n = dataset.examples.len();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeds::rng(seeds::derive(config.rng_seed, &[0x7261, epoch as u64]));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<LossInput> = chunk
                .iter()
                .map(|&i| LossInput::from_example(&dataset.examples[i]))
                .collect();
            let batch = batch_loss_and_gradients(&params, &dataset.score_space, &objective, &inputs)?;
            apply_update(&mut params, &batch.grads, &mut state, &optimizer, config.learning_rate)?;
            let bl = batch.per_example.len() as f64;
            log.push(LossRow {
                step,
                total: batch.mean_total,
                ce: batch.per_example.iter().map(|b| b.ce_component).sum::<f64>() / bl,
                sq: batch.per_example.iter().map(|b| b.sq_component).sum::<f64>() / bl,
                lambda: objective.lambda(),
                clamp_count: batch.per_example.iter().map(|b| b.clamp_count).sum(),
            });
            step += 1;
        }
    }

    let final_loss = mean_dataset_loss(&params, dataset, &objective)?;
    let improved = final_loss < initial_loss;
    if !improved {
        eprintln!(
            "warning: training did not reduce the dataset loss ({initial_loss} -> {final_loss})"
        );
    }
    Ok(TrainOutcome { params, log, initial_loss, final_loss, improved })
}

// ---------------------------------------------------------------------------
// Self-generated rationale dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfGenStats {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Extra sampling attempts beyond the first, summed over examples.
    pub resampled: usize,
}

/// Inner worker, generic over the sampler so the discard/retry logic is
/// testable without a trained model. The sampler receives the example and
/// the attempt index and returns a raw sampled continuation.
fn build_self_dataset_with(
    mut sample: impl FnMut(&Example, usize) -> Result<SampleResult>,
    d_train: &Dataset,
    retries: usize,
) -> Result<(Dataset, SelfGenStats)> {
    let space = &d_train.score_space;
    let mut examples = Vec::with_capacity(d_train.examples.len());
    let mut stats = SelfGenStats { total: d_train.examples.len(), kept: 0, dropped: 0, resampled: 0 };

    for ex in &d_train.examples {
        let mut kept = None;
        for attempt in 0..=retries {
            if attempt > 0 {
                stats.resampled += 1;
            }
            let result = sample(ex, attempt)?;
            if result.truncated {
                continue;
            }
            // The sample ends [.., delimiter.., score]; keep through the
            // delimiter and discard the predicted score.
            if let Some(pos) = crate::score_space::locate_score_position(&result.tokens, space) {
                kept = Some(result.tokens[..pos].to_vec());
                break;
            }
        }
        match kept {
            Some(cot) => {
                let mut new_ex = ex.clone();
                new_ex.cot = Some(cot);
                new_ex.provenance = Provenance::SelfStage1;
                examples.push(new_ex);
                stats.kept += 1;
            }
            None => stats.dropped += 1,
        }
    }

    if stats.dropped * 2 > stats.total {
        return Err(Error::Pipeline(format!(
            "self-generation dropped {}/{} examples; model too degenerate to proceed",
            stats.dropped, stats.total
        )));
    }
    Ok((
        Dataset {
            split: d_train.split,
            fingerprint: d_train.fingerprint.clone(),
            score_space: space.clone(),
            examples,
        },
        stats,
    ))
}

/// Sample one rationale per training input from `p_s`, discard the score
/// it predicted, and pair the rationale with the original ground-truth
/// score. Samples that never produce the delimiter are retried up to
/// `retries` times, then the example is dropped.
pub fn build_self_dataset(
    p_s: &ModelParams,
    d_train: &Dataset,
    sampling: &SamplingConfig,
    rng_seed: u64,
    retries: usize,
) -> Result<(Dataset, SelfGenStats)> {
    let stop = StopRule::DelimiterPlusOne { delimiter: d_train.score_space.delimiter.clone() };
    build_self_dataset_with(
        |ex, attempt| {
            let seed = seeds::derive(rng_seed, &[ex.id, attempt as u64]);
            crate::model::sample_sequence(p_s, &ex.x, sampling, &stop, seed)
        },
        d_train,
        retries,
    )
}

// ---------------------------------------------------------------------------
// Two-stage pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractOptions {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub projection: ProjectionMode,
    pub sampling: SamplingConfig,
    /// Sampling retries per example during self-generation.
    pub retries: usize,
    /// Ablation: initialize stage 2 from the stage-1 model instead of the
    /// seed model.
    pub stage2_from_ps: bool,
    pub seed: u64,
}

impl Default for TractOptions {
    fn default() -> Self {
        TractOptions {
            lambda: 1.0,
            epochs: 2,
            batch_size: 8,
            learning_rate: crate::model::DEFAULT_LR,
            projection: ProjectionMode::Raw,
            sampling: SamplingConfig::default(),
            retries: 3,
            stage2_from_ps: false,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct PipelineResult {
    pub p_s: ModelParams,
    pub d_self: Dataset,
    pub p_tract: ModelParams,
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
    pub selfgen: SelfGenStats,
    /// "p_0" normally, "p_s" under the ablation flag.
    pub stage2_init: &'static str,
}

/// Two-stage run: composite-objective training on annotation rationales,
/// self-generation from the frozen stage-1 model, then composite-objective
/// training of a fresh seed copy on the self-generated set.
pub fn run_tract(p0: &ModelParams, d_train: &Dataset, opts: &TractOptions) -> Result<PipelineResult> {
    if !d_train.all_have_cots() {
        return Err(Error::Config("stage 1 needs annotation rationales".into()));
    }
    let train_cfg = |seed: u64| TrainConfig {
        objective: ObjectiveKind::CotRaft,
        lambda: opts.lambda,
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        learning_rate: opts.learning_rate,
        rng_seed: seed,
        projection: opts.projection,
        include_score_ce: true,
    };

    let stage1 = train(p0, d_train, &train_cfg(seeds::derive(opts.seed, &[1])))?;
    let p_s = stage1.params.clone();

    let (d_self, selfgen) = build_self_dataset(
        &p_s,
        d_train,
        &opts.sampling,
        seeds::derive(opts.seed, &[2]),
        opts.retries,
    )?;

    let (init, stage2_init) = if opts.stage2_from_ps {
        (&p_s, "p_s")
    } else {
        (p0, "p_0")
    };
    let stage2 = train(init, &d_self, &train_cfg(seeds::derive(opts.seed, &[3])))?;
    let p_tract = stage2.params.clone();

    Ok(PipelineResult { p_s, d_self, p_tract, stage1, stage2, selfgen, stage2_init })
}

// ---------------------------------------------------------------------------
// Sequential-schedule ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialOptions {
    pub epochs_ce: usize,
    pub epochs_sq: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub projection: ProjectionMode,
    pub sampling: SamplingConfig,
    /// Rationales sampled for the degeneracy measurement.
    pub degeneracy_samples: usize,
    pub seed: u64,
}

impl Default for SequentialOptions {
    fn default() -> Self {
        SequentialOptions {
            epochs_ce: 2,
            epochs_sq: 2,
            batch_size: 8,
            learning_rate: crate::model::DEFAULT_LR,
            projection: ProjectionMode::Raw,
            sampling: SamplingConfig::default(),
            degeneracy_samples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct SequentialOutcome {
    pub params: ModelParams,
    pub phase_a: Option<TrainOutcome>,
    pub phase_b: Option<TrainOutcome>,
    pub degeneracy: DegeneracyStats,
}

/// Measure rationale degeneracy of a model by sampling over dataset inputs.
pub fn measure_degeneracy(
    params: &ModelParams,
    dataset: &Dataset,
    sampling: &SamplingConfig,
    n: usize,
    base_seed: u64,
) -> Result<DegeneracyStats> {
    let mut records = Vec::new();
    for ex in dataset.examples.iter().take(n) {
        records.push(predict_cot_rail(
            params,
            &dataset.score_space,
            &ex.x,
            sampling,
            seeds::derive(base_seed, &[ex.id]),
            ProjectionMode::Renormalized,
            ex.id,
        )?);
    }
    Ok(cot_degeneracy_stats(&records))
}

/// Phase A: CE over rationale-plus-score. Phase B: continue the same
/// parameters with only the squared term, teacher-forcing the stored
/// rationales. Returns the final model and the degeneracy statistics of
/// rationales it samples afterwards.
pub fn run_sequential(
    p0: &ModelParams,
    d_train: &Dataset,
    opts: &SequentialOptions,
) -> Result<SequentialOutcome> {
    if !d_train.all_have_cots() {
        return Err(Error::Config("sequential schedule needs rationales".into()));
    }
    let base = TrainConfig {
        batch_size: opts.batch_size,
        learning_rate: opts.learning_rate,
        projection: opts.projection,
        ..Default::default()
    };

    let mut params = p0.clone();
    let mut phase_a = None;
    if opts.epochs_ce > 0 {
        let out = train(
            &params,
            d_train,
            &TrainConfig {
                objective: ObjectiveKind::CeCot,
                epochs: opts.epochs_ce,
                rng_seed: seeds::derive(opts.seed, &[0xA]),
                ..base.clone()
            },
        )?;
        params = out.params.clone();
        phase_a = Some(out);
    }
    let mut phase_b = None;
    if opts.epochs_sq > 0 {
        let out = train(
            &params,
            d_train,
            &TrainConfig {
                objective: ObjectiveKind::CotSq,
                epochs: opts.epochs_sq,
                rng_seed: seeds::derive(opts.seed, &[0xB]),
                ..base
            },
        )?;
        params = out.params.clone();
        phase_b = Some(out);
    }

    let degeneracy = measure_degeneracy(
        &params,
        d_train,
        &opts.sampling,
        opts.degeneracy_samples,
        seeds::derive(opts.seed, &[0xD]),
    )?;
    Ok(SequentialOutcome { params, phase_a, phase_b, degeneracy })
}
