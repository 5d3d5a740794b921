//! Training losses over teacher-forced sequences.
//!
//! Four losses: score-only cross-entropy, cross-entropy over a rationale
//! plus score, the squared-error loss on the expected score, and the
//! composite objective that adds λ times the squared error to the
//! rationale CE. A fifth variant (squared term alone over a teacher-forced
//! rationale) exists for the sequential-schedule ablation.
//!
//! Every loss is differentiable end to end through the shared tape; the
//! probability inside each log is clamped at 1e-12 so CE values stay
//! finite, with gradients passing zero through the clamp.

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::model::{compute_gradients, ModelGraph, ModelParams, ParamGrads, TokenId};
use crate::score_space::{ProjectionMode, ScoreSpace, DEGENERATE_MASS};
use crate::taskgen::Example;
use serde::{Deserialize, Serialize};

/// Floor applied to probabilities inside logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// −log p(str(y*) | x).
    CeScore,
    /// −log p([s*, str(y*)] | x); `include_score_ce: false` drops the final
    /// score token from the CE sum (ablation flag).
    CeCot { include_score_ce: bool },
    /// (y* − expected score under the projected next-token dist)².
    Raft { mode: ProjectionMode },
    /// λ·(expected score after [x, s_t] − y*)² + CE over [s_t, str(y*)].
    CotRaft { lambda: f64, mode: ProjectionMode, include_score_ce: bool },
    /// The squared term of the composite objective alone, teacher-forcing
    /// the stored rationale. Used by the sequential-schedule ablation.
    CotSqOnly { mode: ProjectionMode },
}

impl Objective {
    pub fn requires_cot(&self) -> bool {
        matches!(
            self,
            Objective::CeCot { .. } | Objective::CotRaft { .. } | Objective::CotSqOnly { .. }
        )
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Objective::CotRaft { lambda, .. } => *lambda,
            _ => 1.0,
        }
    }
}

/// Per-example loss decomposition. `total = ce + λ·sq` for the composite
/// objective; `sq_component` is the pre-λ squared error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub example_id: u64,
    pub total: f64,
    pub ce_component: f64,
    pub sq_component: f64,
    pub lambda: f64,
    pub clamp_count: usize,
}

/// Borrowed view of one training example.
#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    pub id: u64,
    pub x: &'a [TokenId],
    pub cot: Option<&'a [TokenId]>,
    pub y_star: f64,
}

impl<'a> LossInput<'a> {
    pub fn from_example(ex: &'a Example) -> Self {
        LossInput {
            id: ex.id,
            x: &ex.x,
            cot: ex.cot.as_deref(),
            y_star: ex.score,
        }
    }
}

fn require_cot<'a>(input: &LossInput<'a>, space: &ScoreSpace) -> Result<&'a [TokenId]> {
    let cot = input
        .cot
        .ok_or_else(|| Error::Input(format!("example {} has no rationale", input.id)))?;
    if !cot.ends_with(&space.delimiter) {
        return Err(Error::Input(format!(
            "example {}: rationale does not end with the delimiter",
            input.id
        )));
    }
    Ok(cot)
}

/// Clamped-log CE over `targets` (coords into the logits rows). Returns
/// (ce node, clamp count).
fn ce_over_positions(
    graph: &mut ModelGraph,
    logits: NodeId,
    coords: &[(usize, usize)],
) -> (NodeId, usize) {
    let tape = graph.tape_mut();
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.pick_entries(logp, coords);
    let (clamped, n_clamped) = tape.clamp_min(picked, LOG_FLOOR.ln());
    let total = tape.sum_all(clamped);
    (tape.scale(total, -1.0), n_clamped)
}

/// Expected-score node from the logits row at `row`, in the given mode.
fn expectation_at_row(
    graph: &mut ModelGraph,
    logits: NodeId,
    row: usize,
    space: &ScoreSpace,
    mode: ProjectionMode,
) -> Result<NodeId> {
    let cols: Vec<usize> = space.entries.iter().map(|(_, t)| *t as usize).collect();
    let values: Vec<f64> = space.entries.iter().map(|(v, _)| *v).collect();
    let tape = graph.tape_mut();
    let picked_row = tape.slice_rows(logits, row, 1);
    let probs = tape.softmax_rows(picked_row);
    match mode {
        ProjectionMode::Raw => Ok(tape.dot_cols(probs, &cols, &values)),
        ProjectionMode::Renormalized => {
            let ones = vec![1.0; cols.len()];
            let num = tape.dot_cols(probs, &cols, &values);
            let den = tape.dot_cols(probs, &cols, &ones);
            let mass = tape.scalar(den);
            if mass < DEGENERATE_MASS {
                return Err(Error::DegenerateDistribution { mass });
            }
            Ok(tape.div(num, den))
        }
    }
}

/// Build the loss for one example on an existing graph. Returns the total
/// node plus the breakdown (values are available immediately because the
/// tape is eager).
pub fn build_example_loss(
    graph: &mut ModelGraph,
    space: &ScoreSpace,
    objective: &Objective,
    input: &LossInput,
) -> Result<(NodeId, LossBreakdown)> {
    let score_token = space.str_of(input.y_star)?;
    let lambda = objective.lambda();

    let (total, ce, sq, clamps) = match objective {
        Objective::CeScore => {
            let logits = graph.logits(input.x)?;
            let coords = [(input.x.len() - 1, score_token as usize)];
            let (ce_node, clamps) = ce_over_positions(graph, logits, &coords);
            (ce_node, graph.tape().scalar(ce_node), 0.0, clamps)
        }
        Objective::CeCot { include_score_ce } => {
            let cot = require_cot(input, space)?;
            let mut tokens = input.x.to_vec();
            tokens.extend_from_slice(cot);
            tokens.push(score_token);
            let logits = graph.logits(&tokens)?;
            let cont_len = if *include_score_ce { cot.len() + 1 } else { cot.len() };
            let coords: Vec<(usize, usize)> = (0..cont_len)
                .map(|j| (input.x.len() - 1 + j, tokens[input.x.len() + j] as usize))
                .collect();
            let (ce_node, clamps) = ce_over_positions(graph, logits, &coords);
            (ce_node, graph.tape().scalar(ce_node), 0.0, clamps)
        }
        Objective::Raft { mode } => {
            let logits = graph.logits(input.x)?;
            let e = expectation_at_row(graph, logits, input.x.len() - 1, space, *mode)?;
            let tape = graph.tape_mut();
            let diff = tape.add_const(e, -input.y_star);
            let sq_node = tape.square(diff);
            (sq_node, 0.0, tape.scalar(sq_node), 0)
        }
        Objective::CotRaft { lambda, mode, include_score_ce } => {
            let cot = require_cot(input, space)?;
            let mut tokens = input.x.to_vec();
            tokens.extend_from_slice(cot);
            tokens.push(score_token);
            let logits = graph.logits(&tokens)?;

            let cont_len = if *include_score_ce { cot.len() + 1 } else { cot.len() };
            let coords: Vec<(usize, usize)> = (0..cont_len)
                .map(|j| (input.x.len() - 1 + j, tokens[input.x.len() + j] as usize))
                .collect();
            let (ce_node, clamps) = ce_over_positions(graph, logits, &coords);

            let score_row = input.x.len() + cot.len() - 1;
            let e = expectation_at_row(graph, logits, score_row, space, *mode)?;
            let tape = graph.tape_mut();
            let diff = tape.add_const(e, -input.y_star);
            let sq_node = tape.square(diff);
            let scaled = tape.scale(sq_node, *lambda);
            let total = tape.add(ce_node, scaled);
            (total, tape.scalar(ce_node), tape.scalar(sq_node), clamps)
        }
        Objective::CotSqOnly { mode } => {
            let cot = require_cot(input, space)?;
            let mut tokens = input.x.to_vec();
            tokens.extend_from_slice(cot);
            let logits = graph.logits(&tokens)?;
            let score_row = tokens.len() - 1;
            let e = expectation_at_row(graph, logits, score_row, space, *mode)?;
            let tape = graph.tape_mut();
            let diff = tape.add_const(e, -input.y_star);
            let sq_node = tape.square(diff);
            (sq_node, 0.0, tape.scalar(sq_node), 0)
        }
    };

    let total_val = graph.tape().scalar(total);
    if !total_val.is_finite() {
        return Err(Error::Numerical {
            example_id: input.id,
            message: format!("loss = {total_val}"),
        });
    }
    Ok((
        total,
        LossBreakdown {
            example_id: input.id,
            total: total_val,
            ce_component: ce,
            sq_component: sq,
            lambda,
            clamp_count: clamps,
        },
    ))
}

/// Loss value of one example without gradients.
pub fn example_loss(
    params: &ModelParams,
    space: &ScoreSpace,
    objective: &Objective,
    input: &LossInput,
) -> Result<LossBreakdown> {
    let mut graph = ModelGraph::new(params);
    let (_, breakdown) = build_example_loss(&mut graph, space, objective, input)?;
    Ok(breakdown)
}

pub fn loss_ce_score(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    y_star: f64,
) -> Result<LossBreakdown> {
    example_loss(params, space, &Objective::CeScore, &LossInput { id: 0, x, cot: None, y_star })
}

pub fn loss_ce_cot(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    cot: &[TokenId],
    y_star: f64,
) -> Result<LossBreakdown> {
    example_loss(
        params,
        space,
        &Objective::CeCot { include_score_ce: true },
        &LossInput { id: 0, x, cot: Some(cot), y_star },
    )
}

pub fn loss_raft(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    y_star: f64,
    mode: ProjectionMode,
) -> Result<LossBreakdown> {
    example_loss(params, space, &Objective::Raft { mode }, &LossInput { id: 0, x, cot: None, y_star })
}

pub fn loss_cot_raft(
    params: &ModelParams,
    space: &ScoreSpace,
    x: &[TokenId],
    cot: &[TokenId],
    y_star: f64,
    lambda: f64,
    mode: ProjectionMode,
) -> Result<LossBreakdown> {
    example_loss(
        params,
        space,
        &Objective::CotRaft { lambda, mode, include_score_ce: true },
        &LossInput { id: 0, x, cot: Some(cot), y_star },
    )
}

/// Mean loss over a batch with gradients. The batch loss is the mean of
/// per-example losses, so gradients are the mean of per-example gradients.
pub struct BatchLoss {
    pub grads: ParamGrads,
    pub mean_total: f64,
    pub per_example: Vec<LossBreakdown>,
}

pub fn batch_loss_and_gradients(
    params: &ModelParams,
    space: &ScoreSpace,
    objective: &Objective,
    batch: &[LossInput],
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut per_example = Vec::with_capacity(batch.len());
    let (grads, mean_total) = compute_gradients(params, |graph| {
        let mut totals = Vec::with_capacity(batch.len());
        for input in batch {
            let (node, breakdown) = build_example_loss(graph, space, objective, input)?;
            totals.push(node);
            per_example.push(breakdown);
        }
        let tape = graph.tape_mut();
        let mut acc = totals[0];
        for node in &totals[1..] {
            acc = tape.add(acc, *node);
        }
        Ok(tape.scale(acc, 1.0 / batch.len() as f64))
    })?;
    Ok(BatchLoss { grads, mean_total, per_example })
}

/// Mean loss over a batch without gradients.
pub fn batch_loss(
    params: &ModelParams,
    space: &ScoreSpace,
    objective: &Objective,
    batch: &[LossInput],
) -> Result<(f64, Vec<LossBreakdown>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut per_example = Vec::with_capacity(batch.len());
    for input in batch {
        let mut graph = ModelGraph::new(params);
        let (_, breakdown) = build_example_loss(&mut graph, space, objective, input)?;
        per_example.push(breakdown);
    }
    let mean = per_example.iter().map(|b| b.total).sum::<f64>() / per_example.len() as f64;
    Ok((mean, per_example))
}
