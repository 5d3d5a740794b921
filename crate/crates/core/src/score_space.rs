//! The numeric target set, its token encoding, and the CoT delimiter.
//!
//! Scores are a small ordered set of real values, each owning one
//! dedicated vocabulary token. A generated rationale ends with a fixed
//! multi-token delimiter; the token right after the final delimiter
//! occurrence is the score slot.

use crate::error::{Error, Result};
use crate::model::{NextTokenDist, TokenId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpace {
    /// (value, token) pairs with strictly increasing values.
    pub entries: Vec<(f64, TokenId)>,
    /// Delimiter token sequence that ends every rationale.
    pub delimiter: Vec<TokenId>,
}

/// Raw keeps the score-token probabilities as they are; Renormalized
/// divides by their total mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Raw,
    Renormalized,
}

impl Default for ProjectionMode {
    fn default() -> Self {
        ProjectionMode::Raw
    }
}

/// Probabilities over the score values only, aligned with `entries`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDist {
    pub probs: Vec<f64>,
    pub mode: ProjectionMode,
}

pub const DEGENERATE_MASS: f64 = 1e-12;

impl ScoreSpace {
    pub fn new(entries: Vec<(f64, TokenId)>, delimiter: Vec<TokenId>) -> Result<Self> {
        let space = ScoreSpace { entries, delimiter };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("score space has no entries".into()));
        }
        for w in self.entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("score values must be strictly increasing".into()));
            }
        }
        let mut tokens: Vec<TokenId> = self.entries.iter().map(|e| e.1).collect();
        tokens.extend_from_slice(&self.delimiter);
        let n = tokens.len();
        tokens.sort_unstable();
        tokens.dedup();
        if tokens.len() != n {
            return Err(Error::Config(
                "score tokens and delimiter tokens must be pairwise distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn min_value(&self) -> f64 {
        self.entries.first().expect("nonempty").0
    }

    pub fn max_value(&self) -> f64 {
        self.entries.last().expect("nonempty").0
    }

    /// Token for a score value.
    pub fn str_of(&self, value: f64) -> Result<TokenId> {
        self.entries
            .iter()
            .find(|(v, _)| *v == value)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Domain(format!("{value} is not a member of the score space")))
    }

    /// Score value for a token.
    pub fn num_of(&self, token: TokenId) -> Result<f64> {
        self.entries
            .iter()
            .find(|(_, t)| *t == token)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::Domain(format!("token {token} is not a score token")))
    }

    pub fn is_score_token(&self, token: TokenId) -> bool {
        self.entries.iter().any(|(_, t)| *t == token)
    }
}

/// Index of the token immediately after the final delimiter occurrence.
/// `None` when the delimiter never occurs, or occurs with nothing after it.
pub fn locate_score_position(tokens: &[TokenId], space: &ScoreSpace) -> Option<usize> {
    let d = &space.delimiter;
    if d.is_empty() || tokens.len() < d.len() {
        return None;
    }
    // Scan from the end for the last occurrence.
    for start in (0..=tokens.len() - d.len()).rev() {
        if &tokens[start..start + d.len()] == d.as_slice() {
            let pos = start + d.len();
            return if pos < tokens.len() { Some(pos) } else { None };
        }
    }
    None
}

/// Restrict a next-token distribution to the score tokens.
pub fn project_score_dist(
    dist: &NextTokenDist,
    space: &ScoreSpace,
    mode: ProjectionMode,
) -> Result<ScoreDist> {
    let mut probs: Vec<f64> = space
        .entries
        .iter()
        .map(|(_, t)| dist.probs[*t as usize])
        .collect();
    if mode == ProjectionMode::Renormalized {
        let mass: f64 = probs.iter().sum();
        if mass < DEGENERATE_MASS {
            return Err(Error::DegenerateDistribution { mass });
        }
        for p in &mut probs {
            *p /= mass;
        }
    }
    Ok(ScoreDist { probs, mode })
}

impl ScoreDist {
    /// Expected score value under this distribution.
    pub fn expectation(&self, space: &ScoreSpace) -> f64 {
        self.probs
            .iter()
            .zip(space.entries.iter())
            .map(|(p, (v, _))| p * v)
            .sum()
    }

    /// Score value with the highest probability; ties go to the smallest
    /// value (entries are sorted ascending).
    pub fn argmax_value(&self, space: &ScoreSpace) -> f64 {
        let mut best = 0usize;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        space.entries[best].0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> ScoreSpace {
        ScoreSpace::new(
            vec![(1.0, 10), (2.0, 11), (3.0, 12), (4.0, 13), (5.0, 14)],
            vec![20, 21, 22, 23],
        )
        .unwrap()
    }

    fn dist_with(space: &ScoreSpace, score_probs: [f64; 5], spill_token: usize) -> NextTokenDist {
        let mut probs = vec![0.0; 30];
        for (i, (_, t)) in space.entries.iter().enumerate() {
            probs[*t as usize] = score_probs[i];
        }
        let rest: f64 = 1.0 - score_probs.iter().sum::<f64>();
        probs[spill_token] = rest;
        NextTokenDist { probs }
    }

    #[test]
    fn str_num_roundtrip() {
        let s = space();
        assert_eq!(s.num_of(s.str_of(3.0).unwrap()).unwrap(), 3.0);
        for v in [1.0, 2.0, 3.0, 4.0, 5.0] {
            assert_eq!(s.num_of(s.str_of(v).unwrap()).unwrap(), v);
        }
    }

    #[test]
    fn non_members_are_domain_errors() {
        let s = space();
        assert!(matches!(s.str_of(2.5), Err(Error::Domain(_))));
        assert!(matches!(s.num_of(99), Err(Error::Domain(_))));
        assert!(matches!(s.num_of(20), Err(Error::Domain(_)))); // delimiter token
    }

    #[test]
    fn duplicate_tokens_rejected() {
        assert!(ScoreSpace::new(vec![(1.0, 5), (2.0, 5)], vec![9]).is_err());
        assert!(ScoreSpace::new(vec![(1.0, 5), (2.0, 6)], vec![6, 7]).is_err());
    }

    #[test]
    fn non_increasing_values_rejected() {
        assert!(ScoreSpace::new(vec![(2.0, 5), (1.0, 6)], vec![9]).is_err());
    }

    #[test]
    fn locate_finds_token_after_delimiter() {
        let s = space();
        let seq = [1, 2, 20, 21, 22, 23, 12];
        assert_eq!(locate_score_position(&seq, &s), Some(6));
    }

    #[test]
    fn locate_absent_without_delimiter_or_tail() {
        let s = space();
        assert_eq!(locate_score_position(&[1, 2, 3], &s), None);
        // Delimiter present but nothing after it.
        assert_eq!(locate_score_position(&[1, 20, 21, 22, 23], &s), None);
        assert_eq!(locate_score_position(&[], &s), None);
    }

    #[test]
    fn locate_uses_last_occurrence() {
        let s = space();
        let seq = [20, 21, 22, 23, 12, 7, 20, 21, 22, 23, 14];
        // Scan-from-end oracle.
        let d = &s.delimiter;
        let mut oracle = None;
        for start in 0..=seq.len() - d.len() {
            if &seq[start..start + d.len()] == d.as_slice() && start + d.len() < seq.len() {
                oracle = Some(start + d.len());
            }
        }
        assert_eq!(locate_score_position(&seq, &s), oracle);
        assert_eq!(locate_score_position(&seq, &s), Some(10));
    }

    #[test]
    fn raw_projection_copies_probabilities() {
        let s = space();
        let d = dist_with(&s, [0.1, 0.2, 0.3, 0.2, 0.1], 0);
        let proj = project_score_dist(&d, &s, ProjectionMode::Raw).unwrap();
        assert_eq!(proj.probs, vec![0.1, 0.2, 0.3, 0.2, 0.1]);
    }

    #[test]
    fn renormalized_projection_divides_by_mass() {
        let s = space();
        let d = dist_with(&s, [0.1, 0.2, 0.3, 0.2, 0.1], 0);
        let proj = project_score_dist(&d, &s, ProjectionMode::Renormalized).unwrap();
        let sum: f64 = proj.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (got, want) in proj.probs.iter().zip([0.1, 0.2, 0.3, 0.2, 0.1]) {
            assert!((got - want / 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mass_renormalization_is_degenerate() {
        let s = space();
        let d = dist_with(&s, [0.0; 5], 0);
        assert!(matches!(
            project_score_dist(&d, &s, ProjectionMode::Renormalized),
            Err(Error::DegenerateDistribution { .. })
        ));
    }

    #[test]
    fn raw_projection_never_exceeds_source() {
        let s = space();
        let d = dist_with(&s, [0.05, 0.1, 0.4, 0.1, 0.05], 1);
        let proj = project_score_dist(&d, &s, ProjectionMode::Raw).unwrap();
        for ((_, t), p) in s.entries.iter().zip(proj.probs.iter()) {
            assert!(*p <= d.probs[*t as usize]);
        }
    }

    #[test]
    fn argmax_ties_go_to_smallest_value() {
        let s = space();
        let d = ScoreDist { probs: vec![0.2; 5], mode: ProjectionMode::Raw };
        assert_eq!(d.argmax_value(&s), 1.0);
    }
}
