//! Synthetic rubric-scoring task with analytically known ground truth.
//!
//! An input holds a rubric token followed by a shuffled mix of evidence
//! tokens and distractors. Each rubric assigns every evidence-pool token a
//! role (supporting or opposing); the ground-truth score of an input is the
//! number of supporting tokens it contains, so labels are exact and a small
//! model can learn the task only by reading the rubric.
//!
//! The annotation rationale lists one clause per evidence token in input
//! order — the token followed by a role marker — optionally followed by a
//! style token that only the annotator uses, and always ends with the
//! delimiter. Those style tokens create a measurable gap between annotation
//! rationales and anything the trained models generate.

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::score_space::ScoreSpace;
use crate::seeds;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;

pub const NUM_SCORES: usize = 5;
pub const DELIMITER_LEN: usize = 4;
pub const EVIDENCE_POOL: usize = 16;
pub const DISTRACTOR_POOL: usize = 30;
/// Probability of inserting a style token after a clause.
pub const STYLE_PROB: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_rubrics: usize,
    pub distractor_min: usize,
    pub distractor_max: usize,
    /// Number of dedicated annotation-style tokens (0 disables them).
    pub annotation_style_tokens: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_rubrics: 48,
            distractor_min: 2,
            distractor_max: 6,
            annotation_style_tokens: 8,
            seed: 7,
        }
    }
}

/// Fixed token-id layout derived from a generator config.
#[derive(Debug, Clone)]
pub struct VocabLayout {
    pub bos: TokenId,
    pub sep: TokenId,
    pub cue: TokenId,
    pub clause_pos: TokenId,
    pub clause_neg: TokenId,
    pub score_base: TokenId,
    pub delimiter_base: TokenId,
    pub style_base: TokenId,
    pub num_style: usize,
    pub evidence_base: TokenId,
    pub distractor_base: TokenId,
    pub rubric_base: TokenId,
    pub num_rubrics: usize,
    pub vocab_size: usize,
}

impl VocabLayout {
    fn new(config: &GeneratorConfig) -> Self {
        let score_base = 5;
        let delimiter_base = score_base + NUM_SCORES as TokenId;
        let style_base = delimiter_base + DELIMITER_LEN as TokenId;
        let evidence_base = style_base + config.annotation_style_tokens as TokenId;
        let distractor_base = evidence_base + EVIDENCE_POOL as TokenId;
        let rubric_base = distractor_base + DISTRACTOR_POOL as TokenId;
        let vocab_size = rubric_base as usize + config.num_rubrics;
        VocabLayout {
            bos: 0,
            sep: 1,
            cue: 2,
            clause_pos: 3,
            clause_neg: 4,
            score_base,
            delimiter_base,
            style_base,
            num_style: config.annotation_style_tokens,
            evidence_base,
            distractor_base,
            rubric_base,
            num_rubrics: config.num_rubrics,
            vocab_size,
        }
    }

    pub fn rubric_token(&self, rubric_id: u32) -> TokenId {
        self.rubric_base + rubric_id
    }

    pub fn is_style_token(&self, t: TokenId) -> bool {
        self.num_style > 0 && t >= self.style_base && t < self.style_base + self.num_style as TokenId
    }

    pub fn delimiter(&self) -> Vec<TokenId> {
        (0..DELIMITER_LEN as TokenId).map(|i| self.delimiter_base + i).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Rationale written by the annotation process.
    Annotation,
    /// Rationale sampled from the stage-1 model.
    SelfStage1,
    /// No rationale attached.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub rubric_id: u32,
    pub x: Vec<TokenId>,
    /// Rationale tokens ending with the delimiter, when present.
    pub cot: Option<Vec<TokenId>>,
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub fingerprint: String,
    pub score_space: ScoreSpace,
    pub examples: Vec<Example>,
}

pub struct TaskGen {
    config: GeneratorConfig,
    vocab: VocabLayout,
}

impl TaskGen {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        if config.num_rubrics < 2 {
            return Err(Error::Config(format!(
                "num_rubrics must be >= 2, got {}",
                config.num_rubrics
            )));
        }
        if config.distractor_min > config.distractor_max {
            return Err(Error::Config("distractor_min > distractor_max".into()));
        }
        let vocab = VocabLayout::new(&config);
        Ok(TaskGen { config, vocab })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &VocabLayout {
        &self.vocab
    }

    pub fn score_space(&self) -> ScoreSpace {
        let entries = (0..NUM_SCORES)
            .map(|i| ((i + 1) as f64, self.vocab.score_base + i as TokenId))
            .collect();
        ScoreSpace::new(entries, self.vocab.delimiter()).expect("layout yields a valid space")
    }

    /// Content hash of the generator configuration.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(&self.config).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rubric ids reserved for training (the rest are held out).
    pub fn train_rubrics(&self) -> Vec<u32> {
        let n_train = ((self.config.num_rubrics * 2).div_ceil(3)).max(1) as u32;
        (0..n_train).collect()
    }

    pub fn test_rubrics(&self) -> Vec<u32> {
        let n_train = self.train_rubrics().len() as u32;
        (n_train..self.config.num_rubrics as u32).collect()
    }

    /// Supporting / opposing evidence tokens for a rubric. The partition is
    /// a pure function of (generator seed, rubric id).
    pub fn rubric_roles(&self, rubric_id: u32) -> (Vec<TokenId>, Vec<TokenId>) {
        let mut pool: Vec<TokenId> = (0..EVIDENCE_POOL as TokenId)
            .map(|i| self.vocab.evidence_base + i)
            .collect();
        let mut rng = seeds::rng(seeds::derive(self.config.seed, &[0x0717, rubric_id as u64]));
        pool.shuffle(&mut rng);
        let neg = pool.split_off(EVIDENCE_POOL / 2);
        (pool, neg)
    }

    /// Ground-truth score of an input: the number of supporting tokens it
    /// carries under its rubric.
    pub fn ground_truth(&self, rubric_id: u32, x: &[TokenId]) -> f64 {
        let (pos, _) = self.rubric_roles(rubric_id);
        x.iter().filter(|t| pos.contains(t)).count() as f64
    }

    /// Upper bound on [x, rationale, score] length, used to size contexts.
    pub fn max_sequence_len(&self) -> usize {
        let x = 4 + NUM_SCORES + self.config.distractor_max;
        let cot = NUM_SCORES * 3 + DELIMITER_LEN;
        x + cot + 1
    }

    /// Generate one input (without a rationale) for a rubric and target
    /// score.
    pub fn gen_example(
        &self,
        id: u64,
        rubric_id: u32,
        y_star: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Example> {
        if rubric_id as usize >= self.config.num_rubrics {
            return Err(Error::Input(format!("rubric {rubric_id} out of range")));
        }
        let y = y_star as usize;
        if y_star.fract() != 0.0 || !(1..=NUM_SCORES).contains(&y) {
            return Err(Error::Domain(format!("{y_star} is not a valid score")));
        }
        let (pos, neg) = self.rubric_roles(rubric_id);
        let mut body: Vec<TokenId> = Vec::new();
        body.extend(pos.choose_multiple(rng, y).cloned());
        body.extend(neg.choose_multiple(rng, NUM_SCORES - y).cloned());
        let n_distract = rng.gen_range(self.config.distractor_min..=self.config.distractor_max);
        let distractors: Vec<TokenId> = (0..DISTRACTOR_POOL as TokenId)
            .map(|i| self.vocab.distractor_base + i)
            .collect::<Vec<_>>()
            .choose_multiple(rng, n_distract)
            .cloned()
            .collect();
        body.extend(distractors);
        body.shuffle(rng);

        let mut x = vec![self.vocab.bos, self.vocab.rubric_token(rubric_id), self.vocab.sep];
        x.extend(body);
        x.push(self.vocab.cue);
        Ok(Example { id, rubric_id, x, cot: None, score: y_star, provenance: Provenance::None })
    }

    fn cot_for(&self, example: &Example, style_prob: f64, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let (pos, neg) = self.rubric_roles(example.rubric_id);
        let mut cot = Vec::new();
        for &t in &example.x {
            let marker = if pos.contains(&t) {
                Some(self.vocab.clause_pos)
            } else if neg.contains(&t) {
                Some(self.vocab.clause_neg)
            } else {
                None
            };
            if let Some(m) = marker {
                cot.push(t);
                cot.push(m);
                if self.vocab.num_style > 0 && rng.gen::<f64>() < style_prob {
                    let k = rng.gen_range(0..self.vocab.num_style) as TokenId;
                    cot.push(self.vocab.style_base + k);
                }
            }
        }
        cot.extend(self.vocab.delimiter());
        cot
    }

    /// Annotation rationale for an example: one clause per evidence token
    /// in input order, style tokens interleaved, delimiter-terminated.
    pub fn annotate_cot(&self, example: &Example, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        self.cot_for(example, STYLE_PROB, rng)
    }

    /// (train with annotation rationales, test without rationales).
    /// Rubric id sets of the two splits are disjoint; the score marginal of
    /// each split is uniform up to rounding.
    pub fn gen_dataset(&self, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
        if n_train < 1 || n_test < 1 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        let fingerprint = self.fingerprint();
        let space = self.score_space();

        let make = |split: Split, n: usize, rubrics: &[u32], with_cot: bool, stream: u64| {
            let mut rng = seeds::rng(seeds::derive(self.config.seed, &[stream]));
            let mut examples = Vec::with_capacity(n);
            for i in 0..n {
                let y = (i % NUM_SCORES + 1) as f64;
                let rubric = rubrics[rng.gen_range(0..rubrics.len())];
                let mut ex = self.gen_example(i as u64, rubric, y, &mut rng)?;
                if with_cot {
                    ex.cot = Some(self.annotate_cot(&ex, &mut rng));
                    ex.provenance = Provenance::Annotation;
                }
                examples.push(ex);
            }
            Ok::<Dataset, Error>(Dataset {
                split,
                fingerprint: fingerprint.clone(),
                score_space: space.clone(),
                examples,
            })
        };

        let train = make(Split::Train, n_train, &self.train_rubrics(), true, 0x1101)?;
        let test = make(Split::Test, n_test, &self.test_rubrics(), false, 0x1102)?;
        Ok((train, test))
    }

    /// Pairs for the preference-accuracy protocol. Both sides of a pair
    /// share the rubric and the distractor tokens and differ in evidence;
    /// the winner is the side with the higher ground-truth score, and score
    /// gaps are never zero. Pair i occupies examples 2i and 2i+1.
    pub fn gen_pairwise_set(&self, n_pairs: usize) -> Result<Dataset> {
        if n_pairs < 1 {
            return Err(Error::Config("n_pairs must be >= 1".into()));
        }
        let mut rng = seeds::rng(seeds::derive(self.config.seed, &[0x1103]));
        let rubrics = self.test_rubrics();
        let mut examples = Vec::with_capacity(2 * n_pairs);
        for i in 0..n_pairs {
            let rubric = rubrics[rng.gen_range(0..rubrics.len())];
            let ya = rng.gen_range(1..=NUM_SCORES);
            let yb = loop {
                let y = rng.gen_range(1..=NUM_SCORES);
                if y != ya {
                    break y;
                }
            };
            let n_distract =
                rng.gen_range(self.config.distractor_min..=self.config.distractor_max);
            let distractors: Vec<TokenId> = (0..DISTRACTOR_POOL as TokenId)
                .map(|k| self.vocab.distractor_base + k)
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, n_distract)
                .cloned()
                .collect();
            for (side, y) in [(0u64, ya), (1u64, yb)] {
                let (pos, neg) = self.rubric_roles(rubric);
                let mut body: Vec<TokenId> = Vec::new();
                body.extend(pos.choose_multiple(&mut rng, y).cloned());
                body.extend(neg.choose_multiple(&mut rng, NUM_SCORES - y).cloned());
                body.extend(distractors.iter().cloned());
                body.shuffle(&mut rng);
                let mut x = vec![self.vocab.bos, self.vocab.rubric_token(rubric), self.vocab.sep];
                x.extend(body);
                x.push(self.vocab.cue);
                examples.push(Example {
                    id: 2 * i as u64 + side,
                    rubric_id: rubric,
                    x,
                    cot: None,
                    score: y as f64,
                    provenance: Provenance::None,
                });
            }
        }
        Ok(Dataset {
            split: Split::Pairwise,
            fingerprint: self.fingerprint(),
            score_space: self.score_space(),
            examples,
        })
    }

    /// Plain token sequences for seed-model pretraining: task inputs with
    /// style-free rationales and their scores, over training rubrics. The
    /// seed model therefore never observes annotation style tokens.
    pub fn gen_pretrain_corpus(&self, n: usize) -> Result<Vec<Vec<TokenId>>> {
        if n < 1 {
            return Err(Error::Config("corpus size must be >= 1".into()));
        }
        let mut rng = seeds::rng(seeds::derive(self.config.seed, &[0x1104]));
        let rubrics = self.train_rubrics();
        let space = self.score_space();
        let mut corpus = Vec::with_capacity(n);
        for i in 0..n {
            let y = (i % NUM_SCORES + 1) as f64;
            let rubric = rubrics[rng.gen_range(0..rubrics.len())];
            let ex = self.gen_example(i as u64, rubric, y, &mut rng)?;
            let cot = self.cot_for(&ex, 0.0, &mut rng);
            let mut seq = ex.x.clone();
            seq.extend(cot);
            seq.push(space.str_of(y).expect("score in space"));
            corpus.push(seq);
        }
        Ok(corpus)
    }
}

// ---------------------------------------------------------------------------
// Dataset files: one JSON header line, then one JSON example per line.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    split: Split,
    fingerprint: String,
    score_space: ScoreSpace,
}

const DATASET_FORMAT: &str = "tract-lab-dataset-v1";

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        split: ds.split,
        fingerprint: ds.fingerprint.clone(),
        score_space: ds.score_space.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for ex in &ds.examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Input(format!("{}: empty dataset file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Input(format!("unsupported dataset format {}", header.format)));
    }
    let mut examples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(serde_json::from_str(&line)?);
    }
    Ok(Dataset {
        split: header.split,
        fingerprint: header.fingerprint,
        score_space: header.score_space,
        examples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn all_have_cots(&self) -> bool {
        self.examples.iter().all(|e| e.cot.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn gen() -> TaskGen {
        TaskGen::new(GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn example_contains_exact_evidence_counts() {
        let g = gen();
        for y in 1..=5usize {
            let mut rng = seeds::rng(33);
            let ex = g.gen_example(0, 3, y as f64, &mut rng).unwrap();
            let (pos, neg) = g.rubric_roles(3);
            let n_pos = ex.x.iter().filter(|t| pos.contains(t)).count();
            let n_neg = ex.x.iter().filter(|t| neg.contains(t)).count();
            assert_eq!(n_pos, y);
            assert_eq!(n_neg, 5 - y);
            assert_eq!(g.ground_truth(3, &ex.x), y as f64);
        }
    }

    #[test]
    fn example_generation_is_deterministic() {
        let g = gen();
        let mut r1 = seeds::rng(5);
        let mut r2 = seeds::rng(5);
        let a = g.gen_example(0, 1, 4.0, &mut r1).unwrap();
        let b = g.gen_example(0, 1, 4.0, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_score_is_domain_error() {
        let g = gen();
        let mut rng = seeds::rng(0);
        assert!(g.gen_example(0, 0, 2.5, &mut rng).is_err());
        assert!(g.gen_example(0, 0, 6.0, &mut rng).is_err());
    }

    #[test]
    fn annotation_cot_clause_counts_match_score() {
        let g = gen();
        let mut rng = seeds::rng(17);
        let ex = g.gen_example(0, 2, 1.0, &mut rng).unwrap();
        let cot = g.annotate_cot(&ex, &mut rng);
        let n_pos = cot.iter().filter(|&&t| t == g.vocab().clause_pos).count();
        let n_neg = cot.iter().filter(|&&t| t == g.vocab().clause_neg).count();
        assert_eq!(n_pos, 1);
        assert_eq!(n_neg, 4);
        assert!(cot.ends_with(&g.vocab().delimiter()));
    }

    #[test]
    fn style_free_config_emits_no_style_tokens() {
        let cfg = GeneratorConfig { annotation_style_tokens: 0, ..Default::default() };
        let g = TaskGen::new(cfg).unwrap();
        let mut rng = seeds::rng(2);
        let ex = g.gen_example(0, 1, 3.0, &mut rng).unwrap();
        let cot = g.annotate_cot(&ex, &mut rng);
        // With no style pool the rationale is exactly 5 clauses + delimiter.
        assert_eq!(cot.len(), 5 * 2 + DELIMITER_LEN);
    }

    #[test]
    fn annotation_cot_is_deterministic_for_fixed_rng() {
        let g = gen();
        let mut rng = seeds::rng(4);
        let ex = g.gen_example(0, 5, 2.0, &mut rng).unwrap();
        let mut r1 = seeds::rng(9);
        let mut r2 = seeds::rng(9);
        assert_eq!(g.annotate_cot(&ex, &mut r1), g.annotate_cot(&ex, &mut r2));
    }

    #[test]
    fn dataset_rubric_splits_are_disjoint() {
        let g = gen();
        let (train, test) = g.gen_dataset(200, 100).unwrap();
        let tr: HashSet<u32> = train.examples.iter().map(|e| e.rubric_id).collect();
        let te: HashSet<u32> = test.examples.iter().map(|e| e.rubric_id).collect();
        assert!(tr.is_disjoint(&te));
        assert!(train.all_have_cots());
        assert!(test.examples.iter().all(|e| e.cot.is_none()));
    }

    #[test]
    fn score_marginal_is_near_uniform() {
        let g = gen();
        let (train, _) = g.gen_dataset(2000, 10).unwrap();
        let mut counts = [0usize; 5];
        for e in &train.examples {
            counts[e.score as usize - 1] += 1;
        }
        for c in counts {
            assert!((360..=440).contains(&c), "class count {c}");
        }
    }

    #[test]
    fn ground_truth_holds_for_every_generated_example() {
        let g = gen();
        let (train, test) = g.gen_dataset(300, 150).unwrap();
        for e in train.examples.iter().chain(test.examples.iter()) {
            assert_eq!(g.ground_truth(e.rubric_id, &e.x), e.score);
        }
    }

    #[test]
    fn dataset_files_are_byte_identical_across_regeneration() {
        let g1 = gen();
        let g2 = gen();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        save_dataset(&p1, &g1.gen_dataset(50, 20).unwrap().0).unwrap();
        save_dataset(&p2, &g2.gen_dataset(50, 20).unwrap().0).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn dataset_roundtrip() {
        let g = gen();
        let (train, _) = g.gen_dataset(30, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&p, &train).unwrap();
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(loaded, train);
    }

    #[test]
    fn pairwise_pairs_share_rubric_and_never_tie() {
        let g = gen();
        let ds = g.gen_pairwise_set(40).unwrap();
        assert_eq!(ds.examples.len(), 80);
        for pair in ds.examples.chunks(2) {
            assert_eq!(pair[0].rubric_id, pair[1].rubric_id);
            assert_ne!(pair[0].score, pair[1].score);
            assert_eq!(g.ground_truth(pair[0].rubric_id, &pair[0].x), pair[0].score);
            assert_eq!(g.ground_truth(pair[1].rubric_id, &pair[1].x), pair[1].score);
        }
    }

    #[test]
    fn pairwise_generation_is_deterministic() {
        let g = gen();
        assert_eq!(g.gen_pairwise_set(10).unwrap(), g.gen_pairwise_set(10).unwrap());
    }

    #[test]
    fn pretrain_corpus_has_no_style_tokens_and_fits_bounds() {
        let g = gen();
        let corpus = g.gen_pretrain_corpus(100).unwrap();
        for seq in &corpus {
            assert!(seq.len() <= g.max_sequence_len());
            assert!(!seq.iter().any(|&t| g.vocab().is_style_token(t)));
        }
    }

    #[test]
    fn too_few_rubrics_is_config_error() {
        let cfg = GeneratorConfig { num_rubrics: 1, ..Default::default() };
        assert!(TaskGen::new(cfg).is_err());
    }

    #[test]
    fn style_frequency_positive_in_annotations() {
        let g = gen();
        let (train, _) = g.gen_dataset(200, 10).unwrap();
        let mut style = 0usize;
        let mut total = 0usize;
        for e in &train.examples {
            let cot = e.cot.as_ref().unwrap();
            style += cot.iter().filter(|&&t| g.vocab().is_style_token(t)).count();
            total += cot.len();
        }
        assert!(style > 0);
        assert!(total > 0);
    }
}
