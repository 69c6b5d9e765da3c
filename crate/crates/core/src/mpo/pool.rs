use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::lora_attention::ConditionSet;
use crate::numerics::{derive_seed, zscore, Matrix2D, SeededRng};

use super::embed::{content_fidelity, textual_alignment, Embedder};
use super::scorer::{perceptual_quality, QualityScorer, ScoringTask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub omega: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: crate::diffusion::DEFAULT_DDIM_STEPS, omega: crate::diffusion::DEFAULT_GUIDANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub seed: u64,
    pub latent: Matrix2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub index: usize,
    pub cond: ConditionSet,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub base_seed: u64,
    pub bundles: Vec<Bundle>,
}

/// Seed of candidate `j` in bundle `b`.
pub fn candidate_seed(base_seed: u64, bundle: usize, per_bundle: usize, j: usize) -> u64 {
    derive_seed(base_seed, (bundle * per_bundle + j) as u64)
}

/// `h` independent DDIM samples for each of the first `m` bundles.
pub fn sample_candidates<P: NoisePredictor + ?Sized>(
    model: &P,
    dataset: &[ConditionSet],
    m: usize,
    h: usize,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
    base_seed: u64,
) -> Result<CandidatePool> {
    if m > dataset.len() {
        return Err(Error::Config(format!("requested {m} bundles but the dataset has {}", dataset.len())));
    }
    if h == 0 {
        return Err(Error::Config("at least one candidate per bundle is required".into()));
    }
    let mut bundles = Vec::with_capacity(m);
    for (b, cond) in dataset.iter().take(m).enumerate() {
        let mut candidates = Vec::with_capacity(h);
        for j in 0..h {
            let seed = candidate_seed(base_seed, b, h, j);
            let latent =
                ddim_sample(model, Some(cond), schedule, sampler.steps, sampler.omega, &mut SeededRng::new(seed))?;
            candidates.push(Candidate { index: j, seed, latent });
        }
        bundles.push(Bundle { index: b, cond: cond.clone(), candidates });
    }
    Ok(CandidatePool { base_seed, bundles })
}

/// The three judges used to score candidates.
pub struct Evaluators<'a> {
    pub content: &'a dyn Embedder,
    pub image: &'a dyn Embedder,
    pub text: &'a dyn Embedder,
    pub scorer: &'a dyn QualityScorer,
    pub task: ScoringTask,
    /// Extra attempts after an unparseable judge response.
    pub retries: usize,
}

impl Evaluators<'_> {
    pub fn identities(&self) -> Vec<String> {
        vec![
            format!("content:{}", self.content.name()),
            format!("perceptual:{}", self.scorer.name()),
            format!("textual:{}+{}", self.image.name(), self.text.name()),
        ]
    }
}

/// Raw evaluator outputs `(sᶜ, sᵖ, sᵗ)` for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub content: f64,
    pub perceptual: f64,
    pub textual: f64,
}

impl RawScores {
    pub fn as_array(&self) -> [f64; 3] {
        [self.content, self.perceptual, self.textual]
    }
}

/// A candidate's raw scores, or why it could not be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub bundle: usize,
    pub candidate: usize,
    pub raw: Option<RawScores>,
    pub reason: Option<String>,
}

pub fn score_candidate(latent: &Matrix2D, cond: &ConditionSet, ev: &Evaluators) -> Result<RawScores> {
    let content = content_fidelity(latent, cond, ev.content)?;
    let perceptual = perceptual_quality(latent, ev.scorer, ev.task, ev.retries)?;
    let prompt = cond.text.as_ref().ok_or_else(|| Error::Degenerate("bundle has no text prompt".into()))?;
    let textual = textual_alignment(latent, prompt, ev.image, ev.text)?;
    Ok(RawScores { content, perceptual, textual })
}

/// Scores every candidate; failures are recorded per candidate, never fatal.
pub fn score_pool(pool: &CandidatePool, ev: &Evaluators) -> Vec<Vec<CandidateScore>> {
    pool.bundles
        .iter()
        .map(|b| {
            b.candidates
                .iter()
                .map(|c| match score_candidate(&c.latent, &b.cond, ev) {
                    Ok(raw) => CandidateScore { bundle: b.index, candidate: c.index, raw: Some(raw), reason: None },
                    Err(e) => {
                        CandidateScore { bundle: b.index, candidate: c.index, raw: None, reason: Some(e.to_string()) }
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-bundle composite ranking over the valid candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRanking {
    /// Z-scores `(z_c, z_p, z_t)` for valid candidates.
    pub z: Vec<Option<[f64; 3]>>,
    pub totals: Vec<Option<f64>>,
    pub winner: usize,
    pub loser: usize,
}

/// Sums per-evaluator Z-scores over the valid candidates and picks the
/// highest and lowest totals, ties going to the lowest index.
pub fn composite_rank(scores: &[Option<RawScores>]) -> Result<BundleRanking> {
    let valid: Vec<(usize, [f64; 3])> =
        scores.iter().enumerate().filter_map(|(i, s)| s.map(|r| (i, r.as_array()))).collect();
    if valid.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: valid.len() });
    }
    let mut columns = Vec::with_capacity(3);
    for k in 0..3 {
        let col: Vec<f64> = valid.iter().map(|(_, r)| r[k]).collect();
        columns.push(zscore(&col)?);
    }
    let mut z = vec![None; scores.len()];
    let mut totals = vec![None; scores.len()];
    let (mut winner, mut loser) = (valid[0].0, valid[0].0);
    let (mut best, mut worst) = (f64::NEG_INFINITY, f64::INFINITY);
    for (row, (i, _)) in valid.iter().enumerate() {
        let zs = [columns[0][row], columns[1][row], columns[2][row]];
        let total = zs[0] + zs[1] + zs[2];
        z[*i] = Some(zs);
        totals[*i] = Some(total);
        if total > best {
            best = total;
            winner = *i;
        }
        if total < worst {
            worst = total;
            loser = *i;
        }
    }
    if winner == loser {
        return Err(Error::Degenerate("all valid candidates have the same total score".into()));
    }
    Ok(BundleRanking { z, totals, winner, loser })
}
