//! Preference-pair construction: sample candidates from the reference model,
//! score them with three independent evaluators, normalize per bundle and keep
//! the best and worst candidate of each bundle.

mod dataset;
mod embed;
mod pool;
mod scorer;

pub use dataset::{
    build_preference_dataset, pair_file_name, read_dataset, write_dataset, write_score_csv, Manifest, PreferencePair,
    ScoreRow, SkipRecord, DATASET_SCHEMA_VERSION, MANIFEST_FILE,
};
pub use embed::{content_fidelity, textual_alignment, Embedder, LinearEmbedder};
pub use pool::{
    candidate_seed, composite_rank, sample_candidates, score_candidate, score_pool, Bundle, BundleRanking, Candidate,
    CandidatePool, CandidateScore, Evaluators, RawScores, SamplerConfig,
};
pub use scorer::{
    mutation_suite, parse_quality, perceptual_quality, rubric_map, CommandScorer, QualityRatings, QualityScorer,
    RuleScorer, ScoreRequest, ScoringTask, CLOSE_TAG, OPEN_TAG,
};

use crate::diffusion::{DenoiserModel, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::lora_attention::ConditionSet;

/// Everything one MPO run produces.
#[derive(Debug, Clone)]
pub struct MpoOutput {
    pub pool: CandidatePool,
    pub rows: Vec<ScoreRow>,
    pub pairs: Vec<PreferencePair>,
    pub manifest: Manifest,
}

/// Sample, score, rank and assemble pairs from the first `m` bundles.
#[allow(clippy::too_many_arguments)]
pub fn run_mpo(
    reference: &DenoiserModel,
    schedule: &DiffusionSchedule,
    dataset: &[ConditionSet],
    m: usize,
    h: usize,
    sampler: &SamplerConfig,
    evaluators: &Evaluators,
    base_seed: u64,
) -> Result<MpoOutput> {
    let before = reference.param_hash();
    let pool = sample_candidates(reference, dataset, m, h, schedule, sampler, base_seed)?;
    let scores = score_pool(&pool, evaluators);
    if reference.param_hash() != before {
        return Err(Error::Numeric("reference parameters changed during sampling".into()));
    }
    let (pairs, rows, manifest) = build_preference_dataset(&pool, &scores, evaluators.identities(), before)?;
    Ok(MpoOutput { pool, rows, pairs, manifest })
}
