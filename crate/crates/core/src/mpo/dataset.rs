use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora_attention::ConditionSet;
use crate::numerics::Matrix2D;

use super::pool::{composite_rank, CandidatePool, CandidateScore};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// A winner/loser pair for one condition bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub bundle: usize,
    pub cond: ConditionSet,
    pub winner: Matrix2D,
    pub loser: Matrix2D,
    pub winner_index: usize,
    pub loser_index: usize,
    pub winner_seed: u64,
    pub loser_seed: u64,
    pub winner_total: f64,
    pub loser_total: f64,
    /// `winner_total − loser_total`, never negative.
    pub margin: f64,
    pub evaluators: Vec<String>,
}

impl PreferencePair {
    /// The same pair with winner and loser exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            winner_index: self.loser_index,
            loser_index: self.winner_index,
            winner_seed: self.loser_seed,
            loser_seed: self.winner_seed,
            winner_total: self.loser_total,
            loser_total: self.winner_total,
            margin: -self.margin,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub bundle: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub bundles: usize,
    pub candidates_per_bundle: usize,
    pub pairs: usize,
    pub skips: Vec<SkipRecord>,
    pub evaluators: Vec<String>,
    pub base_seed: u64,
    pub candidate_seeds: Vec<Vec<u64>>,
    /// Parameter hash of the model that generated the candidates.
    pub reference_hash: String,
}

/// One row of the exported score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub bundle: usize,
    pub candidate: usize,
    pub s_c: Option<f64>,
    pub s_p: Option<f64>,
    pub s_t: Option<f64>,
    pub z_c: Option<f64>,
    pub z_p: Option<f64>,
    pub z_t: Option<f64>,
    pub total: Option<f64>,
    pub valid: bool,
    pub reason: String,
}

pub fn write_score_csv<W: Write>(rows: &[ScoreRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bundle", "candidate", "s_c", "s_p", "s_t", "z_c", "z_p", "z_t", "total", "valid", "reason"])?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.bundle.to_string(),
            r.candidate.to_string(),
            f(r.s_c),
            f(r.s_p),
            f(r.s_t),
            f(r.z_c),
            f(r.z_p),
            f(r.z_t),
            f(r.total),
            r.valid.to_string(),
            r.reason.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ranks every bundle, keeping one pair per bundle that ranks and a skip
/// record for each that does not.
pub fn build_preference_dataset(
    pool: &CandidatePool,
    scores: &[Vec<CandidateScore>],
    evaluators: Vec<String>,
    reference_hash: String,
) -> Result<(Vec<PreferencePair>, Vec<ScoreRow>, Manifest)> {
    if scores.len() != pool.bundles.len() {
        return Err(Error::Data(format!("{} score lists for {} bundles", scores.len(), pool.bundles.len())));
    }
    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    let mut skips = Vec::new();
    for (bundle, bundle_scores) in pool.bundles.iter().zip(scores) {
        let raw: Vec<_> = bundle_scores.iter().map(|s| s.raw).collect();
        let ranking = composite_rank(&raw);
        for (j, s) in bundle_scores.iter().enumerate() {
            let z = ranking.as_ref().ok().and_then(|r| r.z[j]);
            let total = ranking.as_ref().ok().and_then(|r| r.totals[j]);
            rows.push(ScoreRow {
                bundle: bundle.index,
                candidate: s.candidate,
                s_c: s.raw.map(|r| r.content),
                s_p: s.raw.map(|r| r.perceptual),
                s_t: s.raw.map(|r| r.textual),
                z_c: z.map(|z| z[0]),
                z_p: z.map(|z| z[1]),
                z_t: z.map(|z| z[2]),
                total,
                valid: s.raw.is_some(),
                reason: s.reason.clone().unwrap_or_default(),
            });
        }
        match ranking {
            Ok(r) => {
                let (w, l) = (&bundle.candidates[r.winner], &bundle.candidates[r.loser]);
                let (wt, lt) = (r.totals[r.winner].unwrap_or(0.0), r.totals[r.loser].unwrap_or(0.0));
                pairs.push(PreferencePair {
                    bundle: bundle.index,
                    cond: bundle.cond.clone(),
                    winner: w.latent.clone(),
                    loser: l.latent.clone(),
                    winner_index: r.winner,
                    loser_index: r.loser,
                    winner_seed: w.seed,
                    loser_seed: l.seed,
                    winner_total: wt,
                    loser_total: lt,
                    margin: wt - lt,
                    evaluators: evaluators.clone(),
                });
            }
            Err(e) => skips.push(SkipRecord { bundle: bundle.index, reason: e.to_string() }),
        }
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        bundles: pool.bundles.len(),
        candidates_per_bundle: pool.bundles.first().map_or(0, |b| b.candidates.len()),
        pairs: pairs.len(),
        skips,
        evaluators,
        base_seed: pool.base_seed,
        candidate_seeds: pool.bundles.iter().map(|b| b.candidates.iter().map(|c| c.seed).collect()).collect(),
        reference_hash,
    };
    Ok((pairs, rows, manifest))
}

pub fn pair_file_name(i: usize) -> String {
    format!("pair_{i:05}.json")
}

/// Writes one JSON file per pair plus the manifest into `dir`.
pub fn write_dataset(dir: &Path, pairs: &[PreferencePair], manifest: &Manifest) -> Result<()> {
    if manifest.pairs != pairs.len() {
        return Err(Error::Data(format!("manifest lists {} pairs, got {}", manifest.pairs, pairs.len())));
    }
    fs::create_dir_all(dir)?;
    for (i, p) in pairs.iter().enumerate() {
        fs::write(dir.join(pair_file_name(i)), serde_json::to_string(p)?)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<PreferencePair>, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Parse(format!("dataset schema version {} is not supported", manifest.schema_version)));
    }
    let pairs = (0..manifest.pairs)
        .map(|i| -> Result<PreferencePair> {
            Ok(serde_json::from_str(&fs::read_to_string(dir.join(pair_file_name(i)))?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, manifest))
}
