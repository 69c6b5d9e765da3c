use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::process::{Command, Stdio};

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix2D;

pub const OPEN_TAG: &str = "<OUTPUT>";
pub const CLOSE_TAG: &str = "</OUTPUT>";

/// Which rating rubric the judge applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringTask {
    Dressing,
    Garment,
}

impl ScoringTask {
    pub fn keys(self) -> [&'static str; 3] {
        match self {
            ScoringTask::Dressing => ["Human Realism", "Clothing Fit", "Overall Aesthetic Quality and Realism"],
            ScoringTask::Garment => {
                ["Material and Texture Realism", "Structural Integrity and Drape", "Detail Fidelity"]
            }
        }
    }
}

/// The three integer ratings of one candidate, in rubric key order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityRatings {
    pub task: ScoringTask,
    pub values: [u8; 3],
}

impl QualityRatings {
    pub fn total(&self) -> u32 {
        self.values.iter().map(|&v| u32::from(v)).sum()
    }

    /// The bare JSON payload, keys in rubric order.
    pub fn payload(&self) -> String {
        let body: Vec<String> = self
            .task
            .keys()
            .iter()
            .zip(self.values)
            .map(|(k, v)| format!("{}:{v}", serde_json::to_string(k).expect("string key")))
            .collect();
        format!("{{{}}}", body.join(","))
    }
}

/// A JSON object whose keys must be unique.
struct StrictObject(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for StrictObject {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = StrictObject;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<StrictObject, A::Error> {
                let mut out: Vec<(String, serde_json::Value)> = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    if out.iter().any(|(seen, _)| *seen == k) {
                        return Err(de::Error::custom(format!("duplicate key {k:?}")));
                    }
                    out.push((k, v));
                }
                Ok(StrictObject(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

/// Extracts the first tagged span and validates it against the rubric.
pub fn parse_quality(text: &str, task: ScoringTask) -> Result<QualityRatings> {
    let start = text.find(OPEN_TAG).ok_or_else(|| Error::Parse(format!("missing {OPEN_TAG} tag")))?;
    let body_start = start + OPEN_TAG.len();
    let len = text[body_start..].find(CLOSE_TAG).ok_or_else(|| Error::Parse(format!("missing {CLOSE_TAG} tag")))?;
    let body = &text[body_start..body_start + len];
    let StrictObject(entries) =
        serde_json::from_str(body.trim()).map_err(|e| Error::Parse(format!("invalid JSON payload: {e}")))?;
    let keys = task.keys();
    if let Some((extra, _)) = entries.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
        return Err(Error::Parse(format!("unexpected key {extra:?}")));
    }
    let mut values = [0u8; 3];
    for (slot, key) in values.iter_mut().zip(keys) {
        let (_, v) =
            entries.iter().find(|(k, _)| k == key).ok_or_else(|| Error::Parse(format!("missing key {key:?}")))?;
        let n = v
            .as_u64()
            .filter(|_| v.is_u64())
            .ok_or_else(|| Error::Parse(format!("{key:?} must be an integer, got {v}")))?;
        if !(1..=10).contains(&n) {
            return Err(Error::Parse(format!("{key:?} must be in 1..=10, got {n}")));
        }
        *slot = n as u8;
    }
    Ok(QualityRatings { task, values })
}

/// What a judge is shown for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub task: ScoringTask,
    pub candidate: Matrix2D,
}

impl ScoreRequest {
    /// Plain-text request: rubric instructions followed by a candidate summary.
    pub fn render(&self) -> String {
        let keys = self.task.keys();
        let mean: Vec<String> = self.candidate.column_means().iter().map(|v| format!("{v:.6}")).collect();
        let mut s = String::new();
        s.push_str("Rate the candidate below on each dimension with an integer from 1 (worst) to 10 (best).\n");
        for k in keys {
            s.push_str(&format!("- {k}\n"));
        }
        s.push_str(&format!(
            "Answer with one JSON object that uses exactly these three keys, placed between {OPEN_TAG} and {CLOSE_TAG}.\n"
        ));
        s.push_str(&format!(
            "Candidate: {} tokens x {} features; mean token [{}]; rms {:.6}\n",
            self.candidate.rows(),
            self.candidate.cols(),
            mean.join(", "),
            (self.candidate.sum_sq() / self.candidate.len().max(1) as f64).sqrt()
        ));
        s
    }
}

/// A judge that answers score requests with free text.
pub trait QualityScorer {
    fn name(&self) -> &str;
    fn respond(&self, request: &ScoreRequest) -> Result<String>;
}

/// Offline judge with fixed rules over latent statistics, answering in the
/// tagged protocol format surrounded by prose.
///
/// Ratings, each mapped through `10 − 9·x/(x + s)` and rounded:
/// token spread around the mean token, deviation of the rms from
/// `target_rms`, and the largest absolute entry beyond `3·target_rms`.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleScorer {
    pub name: String,
    pub target_rms: f64,
    pub softness: f64,
}

impl Default for RuleScorer {
    fn default() -> Self {
        Self { name: "rule-scorer-v1".into(), target_rms: 1.0, softness: 0.25 }
    }
}

impl RuleScorer {
    fn rating(&self, x: f64) -> u8 {
        let x = if x.is_finite() { x.max(0.0) } else { f64::MAX };
        (10.0 - 9.0 * x / (x + self.softness)).round().clamp(1.0, 10.0) as u8
    }

    pub fn ratings(&self, task: ScoringTask, z: &Matrix2D) -> QualityRatings {
        let mean = z.column_means();
        let spread =
            (0..z.rows()).map(|r| z.row(r).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>()
                / z.len().max(1) as f64;
        let rms = (z.sum_sq() / z.len().max(1) as f64).sqrt();
        let peak = z.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let values = [
            self.rating(spread),
            self.rating((rms - self.target_rms).abs()),
            self.rating((peak - 3.0 * self.target_rms).max(0.0)),
        ];
        QualityRatings { task, values }
    }
}

impl QualityScorer for RuleScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn respond(&self, request: &ScoreRequest) -> Result<String> {
        let r = self.ratings(request.task, &request.candidate);
        Ok(format!("Assessment complete.\n{OPEN_TAG}{}{CLOSE_TAG}\nNo further remarks.", r.payload()))
    }
}

/// Runs an external program per request: the rendered request on stdin, the
/// judge's answer on stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandScorer {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
}

impl QualityScorer for CommandScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn respond(&self, request: &ScoreRequest) -> Result<String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            stdin.write_all(request.render().as_bytes())?;
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::Data(format!("scorer {:?} exited with {}", self.name, out.status)));
        }
        String::from_utf8(out.stdout).map_err(|_| Error::Parse("scorer output is not UTF-8".into()))
    }
}

/// Perceptual score `sᵖ` (sum of the three ratings, 3..=30). A response that
/// fails to parse is retried up to `retries` more times.
pub fn perceptual_quality(
    candidate: &Matrix2D,
    scorer: &dyn QualityScorer,
    task: ScoringTask,
    retries: usize,
) -> Result<f64> {
    let request = ScoreRequest { task, candidate: candidate.clone() };
    let mut last = None;
    for _ in 0..=retries {
        match parse_quality(&scorer.respond(&request)?, task) {
            Ok(r) => return Ok(f64::from(r.total())),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Every single-edit corruption of a valid payload that the parser must
/// reject, labelled by the kind of edit.
pub fn mutation_suite(valid: &QualityRatings) -> Vec<(String, String)> {
    let keys = valid.task.keys();
    let mut out = Vec::new();
    let entry = |k: &str, v: &str| format!("{}:{v}", serde_json::to_string(k).expect("string key"));
    let object = |entries: Vec<String>| format!("{{{}}}", entries.join(","));
    let base: Vec<String> = keys.iter().zip(valid.values).map(|(k, v)| entry(k, &v.to_string())).collect();
    let wrap = |body: &str| format!("{OPEN_TAG}{body}{CLOSE_TAG}");
    for i in 0..3 {
        let mut e = base.clone();
        e.remove(i);
        out.push((format!("drop key {}", keys[i]), wrap(&object(e))));
    }
    let mut extra = base.clone();
    extra.push(entry("Extra Dimension", "5"));
    out.push(("add key".into(), wrap(&object(extra))));
    for bad in ["0", "11", "7.5"] {
        for i in 0..3 {
            let mut e = base.clone();
            e[i] = entry(keys[i], bad);
            out.push((format!("value {bad} at {}", keys[i]), wrap(&object(e))));
        }
    }
    let payload = object(base);
    out.push(("strip open tag".into(), format!("{payload}{CLOSE_TAG}")));
    out.push(("strip close tag".into(), format!("{OPEN_TAG}{payload}")));
    out
}

/// Rubric keys paired with ratings, for building custom payloads.
pub fn rubric_map(task: ScoringTask, values: [u8; 3]) -> BTreeMap<&'static str, u8> {
    task.keys().into_iter().zip(values).collect()
}
