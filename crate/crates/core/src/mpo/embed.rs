use crate::error::{Error, Result};
use crate::lora_attention::ConditionSet;
use crate::numerics::{cosine_sim, Matrix2D, SeededRng};

/// Deterministic map from a token matrix to a fixed-width vector.
pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &Matrix2D) -> Result<Vec<f64>>;
}

/// Mean-pools the token rows, then applies a fixed seeded projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEmbedder {
    name: String,
    projection: Matrix2D,
}

impl LinearEmbedder {
    pub fn new(name: impl Into<String>, input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let projection = SeededRng::new(seed).normal_matrix(input_dim, output_dim, 1.0 / (input_dim as f64).sqrt());
        Self { name: name.into(), projection }
    }

    pub fn from_projection(name: impl Into<String>, projection: Matrix2D) -> Self {
        Self { name: name.into(), projection }
    }
}

impl Embedder for LinearEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.projection.cols()
    }

    fn embed(&self, tokens: &Matrix2D) -> Result<Vec<f64>> {
        if tokens.cols() != self.projection.rows() || tokens.rows() == 0 {
            return Err(Error::shape("embed", tokens.shape(), self.projection.shape()));
        }
        let pooled = Matrix2D::new(1, tokens.cols(), tokens.column_means())?;
        Ok(pooled.matmul(&self.projection)?.into_data())
    }
}

/// Mean cosine similarity between the candidate and each present condition.
pub fn content_fidelity(candidate: &Matrix2D, cond: &ConditionSet, embedder: &dyn Embedder) -> Result<f64> {
    let target = embedder.embed(candidate)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in cond.present() {
        total += cosine_sim(&target, &embedder.embed(c)?)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("content fidelity needs at least one condition".into()));
    }
    Ok(total / count as f64)
}

/// Cosine similarity between the candidate's image embedding and the prompt's
/// text embedding.
pub fn textual_alignment(
    candidate: &Matrix2D,
    prompt: &Matrix2D,
    image: &dyn Embedder,
    text: &dyn Embedder,
) -> Result<f64> {
    cosine_sim(&image.embed(candidate)?, &text.embed(prompt)?)
}
