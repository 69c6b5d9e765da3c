//! Low-rank adapted projections and the three attention forms of the
//! conditioning block:
//!
//! * isolated per-condition self-attention in the fitting stack, where each
//!   condition attends only to itself through its own adapter set;
//! * per-condition cross-attention streams from the latent tokens `Z` to a
//!   condition's features, with adapters on the key and value projections only;
//! * the injection combine `Z_out = selfattn(Z) + Σ F'_i` with a frozen
//!   self-attention on `Z`.
//!
//! All attention is single-head with logits scaled by `1/√d`. Every forward
//! function has a matching backward over a cached tape so the training code can
//! run exact reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix2D, SeededRng};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Standard deviation of the adapter down-projection at initialization.
pub const LORA_DOWN_INIT_STD: f64 = 0.02;

/// Low-rank residual `scaling · down × up` for a frozen weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub down: Matrix2D,
    pub up: Matrix2D,
    pub scaling: f64,
}

impl LoraAdapter {
    /// Gaussian `down`, zero `up`: the adapted weight equals the base at step 0.
    pub fn new(d_in: usize, d_out: usize, rank: usize, scaling: f64, rng: &mut SeededRng) -> Self {
        Self { down: rng.normal_matrix(d_in, rank, LORA_DOWN_INIT_STD), up: Matrix2D::zeros(rank, d_out), scaling }
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            down: Matrix2D::zeros(self.down.rows(), self.down.cols()),
            up: Matrix2D::zeros(self.up.rows(), self.up.cols()),
            scaling: self.scaling,
        }
    }

    pub fn delta(&self) -> Matrix2D {
        self.down.mm(&self.up).scale(self.scaling)
    }

    pub fn effective(&self, base: &Matrix2D) -> Matrix2D {
        base.zip_map(&self.delta(), |b, d| b + d)
    }

    /// Pushes a gradient with respect to the effective weight into `grad`.
    pub(crate) fn accumulate(&self, d_weight: &Matrix2D, grad: &mut LoraAdapter) {
        grad.down.axpy(self.scaling, &d_weight.mm_nt(&self.up));
        grad.up.axpy(self.scaling, &self.down.mm_tn(d_weight));
    }

    pub(crate) fn matrices(&self) -> [&Matrix2D; 2] {
        [&self.down, &self.up]
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Matrix2D; 2] {
        [&mut self.down, &mut self.up]
    }
}

/// A frozen weight together with its trainable adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLinear {
    pub base: Matrix2D,
    pub adapter: LoraAdapter,
}

impl LoraLinear {
    pub fn new(base: Matrix2D, rank: usize, scaling: f64, rng: &mut SeededRng) -> Self {
        let adapter = LoraAdapter::new(base.rows(), base.cols(), rank, scaling, rng);
        Self { base, adapter }
    }

    pub fn rank(&self) -> usize {
        self.adapter.rank()
    }

    pub fn effective_weight(&self) -> Matrix2D {
        self.adapter.effective(&self.base)
    }

    pub fn forward(&self, x: &Matrix2D) -> Result<Matrix2D> {
        x.matmul(&self.effective_weight())
    }
}

/// Visual conditions plus an optional text token sequence for one generation.
///
/// A `None` feature slot is a dropped condition; the model substitutes its
/// learned null embedding. A `None` text disables the text stream. Slot order
/// is significant: slot `i` always uses adapter set `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub features: Vec<Option<Matrix2D>>,
    pub text: Option<Matrix2D>,
}

impl ConditionSet {
    pub fn new(features: Vec<Matrix2D>, text: Option<Matrix2D>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Config("a condition set needs at least one condition".into()));
        }
        let d = features[0].cols();
        if let Some(bad) = features.iter().find(|f| f.cols() != d || f.rows() == 0) {
            return Err(Error::shape("ConditionSet::new", features[0].shape(), bad.shape()));
        }
        if let Some(t) = &text {
            if t.cols() != d {
                return Err(Error::shape("ConditionSet::new (text)", features[0].shape(), t.shape()));
            }
        }
        Ok(Self { features: features.into_iter().map(Some).collect(), text })
    }

    /// The fully unconditional bundle: no conditions and no text.
    pub fn empty() -> Self {
        Self { features: Vec::new(), text: None }
    }

    pub fn condition_count(&self) -> usize {
        self.features.len()
    }

    pub fn present(&self) -> impl Iterator<Item = &Matrix2D> {
        self.features.iter().flatten()
    }

    pub fn is_unconditional(&self) -> bool {
        self.features.iter().all(Option::is_none) && self.text.is_none()
    }
}

/// Frozen query/key/value projections, each `d × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projections {
    pub q: Matrix2D,
    pub k: Matrix2D,
    pub v: Matrix2D,
}

impl Projections {
    pub fn random(d: usize, qk_std: f64, v_std: f64, rng: &mut SeededRng) -> Self {
        Self {
            q: rng.normal_matrix(d, d, qk_std),
            k: rng.normal_matrix(d, d, qk_std),
            v: rng.normal_matrix(d, d, v_std),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self { q: Matrix2D::identity(d), k: Matrix2D::identity(d), v: Matrix2D::identity(d) }
    }

    pub(crate) fn matrices(&self) -> [&Matrix2D; 3] {
        [&self.q, &self.k, &self.v]
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Matrix2D; 3] {
        [&mut self.q, &mut self.k, &mut self.v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkvAdapters {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvAdapters {
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

/// Parameters of one conditioning block.
///
/// `fit_base`/`fit_lora` drive the isolated self-attention of the fitting
/// stack. `base` is the denoiser's frozen attention: its query, key and value
/// serve the self-attention on `Z`, and the same key/value weights plus the
/// per-condition `cross_lora` produce each condition's cross-attention stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlockParams {
    pub dim: usize,
    pub fit_base: Projections,
    pub fit_lora: Vec<QkvAdapters>,
    pub base: Projections,
    pub cross_lora: Vec<KvAdapters>,
}

impl AttentionBlockParams {
    pub fn new(
        dim: usize,
        conditions: usize,
        rank: usize,
        scaling: f64,
        fit_base: Projections,
        base: Projections,
        rng: &mut SeededRng,
    ) -> Self {
        let mut lora = || LoraAdapter::new(dim, dim, rank, scaling, rng);
        let fit_lora = (0..conditions).map(|_| QkvAdapters { q: lora(), k: lora(), v: lora() }).collect();
        let cross_lora = (0..conditions).map(|_| KvAdapters { k: lora(), v: lora() }).collect();
        Self { dim, fit_base, fit_lora, base, cross_lora }
    }

    pub fn random(dim: usize, conditions: usize, rank: usize, scaling: f64, rng: &mut SeededRng) -> Self {
        let qk_std = 1.0 / (dim as f64).sqrt();
        let fit_base = Projections::random(dim, qk_std, qk_std, rng);
        let base = Projections::random(dim, qk_std, qk_std, rng);
        Self::new(dim, conditions, rank, scaling, fit_base, base, rng)
    }

    pub fn condition_count(&self) -> usize {
        self.fit_lora.len()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix2D| Matrix2D::zeros(m.rows(), m.cols());
        let zp = |p: &Projections| Projections { q: z(&p.q), k: z(&p.k), v: z(&p.v) };
        Self {
            dim: self.dim,
            fit_base: zp(&self.fit_base),
            fit_lora: self
                .fit_lora
                .iter()
                .map(|a| QkvAdapters { q: a.q.zeros_like(), k: a.k.zeros_like(), v: a.v.zeros_like() })
                .collect(),
            base: zp(&self.base),
            cross_lora: self
                .cross_lora
                .iter()
                .map(|a| KvAdapters { k: a.k.zeros_like(), v: a.v.zeros_like() })
                .collect(),
        }
    }

    pub(crate) fn trainable(&self) -> Vec<&Matrix2D> {
        let mut out = Vec::new();
        for a in &self.fit_lora {
            for ad in [&a.q, &a.k, &a.v] {
                out.extend(ad.matrices());
            }
        }
        for a in &self.cross_lora {
            for ad in [&a.k, &a.v] {
                out.extend(ad.matrices());
            }
        }
        out
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Matrix2D> {
        let mut out = Vec::new();
        for a in &mut self.fit_lora {
            for ad in [&mut a.q, &mut a.k, &mut a.v] {
                out.extend(ad.matrices_mut());
            }
        }
        for a in &mut self.cross_lora {
            for ad in [&mut a.k, &mut a.v] {
                out.extend(ad.matrices_mut());
            }
        }
        out
    }

    pub(crate) fn frozen(&self) -> Vec<&Matrix2D> {
        let mut out: Vec<&Matrix2D> = self.fit_base.matrices().to_vec();
        out.extend(self.base.matrices());
        out
    }

    pub(crate) fn frozen_mut(&mut self) -> Vec<&mut Matrix2D> {
        let [a, b, c] = self.fit_base.matrices_mut();
        let [d, e, f] = self.base.matrices_mut();
        vec![a, b, c, d, e, f]
    }

    fn check_condition_index(&self, i: usize) -> Result<()> {
        if i >= self.condition_count() {
            return Err(Error::Config(format!(
                "condition index {i} out of range for {} adapter sets",
                self.condition_count()
            )));
        }
        Ok(())
    }

    fn check_width(&self, op: &'static str, m: &Matrix2D) -> Result<()> {
        if m.cols() != self.dim {
            return Err(Error::shape(op, m.shape(), (m.rows(), self.dim)));
        }
        Ok(())
    }

    /// Effective (frozen + adapter) fitting-stack projections for condition `i`.
    pub(crate) fn fit_weights(&self, i: usize) -> [Matrix2D; 3] {
        let a = &self.fit_lora[i];
        [a.q.effective(&self.fit_base.q), a.k.effective(&self.fit_base.k), a.v.effective(&self.fit_base.v)]
    }

    /// Effective cross-stream key/value projections for condition `i`.
    pub(crate) fn cross_weights(&self, i: usize) -> [Matrix2D; 2] {
        let a = &self.cross_lora[i];
        [a.k.effective(&self.base.k), a.v.effective(&self.base.v)]
    }
}

/// Versioned on-disk form of [`AttentionBlockParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionCheckpoint {
    pub schema_version: u32,
    pub params: AttentionBlockParams,
}

impl AttentionBlockParams {
    pub fn to_json(&self) -> Result<String> {
        let ck = AttentionCheckpoint { schema_version: CHECKPOINT_SCHEMA_VERSION, params: self.clone() };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: AttentionCheckpoint = serde_json::from_str(text)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Data(format!("unsupported attention schema {}", ck.schema_version)));
        }
        Ok(ck.params)
    }
}

/// Tape of one attention evaluation `softmax(X Wq (Y Wk)ᵀ · s) Y Wv`.
#[derive(Debug, Clone)]
pub(crate) struct AttentionTape {
    x: Matrix2D,
    y: Matrix2D,
    wq: Matrix2D,
    wk: Matrix2D,
    wv: Matrix2D,
    q: Matrix2D,
    k: Matrix2D,
    v: Matrix2D,
    probs: Matrix2D,
    scale: f64,
}

pub(crate) struct AttentionGrads {
    pub dx: Matrix2D,
    pub dy: Matrix2D,
    pub dwq: Matrix2D,
    pub dwk: Matrix2D,
    pub dwv: Matrix2D,
}

#[cfg(test)]
impl AttentionTape {
    pub fn probs(&self) -> &Matrix2D {
        &self.probs
    }
}

/// Single-head attention with queries from `x` and keys/values from `y`.
pub(crate) fn attend(
    x: &Matrix2D,
    y: &Matrix2D,
    wq: Matrix2D,
    wk: Matrix2D,
    wv: Matrix2D,
    scale: f64,
) -> (Matrix2D, AttentionTape) {
    let q = x.mm(&wq);
    let k = y.mm(&wk);
    let v = y.mm(&wv);
    let probs = q.mm_nt(&k).softmax_rows(scale);
    let out = probs.mm(&v);
    let tape = AttentionTape { x: x.clone(), y: y.clone(), wq, wk, wv, q, k, v, probs, scale };
    (out, tape)
}

pub(crate) fn attend_backward(tape: &AttentionTape, d_out: &Matrix2D) -> AttentionGrads {
    let dv = tape.probs.mm_tn(d_out);
    let dp = d_out.mm_nt(&tape.v);
    // softmax backward, row by row
    let mut ds = Matrix2D::zeros(dp.rows(), dp.cols());
    for r in 0..dp.rows() {
        let p = tape.probs.row(r);
        let g = dp.row(r);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (c, o) in ds.row_mut(r).iter_mut().enumerate() {
            *o = tape.scale * p[c] * (g[c] - inner);
        }
    }
    let dq = ds.mm(&tape.k);
    let dk = ds.mm_tn(&tape.q);
    let dwq = tape.x.mm_tn(&dq);
    let dwk = tape.y.mm_tn(&dk);
    let dwv = tape.y.mm_tn(&dv);
    let dx = dq.mm_nt(&tape.wq);
    let mut dy = dk.mm_nt(&tape.wk);
    dy.add_assign(&dv.mm_nt(&tape.wv));
    AttentionGrads { dx, dy, dwq, dwk, dwv }
}

/// Per-condition self-attention: condition `i` attends only over its own tokens
/// using its own adapter set. No information crosses between conditions.
pub fn isolated_self_attention(features: &[Matrix2D], params: &AttentionBlockParams) -> Result<Vec<Matrix2D>> {
    if features.len() != params.condition_count() {
        return Err(Error::Config(format!(
            "{} condition feature maps but {} adapter sets",
            features.len(),
            params.condition_count()
        )));
    }
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            params.check_width("isolated_self_attention", f)?;
            let [wq, wk, wv] = params.fit_weights(i);
            Ok(attend(f, f, wq, wk, wv, params.scale()).0)
        })
        .collect()
}

/// Cross-attention stream `U_i = softmax(Q K_iᵀ/√d) V_i` with `Q = Z W_q` (no
/// adapter) and adapted key/value projections of condition `i`.
pub fn cross_attention_stream(
    z: &Matrix2D,
    f_i: &Matrix2D,
    params: &AttentionBlockParams,
    i: usize,
) -> Result<Matrix2D> {
    params.check_condition_index(i)?;
    params.check_width("cross_attention_stream (z)", z)?;
    if f_i.cols() != z.cols() {
        return Err(Error::shape("cross_attention_stream", z.shape(), f_i.shape()));
    }
    Ok(cross_attention_tape(z, f_i, params, i).0)
}

pub(crate) fn cross_attention_tape(
    z: &Matrix2D,
    f_i: &Matrix2D,
    params: &AttentionBlockParams,
    i: usize,
) -> (Matrix2D, AttentionTape) {
    let [wk, wv] = params.cross_weights(i);
    attend(z, f_i, params.base.q.clone(), wk, wv, params.scale())
}

/// Frozen self-attention on the latent tokens, `softmax(Z W_q (Z W_k)ᵀ/√d) Z W_v`.
pub fn frozen_self_attention(z: &Matrix2D, params: &AttentionBlockParams) -> Result<Matrix2D> {
    params.check_width("frozen_self_attention", z)?;
    Ok(frozen_self_attention_tape(z, params).0)
}

pub(crate) fn frozen_self_attention_tape(z: &Matrix2D, params: &AttentionBlockParams) -> (Matrix2D, AttentionTape) {
    attend(z, z, params.base.q.clone(), params.base.k.clone(), params.base.v.clone(), params.scale())
}

/// `selfattn(Z) + Σ refined_i`.
pub fn inject_and_combine(z: &Matrix2D, refined: &[Matrix2D], params: &AttentionBlockParams) -> Result<Matrix2D> {
    let mut out = frozen_self_attention(z, params)?;
    for f in refined {
        if !f.same_shape(z) {
            return Err(Error::shape("inject_and_combine", z.shape(), f.shape()));
        }
        out.add_assign(f);
    }
    Ok(out)
}

/// Text cross-attention with frozen projections and a single adapter pair on
/// key and value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextAttention {
    pub base: Projections,
    pub lora: KvAdapters,
}

impl TextAttention {
    pub fn random(dim: usize, rank: usize, scaling: f64, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let base = Projections::random(dim, std, std, rng);
        let lora = KvAdapters {
            k: LoraAdapter::new(dim, dim, rank, scaling, rng),
            v: LoraAdapter::new(dim, dim, rank, scaling, rng),
        };
        Self { base, lora }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix2D| Matrix2D::zeros(m.rows(), m.cols());
        Self {
            base: Projections { q: z(&self.base.q), k: z(&self.base.k), v: z(&self.base.v) },
            lora: KvAdapters { k: self.lora.k.zeros_like(), v: self.lora.v.zeros_like() },
        }
    }

    pub(crate) fn tape(&self, z: &Matrix2D, text: &Matrix2D) -> (Matrix2D, AttentionTape) {
        let scale = 1.0 / (z.cols() as f64).sqrt();
        attend(
            z,
            text,
            self.base.q.clone(),
            self.lora.k.effective(&self.base.k),
            self.lora.v.effective(&self.base.v),
            scale,
        )
    }

    pub(crate) fn trainable(&self) -> Vec<&Matrix2D> {
        let mut v: Vec<&Matrix2D> = self.lora.k.matrices().to_vec();
        v.extend(self.lora.v.matrices());
        v
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Matrix2D> {
        let KvAdapters { k, v } = &mut self.lora;
        let mut out: Vec<&mut Matrix2D> = k.matrices_mut().into_iter().collect();
        out.extend(v.matrices_mut());
        out
    }

    pub(crate) fn frozen(&self) -> Vec<&Matrix2D> {
        self.base.matrices().to_vec()
    }

    pub(crate) fn frozen_mut(&mut self) -> Vec<&mut Matrix2D> {
        self.base.matrices_mut().into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn randomize_adapters(p: &mut AttentionBlockParams, rng: &mut SeededRng) {
        for m in p.trainable_mut() {
            *m = rng.normal_matrix(m.rows(), m.cols(), 0.3);
        }
    }

    /// Textbook attention evaluated one query at a time with explicit loops.
    fn naive_attention(x: &Matrix2D, y: &Matrix2D, wq: &Matrix2D, wk: &Matrix2D, wv: &Matrix2D) -> Matrix2D {
        let d = x.cols();
        let proj = |m: &Matrix2D, w: &Matrix2D, r: usize| -> Vec<f64> {
            (0..w.cols()).map(|c| (0..d).map(|p| m.get(r, p) * w.get(p, c)).sum()).collect()
        };
        let mut out = Matrix2D::zeros(x.rows(), wv.cols());
        for i in 0..x.rows() {
            let q = proj(x, wq, i);
            let logits: Vec<f64> = (0..y.rows())
                .map(|j| {
                    let k = proj(y, wk, j);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let tot: f64 = w.iter().sum();
            for j in 0..y.rows() {
                let v = proj(y, wv, j);
                for c in 0..wv.cols() {
                    let cur = out.get(i, c);
                    out.set(i, c, cur + w[j] / tot * v[c]);
                }
            }
        }
        out
    }

    #[test]
    fn zero_up_adapter_is_exactly_the_base() {
        let mut rng = SeededRng::new(1);
        let lin = LoraLinear::new(rng.normal_matrix(4, 3, 1.0), 2, 1.0, &mut rng);
        assert_eq!(lin.effective_weight(), lin.base);
        let x = rng.normal_matrix(5, 4, 1.0);
        assert_eq!(lin.forward(&x).unwrap(), x.matmul(&lin.base).unwrap());
    }

    #[test]
    fn single_token_self_attention_returns_value() {
        let mut rng = SeededRng::new(2);
        let p = AttentionBlockParams::random(4, 1, 2, 1.0, &mut rng);
        let f = rng.normal_matrix(1, 4, 1.0);
        let out = isolated_self_attention(std::slice::from_ref(&f), &p).unwrap();
        assert!(out[0].max_abs_diff(&f.matmul(&p.fit_base.v).unwrap()) < 1e-15);
    }

    #[test]
    fn isolation_is_bitwise() {
        let mut rng = SeededRng::new(3);
        let mut p = AttentionBlockParams::random(8, 2, 2, 1.0, &mut rng);
        randomize_adapters(&mut p, &mut rng);
        let f1 = rng.normal_matrix(4, 8, 1.0);
        let f2 = rng.normal_matrix(4, 8, 1.0);
        let a = isolated_self_attention(&[f1.clone(), f2], &p).unwrap();
        let b = isolated_self_attention(&[f1, rng.normal_matrix(4, 8, 5.0)], &p).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn isolated_matches_per_condition_loop() {
        let mut rng = SeededRng::new(4);
        let mut p = AttentionBlockParams::random(8, 2, 3, 0.5, &mut rng);
        randomize_adapters(&mut p, &mut rng);
        let feats = vec![rng.normal_matrix(4, 8, 1.0), rng.normal_matrix(4, 8, 1.0)];
        let got = isolated_self_attention(&feats, &p).unwrap();
        for (i, f) in feats.iter().enumerate() {
            let a = &p.fit_lora[i];
            let w = |ad: &LoraAdapter, base: &Matrix2D| {
                LoraLinear { base: base.clone(), adapter: ad.clone() }.effective_weight()
            };
            let want = naive_attention(f, f, &w(&a.q, &p.fit_base.q), &w(&a.k, &p.fit_base.k), &w(&a.v, &p.fit_base.v));
            assert!(got[i].max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn isolated_rejects_count_mismatch() {
        let mut rng = SeededRng::new(5);
        let p = AttentionBlockParams::random(4, 2, 2, 1.0, &mut rng);
        let f = rng.normal_matrix(3, 4, 1.0);
        assert!(matches!(isolated_self_attention(&[f], &p), Err(Error::Config(_))));
    }

    #[test]
    fn permuting_conditions_with_adapters_permutes_outputs() {
        let mut rng = SeededRng::new(6);
        let mut p = AttentionBlockParams::random(6, 3, 2, 1.0, &mut rng);
        randomize_adapters(&mut p, &mut rng);
        let feats: Vec<Matrix2D> = (0..3).map(|i| rng.normal_matrix(2 + i, 6, 1.0)).collect();
        let out = isolated_self_attention(&feats, &p).unwrap();
        let perm = [2, 0, 1];
        let mut q = p.clone();
        q.fit_lora = perm.iter().map(|&j| p.fit_lora[j].clone()).collect();
        q.cross_lora = perm.iter().map(|&j| p.cross_lora[j].clone()).collect();
        let pf: Vec<Matrix2D> = perm.iter().map(|&j| feats[j].clone()).collect();
        let pout = isolated_self_attention(&pf, &q).unwrap();
        for (slot, &j) in perm.iter().enumerate() {
            assert_eq!(pout[slot], out[j]);
        }
    }

    #[test]
    fn cross_single_key_broadcasts_value() {
        let mut rng = SeededRng::new(7);
        let mut p = AttentionBlockParams::random(4, 1, 2, 1.0, &mut rng);
        randomize_adapters(&mut p, &mut rng);
        let z = rng.normal_matrix(3, 4, 1.0);
        let f = rng.normal_matrix(1, 4, 1.0);
        let u = cross_attention_stream(&z, &f, &p, 0).unwrap();
        let [_, wv] = p.cross_weights(0);
        let v = f.matmul(&wv).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((u.get(r, c) - v.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_identical_keys_give_shared_row() {
        let mut rng = SeededRng::new(8);
        let mut p = AttentionBlockParams::random(4, 1, 2, 1.0, &mut rng);
        p.base = Projections { q: p.base.q.clone(), ..Projections::identity(4) };
        let row = vec![0.5, -1.0, 2.0, 0.25];
        let f = Matrix2D::broadcast_row(&row, 5);
        let u = cross_attention_stream(&rng.normal_matrix(3, 4, 1.0), &f, &p, 0).unwrap();
        for r in 0..3 {
            for (c, want) in row.iter().enumerate() {
                assert!((u.get(r, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_matches_naive_attention() {
        let mut rng = SeededRng::new(9);
        let mut p = AttentionBlockParams::random(4, 2, 2, 1.0, &mut rng);
        randomize_adapters(&mut p, &mut rng);
        let z = rng.normal_matrix(3, 4, 1.0);
        let f = rng.normal_matrix(5, 4, 1.0);
        let u = cross_attention_stream(&z, &f, &p, 1).unwrap();
        let [wk, wv] = p.cross_weights(1);
        let want = naive_attention(&z, &f, &p.base.q, &wk, &wv);
        assert!(u.max_abs_diff(&want) < 1e-10);
        // attention rows are distributions
        let (_, tape) = cross_attention_tape(&z, &f, &p, 1);
        for r in 0..3 {
            assert!((tape.probs().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(cross_attention_stream(&z, &rng.normal_matrix(5, 3, 1.0), &p, 1).is_err());
        assert!(matches!(cross_attention_stream(&z, &f, &p, 2), Err(Error::Config(_))));
    }

    #[test]
    fn combine_cases() {
        let mut rng = SeededRng::new(10);
        let p = AttentionBlockParams::random(4, 3, 2, 1.0, &mut rng);
        let z = rng.normal_matrix(3, 4, 1.0);
        let base = frozen_self_attention(&z, &p).unwrap();
        assert_eq!(inject_and_combine(&z, &[], &p).unwrap(), base);
        let a = rng.normal_matrix(3, 4, 1.0);
        let cancel = inject_and_combine(&z, &[a.clone(), a.scale(-1.0)], &p).unwrap();
        assert!(cancel.max_abs_diff(&base) < 1e-15);

        let refined: Vec<Matrix2D> = (0..3).map(|_| rng.normal_matrix(3, 4, 1.0)).collect();
        let got = inject_and_combine(&z, &refined, &p).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let want = base.get(r, c) + refined[0].get(r, c) + refined[1].get(r, c) + refined[2].get(r, c);
                assert!((got.get(r, c) - want).abs() < 1e-14);
            }
        }
        // linear in each refined map
        for s in [0.5, -3.0] {
            let mut scaled = refined.clone();
            scaled[1] = refined[1].scale(s);
            let lhs = inject_and_combine(&z, &scaled, &p).unwrap().sub(&got).unwrap();
            let rhs = refined[1].scale(s - 1.0);
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
        assert!(inject_and_combine(&z, &[rng.normal_matrix(2, 4, 1.0)], &p).is_err());
    }

    #[test]
    fn cross_condition_gradient_is_zero() {
        let mut rng = SeededRng::new(11);
        let mut p = AttentionBlockParams::random(4, 2, 2, 1.0, &mut rng);
        randomize_adapters(&mut p, &mut rng);
        let f1 = rng.normal_matrix(3, 4, 1.0);
        let f2 = rng.normal_matrix(3, 4, 1.0);
        let probe = rng.normal_matrix(3, 4, 1.0);
        // objective depends only on F_1^new, differentiated w.r.t. F_2
        let g = finite_diff_grad(
            |x| {
                let f2x = Matrix2D::new(3, 4, x.to_vec()).unwrap();
                let out = isolated_self_attention(&[f1.clone(), f2x], &p).unwrap();
                out[0].data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            },
            f2.data(),
            1e-5,
        );
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(12);
        let x = rng.normal_matrix(3, 4, 1.0);
        let y = rng.normal_matrix(5, 4, 1.0);
        let ws: Vec<Matrix2D> = (0..3).map(|_| rng.normal_matrix(4, 4, 0.7)).collect();
        let probe = rng.normal_matrix(3, 4, 1.0);
        let objective = |x: &Matrix2D, y: &Matrix2D, w: &[Matrix2D]| {
            let (o, _) = attend(x, y, w[0].clone(), w[1].clone(), w[2].clone(), 0.5);
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, tape) = attend(&x, &y, ws[0].clone(), ws[1].clone(), ws[2].clone(), 0.5);
        let g = attend_backward(&tape, &probe);

        let num_x = finite_diff_grad(|v| objective(&Matrix2D::new(3, 4, v.to_vec()).unwrap(), &y, &ws), x.data(), 1e-5);
        let num_y = finite_diff_grad(|v| objective(&x, &Matrix2D::new(5, 4, v.to_vec()).unwrap(), &ws), y.data(), 1e-5);
        for (a, b) in g.dx.data().iter().zip(&num_x) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in g.dy.data().iter().zip(&num_y) {
            assert!((a - b).abs() < 1e-8);
        }
        for (idx, dw) in [&g.dwq, &g.dwk, &g.dwv].iter().enumerate() {
            let num = finite_diff_grad(
                |v| {
                    let mut w = ws.clone();
                    w[idx] = Matrix2D::new(4, 4, v.to_vec()).unwrap();
                    objective(&x, &y, &w)
                },
                ws[idx].data(),
                1e-5,
            );
            for (a, b) in dw.data().iter().zip(&num) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn params_json_roundtrip() {
        let mut rng = SeededRng::new(13);
        let mut p = AttentionBlockParams::random(4, 2, 2, 0.5, &mut rng);
        randomize_adapters(&mut p, &mut rng);
        let text = p.to_json().unwrap();
        assert_eq!(AttentionBlockParams::from_json(&text).unwrap(), p);
    }
}
