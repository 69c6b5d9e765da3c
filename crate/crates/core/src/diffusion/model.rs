use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora_attention::{
    attend, attend_backward, cross_attention_tape, frozen_self_attention_tape, AttentionBlockParams, AttentionTape,
    ConditionSet, Projections, TextAttention,
};
use crate::numerics::{Matrix2D, SeededRng};
use crate::trait_router::{route_backward, route_with_noise, ExpertBank, GateParams, RouteTape, RoutingTrace};

use super::schedule::ScheduleConfig;

/// How the network output `h_L` becomes the noise prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputParam {
    /// `ε̂ = h_L`.
    Epsilon,
    /// `ε̂ = √(1−ᾱ_t) z_t + √ᾱ_t h_L`, i.e. `h_L` estimates the velocity
    /// `√ᾱ_t ε − √(1−ᾱ_t) z₀` under the given schedule.
    Velocity(ScheduleConfig),
}

/// Shape and initialization of a [`DenoiserModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_tokens: usize,
    pub dim: usize,
    /// Token count of a null-filled condition slot.
    pub condition_tokens: usize,
    pub text_tokens: usize,
    pub layers: usize,
    pub conditions: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    /// Std of the frozen value projections, relative to `1/√d`.
    pub value_gain: f64,
    /// Std of each expert's output layer at initialization.
    pub expert_out_std: f64,
    pub output: OutputParam,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_tokens: 16,
            dim: 8,
            condition_tokens: 4,
            text_tokens: 2,
            layers: 2,
            conditions: 2,
            experts: crate::trait_router::DEFAULT_EXPERTS,
            top_k: crate::trait_router::DEFAULT_TOP_K,
            hidden: 16,
            lora_rank: 4,
            lora_scaling: 1.0,
            value_gain: 0.5,
            expert_out_std: 0.02,
            output: OutputParam::Velocity(ScheduleConfig::default()),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_tokens", self.latent_tokens),
            ("dim", self.dim),
            ("condition_tokens", self.condition_tokens),
            ("text_tokens", self.text_tokens),
            ("layers", self.layers),
            ("conditions", self.conditions),
            ("experts", self.experts),
            ("hidden", self.hidden),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!("top_k must be in 1..={}, got {}", self.experts, self.top_k)));
        }
        if let OutputParam::Velocity(s) = &self.output {
            s.validate()?;
        }
        Ok(())
    }

    /// `(skip, scale)` with `ε̂ = skip · z_t + scale · h_L`.
    fn output_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        match &self.output {
            OutputParam::Epsilon => Ok((0.0, 1.0)),
            OutputParam::Velocity(s) => {
                if t >= s.steps {
                    return Err(Error::Config(format!("timestep {t} outside 0..{}", s.steps)));
                }
                let ab = s.alpha_bar(t);
                Ok(((1.0 - ab).sqrt(), ab.sqrt()))
            }
        }
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.latent_tokens, self.dim)
    }
}

/// One depth level: fitting attention, denoiser attention, and a gate plus
/// expert bank per condition stream, plus the text stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserLayer {
    pub attn: AttentionBlockParams,
    pub gates: Vec<GateParams>,
    pub experts: Vec<ExpertBank>,
    pub text: TextAttention,
}

/// The toy conditional noise predictor.
///
/// Fitting stack (per condition, layer `l`): `F^{l+1} = F^l + isoattn_l(F^l)`.
/// Denoising stack with `a_l = h_l + temb(t)`:
/// `h_{l+1} = h_l + selfattn(a_l) + Σ_i route_i(a_l + cross_i(a_l, F_i^{l+1})) + textattn(a_l)`.
/// Each router sees its stream in residual form so experts can read the
/// latent token and timestep as well as the attended condition content.
/// The stack starts from `h_0 = z_t`; [`OutputParam`] maps `h_L` to the
/// noise prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub layers: Vec<DenoiserLayer>,
    /// Learned `1 × d` embedding broadcast into dropped condition slots.
    pub null_embedding: Matrix2D,
}

/// Pre-drawn gate noise, indexed `[layer][stream]`, each `m × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNoise(pub Vec<Vec<Matrix2D>>);

impl GateNoise {
    pub fn draw(config: &DenoiserConfig, rng: &mut SeededRng) -> Self {
        GateNoise(
            (0..config.layers)
                .map(|_| {
                    (0..config.conditions)
                        .map(|_| rng.normal_matrix(config.latent_tokens, config.experts, 1.0))
                        .collect()
                })
                .collect(),
        )
    }
}

/// Sinusoidal embedding of the timestep, one value per feature.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / dim as f64);
            let angle = t as f64 * freq;
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

struct LayerTape {
    self_attn: AttentionTape,
    cross: Vec<AttentionTape>,
    route: Vec<RouteTape>,
    text: Option<AttentionTape>,
}

/// Everything the reverse pass needs from one forward evaluation.
pub struct ForwardTape {
    null_slots: Vec<bool>,
    fit: Vec<Vec<AttentionTape>>,
    layers: Vec<LayerTape>,
    out_scale: f64,
    pub traces: Vec<RoutingTrace>,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let d = config.dim;
        let qk_std = 1.0 / (d as f64).sqrt();
        let v_std = config.value_gain * qk_std;
        let layers = (0..config.layers)
            .map(|_| -> Result<DenoiserLayer> {
                let fit_base = Projections::random(d, qk_std, qk_std, &mut rng);
                let base = Projections::random(d, qk_std, v_std, &mut rng);
                let attn = AttentionBlockParams::new(
                    d,
                    config.conditions,
                    config.lora_rank,
                    config.lora_scaling,
                    fit_base,
                    base,
                    &mut rng,
                );
                let mut gates = Vec::with_capacity(config.conditions);
                let mut experts = Vec::with_capacity(config.conditions);
                for _ in 0..config.conditions {
                    gates.push(GateParams::random(d, config.experts, config.top_k, &mut rng)?);
                    experts.push(ExpertBank::random(config.experts, d, config.hidden, config.expert_out_std, &mut rng));
                }
                let mut text = TextAttention::random(d, config.lora_rank, config.lora_scaling, &mut rng);
                text.base.v = rng.normal_matrix(d, d, v_std);
                Ok(DenoiserLayer { attn, gates, experts, text })
            })
            .collect::<Result<Vec<_>>>()?;
        let null_embedding = rng.normal_matrix(1, d, 0.1);
        Ok(Self { config, layers, null_embedding })
    }

    /// A structurally identical model with every matrix zeroed; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            for m in l.attn.frozen_mut().into_iter().chain(l.text.frozen_mut()) {
                m.data_mut().fill(0.0);
            }
        }
        for m in out.trainable_mut() {
            m.data_mut().fill(0.0);
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Matrix2D> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.attn.trainable());
            for g in &l.gates {
                out.push(&g.w_g);
                out.push(&g.w_noise);
            }
            for e in &l.experts {
                out.extend(e.matrices());
            }
            out.extend(l.text.trainable());
        }
        out.push(&self.null_embedding);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix2D> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.attn.trainable_mut());
            for g in &mut l.gates {
                out.push(&mut g.w_g);
                out.push(&mut g.w_noise);
            }
            for e in &mut l.experts {
                out.extend(e.matrices_mut());
            }
            out.extend(l.text.trainable_mut());
        }
        out.push(&mut self.null_embedding);
        out
    }

    pub fn frozen(&self) -> Vec<&Matrix2D> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.attn.frozen());
            out.extend(l.text.frozen());
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|m| m.len()).sum()
    }

    pub fn trainable_vector(&self) -> Vec<f64> {
        self.trainable().iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn set_trainable_vector(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.trainable_count() {
            return Err(Error::Data(format!(
                "expected {} trainable values, got {}",
                self.trainable_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for m in self.trainable_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn frozen_hash(&self) -> String {
        hash_matrices(&self.frozen())
    }

    pub fn trainable_hash(&self) -> String {
        hash_matrices(&self.trainable())
    }

    /// Hash over every parameter, frozen first.
    pub fn param_hash(&self) -> String {
        let mut all = self.frozen();
        all.extend(self.trainable());
        hash_matrices(&all)
    }

    /// Zeroes every adapter up-projection, restoring the frozen weights exactly.
    pub fn reset_adapters(&mut self) {
        for l in &mut self.layers {
            for a in &mut l.attn.fit_lora {
                for ad in [&mut a.q, &mut a.k, &mut a.v] {
                    ad.up.data_mut().fill(0.0);
                }
            }
            for a in &mut l.attn.cross_lora {
                a.k.up.data_mut().fill(0.0);
                a.v.up.data_mut().fill(0.0);
            }
            l.text.lora.k.up.data_mut().fill(0.0);
            l.text.lora.v.up.data_mut().fill(0.0);
        }
    }

    /// Makes every expert output zero.
    pub fn silence_experts(&mut self) {
        for l in &mut self.layers {
            for bank in &mut l.experts {
                for e in &mut bank.experts {
                    e.silence();
                }
            }
        }
    }

    fn condition_slots(&self, cond: Option<&ConditionSet>) -> Result<(Vec<Matrix2D>, Vec<bool>)> {
        let n = self.config.conditions;
        let d = self.config.dim;
        let given = cond.map_or(0, |c| c.features.len());
        if given > n {
            return Err(Error::Config(format!("{given} conditions supplied, model has {n} slots")));
        }
        let null = Matrix2D::broadcast_row(self.null_embedding.row(0), self.config.condition_tokens);
        let mut slots = Vec::with_capacity(n);
        let mut null_flags = Vec::with_capacity(n);
        for i in 0..n {
            match cond.and_then(|c| c.features.get(i)).and_then(Option::as_ref) {
                Some(f) => {
                    if f.cols() != d || f.rows() == 0 {
                        return Err(Error::shape("condition features", f.shape(), (f.rows(), d)));
                    }
                    slots.push(f.clone());
                    null_flags.push(false);
                }
                None => {
                    slots.push(null.clone());
                    null_flags.push(true);
                }
            }
        }
        Ok((slots, null_flags))
    }

    /// Full forward pass keeping a tape. `noise` enables noisy gating.
    pub fn forward_tape(
        &self,
        z_t: &Matrix2D,
        cond: Option<&ConditionSet>,
        t: usize,
        noise: Option<&GateNoise>,
    ) -> Result<(Matrix2D, ForwardTape)> {
        let cfg = &self.config;
        if z_t.shape() != cfg.latent_shape() {
            return Err(Error::shape("predict_noise", z_t.shape(), cfg.latent_shape()));
        }
        let text = cond.and_then(|c| c.text.as_ref());
        if let Some(tx) = text {
            if tx.cols() != cfg.dim || tx.rows() == 0 {
                return Err(Error::shape("text tokens", tx.shape(), (tx.rows(), cfg.dim)));
            }
        }
        if let Some(GateNoise(n)) = noise {
            let ok = n.len() == cfg.layers
                && n.iter().all(|l| {
                    l.len() == cfg.conditions && l.iter().all(|m| m.shape() == (cfg.latent_tokens, cfg.experts))
                });
            if !ok {
                return Err(Error::Config("gate noise does not match model shape".into()));
            }
        }
        let (skip, out_scale) = cfg.output_coefficients(t)?;
        let (mut feats, null_slots) = self.condition_slots(cond)?;

        // fitting stack
        let mut fit = Vec::with_capacity(cfg.layers);
        let mut fit_out = Vec::with_capacity(cfg.layers);
        for layer in &self.layers {
            let p = &layer.attn;
            let mut tapes = Vec::with_capacity(feats.len());
            let mut next = Vec::with_capacity(feats.len());
            for (i, f) in feats.iter().enumerate() {
                let [wq, wk, wv] = p.fit_weights(i);
                let (o, tape) = attend(f, f, wq, wk, wv, p.scale());
                let mut nf = f.clone();
                nf.add_assign(&o);
                next.push(nf);
                tapes.push(tape);
            }
            fit.push(tapes);
            fit_out.push(next.clone());
            feats = next;
        }

        // denoising stack
        let temb = timestep_embedding(t, cfg.dim);
        let mut h = z_t.clone();
        let mut layer_tapes = Vec::with_capacity(cfg.layers);
        let mut traces = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let a = h.add_row(&temb)?;
            let (s, self_attn) = frozen_self_attention_tape(&a, &layer.attn);
            let mut next = h.zip_map(&s, |x, y| x + y);
            let mut cross = Vec::with_capacity(cfg.conditions);
            let mut route = Vec::with_capacity(cfg.conditions);
            for i in 0..cfg.conditions {
                let (c, ct) = cross_attention_tape(&a, &fit_out[l][i], &layer.attn, i);
                let u = a.zip_map(&c, |x, y| x + y);
                let n = noise.filter(|_| layer.gates[i].noise_enabled).map(|GateNoise(n)| &n[l][i]);
                let (fp, trace, rt) = route_with_noise(&u, &layer.gates[i], &layer.experts[i], n, l, i);
                next.add_assign(&fp);
                cross.push(ct);
                route.push(rt);
                traces.push(trace);
            }
            let text_tape = text.map(|tx| {
                let (o, tape) = layer.text.tape(&a, tx);
                next.add_assign(&o);
                tape
            });
            layer_tapes.push(LayerTape { self_attn, cross, route, text: text_tape });
            h = next;
        }
        let out = if skip == 0.0 { h } else { z_t.zip_map(&h, |z, v| skip * z + out_scale * v) };
        if !out.is_finite() {
            return Err(Error::Numeric("non-finite noise prediction".into()));
        }
        Ok((out, ForwardTape { null_slots, fit, layers: layer_tapes, out_scale, traces }))
    }

    /// Noise prediction with deterministic (noise-free) gating.
    pub fn predict(&self, z_t: &Matrix2D, cond: Option<&ConditionSet>, t: usize) -> Result<Matrix2D> {
        Ok(self.forward_tape(z_t, cond, t, None)?.0)
    }

    /// Reverse pass: accumulates `∂L/∂θ` for trainable parameters into `grad`
    /// given `d_out = ∂L/∂prediction`. Frozen matrices in `grad` stay zero.
    pub fn backward(&self, tape: &ForwardTape, d_out: &Matrix2D, grad: &mut DenoiserModel) {
        let cfg = &self.config;
        let mut dh = d_out.scale(tape.out_scale);
        let n = cfg.conditions;
        let mut d_fit: Vec<Vec<Option<Matrix2D>>> = vec![vec![None; n]; cfg.layers + 1];

        for l in (0..cfg.layers).rev() {
            let layer = &self.layers[l];
            let lt = &tape.layers[l];
            let gl = &mut grad.layers[l];

            let sg = attend_backward(&lt.self_attn, &dh);
            let mut da = sg.dx;
            da.add_assign(&sg.dy);

            for i in 0..n {
                let du = route_backward(
                    &lt.route[i],
                    &layer.gates[i],
                    &layer.experts[i],
                    &dh,
                    &mut gl.gates[i],
                    &mut gl.experts[i],
                );
                let cg = attend_backward(&lt.cross[i], &du);
                da.add_assign(&du);
                da.add_assign(&cg.dx);
                let lora = &layer.attn.cross_lora[i];
                lora.k.accumulate(&cg.dwk, &mut gl.attn.cross_lora[i].k);
                lora.v.accumulate(&cg.dwv, &mut gl.attn.cross_lora[i].v);
                accumulate_slot(&mut d_fit[l + 1][i], cg.dy);
            }
            if let Some(tt) = &lt.text {
                let tg = attend_backward(tt, &dh);
                da.add_assign(&tg.dx);
                layer.text.lora.k.accumulate(&tg.dwk, &mut gl.text.lora.k);
                layer.text.lora.v.accumulate(&tg.dwv, &mut gl.text.lora.v);
            }
            dh.add_assign(&da);
        }

        for i in 0..n {
            let Some(mut g) = d_fit[cfg.layers][i].take() else { continue };
            for l in (0..cfg.layers).rev() {
                let fg = attend_backward(&tape.fit[l][i], &g);
                let lora = &self.layers[l].attn.fit_lora[i];
                let gl = &mut grad.layers[l].attn.fit_lora[i];
                lora.q.accumulate(&fg.dwq, &mut gl.q);
                lora.k.accumulate(&fg.dwk, &mut gl.k);
                lora.v.accumulate(&fg.dwv, &mut gl.v);
                g.add_assign(&fg.dx);
                g.add_assign(&fg.dy);
                if let Some(extra) = &d_fit[l][i] {
                    g.add_assign(extra);
                }
            }
            if tape.null_slots[i] {
                for (acc, v) in grad.null_embedding.data_mut().iter_mut().zip(g.column_sums()) {
                    *acc += v;
                }
            }
        }
    }

    /// The frozen backbone alone: `h_{l+1} = h_l + selfattn(h_l + temb)`,
    /// mapped through the same output parameterization.
    pub fn frozen_backbone(&self, z_t: &Matrix2D, t: usize) -> Result<Matrix2D> {
        let (skip, scale) = self.config.output_coefficients(t)?;
        let temb = timestep_embedding(t, self.config.dim);
        let mut h = z_t.clone();
        for layer in &self.layers {
            let a = h.add_row(&temb)?;
            let (s, _) = frozen_self_attention_tape(&a, &layer.attn);
            h = h.zip_map(&s, |x, y| x + y);
        }
        Ok(if skip == 0.0 { h } else { z_t.zip_map(&h, |z, v| skip * z + scale * v) })
    }
}

fn accumulate_slot(slot: &mut Option<Matrix2D>, g: Matrix2D) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// SHA-256 over shapes and the bit patterns of every value.
pub fn hash_matrices(ms: &[&Matrix2D]) -> String {
    let mut h = Sha256::new();
    for m in ms {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor {
    fn latent_shape(&self) -> (usize, usize);

    fn predict_noise(&self, z_t: &Matrix2D, cond: Option<&ConditionSet>, t: usize) -> Result<Matrix2D>;

    /// Prediction together with the routing decisions made on the way, if any.
    fn predict_traced(
        &self,
        z_t: &Matrix2D,
        cond: Option<&ConditionSet>,
        t: usize,
    ) -> Result<(Matrix2D, Vec<RoutingTrace>)> {
        Ok((self.predict_noise(z_t, cond, t)?, Vec::new()))
    }
}

impl NoisePredictor for DenoiserModel {
    fn latent_shape(&self) -> (usize, usize) {
        self.config.latent_shape()
    }

    fn predict_noise(&self, z_t: &Matrix2D, cond: Option<&ConditionSet>, t: usize) -> Result<Matrix2D> {
        self.predict(z_t, cond, t)
    }

    fn predict_traced(
        &self,
        z_t: &Matrix2D,
        cond: Option<&ConditionSet>,
        t: usize,
    ) -> Result<(Matrix2D, Vec<RoutingTrace>)> {
        let (out, tape) = self.forward_tape(z_t, cond, t, None)?;
        Ok((out, tape.traces))
    }
}
