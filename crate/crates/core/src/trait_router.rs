//! Token-level noisy top-k gating over a bank of expert MLPs, plus routing
//! entropy analysis and routing-trace CSV export.
//!
//! For a token `x` the gate computes `H(x) = W_gᵀx + ε ⊙ softplus(W_noiseᵀx)`
//! (with `ε = 0` when noise is off), keeps the `k` largest logits (ties go to
//! the lower expert index), and softmaxes over the kept logits only. The token
//! output is `Σ_{j∈𝒯} R_j E_j(x)`; unselected experts are never evaluated.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, softmax_in_place, softplus, Matrix2D, SeededRng};

/// Expert count used unless configured otherwise.
pub const DEFAULT_EXPERTS: usize = 4;
/// Experts activated per token unless configured otherwise.
pub const DEFAULT_TOP_K: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// `d × n`
    pub w_g: Matrix2D,
    /// `d × n`
    pub w_noise: Matrix2D,
    pub top_k: usize,
    pub noise_enabled: bool,
}

impl GateParams {
    pub fn new(w_g: Matrix2D, w_noise: Matrix2D, top_k: usize, noise_enabled: bool) -> Result<Self> {
        if !w_g.same_shape(&w_noise) {
            return Err(Error::shape("GateParams::new", w_g.shape(), w_noise.shape()));
        }
        let n = w_g.cols();
        if top_k == 0 || top_k > n {
            return Err(Error::Config(format!("top_k must be in 1..={n}, got {top_k}")));
        }
        Ok(Self { w_g, w_noise, top_k, noise_enabled })
    }

    pub fn random(dim: usize, experts: usize, top_k: usize, rng: &mut SeededRng) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let w_g = rng.normal_matrix(dim, experts, std);
        let w_noise = rng.normal_matrix(dim, experts, std);
        Self::new(w_g, w_noise, top_k, true)
    }

    pub fn expert_count(&self) -> usize {
        self.w_g.cols()
    }

    pub fn dim(&self) -> usize {
        self.w_g.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_g: Matrix2D::zeros(self.w_g.rows(), self.w_g.cols()),
            w_noise: Matrix2D::zeros(self.w_noise.rows(), self.w_noise.cols()),
            top_k: self.top_k,
            noise_enabled: self.noise_enabled,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.expert_count();
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::Config(format!("top_k must be in 1..={n}, got {}", self.top_k)));
        }
        Ok(())
    }
}

/// Two-layer MLP `d → hidden → d` with a tanh nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub w1: Matrix2D,
    pub b1: Matrix2D,
    pub w2: Matrix2D,
    pub b2: Matrix2D,
}

impl Expert {
    pub fn random(dim: usize, hidden: usize, out_std: f64, rng: &mut SeededRng) -> Self {
        Self {
            w1: rng.normal_matrix(dim, hidden, 1.0 / (dim as f64).sqrt()),
            b1: Matrix2D::zeros(1, hidden),
            w2: rng.normal_matrix(hidden, dim, out_std),
            b2: Matrix2D::zeros(1, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix2D| Matrix2D::zeros(m.rows(), m.cols());
        Self { w1: z(&self.w1), b1: z(&self.b1), w2: z(&self.w2), b2: z(&self.b2) }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let h = self.w1.cols();
        (0..h)
            .map(|j| {
                let mut acc = self.b1.data()[j];
                for (p, &xv) in x.iter().enumerate() {
                    acc += xv * self.w1.get(p, j);
                }
                acc.tanh()
            })
            .collect()
    }

    fn output_from_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.w2.cols();
        (0..d)
            .map(|c| {
                let mut acc = self.b2.data()[c];
                for (j, &hv) in hidden.iter().enumerate() {
                    acc += hv * self.w2.get(j, c);
                }
                acc
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.output_from_hidden(&self.hidden(x))
    }

    /// Backward for one token; returns `∂/∂x` and accumulates parameter grads.
    fn backward(&self, x: &[f64], hidden: &[f64], d_out: &[f64], grad: &mut Expert) -> Vec<f64> {
        let h = hidden.len();
        let d = x.len();
        for (c, &g) in d_out.iter().enumerate() {
            grad.b2.data_mut()[c] += g;
        }
        let mut d_pre = vec![0.0; h];
        for j in 0..h {
            let w2_row = self.w2.row(j);
            for (c, &g) in d_out.iter().enumerate() {
                grad.w2.data_mut()[j * d + c] += hidden[j] * g;
            }
            d_pre[j] = dot(w2_row, d_out) * (1.0 - hidden[j] * hidden[j]);
        }
        for (j, &g) in d_pre.iter().enumerate() {
            grad.b1.data_mut()[j] += g;
        }
        let mut dx = vec![0.0; d];
        for p in 0..d {
            let w1_row = self.w1.row(p);
            for j in 0..h {
                grad.w1.data_mut()[p * h + j] += x[p] * d_pre[j];
            }
            dx[p] = dot(w1_row, &d_pre);
        }
        dx
    }

    fn matrices(&self) -> [&Matrix2D; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn matrices_mut(&mut self) -> [&mut Matrix2D; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Zeroes the output layer so the expert maps every input to zero.
    pub fn silence(&mut self) {
        self.w2 = Matrix2D::zeros(self.w2.rows(), self.w2.cols());
        self.b2 = Matrix2D::zeros(1, self.b2.cols());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn random(count: usize, dim: usize, hidden: usize, out_std: f64, rng: &mut SeededRng) -> Self {
        Self { experts: (0..count).map(|_| Expert::random(dim, hidden, out_std, rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self { experts: self.experts.iter().map(Expert::zeros_like).collect() }
    }

    pub(crate) fn matrices(&self) -> Vec<&Matrix2D> {
        self.experts.iter().flat_map(|e| e.matrices()).collect()
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<&mut Matrix2D> {
        self.experts.iter_mut().flat_map(|e| e.matrices_mut()).collect()
    }
}

/// Routing decision for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    /// Selected experts `𝒯`, in descending logit order.
    pub selected: Vec<usize>,
    /// Dense weights `R` over all experts, zero outside `𝒯`.
    pub weights: Vec<f64>,
    /// Logits `H(x)` including any noise.
    pub logits: Vec<f64>,
}

/// Routing decisions of one feature map at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layer: usize,
    pub stream: usize,
    pub rows: Vec<RoutingRow>,
}

/// Indices of the `k` largest values; equal values resolve to the lower index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Routing weights from already-computed logits.
pub fn route_from_logits(logits: &[f64], k: usize) -> RoutingRow {
    let selected = top_k_indices(logits, k);
    let mut kept: Vec<f64> = selected.iter().map(|&j| logits[j]).collect();
    softmax_in_place(&mut kept, 1.0);
    let mut weights = vec![0.0; logits.len()];
    for (&j, &w) in selected.iter().zip(&kept) {
        weights[j] = w;
    }
    RoutingRow { selected, weights, logits: logits.to_vec() }
}

struct GateTape {
    noise_pre: Vec<f64>,
}

fn gate_inner(x: &[f64], params: &GateParams, noise: Option<&[f64]>) -> (RoutingRow, GateTape) {
    let n = params.expert_count();
    let mut logits = vec![0.0; n];
    let mut noise_pre = vec![0.0; n];
    for (p, &xv) in x.iter().enumerate() {
        for j in 0..n {
            logits[j] += xv * params.w_g.get(p, j);
            noise_pre[j] += xv * params.w_noise.get(p, j);
        }
    }
    if let Some(eps) = noise {
        for j in 0..n {
            logits[j] += eps[j] * softplus(noise_pre[j]);
        }
    }
    (route_from_logits(&logits, params.top_k), GateTape { noise_pre })
}

/// Noisy top-k gate for one token. Draws one standard normal per expert from
/// `rng` when `params.noise_enabled`.
pub fn gate(x: &[f64], params: &GateParams, rng: &mut SeededRng) -> Result<RoutingRow> {
    params.validate()?;
    if x.len() != params.dim() {
        return Err(Error::shape("gate", (1, x.len()), params.w_g.shape()));
    }
    let noise = params.noise_enabled.then(|| rng.normal_vec(params.expert_count(), 1.0));
    Ok(gate_inner(x, params, noise.as_deref()).0)
}

/// `Σ_{j∈𝒯} R_j E_j(x)`, evaluating only the selected experts.
pub fn mixture(x: &[f64], row: &RoutingRow, experts: &ExpertBank) -> Result<Vec<f64>> {
    if row.weights.len() != experts.len() {
        return Err(Error::Config(format!(
            "routing row over {} experts but bank has {}",
            row.weights.len(),
            experts.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    for &j in &row.selected {
        let e = &experts.experts[j];
        if e.w1.rows() != x.len() {
            return Err(Error::shape("mixture", (1, x.len()), e.w1.shape()));
        }
        for (o, v) in out.iter_mut().zip(e.forward(x)) {
            *o += row.weights[j] * v;
        }
    }
    Ok(out)
}

/// Tape for the reverse pass through one routed feature map.
pub(crate) struct RouteTape {
    input: Matrix2D,
    rows: Vec<RoutingRow>,
    gates: Vec<GateTape>,
    noise: Option<Matrix2D>,
    evals: Vec<Vec<ExpertEval>>,
}

/// `(expert, hidden activations, output)` for one selected expert of one token.
type ExpertEval = (usize, Vec<f64>, Vec<f64>);

/// Routes every row of `u` with pre-drawn gate noise (`m × n`, or `None`).
pub(crate) fn route_with_noise(
    u: &Matrix2D,
    params: &GateParams,
    experts: &ExpertBank,
    noise: Option<&Matrix2D>,
    layer: usize,
    stream: usize,
) -> (Matrix2D, RoutingTrace, RouteTape) {
    let mut out = Matrix2D::zeros(u.rows(), u.cols());
    let mut rows = Vec::with_capacity(u.rows());
    let mut gates = Vec::with_capacity(u.rows());
    let mut evals = Vec::with_capacity(u.rows());
    for r in 0..u.rows() {
        let x = u.row(r);
        let (row, gt) = gate_inner(x, params, noise.map(|n| n.row(r)));
        let mut token_evals = Vec::with_capacity(row.selected.len());
        for &j in &row.selected {
            let e = &experts.experts[j];
            let hidden = e.hidden(x);
            let y = e.output_from_hidden(&hidden);
            for (o, v) in out.row_mut(r).iter_mut().zip(&y) {
                *o += row.weights[j] * v;
            }
            token_evals.push((j, hidden, y));
        }
        rows.push(row);
        gates.push(gt);
        evals.push(token_evals);
    }
    let trace = RoutingTrace { layer, stream, rows: rows.clone() };
    let tape = RouteTape { input: u.clone(), rows, gates, noise: noise.cloned(), evals };
    (out, trace, tape)
}

/// Reverse pass; accumulates gate and expert gradients and returns `∂/∂u`.
/// Top-k selection is piecewise constant and contributes no gradient.
pub(crate) fn route_backward(
    tape: &RouteTape,
    params: &GateParams,
    experts: &ExpertBank,
    d_out: &Matrix2D,
    gate_grad: &mut GateParams,
    expert_grad: &mut ExpertBank,
) -> Matrix2D {
    let n = params.expert_count();
    let d = tape.input.cols();
    let mut du = Matrix2D::zeros(tape.input.rows(), d);
    for r in 0..tape.input.rows() {
        let x = tape.input.row(r);
        let g = d_out.row(r);
        let row = &tape.rows[r];
        let mut dx = vec![0.0; d];
        let mut d_weight = vec![0.0; n];
        for (j, hidden, y) in &tape.evals[r] {
            let w = row.weights[*j];
            d_weight[*j] = dot(g, y);
            let scaled: Vec<f64> = g.iter().map(|v| w * v).collect();
            let dxe = experts.experts[*j].backward(x, hidden, &scaled, &mut expert_grad.experts[*j]);
            for (a, b) in dx.iter_mut().zip(dxe) {
                *a += b;
            }
        }
        // softmax restricted to the selected logits
        let inner: f64 = row.selected.iter().map(|&j| row.weights[j] * d_weight[j]).sum();
        let mut d_logit = vec![0.0; n];
        for &j in &row.selected {
            d_logit[j] = row.weights[j] * (d_weight[j] - inner);
        }
        let mut d_noise_pre = vec![0.0; n];
        if let Some(noise) = &tape.noise {
            let eps = noise.row(r);
            for j in 0..n {
                d_noise_pre[j] = d_logit[j] * eps[j] * sigmoid(tape.gates[r].noise_pre[j]);
            }
        }
        for p in 0..d {
            for j in 0..n {
                gate_grad.w_g.data_mut()[p * n + j] += x[p] * d_logit[j];
                gate_grad.w_noise.data_mut()[p * n + j] += x[p] * d_noise_pre[j];
                dx[p] += params.w_g.get(p, j) * d_logit[j] + params.w_noise.get(p, j) * d_noise_pre[j];
            }
        }
        du.row_mut(r).copy_from_slice(&dx);
    }
    du
}

/// Gate plus mixture applied independently to every token row of `u`. Noise,
/// when enabled, is drawn row by row in order.
pub fn route_feature_map(
    u: &Matrix2D,
    params: &GateParams,
    experts: &ExpertBank,
    rng: &mut SeededRng,
) -> Result<(Matrix2D, RoutingTrace)> {
    params.validate()?;
    if u.cols() != params.dim() {
        return Err(Error::shape("route_feature_map", u.shape(), params.w_g.shape()));
    }
    if experts.len() != params.expert_count() {
        return Err(Error::Config(format!(
            "gate over {} experts but bank has {}",
            params.expert_count(),
            experts.len()
        )));
    }
    let noise = params.noise_enabled.then(|| rng.normal_matrix(u.rows(), params.expert_count(), 1.0));
    let (out, trace, _) = route_with_noise(u, params, experts, noise.as_ref(), 0, 0);
    Ok((out, trace))
}

/// Per-expert assignment frequencies `p_{l,i}` pooled over all traces at `layer`.
pub fn layer_frequencies(traces: &[RoutingTrace], layer: usize, experts: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; experts];
    let mut total = 0usize;
    for t in traces.iter().filter(|t| t.layer == layer) {
        for row in &t.rows {
            for &j in &row.selected {
                if j >= experts {
                    return Err(Error::Data(format!("expert index {j} out of range")));
                }
                counts[j] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData(format!("no token assignments at layer {layer}")));
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// Shannon entropy (nats) with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Routing entropy `H_l` of the expert-assignment distribution at `layer`.
/// Every token contributes its `k` selections, so the pooled count is `k·T`.
pub fn routing_entropy(traces: &[RoutingTrace], layer: usize) -> Result<f64> {
    let experts = traces
        .iter()
        .filter(|t| t.layer == layer)
        .flat_map(|t| t.rows.first())
        .map(|r| r.weights.len())
        .max()
        .unwrap_or(0);
    Ok(entropy(&layer_frequencies(traces, layer, experts)?))
}

/// One CSV row: a single (token, selected expert) assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: Option<usize>,
    pub layer: usize,
    pub token: usize,
    pub expert: usize,
    pub weight: f64,
}

/// Flattened routing log. Token ids are assigned sequentially per layer so that
/// tokens from different streams and sampling steps stay distinct.
#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
    next_token: BTreeMap<usize, usize>,
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: Option<usize>, trace: &RoutingTrace) {
        let next = self.next_token.entry(trace.layer).or_insert(0);
        for row in &trace.rows {
            for &j in &row.selected {
                self.records.push(TraceRecord {
                    step,
                    layer: trace.layer,
                    token: *next,
                    expert: j,
                    weight: row.weights[j],
                });
            }
            *next += 1;
        }
    }

    /// Writes `layer,token,expert,weight`, with a trailing `step` column when any
    /// record carries a step.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let with_step = self.records.iter().any(|r| r.step.is_some());
        let mut w = csv::Writer::from_writer(writer);
        if with_step {
            w.write_record(["layer", "token", "expert", "weight", "step"])?;
        } else {
            w.write_record(["layer", "token", "expert", "weight"])?;
        }
        for r in &self.records {
            let mut fields =
                vec![r.layer.to_string(), r.token.to_string(), r.expert.to_string(), format!("{:?}", r.weight)];
            if with_step {
                fields.push(r.step.map(|s| s.to_string()).unwrap_or_default());
            }
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(li), Some(ti), Some(ei), Some(wi)) = (col("layer"), col("token"), col("expert"), col("weight"))
        else {
            return Err(Error::Data("trace csv needs columns layer, token, expert, weight".into()));
        };
        let si = col("step");
        let parse = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Data(format!("bad {what} value {s:?}")))
        };
        let mut log = TraceLog::new();
        for rec in rdr.records() {
            let rec = rec?;
            let step = match si.map(|i| rec.get(i).unwrap_or("").trim()) {
                Some(s) if !s.is_empty() => Some(parse(s, "step")?),
                _ => None,
            };
            let weight: f64 = rec[wi].trim().parse().map_err(|_| Error::Data(format!("bad weight {:?}", &rec[wi])))?;
            log.records.push(TraceRecord {
                step,
                layer: parse(&rec[li], "layer")?,
                token: parse(&rec[ti], "token")?,
                expert: parse(&rec[ei], "expert")?,
                weight,
            });
        }
        Ok(log)
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.records.iter().map(|r| r.layer).collect()
    }

    pub fn steps(&self) -> BTreeSet<usize> {
        self.records.iter().filter_map(|r| r.step).collect()
    }

    /// Entropy of the pooled assignment frequencies at `layer`, optionally
    /// restricted to one sampling step.
    pub fn entropy(&self, layer: usize, step: Option<usize>, experts: usize) -> Result<f64> {
        let mut counts = vec![0usize; experts];
        let mut total = 0usize;
        for r in self.records.iter().filter(|r| r.layer == layer && (step.is_none() || r.step == step)) {
            if r.expert >= experts {
                return Err(Error::Data(format!("expert index {} >= {experts}", r.expert)));
            }
            counts[r.expert] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::InsufficientData(format!("no token assignments at layer {layer}")));
        }
        let p: Vec<f64> = counts.into_iter().map(|c| c as f64 / total as f64).collect();
        Ok(entropy(&p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use proptest::prelude::*;

    fn gate_with_logits(logits: &[f64], k: usize) -> (Vec<f64>, GateParams) {
        // x = e_0 ... picks column p of W_g; use a 1-d input with W_g = logits
        let w_g = Matrix2D::from_rows(&[logits.to_vec()]).unwrap();
        let w_noise = Matrix2D::zeros(1, logits.len());
        (vec![1.0], GateParams::new(w_g, w_noise, k, false).unwrap())
    }

    #[test]
    fn equal_logits_full_k_is_uniform() {
        let (x, p) = gate_with_logits(&[0.7; 4], 4);
        let row = gate(&x, &p, &mut SeededRng::new(0)).unwrap();
        assert_eq!(row.weights, vec![0.25; 4]);
    }

    #[test]
    fn top_two_softmax_over_selected() {
        let (x, p) = gate_with_logits(&[3.0, 1.0, 2.0, 0.0], 2);
        let row = gate(&x, &p, &mut SeededRng::new(0)).unwrap();
        assert_eq!(row.selected, vec![0, 2]);
        let z = 3f64.exp() + 2f64.exp();
        assert!((row.weights[0] - 3f64.exp() / z).abs() < 1e-15);
        assert!((row.weights[2] - 2f64.exp() / z).abs() < 1e-15);
        assert_eq!(row.weights[1], 0.0);
        assert_eq!(row.weights[3], 0.0);
    }

    #[test]
    fn top_one_is_one_hot_and_ties_pick_lowest() {
        let (x, p) = gate_with_logits(&[0.1, 2.0, -1.0, 0.5], 1);
        let row = gate(&x, &p, &mut SeededRng::new(0)).unwrap();
        assert_eq!(row.weights, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn k_above_n_is_config_error() {
        let w = Matrix2D::zeros(2, 3);
        assert!(matches!(GateParams::new(w.clone(), w, 4, false), Err(Error::Config(_))));
    }

    #[test]
    fn noisy_gate_is_reproducible_and_valid() {
        let mut rng = SeededRng::new(1);
        let p = GateParams::random(8, 4, 2, &mut rng).unwrap();
        let x = rng.normal_vec(8, 1.0);
        let a = gate(&x, &p, &mut SeededRng::new(5)).unwrap();
        let b = gate(&x, &p, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weights.iter().filter(|&&w| w > 0.0).count(), 2);
    }

    #[test]
    fn identical_experts_ignore_routing() {
        let mut rng = SeededRng::new(2);
        let e = Expert::random(4, 8, 0.5, &mut rng);
        let bank = ExpertBank { experts: vec![e.clone(); 4] };
        let p = GateParams::random(4, 4, 2, &mut rng).unwrap();
        let x = rng.normal_vec(4, 1.0);
        let row = gate(&x, &p, &mut rng).unwrap();
        let out = mixture(&x, &row, &bank).unwrap();
        for (a, b) in out.iter().zip(e.forward(&x)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn top_one_mixture_is_that_expert() {
        let mut rng = SeededRng::new(3);
        let bank = ExpertBank::random(4, 4, 8, 0.5, &mut rng);
        let mut p = GateParams::random(4, 4, 1, &mut rng).unwrap();
        p.noise_enabled = false;
        let x = rng.normal_vec(4, 1.0);
        let row = gate(&x, &p, &mut rng).unwrap();
        let out = mixture(&x, &row, &bank).unwrap();
        assert_eq!(out, bank.experts[row.selected[0]].forward(&x));
    }

    fn dense_mixture(x: &[f64], row: &RoutingRow, bank: &ExpertBank) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (j, e) in bank.experts.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(e.forward(x)) {
                *o += row.weights[j] * v;
            }
        }
        out
    }

    #[test]
    fn route_feature_map_matches_row_oracle() {
        let mut rng = SeededRng::new(4);
        let bank = ExpertBank::random(4, 5, 10, 0.5, &mut rng);
        let mut p = GateParams::random(5, 4, 2, &mut rng).unwrap();
        p.noise_enabled = false;
        let mut u = rng.normal_matrix(6, 5, 1.0);
        let dup = u.row(1).to_vec();
        u.row_mut(4).copy_from_slice(&dup);
        let (out, trace) = route_feature_map(&u, &p, &bank, &mut rng).unwrap();
        for r in 0..6 {
            let row = gate(u.row(r), &p, &mut rng).unwrap();
            assert_eq!(row, trace.rows[r]);
            let want = dense_mixture(u.row(r), &row, &bank);
            for (a, b) in out.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(out.row(1), out.row(4));
        assert_eq!(trace.rows[1], trace.rows[4]);
    }

    #[test]
    fn entropy_cases() {
        let row = |sel: &[usize]| {
            let mut w = vec![0.0; 4];
            for &j in sel {
                w[j] = 0.5;
            }
            RoutingRow { selected: sel.to_vec(), weights: w, logits: vec![0.0; 4] }
        };
        let concentrated = RoutingTrace { layer: 0, stream: 0, rows: vec![row(&[0, 1]); 10] };
        assert!((routing_entropy(&[concentrated], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let uniform = RoutingTrace { layer: 1, stream: 0, rows: vec![row(&[0, 1]), row(&[2, 3])] };
        assert!((routing_entropy(std::slice::from_ref(&uniform), 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(routing_entropy(&[uniform], 0), Err(Error::InsufficientData(_))));

        // counting oracle: {0,1},{0,2},{0,3} → counts 3,1,1,1 over 6
        let mixed = RoutingTrace { layer: 2, stream: 0, rows: vec![row(&[0, 1]), row(&[0, 2]), row(&[0, 3])] };
        let p: [f64; 4] = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        let want: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((routing_entropy(&[mixed], 2).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_roundtrip_and_entropy() {
        let mut rng = SeededRng::new(6);
        let bank = ExpertBank::random(4, 4, 8, 0.5, &mut rng);
        let p = GateParams::random(4, 4, 2, &mut rng).unwrap();
        let u = rng.normal_matrix(20, 4, 1.0);
        let (_, mut trace) = route_feature_map(&u, &p, &bank, &mut rng).unwrap();
        trace.layer = 3;
        let mut log = TraceLog::new();
        log.push(None, &trace);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layer,token,expert,weight\n"));
        let back = TraceLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records, log.records);
        let h = back.entropy(3, None, 4).unwrap();
        assert!((h - routing_entropy(&[trace], 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn routing_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(7);
        let bank = ExpertBank::random(4, 5, 10, 0.7, &mut rng);
        let p = GateParams::random(5, 4, 2, &mut rng).unwrap();
        let u = rng.normal_matrix(3, 5, 1.0);
        let noise = rng.normal_matrix(3, 4, 1.0);
        let probe = rng.normal_matrix(3, 5, 1.0);
        let objective = |u: &Matrix2D, p: &GateParams, bank: &ExpertBank| {
            let (o, _, _) = route_with_noise(u, p, bank, Some(&noise), 0, 0);
            dot(o.data(), probe.data())
        };
        let (_, _, tape) = route_with_noise(&u, &p, &bank, Some(&noise), 0, 0);
        let mut gg = p.zeros_like();
        let mut eg = bank.zeros_like();
        let du = route_backward(&tape, &p, &bank, &probe, &mut gg, &mut eg);

        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-7);
        let num = finite_diff_grad(|v| objective(&Matrix2D::new(3, 5, v.to_vec()).unwrap(), &p, &bank), u.data(), 1e-5);
        assert!(close(du.data(), &num));
        let num = finite_diff_grad(
            |v| {
                let mut q = p.clone();
                q.w_g = Matrix2D::new(5, 4, v.to_vec()).unwrap();
                objective(&u, &q, &bank)
            },
            p.w_g.data(),
            1e-5,
        );
        assert!(close(gg.w_g.data(), &num));
        let num = finite_diff_grad(
            |v| {
                let mut q = p.clone();
                q.w_noise = Matrix2D::new(5, 4, v.to_vec()).unwrap();
                objective(&u, &q, &bank)
            },
            p.w_noise.data(),
            1e-5,
        );
        assert!(close(gg.w_noise.data(), &num));
        for (idx, g) in eg.matrices().iter().enumerate() {
            let num = finite_diff_grad(
                |v| {
                    let mut b = bank.clone();
                    let m = b.matrices_mut().into_iter().nth(idx).unwrap();
                    m.data_mut().copy_from_slice(v);
                    objective(&u, &p, &b)
                },
                bank.matrices()[idx].data(),
                1e-5,
            );
            assert!(close(g.data(), &num), "expert matrix {idx}");
        }
    }

    proptest! {
        #[test]
        fn routing_row_contract(seed in 0u64..2000, k in 1usize..=4) {
            let mut rng = SeededRng::new(seed);
            let p = GateParams::random(6, 4, k, &mut rng).unwrap();
            let x = rng.normal_vec(6, 2.0);
            let row = gate(&x, &p, &mut rng).unwrap();
            prop_assert_eq!(row.selected.len(), k);
            prop_assert_eq!(row.weights.iter().filter(|&&w| w > 0.0).count(), k);
            prop_assert!((row.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.weights.iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn shifting_logits_keeps_routing(
            logits in proptest::collection::vec(-10.0f64..10.0, 4),
            shift in -50.0f64..50.0,
            k in 1usize..=4,
        ) {
            let a = route_from_logits(&logits, k);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let b = route_from_logits(&shifted, k);
            prop_assert_eq!(&a.selected, &b.selected);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn entropy_within_bounds(seed in 0u64..500, tokens in 1usize..40) {
            let mut rng = SeededRng::new(seed);
            let rows = (0..tokens).map(|_| {
                let logits = rng.normal_vec(4, 3.0);
                route_from_logits(&logits, 2)
            }).collect();
            let h = routing_entropy(&[RoutingTrace { layer: 0, stream: 0, rows }], 0).unwrap();
            prop_assert!(h >= 0.0 && h <= 4f64.ln() + 1e-12);
        }
    }
}
