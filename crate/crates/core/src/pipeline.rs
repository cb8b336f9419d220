//! Toy transformer block (causal attention, dense FFN, sparse MoE) that runs
//! either as an FP16 baseline or with FP8 quantized projections and expert
//! GEMMs.
//!
//! In FP8 mode only the qkvo projections, the dense-FFN linears and the
//! expert GEMMs are quantized. The router, softmax, attention score products
//! and residual adds stay in F32, with FP16 rounding at operator boundaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{Profiler, Stage};
use crate::error::{Error, Result};
use crate::qgemm::{self, ExpertGroup, LinearLayer};
use crate::quantizer::{ScaleGranularity, BLOCK};
use crate::tensor::{f16_quantize, f16_round, DType, Tensor};
use crate::topk;

/// Standard deviation of every initial weight.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_heads: 4,
            ffn_hidden: 512,
            n_experts: 8,
            top_k: 2,
            expert_hidden: 256,
            seq_len: 32,
            batch: 4,
            seed: 42,
        }
    }
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::BadConfig(msg));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        for (name, v) in [("d_model", self.d_model), ("expert_hidden", self.expert_hidden)] {
            if v == 0 || v % BLOCK != 0 {
                return fail(format!("{name} {v} must be a positive multiple of {BLOCK}"));
            }
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return fail(format!(
                "top_k {} must be in 1..={} (n_experts)",
                self.top_k, self.n_experts
            ));
        }
        if self.seq_len == 0 || self.batch == 0 {
            return fail("seq_len and batch must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrecisionMode {
    FP16Baseline,
    FP8Quantized,
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub o: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub up: LinearLayer,
    pub down: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct MoeWeights {
    /// `[n_experts, d_model]`, kept in F32.
    pub router_weight: Vec<f32>,
    pub router_bias: Vec<f32>,
    pub up: ExpertGroup,
    pub down: ExpertGroup,
    pub up_f16: Vec<Tensor>,
    pub down_f16: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub config: BlockConfig,
    pub attention: AttentionWeights,
    pub ffn: FfnWeights,
    pub moe: MoeWeights,
}

/// Names and shapes of every master weight, in initialization order.
pub fn weight_layout(cfg: &BlockConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    for p in ["q", "k", "v", "o"] {
        out.push((format!("attn.{p}.weight"), vec![d, d]));
        out.push((format!("attn.{p}.bias"), vec![d]));
    }
    out.push(("ffn.up.weight".into(), vec![cfg.ffn_hidden, d]));
    out.push(("ffn.up.bias".into(), vec![cfg.ffn_hidden]));
    out.push(("ffn.down.weight".into(), vec![d, cfg.ffn_hidden]));
    out.push(("ffn.down.bias".into(), vec![d]));
    out.push(("moe.router.weight".into(), vec![cfg.n_experts, d]));
    out.push(("moe.router.bias".into(), vec![cfg.n_experts]));
    for e in 0..cfg.n_experts {
        out.push((format!("moe.expert{e}.up.weight"), vec![cfg.expert_hidden, d]));
        out.push((format!("moe.expert{e}.down.weight"), vec![d, cfg.expert_hidden]));
    }
    out
}

/// F32 master weights drawn from `N(0, 0.02²)`, seeded by `cfg.seed`.
pub fn init_master_weights(cfg: &BlockConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    weight_layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let v: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_f32(name, shape, &v)
        })
        .collect()
}

pub fn init_block(cfg: &BlockConfig) -> Result<BlockWeights> {
    BlockWeights::from_master(cfg, &init_master_weights(cfg)?)
}

impl BlockWeights {
    /// Builds both precisions from named F32 master tensors (see
    /// [`weight_layout`]).
    pub fn from_master(cfg: &BlockConfig, tensors: &[Tensor]) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str| -> Result<&Tensor> {
            let t = tensors
                .iter()
                .find(|t| t.name() == name)
                .ok_or_else(|| Error::BadConfig(format!("missing weight {name:?}")))?;
            t.expect_dtype(DType::F32)?;
            Ok(t)
        };
        for (name, shape) in weight_layout(cfg) {
            let t = get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "{name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let linear = |prefix: &str| -> Result<LinearLayer> {
            LinearLayer::from_f32(
                get(&format!("{prefix}.weight"))?,
                Some(get(&format!("{prefix}.bias"))?.to_f32_vec()),
            )
        };
        let experts = |part: &str| -> Result<Vec<Tensor>> {
            (0..cfg.n_experts)
                .map(|e| get(&format!("moe.expert{e}.{part}.weight")).cloned())
                .collect()
        };
        let to_f16 = |ts: &[Tensor]| -> Result<Vec<Tensor>> {
            ts.iter()
                .map(|t| Tensor::from_f32_as_f16(t.name(), t.shape().to_vec(), &t.to_f32_vec()))
                .collect()
        };
        let up = experts("up")?;
        let down = experts("down")?;
        Ok(Self {
            config: cfg.clone(),
            attention: AttentionWeights {
                q: linear("attn.q")?,
                k: linear("attn.k")?,
                v: linear("attn.v")?,
                o: linear("attn.o")?,
            },
            ffn: FfnWeights {
                up: linear("ffn.up")?,
                down: linear("ffn.down")?,
            },
            moe: MoeWeights {
                router_weight: get("moe.router.weight")?.to_f32_vec(),
                router_bias: get("moe.router.bias")?.to_f32_vec(),
                up: ExpertGroup::from_f32(&up)?,
                down: ExpertGroup::from_f32(&down)?,
                up_f16: to_f16(&up)?,
                down_f16: to_f16(&down)?,
            },
        })
    }

    /// Quantized checkpoint entries: `.fp8`/`.scale`/`.gran` triples for
    /// every quantized weight, F32 for biases and the router.
    pub fn quantized_entries(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        let a = &self.attention;
        for l in [&a.q, &a.k, &a.v, &a.o, &self.ffn.up, &self.ffn.down] {
            out.extend(l.weight().to_entries()?);
            if let Some(b) = l.bias() {
                let base = l.name().strip_suffix(".weight").unwrap_or(l.name());
                out.push(Tensor::from_f32(format!("{base}.bias"), vec![b.len()], b)?);
            }
        }
        let cfg = &self.config;
        out.push(Tensor::from_f32(
            "moe.router.weight",
            vec![cfg.n_experts, cfg.d_model],
            &self.moe.router_weight,
        )?);
        out.push(Tensor::from_f32(
            "moe.router.bias",
            vec![cfg.n_experts],
            &self.moe.router_bias,
        )?);
        for (up, down) in self.moe.up.experts().iter().zip(self.moe.down.experts()) {
            out.extend(up.to_entries()?);
            out.extend(down.to_entries()?);
        }
        Ok(out)
    }
}

/// Seeded `N(0, 1)` input of shape `[batch·seq_len, d_model]`, rounded to
/// FP16. Uses a separate ChaCha stream from the weights.
pub fn random_input(cfg: &BlockConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let normal = Normal::new(0.0f32, 1.0).expect("valid std");
    let n = cfg.tokens() * cfg.d_model;
    let v: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Tensor::from_f32_as_f16("x", vec![cfg.tokens(), cfg.d_model], &v)
}

fn check_input(x: &Tensor, cfg: &BlockConfig) -> Result<()> {
    x.expect_dtype(DType::F16)?;
    let (t, d) = x.dims2()?;
    if d != cfg.d_model || t % cfg.seq_len != 0 || t == 0 {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} has shape {:?}, expected [n·{}, {}]",
            x.name(),
            x.shape(),
            cfg.seq_len,
            cfg.d_model
        )));
    }
    Ok(())
}

fn linear(x: &Tensor, layer: &LinearLayer, mode: PrecisionMode, prof: &mut Profiler) -> Result<Tensor> {
    match mode {
        PrecisionMode::FP16Baseline => qgemm::fp16_linear(x, layer),
        PrecisionMode::FP8Quantized => {
            let a = prof.time(Stage::QuantizeOps, |_| {
                qgemm::quantize_activations(x, ScaleGranularity::PerToken)
            })?;
            qgemm::fp8_linear_quantized(&a, layer)
        }
    }
}

#[inline]
fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

/// `f16_round(silu(h))` elementwise.
fn silu_f16(h: &Tensor) -> Result<Tensor> {
    let v: Vec<f32> = h.to_f32_vec().into_iter().map(silu).collect();
    Tensor::from_f32_as_f16(h.name(), h.shape().to_vec(), &v)
}

/// `f16_round(x + y)` with the add in F32.
fn residual(x: &Tensor, y: &[f32]) -> Result<Tensor> {
    let out: Vec<u16> = x
        .to_f32_vec()
        .iter()
        .zip(y)
        .map(|(a, b)| f16_round(a + b))
        .collect();
    Tensor::from_f16_bits(x.name(), x.shape().to_vec(), &out)
}

pub fn attention_block(x: &Tensor, w: &BlockWeights, mode: PrecisionMode) -> Result<Tensor> {
    attention_block_profiled(x, w, mode, &mut Profiler::disabled())
}

/// Causal multi-head self-attention with quantizable projections.
pub fn attention_block_profiled(
    x: &Tensor,
    w: &BlockWeights,
    mode: PrecisionMode,
    prof: &mut Profiler,
) -> Result<Tensor> {
    let cfg = &w.config;
    check_input(x, cfg)?;
    prof.time(Stage::Attention, |prof| {
        let a = &w.attention;
        let q = linear(x, &a.q, mode, prof)?.to_f32_vec();
        let k = linear(x, &a.k, mode, prof)?.to_f32_vec();
        let v = linear(x, &a.v, mode, prof)?.to_f32_vec();
        let ctx = causal_attention(&q, &k, &v, cfg.seq_len, cfg.d_model, cfg.n_heads);
        let ctx = Tensor::from_f32_as_f16("attn.ctx", x.shape().to_vec(), &ctx)?;
        let o = linear(&ctx, &a.o, mode, prof)?;
        residual(x, &o.to_f32_vec())
    })
}

/// Scores `q·kᵀ/√head_dim` with a causal mask, softmax and weighted sum
/// over `v`, all in F32. Inputs are `[tokens, d_model]` with tokens grouped
/// into consecutive sequences of `seq_len`.
fn causal_attention(q: &[f32], k: &[f32], v: &[f32], seq_len: usize, d: usize, heads: usize) -> Vec<f32> {
    let hd = d / heads;
    let norm = (hd as f32).sqrt();
    let mut out = vec![0.0f32; q.len()];
    out.par_chunks_mut(d).enumerate().for_each(|(t, out_row)| {
        let start = t - t % seq_len;
        let mut scores = vec![0.0f32; t - start + 1];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let qi = &q[t * d..][cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k[(start + j) * d..][cols.clone()];
                let mut dot = 0.0f32;
                for (a, b) in qi.iter().zip(kj) {
                    dot += a * b;
                }
                *s = dot / norm;
            }
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let o = &mut out_row[cols.clone()];
            for (j, s) in scores.iter().enumerate() {
                let p = s / sum;
                let vj = &v[(start + j) * d..][cols.clone()];
                for (acc, x) in o.iter_mut().zip(vj) {
                    *acc += p * x;
                }
            }
        }
    });
    out
}

pub fn dense_ffn(x: &Tensor, w: &BlockWeights, mode: PrecisionMode) -> Result<Tensor> {
    dense_ffn_profiled(x, w, mode, &mut Profiler::disabled())
}

/// `x + down(silu(up(x)))`.
pub fn dense_ffn_profiled(
    x: &Tensor,
    w: &BlockWeights,
    mode: PrecisionMode,
    prof: &mut Profiler,
) -> Result<Tensor> {
    check_input(x, &w.config)?;
    prof.time(Stage::DenseFfn, |prof| {
        let h = linear(x, &w.ffn.up, mode, prof)?;
        let h = silu_f16(&h)?;
        let y = linear(&h, &w.ffn.down, mode, prof)?;
        residual(x, &y.to_f32_vec())
    })
}

/// Per-token expert choice and gate weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Selected experts per token, highest logit first.
    pub experts: Vec<Vec<usize>>,
    /// Softmax over the selected logits, aligned with `experts`.
    pub gates: Vec<Vec<f32>>,
}

impl Routing {
    /// True when every token selected the same experts, ignoring order.
    pub fn same_expert_sets(&self, other: &Routing) -> bool {
        let sorted = |v: &Vec<usize>| {
            let mut v = v.clone();
            v.sort_unstable();
            v
        };
        self.experts.len() == other.experts.len()
            && self
                .experts
                .iter()
                .zip(&other.experts)
                .all(|(a, b)| sorted(a) == sorted(b))
    }

    /// Token indices per expert, ascending.
    pub fn dispatch(&self, n_experts: usize) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); n_experts];
        for (t, es) in self.experts.iter().enumerate() {
            for &e in es {
                groups[e].push(t);
            }
        }
        groups
    }
}

/// Router logits `x Wᵣᵀ + bᵣ` in F32, ascending-k accumulation.
pub fn router_logits(x: &Tensor, moe: &MoeWeights, n_experts: usize) -> Result<Vec<f32>> {
    let (t, d) = x.dims2()?;
    if moe.router_weight.len() != n_experts * d {
        return Err(Error::ShapeMismatch(format!(
            "router weight has {} entries, expected {n_experts}×{d}",
            moe.router_weight.len()
        )));
    }
    let xv = x.to_f32_vec();
    let mut logits = vec![0.0f32; t * n_experts];
    for (row, out) in logits.chunks_mut(n_experts).enumerate() {
        let xr = &xv[row * d..(row + 1) * d];
        for (e, o) in out.iter_mut().enumerate() {
            let wr = &moe.router_weight[e * d..(e + 1) * d];
            let mut acc = 0.0f32;
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *o = acc + moe.router_bias[e];
        }
    }
    Ok(logits)
}

/// Top-k experts per token from router logits, gates normalized over the
/// selected logits only.
pub fn route(logits: &[f32], n_experts: usize, top_k: usize) -> Result<Routing> {
    let mut experts = Vec::with_capacity(logits.len() / n_experts);
    let mut gates = Vec::with_capacity(logits.len() / n_experts);
    for row in logits.chunks(n_experts) {
        let sel = topk::radix_topk(row, top_k)?;
        let max = sel.values[0];
        let e: Vec<f32> = sel.values.iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = e.iter().sum();
        gates.push(e.iter().map(|v| v / sum).collect());
        experts.push(sel.indices);
    }
    Ok(Routing { experts, gates })
}

fn gather_rows(x: &[f32], d: usize, rows: &[usize], name: String) -> Result<Tensor> {
    let mut v = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        v.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    // Values come from an FP16 tensor, so rounding is exact.
    Tensor::from_f32_as_f16(name, vec![rows.len(), d], &v)
}

fn grouped_gemm(
    groups: &[Tensor],
    experts: &ExpertGroup,
    weights_f16: &[Tensor],
    mode: PrecisionMode,
    prof: &mut Profiler,
) -> Result<Vec<Tensor>> {
    match mode {
        PrecisionMode::FP16Baseline => qgemm::fp16_grouped_gemm(groups, weights_f16),
        PrecisionMode::FP8Quantized => {
            let q = prof.time(Stage::QuantizeOps, |_| {
                groups
                    .iter()
                    .map(|g| qgemm::quantize_activations(g, ScaleGranularity::ACTIVATION_BLOCK))
                    .collect::<Result<Vec<_>>>()
            })?;
            qgemm::fp8_grouped_gemm_quantized(&q, experts)
        }
    }
}

pub fn moe_ffn(x: &Tensor, w: &BlockWeights, mode: PrecisionMode) -> Result<Tensor> {
    Ok(moe_ffn_profiled(x, w, mode, &mut Profiler::disabled())?.0)
}

/// Sparse MoE FFN with residual; also returns the routing decisions.
pub fn moe_ffn_profiled(
    x: &Tensor,
    w: &BlockWeights,
    mode: PrecisionMode,
    prof: &mut Profiler,
) -> Result<(Tensor, Routing)> {
    let cfg = &w.config;
    x.expect_dtype(DType::F16)?;
    let (t, d) = x.dims2()?;
    if d != cfg.d_model || t == 0 {
        return Err(Error::ShapeMismatch(format!(
            "MoE input has shape {:?}, expected [T >= 1, {}]",
            x.shape(),
            cfg.d_model
        )));
    }
    let moe = &w.moe;
    let routing = prof.time(Stage::MoeRouterTopk, |_| {
        let logits = router_logits(x, moe, cfg.n_experts)?;
        route(&logits, cfg.n_experts, cfg.top_k)
    })?;
    let dispatch = routing.dispatch(cfg.n_experts);
    let xv = x.to_f32_vec();
    let expert_out = prof.time(Stage::MoeGroupedGemm, |prof| -> Result<Vec<Tensor>> {
        let groups = dispatch
            .iter()
            .enumerate()
            .map(|(e, rows)| gather_rows(&xv, d, rows, format!("moe.expert{e}.in")))
            .collect::<Result<Vec<_>>>()?;
        let hidden = grouped_gemm(&groups, &moe.up, &moe.up_f16, mode, prof)?;
        let hidden = hidden.iter().map(silu_f16).collect::<Result<Vec<_>>>()?;
        grouped_gemm(&hidden, &moe.down, &moe.down_f16, mode, prof)
    })?;

    // Row of each token within its expert's output.
    let mut slot = vec![vec![0usize; cfg.n_experts]; t];
    for (e, rows) in dispatch.iter().enumerate() {
        for (i, &tok) in rows.iter().enumerate() {
            slot[tok][e] = i;
        }
    }
    let outs: Vec<Vec<f32>> = expert_out.iter().map(Tensor::to_f32_vec).collect();
    let mut combined = vec![0.0f32; t * d];
    for (tok, acc) in combined.chunks_mut(d).enumerate() {
        for (&e, &g) in routing.experts[tok].iter().zip(&routing.gates[tok]) {
            let row = &outs[e][slot[tok][e] * d..(slot[tok][e] + 1) * d];
            for (a, y) in acc.iter_mut().zip(row) {
                *a += g * y;
            }
        }
    }
    Ok((residual(x, &combined)?, routing))
}

/// Output of a full block pass.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub output: Tensor,
    pub routing: Routing,
}

pub fn forward_block(x: &Tensor, w: &BlockWeights, mode: PrecisionMode) -> Result<Tensor> {
    forward_block_profiled(x, w, mode, &mut Profiler::disabled())
}

pub fn forward_block_profiled(
    x: &Tensor,
    w: &BlockWeights,
    mode: PrecisionMode,
    prof: &mut Profiler,
) -> Result<Tensor> {
    Ok(forward_block_detailed(x, w, mode, prof)?.output)
}

/// attention → dense FFN → MoE FFN, each with its residual.
pub fn forward_block_detailed(
    x: &Tensor,
    w: &BlockWeights,
    mode: PrecisionMode,
    prof: &mut Profiler,
) -> Result<BlockOutput> {
    let h = attention_block_profiled(x, w, mode, prof)?;
    let h = dense_ffn_profiled(&h, w, mode, prof)?;
    let (output, routing) = moe_ffn_profiled(&h, w, mode, prof)?;
    Ok(BlockOutput { output, routing })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub max_abs_err: f64,
    pub rel_frobenius_err: f64,
    pub cosine_similarity: f64,
    /// Whether every token picked the same expert set in both modes.
    pub routing_identical: bool,
}

/// Error metrics of `candidate` against `reference`, computed in F64.
/// Cosine is 1 for two zero vectors and 0 when exactly one is zero.
pub fn compare_outputs(reference: &[f32], candidate: &[f32]) -> ComparisonReport {
    assert_eq!(reference.len(), candidate.len(), "output lengths differ");
    let (mut max_abs, mut diff2, mut ref2, mut cand2, mut dot) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for (&r, &c) in reference.iter().zip(candidate) {
        let (r, c) = (r as f64, c as f64);
        max_abs = max_abs.max((r - c).abs());
        diff2 += (r - c) * (r - c);
        ref2 += r * r;
        cand2 += c * c;
        dot += r * c;
    }
    let rel = if ref2 > 0.0 {
        (diff2 / ref2).sqrt()
    } else if diff2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let cosine = match (ref2 > 0.0, cand2 > 0.0) {
        (true, true) if diff2 == 0.0 => 1.0,
        (true, true) => (dot / (ref2.sqrt() * cand2.sqrt())).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    };
    ComparisonReport {
        max_abs_err: max_abs,
        rel_frobenius_err: rel,
        cosine_similarity: cosine,
        routing_identical: true,
    }
}

/// Runs the block in both modes and compares FP8 against the FP16 baseline.
pub fn compare_modes(x: &Tensor, w: &BlockWeights) -> Result<ComparisonReport> {
    let base = forward_block_detailed(x, w, PrecisionMode::FP16Baseline, &mut Profiler::disabled())?;
    let quant = forward_block_detailed(x, w, PrecisionMode::FP8Quantized, &mut Profiler::disabled())?;
    let mut report = compare_outputs(&base.output.to_f32_vec(), &quant.output.to_f32_vec());
    report.routing_identical = base.routing.same_expert_sets(&quant.routing);
    Ok(report)
}

/// Rounds through FP16 (used by tests that build on-grid inputs).
pub fn round_f16(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&v| f16_quantize(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BlockConfig {
        BlockConfig {
            seq_len: 4,
            batch: 2,
            ..BlockConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(BlockConfig::default().validate().is_ok());
        assert_eq!(BlockConfig::default().head_dim(), 64);
        for bad in [
            BlockConfig { d_model: 100, ..Default::default() },
            BlockConfig { n_heads: 3, ..Default::default() },
            BlockConfig { expert_hidden: 200, ..Default::default() },
            BlockConfig { top_k: 9, ..Default::default() },
            BlockConfig { top_k: 0, ..Default::default() },
            BlockConfig { seq_len: 0, ..Default::default() },
        ] {
            assert!(matches!(init_block(&bad).unwrap_err(), Error::BadConfig(_)), "{bad:?}");
        }
    }

    #[test]
    fn config_json_defaults() {
        let cfg: BlockConfig = serde_json::from_str(r#"{"seq_len": 8}"#).unwrap();
        assert_eq!(cfg, BlockConfig { seq_len: 8, ..Default::default() });
        assert!(serde_json::from_str::<BlockConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_cfg();
        let a = init_master_weights(&cfg).unwrap();
        let b = init_master_weights(&cfg).unwrap();
        assert_eq!(a, b);
        let c = init_master_weights(&BlockConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_matches_std() {
        let cfg = BlockConfig::default();
        let ws = init_master_weights(&cfg).unwrap();
        let big: Vec<&Tensor> = ws.iter().filter(|t| t.numel() >= 100_000).collect();
        assert!(!big.is_empty());
        for t in big {
            let s = crate::stats::tensor_stats(t).unwrap();
            assert!((s.variance / 4e-4 - 1.0).abs() < 0.05, "{} {}", t.name(), s.variance);
        }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let cfg = small_cfg();
        let w = init_block(&cfg).unwrap();
        let x = random_input(&cfg, 3).unwrap();
        for mode in [PrecisionMode::FP16Baseline, PrecisionMode::FP8Quantized] {
            let a = forward_block(&x, &w, mode).unwrap();
            let b = forward_block(&x, &w, mode).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), &[8, 256]);
            assert_eq!(a.dtype(), DType::F16);
        }
    }

    #[test]
    fn single_token_attention_is_projected_v() {
        let cfg = BlockConfig { seq_len: 1, batch: 3, ..small_cfg() };
        let w = init_block(&cfg).unwrap();
        let x = random_input(&cfg, 5).unwrap();
        for mode in [PrecisionMode::FP16Baseline, PrecisionMode::FP8Quantized] {
            let mut prof = Profiler::disabled();
            let v = linear(&x, &w.attention.v, mode, &mut prof).unwrap();
            let o = linear(&v, &w.attention.o, mode, &mut prof).unwrap();
            let expected = residual(&x, &o.to_f32_vec()).unwrap();
            assert_eq!(attention_block(&x, &w, mode).unwrap(), expected);
        }
    }

    #[test]
    fn routing_gates_and_conservation() {
        let cfg = small_cfg();
        let w = init_block(&cfg).unwrap();
        let x = random_input(&cfg, 11).unwrap();
        let (_, r) = moe_ffn_profiled(&x, &w, PrecisionMode::FP8Quantized, &mut Profiler::disabled()).unwrap();
        for g in &r.gates {
            assert!((g.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
        let dispatch = r.dispatch(cfg.n_experts);
        let total: usize = dispatch.iter().map(Vec::len).sum();
        assert_eq!(total, cfg.tokens() * cfg.top_k);
        for es in &r.experts {
            let mut s = es.clone();
            s.dedup();
            assert_eq!(s.len(), cfg.top_k);
        }
    }

    #[test]
    fn router_ties_pick_lower_expert() {
        let logits = vec![1.0, 3.0, 3.0, 0.5];
        let r = route(&logits, 4, 1).unwrap();
        assert_eq!(r.experts, vec![vec![1]]);
        assert_eq!(r.gates, vec![vec![1.0]]);
        let r = route(&logits, 4, 2).unwrap();
        assert_eq!(r.experts, vec![vec![1, 2]]);
        assert_eq!(r.gates, vec![vec![0.5, 0.5]]);
    }

    #[test]
    fn compare_outputs_definitions() {
        let a = [1.0f32, 2.0, -3.0];
        let r = compare_outputs(&a, &a);
        assert_eq!((r.max_abs_err, r.rel_frobenius_err, r.cosine_similarity), (0.0, 0.0, 1.0));
        let r = compare_outputs(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(r.cosine_similarity, 0.0);
        assert_eq!(r.max_abs_err, 1.0);
        let r = compare_outputs(&[1.0, 0.0], &[-2.0, 0.0]);
        assert_eq!(r.cosine_similarity, -1.0);
    }

    #[test]
    fn compare_mode_against_itself() {
        let cfg = small_cfg();
        let w = init_block(&cfg).unwrap();
        let x = random_input(&cfg, 1).unwrap();
        let out = forward_block(&x, &w, PrecisionMode::FP8Quantized).unwrap().to_f32_vec();
        let r = compare_outputs(&out, &out);
        assert_eq!(r.cosine_similarity, 1.0);
        let r = compare_modes(&x, &w).unwrap();
        assert!(r.cosine_similarity > 0.99 && r.cosine_similarity <= 1.0);
    }

    #[test]
    fn quantized_entries_are_complete() {
        let cfg = small_cfg();
        let w = init_block(&cfg).unwrap();
        let entries = w.quantized_entries().unwrap();
        let q = crate::quantizer::from_entries(&entries).unwrap();
        assert_eq!(q.len(), 6 + 2 * cfg.n_experts);
        assert!(entries.iter().any(|t| t.name() == "attn.q.bias"));
        crate::container::encode_tensors(&entries).unwrap();
    }

    #[test]
    fn bad_input_shape() {
        let cfg = small_cfg();
        let w = init_block(&cfg).unwrap();
        let x = Tensor::from_f32_as_f16("x", vec![8, 128], &vec![0.0; 1024]).unwrap();
        assert!(matches!(
            forward_block(&x, &w, PrecisionMode::FP16Baseline).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }
}
