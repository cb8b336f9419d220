//! Reference quantized GEMMs.
//!
//! FP8 multiplication is emulated by decoding codes to F32: the product of
//! two E4M3 values has at most 8 significant bits, so each product is exact
//! and only the F32 accumulation rounds. Every output element is reduced
//! sequentially in ascending `k` (and ascending block index for the grouped
//! GEMM), which keeps results bit-identical at any thread count; parallelism
//! is only across output rows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fp8;
use crate::quantizer::{self, QuantizedTensor, ScaleGranularity, BLOCK};
use crate::tensor::{f16_round, DType, Tensor};

/// A linear layer `y = x Wᵀ + b` with `W: [out_features, in_features]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    weight: QuantizedTensor,
    bias: Option<Vec<f32>>,
    weight_f16: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(
        weight: QuantizedTensor,
        bias: Option<Vec<f32>>,
        weight_f16: Option<Tensor>,
    ) -> Result<Self> {
        if weight.granularity() != (ScaleGranularity::PerChannel { axis: 0 }) {
            return Err(Error::BadGranularity {
                granularity: weight.granularity().to_string(),
                detail: "linear weights must be quantized per output channel (per-channel=0)".into(),
            });
        }
        let &[n, k] = weight.source_shape() else {
            return Err(Error::ShapeMismatch(format!(
                "linear weight {:?} must be rank 2, got {:?}",
                weight.name(),
                weight.source_shape()
            )));
        };
        if let Some(b) = &bias {
            if b.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "bias of {:?} has {} entries, expected {n}",
                    weight.name(),
                    b.len()
                )));
            }
            if let Some(index) = b.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput {
                    tensor: format!("{}.bias", weight.name()),
                    index,
                });
            }
        }
        if let Some(w) = &weight_f16 {
            w.expect_dtype(DType::F16)?;
            if w.shape() != [n, k] {
                return Err(Error::ShapeMismatch(format!(
                    "FP16 weight {:?} has shape {:?}, expected [{n}, {k}]",
                    w.name(),
                    w.shape()
                )));
            }
        }
        Ok(Self {
            weight,
            bias,
            weight_f16,
        })
    }

    /// Builds both precisions from an F32 master weight: per-channel FP8 with
    /// scales taken from the F32 values, plus an FP16 copy for the baseline.
    pub fn from_f32(weight: &Tensor, bias: Option<Vec<f32>>) -> Result<Self> {
        weight.dims2()?;
        let q = quantizer::quantize(weight, ScaleGranularity::PerChannel { axis: 0 })?;
        let f16 = Tensor::from_f32_as_f16(weight.name(), weight.shape().to_vec(), &weight.to_f32_vec())?;
        Self::new(q, bias, Some(f16))
    }

    pub fn name(&self) -> &str {
        self.weight.name()
    }

    pub fn weight(&self) -> &QuantizedTensor {
        &self.weight
    }

    pub fn weight_f16(&self) -> Option<&Tensor> {
        self.weight_f16.as_ref()
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn out_features(&self) -> usize {
        self.weight.source_shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.source_shape()[1]
    }

    fn bias_at(&self, n: usize) -> f32 {
        self.bias.as_ref().map_or(0.0, |b| b[n])
    }
}

fn activation_dims(x: &Tensor, k: usize) -> Result<usize> {
    x.expect_dtype(DType::F16)?;
    let (m, kx) = x.dims2()?;
    if kx != k {
        return Err(Error::ShapeMismatch(format!(
            "activation {:?} has {kx} features, layer expects {k}",
            x.name()
        )));
    }
    Ok(m)
}

/// Row-parallel GEMM over `a: [m, k]` and `w: [n, k]` with a sequential
/// ascending-k reduction per output and a caller-supplied epilogue.
fn gemm_f32<E>(m: usize, n: usize, k: usize, a: &[f32], w: &[f32], epilogue: E) -> Vec<u16>
where
    E: Fn(usize, usize, f32) -> u16 + Sync,
{
    let mut out = vec![0u16; m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(row, out_row)| {
        let a_row = &a[row * k..(row + 1) * k];
        for (col, o) in out_row.iter_mut().enumerate() {
            let w_row = &w[col * k..(col + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(w_row) {
                acc += x * y;
            }
            *o = epilogue(row, col, acc);
        }
    });
    out
}

/// Baseline FP16 linear: F32 accumulation of FP16 operands, one cast back.
pub fn fp16_linear(x: &Tensor, layer: &LinearLayer) -> Result<Tensor> {
    let w = layer.weight_f16.as_ref().ok_or_else(|| {
        Error::ShapeMismatch(format!("layer {:?} has no FP16 weight", layer.name()))
    })?;
    let (n, k) = (layer.out_features(), layer.in_features());
    let m = activation_dims(x, k)?;
    let out = gemm_f32(m, n, k, &x.to_f32_vec(), &w.to_f32_vec(), |_, col, acc| {
        f16_round(acc + layer.bias_at(col))
    });
    Tensor::from_f16_bits(layer.name(), vec![m, n], &out)
}

/// Dynamic activation quantization (per-token or 1×128 blocks) of an FP16
/// `[tokens, features]` tensor.
pub fn quantize_activations(x: &Tensor, g: ScaleGranularity) -> Result<QuantizedTensor> {
    x.expect_dtype(DType::F16)?;
    x.dims2()?;
    quantizer::quantize(x, g).map_err(|e| match e {
        Error::NonFiniteInput { tensor, index } => Error::NonFiniteActivation { tensor, index },
        e => e,
    })
}

/// FP8 linear: per-token dynamic activation scales, per-channel weight
/// scales, exact FP8 products, F32 accumulation, FP16 cast-back.
pub fn fp8_linear(x: &Tensor, layer: &LinearLayer) -> Result<Tensor> {
    activation_dims(x, layer.in_features())?;
    let a = quantize_activations(x, ScaleGranularity::PerToken)?;
    fp8_linear_quantized(&a, layer)
}

/// GEMM half of [`fp8_linear`] for activations already quantized per token.
pub fn fp8_linear_quantized(a: &QuantizedTensor, layer: &LinearLayer) -> Result<Tensor> {
    if a.granularity() != ScaleGranularity::PerToken {
        return Err(Error::BadGranularity {
            granularity: a.granularity().to_string(),
            detail: "fp8_linear expects per-token activation scales".into(),
        });
    }
    let (n, k) = (layer.out_features(), layer.in_features());
    let &[m, ka] = a.source_shape() else {
        unreachable!("per-token tensors are rank 2")
    };
    if ka != k {
        return Err(Error::ShapeMismatch(format!(
            "activation {:?} has {ka} features, layer expects {k}",
            a.name()
        )));
    }
    let a_dec: Vec<f32> = a.codes().iter().map(|&c| fp8::decode_fp8(c)).collect();
    let w_dec: Vec<f32> = layer.weight.codes().iter().map(|&c| fp8::decode_fp8(c)).collect();
    let s_a = a.scales();
    let s_w = layer.weight.scales();
    let out = gemm_f32(m, n, k, &a_dec, &w_dec, |row, col, acc| {
        f16_round(acc * s_a[row] * s_w[col] + layer.bias_at(col))
    });
    Tensor::from_f16_bits(layer.name(), vec![m, n], &out)
}

/// Expert weights for a grouped GEMM, each `[n_out, k_in]` with 128×128
/// block scales.
#[derive(Debug, Clone)]
pub struct ExpertGroup {
    experts: Vec<QuantizedTensor>,
    n_out: usize,
    k_in: usize,
}

impl ExpertGroup {
    pub fn new(experts: Vec<QuantizedTensor>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("expert group is empty".into()))?;
        let &[n_out, k_in] = first.source_shape() else {
            return Err(Error::ShapeMismatch(format!(
                "expert weight {:?} must be rank 2",
                first.name()
            )));
        };
        for e in &experts {
            if e.granularity() != ScaleGranularity::WEIGHT_BLOCK {
                return Err(Error::BadGranularity {
                    granularity: e.granularity().to_string(),
                    detail: format!("expert {:?} must use 128x128 blocks", e.name()),
                });
            }
            if e.source_shape() != [n_out, k_in] {
                return Err(Error::ShapeMismatch(format!(
                    "expert {:?} has shape {:?}, expected [{n_out}, {k_in}]",
                    e.name(),
                    e.source_shape()
                )));
            }
        }
        Ok(Self {
            experts,
            n_out,
            k_in,
        })
    }

    /// Block-quantizes F32 master weights.
    pub fn from_f32(weights: &[Tensor]) -> Result<Self> {
        let q = weights
            .iter()
            .map(|w| quantizer::quantize(w, ScaleGranularity::WEIGHT_BLOCK))
            .collect::<Result<Vec<_>>>()?;
        Self::new(q)
    }

    pub fn experts(&self) -> &[QuantizedTensor] {
        &self.experts
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn k_in(&self) -> usize {
        self.k_in
    }
}

/// Block-wise FP8 grouped GEMM: one `[M_e, K]` FP16 activation slice per
/// expert, quantized in 1×128 blocks after dispatch.
pub fn fp8_grouped_gemm(x_groups: &[Tensor], experts: &ExpertGroup) -> Result<Vec<Tensor>> {
    let quantized = x_groups
        .iter()
        .map(|x| {
            activation_dims(x, experts.k_in)?;
            quantize_activations(x, ScaleGranularity::ACTIVATION_BLOCK)
        })
        .collect::<Result<Vec<_>>>()?;
    fp8_grouped_gemm_quantized(&quantized, experts)
}

/// GEMM half of [`fp8_grouped_gemm`].
pub fn fp8_grouped_gemm_quantized(
    a_groups: &[QuantizedTensor],
    experts: &ExpertGroup,
) -> Result<Vec<Tensor>> {
    if a_groups.len() != experts.expert_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} activation groups for {} experts",
            a_groups.len(),
            experts.expert_count()
        )));
    }
    let (n, k) = (experts.n_out, experts.k_in);
    let k_blocks = k / BLOCK;
    a_groups
        .iter()
        .zip(&experts.experts)
        .map(|(a, w)| {
            if a.granularity() != ScaleGranularity::ACTIVATION_BLOCK {
                return Err(Error::BadGranularity {
                    granularity: a.granularity().to_string(),
                    detail: "grouped GEMM expects 1x128 activation blocks".into(),
                });
            }
            let &[m, ka] = a.source_shape() else {
                return Err(Error::ShapeMismatch(format!(
                    "activation {:?} must be rank 2",
                    a.name()
                )));
            };
            if ka != k {
                return Err(Error::ShapeMismatch(format!(
                    "activation {:?} has {ka} features, experts expect {k}",
                    a.name()
                )));
            }
            let a_dec: Vec<f32> = a.codes().iter().map(|&c| fp8::decode_fp8(c)).collect();
            let w_dec: Vec<f32> = w.codes().iter().map(|&c| fp8::decode_fp8(c)).collect();
            let (s_a, s_w) = (a.scales(), w.scales());
            let mut out = vec![0u16; m * n];
            if n > 0 {
                out.par_chunks_mut(n).enumerate().for_each(|(row, out_row)| {
                    let a_row = &a_dec[row * k..(row + 1) * k];
                    for (col, o) in out_row.iter_mut().enumerate() {
                        let w_row = &w_dec[col * k..(col + 1) * k];
                        let s_w_row = &s_w[(col / BLOCK) * k_blocks..(col / BLOCK + 1) * k_blocks];
                        let mut acc = 0.0f32;
                        for kb in 0..k_blocks {
                            let span = kb * BLOCK..(kb + 1) * BLOCK;
                            let mut partial = 0.0f32;
                            for (x, y) in a_row[span.clone()].iter().zip(&w_row[span]) {
                                partial += x * y;
                            }
                            acc += partial * s_a[row * k_blocks + kb] * s_w_row[kb];
                        }
                        *o = f16_round(acc);
                    }
                });
            }
            Tensor::from_f16_bits(w.name(), vec![m, n], &out)
        })
        .collect()
}

/// FP16 baseline for the grouped GEMM: one unbiased FP16 linear per expert.
pub fn fp16_grouped_gemm(x_groups: &[Tensor], weights_f16: &[Tensor]) -> Result<Vec<Tensor>> {
    if x_groups.len() != weights_f16.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} activation groups for {} experts",
            x_groups.len(),
            weights_f16.len()
        )));
    }
    x_groups
        .iter()
        .zip(weights_f16)
        .map(|(x, w)| {
            w.expect_dtype(DType::F16)?;
            let (n, k) = w.dims2()?;
            let m = activation_dims(x, k)?;
            let out = gemm_f32(m, n, k, &x.to_f32_vec(), &w.to_f32_vec(), |_, _, acc| f16_round(acc));
            Tensor::from_f16_bits(w.name(), vec![m, n], &out)
        })
        .collect()
}
