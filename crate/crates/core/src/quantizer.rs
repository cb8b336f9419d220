//! Absmax scaling at tensor, channel, token and block granularity, and
//! conversion between F32 tensors and `(FP8 codes, F32 scales)` pairs.
//!
//! Every group uses `scale = absmax(group) / 448`, so the largest element of
//! each group lands exactly on ±448. All-zero groups get scale 1.0.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fp8::{self, MAX_FINITE};
use crate::tensor::{DType, Tensor};

/// Edge length of the quantization blocks used for MoE GEMMs.
pub const BLOCK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleGranularity {
    PerTensor,
    /// One scale per index along `axis`.
    PerChannel { axis: usize },
    /// One scale per row of a `[tokens, features]` tensor.
    PerToken,
    /// One scale per `rows × cols` tile over the trailing dims. Only 1×128
    /// and 128×128 are accepted.
    Block { rows: usize, cols: usize },
}

impl ScaleGranularity {
    pub const ACTIVATION_BLOCK: Self = Self::Block { rows: 1, cols: BLOCK };
    pub const WEIGHT_BLOCK: Self = Self::Block {
        rows: BLOCK,
        cols: BLOCK,
    };

    /// Three-value descriptor persisted as `<name>.gran`.
    pub fn descriptor(self) -> [f32; 3] {
        match self {
            Self::PerTensor => [0.0, 0.0, 0.0],
            Self::PerChannel { axis } => [1.0, axis as f32, 0.0],
            Self::PerToken => [2.0, 0.0, 0.0],
            Self::Block { rows, cols } => [3.0, rows as f32, cols as f32],
        }
    }

    pub fn from_descriptor(d: &[f32]) -> Result<Self> {
        let bad = || Error::BadGranularity {
            granularity: format!("{d:?}"),
            detail: "unrecognised descriptor".into(),
        };
        let &[tag, a, b] = d else { return Err(bad()) };
        let int = |v: f32| {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e6 {
                Ok(v as usize)
            } else {
                Err(bad())
            }
        };
        let g = match int(tag)? {
            0 => Self::PerTensor,
            1 => Self::PerChannel { axis: int(a)? },
            2 => Self::PerToken,
            3 => Self::Block {
                rows: int(a)?,
                cols: int(b)?,
            },
            _ => return Err(bad()),
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(self) -> Result<()> {
        match self {
            Self::Block { rows, cols } if !matches!((rows, cols), (1, BLOCK) | (BLOCK, BLOCK)) => {
                Err(Error::BadGranularity {
                    granularity: self.to_string(),
                    detail: "only 1x128 and 128x128 blocks are supported".into(),
                })
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ScaleGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PerTensor => f.write_str("per-tensor"),
            Self::PerChannel { axis } => write!(f, "per-channel={axis}"),
            Self::PerToken => f.write_str("per-token"),
            Self::Block { rows, cols } => write!(f, "block={rows}x{cols}"),
        }
    }
}

impl FromStr for ScaleGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: &str| Error::BadGranularity {
            granularity: s.to_string(),
            detail: detail.to_string(),
        };
        let g = match s {
            "per-tensor" => Self::PerTensor,
            "per-token" => Self::PerToken,
            _ => {
                if let Some(axis) = s.strip_prefix("per-channel=") {
                    Self::PerChannel {
                        axis: axis.parse().map_err(|_| bad("axis must be an integer"))?,
                    }
                } else if let Some(dims) = s.strip_prefix("block=") {
                    let (r, c) = dims.split_once('x').ok_or_else(|| bad("expected RxC"))?;
                    Self::Block {
                        rows: r.parse().map_err(|_| bad("bad block rows"))?,
                        cols: c.parse().map_err(|_| bad("bad block cols"))?,
                    }
                } else {
                    return Err(bad(
                        "expected per-tensor, per-channel=AXIS, per-token, block=1x128 or block=128x128",
                    ));
                }
            }
        };
        g.validate()?;
        Ok(g)
    }
}

/// How elements of a tensor map onto scale groups.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GroupLayout {
    pub scale_shape: Vec<usize>,
    kind: LayoutKind,
}

#[derive(Debug, Clone, PartialEq)]
enum LayoutKind {
    Single,
    /// `outer × axis_len × inner` decomposition.
    Axis { axis_len: usize, inner: usize },
    /// Tiles over the trailing `rows × cols` matrix of each leading slice.
    Tiles {
        rows: usize,
        cols: usize,
        tile_rows: usize,
        tile_cols: usize,
    },
}

impl GroupLayout {
    pub fn new(name: &str, shape: &[usize], g: ScaleGranularity) -> Result<Self> {
        g.validate()?;
        let not_divisible = || Error::ShapeNotDivisible {
            tensor: name.to_string(),
            shape: shape.to_vec(),
            granularity: g.to_string(),
        };
        match g {
            ScaleGranularity::PerTensor => Ok(Self {
                scale_shape: vec![1],
                kind: LayoutKind::Single,
            }),
            ScaleGranularity::PerChannel { axis } => {
                if axis >= shape.len() {
                    return Err(Error::BadGranularity {
                        granularity: g.to_string(),
                        detail: format!("axis out of range for shape {shape:?}"),
                    });
                }
                Ok(Self {
                    scale_shape: vec![shape[axis]],
                    kind: LayoutKind::Axis {
                        axis_len: shape[axis],
                        inner: shape[axis + 1..].iter().product(),
                    },
                })
            }
            ScaleGranularity::PerToken => {
                let &[tokens, features] = shape else {
                    return Err(Error::ShapeMismatch(format!(
                        "per-token scaling needs a [tokens, features] tensor, {name:?} has shape {shape:?}"
                    )));
                };
                Ok(Self {
                    scale_shape: vec![tokens],
                    kind: LayoutKind::Axis {
                        axis_len: tokens,
                        inner: features,
                    },
                })
            }
            ScaleGranularity::Block { rows: tr, cols: tc } => {
                let n = shape.len();
                let cols = shape[n - 1];
                let (lead, rows) = if tr == 1 {
                    (&shape[..n - 1], 1)
                } else {
                    if n < 2 {
                        return Err(not_divisible());
                    }
                    (&shape[..n - 2], shape[n - 2])
                };
                if cols % tc != 0 || rows % tr != 0 {
                    return Err(not_divisible());
                }
                let mut scale_shape = lead.to_vec();
                if tr != 1 {
                    scale_shape.push(rows / tr);
                }
                scale_shape.push(cols / tc);
                Ok(Self {
                    scale_shape,
                    kind: LayoutKind::Tiles {
                        rows,
                        cols,
                        tile_rows: tr,
                        tile_cols: tc,
                    },
                })
            }
        }
    }

    pub fn group_count(&self) -> usize {
        self.scale_shape.iter().product()
    }

    /// Scale group of the element at row-major `index`.
    #[inline]
    pub fn group_of(&self, index: usize) -> usize {
        match self.kind {
            LayoutKind::Single => 0,
            LayoutKind::Axis { axis_len, inner } => (index / inner) % axis_len,
            LayoutKind::Tiles {
                rows,
                cols,
                tile_rows,
                tile_cols,
            } => {
                let slice = index / (rows * cols);
                let within = index % (rows * cols);
                let (r, c) = (within / cols, within % cols);
                let (gr, gc) = (rows / tile_rows, cols / tile_cols);
                slice * gr * gc + (r / tile_rows) * gc + c / tile_cols
            }
        }
    }
}

/// `absmax / 448`, or 1.0 for an all-zero group.
#[inline]
pub fn scale_from_absmax(absmax: f32) -> f32 {
    if absmax == 0.0 {
        1.0
    } else {
        absmax / MAX_FINITE
    }
}

fn check_finite(name: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteInput {
            tensor: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

fn float_values(t: &Tensor) -> Result<Vec<f32>> {
    if t.dtype() == DType::Fp8E4M3 {
        return Err(Error::WrongDType {
            tensor: t.name().to_string(),
            found: t.dtype().name(),
            expected: "F32 or F16",
        });
    }
    let values = t.to_f32_vec();
    check_finite(t.name(), &values)?;
    Ok(values)
}

fn scales_for(values: &[f32], layout: &GroupLayout) -> Vec<f32> {
    let mut absmax = vec![0.0f32; layout.group_count()];
    for (i, v) in values.iter().enumerate() {
        let g = layout.group_of(i);
        absmax[g] = absmax[g].max(v.abs());
    }
    absmax.into_iter().map(scale_from_absmax).collect()
}

/// Scale tensor for `t` at granularity `g`, named `<t>.scale`.
pub fn compute_scales(t: &Tensor, g: ScaleGranularity) -> Result<Tensor> {
    let layout = GroupLayout::new(t.name(), t.shape(), g)?;
    let values = float_values(t)?;
    let scales = scales_for(&values, &layout);
    Tensor::from_f32(format!("{}.scale", t.name()), layout.scale_shape, &scales)
}

/// FP8 codes paired with F32 scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    name: String,
    codes: Vec<u8>,
    scales: Vec<f32>,
    granularity: ScaleGranularity,
    source_shape: Vec<usize>,
    layout: GroupLayout,
}

impl QuantizedTensor {
    /// Assembles a quantized tensor from parts, checking the scale contract.
    pub fn from_parts(
        name: impl Into<String>,
        source_shape: Vec<usize>,
        codes: Vec<u8>,
        scales: Vec<f32>,
        granularity: ScaleGranularity,
    ) -> Result<Self> {
        let name = name.into();
        let layout = GroupLayout::new(&name, &source_shape, granularity)?;
        let numel: usize = source_shape.iter().product();
        if codes.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "{name:?}: {} codes for shape {source_shape:?}",
                codes.len()
            )));
        }
        if scales.len() != layout.group_count() {
            return Err(Error::ShapeMismatch(format!(
                "{name:?}: {} scales, granularity {granularity} needs shape {:?}",
                scales.len(),
                layout.scale_shape
            )));
        }
        if let Some(index) = scales.iter().position(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::NonFiniteInput {
                tensor: format!("{name}.scale"),
                index,
            });
        }
        Ok(Self {
            name,
            codes,
            scales,
            granularity,
            source_shape,
            layout,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn scale_shape(&self) -> &[usize] {
        &self.layout.scale_shape
    }

    pub fn granularity(&self) -> ScaleGranularity {
        self.granularity
    }

    pub fn source_shape(&self) -> &[usize] {
        &self.source_shape
    }

    /// Scale applied to the element at row-major `index`.
    #[inline]
    pub fn scale_of(&self, index: usize) -> f32 {
        self.scales[self.layout.group_of(index)]
    }

    pub fn codes_tensor(&self) -> Result<Tensor> {
        Tensor::from_fp8_codes(
            format!("{}.fp8", self.name),
            self.source_shape.clone(),
            self.codes.clone(),
        )
    }

    pub fn scales_tensor(&self) -> Result<Tensor> {
        Tensor::from_f32(
            format!("{}.scale", self.name),
            self.layout.scale_shape.clone(),
            &self.scales,
        )
    }

    /// `<name>.fp8`, `<name>.scale` and `<name>.gran` container entries.
    pub fn to_entries(&self) -> Result<[Tensor; 3]> {
        Ok([
            self.codes_tensor()?,
            self.scales_tensor()?,
            Tensor::from_f32(
                format!("{}.gran", self.name),
                vec![3],
                &self.granularity.descriptor(),
            )?,
        ])
    }
}

/// Regroups `.fp8`/`.scale`/`.gran` triples into quantized tensors, in the
/// order their `.fp8` entries appear.
pub fn from_entries(tensors: &[Tensor]) -> Result<Vec<QuantizedTensor>> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing entry {name:?}")))
    };
    let mut out = Vec::new();
    for t in tensors {
        let Some(base) = t.name().strip_suffix(".fp8") else {
            continue;
        };
        let scales = find(&format!("{base}.scale"))?;
        scales.expect_dtype(DType::F32)?;
        let gran = find(&format!("{base}.gran"))?;
        let g = ScaleGranularity::from_descriptor(&gran.to_f32_vec())?;
        let q = QuantizedTensor::from_parts(
            base,
            t.shape().to_vec(),
            t.fp8_codes()?.to_vec(),
            scales.to_f32_vec(),
            g,
        )?;
        if q.scale_shape() != scales.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{base:?}: scale shape {:?}, expected {:?}",
                scales.shape(),
                q.scale_shape()
            )));
        }
        out.push(q);
    }
    Ok(out)
}

/// Quantizes `t`: each element becomes `encode_fp8(x / scale_of_group)`.
pub fn quantize(t: &Tensor, g: ScaleGranularity) -> Result<QuantizedTensor> {
    let layout = GroupLayout::new(t.name(), t.shape(), g)?;
    let values = float_values(t)?;
    let scales = scales_for(&values, &layout);
    let codes = values
        .par_iter()
        .enumerate()
        .map(|(i, &v)| fp8::encode_fp8(v / scales[layout.group_of(i)]))
        .collect();
    Ok(QuantizedTensor {
        name: t.name().to_string(),
        codes,
        scales,
        granularity: g,
        source_shape: t.shape().to_vec(),
        layout,
    })
}

/// Inverse mapping `decode_fp8(code) × scale`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let values = dequantize_values(q);
    Tensor::from_f32(q.name.clone(), q.source_shape.clone(), &values)
        .expect("dequantized values are finite")
}

pub(crate) fn dequantize_values(q: &QuantizedTensor) -> Vec<f32> {
    q.codes
        .iter()
        .enumerate()
        .map(|(i, &c)| fp8::decode_fp8(c) * q.scale_of(i))
        .collect()
}
