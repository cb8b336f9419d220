//! Distribution statistics over tensors: population variance, AbsMax and
//! AbsP99 per tensor, averaged (unweighted) across tensors.

use serde::ser::{SerializeStruct, Serializer};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorStats {
    pub name: String,
    pub variance: f64,
    pub absmax: f64,
    pub absp99: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub per_tensor: Vec<TensorStats>,
    pub mean_variance: f64,
    pub mean_absmax: f64,
    pub mean_absp99: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

/// 1-based nearest-rank index `ceil(0.99 n)`, computed in integers.
pub fn p99_rank(n: usize) -> usize {
    (99 * n).div_ceil(100)
}

pub fn tensor_stats(t: &Tensor) -> Result<TensorStats> {
    let values = t.to_f32_vec();
    if values.is_empty() {
        return Err(Error::EmptyTensor {
            tensor: t.name().to_string(),
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput {
            tensor: t.name().to_string(),
            index,
        });
    }
    let n = values.len();
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let variance = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;

    let mut abs: Vec<f64> = values.iter().map(|&v| (v as f64).abs()).collect();
    let rank = p99_rank(n);
    let (_, &mut absp99, above) = abs.select_nth_unstable_by(rank - 1, f64::total_cmp);
    let absmax = above.iter().copied().fold(absp99, f64::max);

    Ok(TensorStats {
        name: t.name().to_string(),
        variance,
        absmax,
        absp99,
        count: n as u64,
    })
}

pub fn aggregate(stats: Vec<TensorStats>) -> Result<StatsReport> {
    if stats.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = stats.len() as f64;
    let mean = |f: fn(&TensorStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    Ok(StatsReport {
        mean_variance: mean(|s| s.variance),
        mean_absmax: mean(|s| s.absmax),
        mean_absp99: mean(|s| s.absp99),
        per_tensor: stats,
    })
}

/// Stats for every tensor, then the aggregate.
pub fn analyze(tensors: &[Tensor]) -> Result<StatsReport> {
    aggregate(tensors.iter().map(tensor_stats).collect::<Result<Vec<_>>>()?)
}

/// `log10(v)`, or `None` where the log is undefined (rendered as "-inf").
fn log10(v: f64) -> Option<f64> {
    (v > 0.0).then(|| v.log10())
}

struct Log10(Option<f64>);

impl Serialize for Log10 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("-inf"),
        }
    }
}

impl Serialize for StatsReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        struct Logs<'a>(&'a StatsReport);
        impl Serialize for Logs<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                let mut st = s.serialize_struct("Log10", 3)?;
                st.serialize_field("mean_variance", &Log10(log10(self.0.mean_variance)))?;
                st.serialize_field("mean_absmax", &Log10(log10(self.0.mean_absmax)))?;
                st.serialize_field("mean_absp99", &Log10(log10(self.0.mean_absp99)))?;
                st.end()
            }
        }
        let mut st = s.serialize_struct("StatsReport", 5)?;
        st.serialize_field("per_tensor", &self.per_tensor)?;
        st.serialize_field("mean_variance", &self.mean_variance)?;
        st.serialize_field("mean_absmax", &self.mean_absmax)?;
        st.serialize_field("mean_absp99", &self.mean_absp99)?;
        st.serialize_field("log10", &Logs(self))?;
        st.end()
    }
}

fn fmt_log(v: f64) -> String {
    match log10(v) {
        Some(l) => format!("{l:.4}"),
        None => "-inf".to_string(),
    }
}

pub fn render_report(r: &StatsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(r).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<32} {:>12} {:>14} {:>14} {:>14}\n",
                "tensor", "count", "variance", "absmax", "absp99"
            ));
            for t in &r.per_tensor {
                out.push_str(&format!(
                    "{:<32} {:>12} {:>14.6e} {:>14.6e} {:>14.6e}\n",
                    t.name, t.count, t.variance, t.absmax, t.absp99
                ));
            }
            out.push_str(&format!(
                "\n{:<12} {:>14} {:>10}\n",
                "aggregate", "mean", "log10"
            ));
            for (label, v) in [
                ("variance", r.mean_variance),
                ("absmax", r.mean_absmax),
                ("absp99", r.mean_absp99),
            ] {
                out.push_str(&format!("{label:<12} {v:>14.6e} {:>10}\n", fmt_log(v)));
            }
            out
        }
    }
}
