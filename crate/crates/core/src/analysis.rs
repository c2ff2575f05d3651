//! Representational-capacity calculator and operation accounting.
//!
//! Capacity follows the state-counting argument: a value set with `S`
//! distinct states per element and `d` elements has `S^d` states, i.e.
//! `d * log2(S)` bits. Operation accounting instruments a full forward
//! pass per layer; the spiking attention kernels report their own exact
//! tallies, and weight-activation products on spiking inputs are counted
//! as additions (one accumulate per presynaptic spike).

use serde::Serialize;

use crate::attention::AttentionOps;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Element value set of an activation tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Binary,
    Ternary,
    RealBits(u32),
}

/// Capacity question: value set plus tensor dimensions.
#[derive(Clone, Debug)]
pub struct CapacityQuery {
    pub kind: ValueKind,
    pub dims: Vec<usize>,
}

impl CapacityQuery {
    pub fn new(kind: ValueKind, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "capacity dims must be positive, got {:?}",
                dims
            )));
        }
        if let ValueKind::RealBits(b) = kind {
            if b == 0 {
                return Err(Error::config("bit width must be at least 1"));
            }
        }
        Ok(CapacityQuery {
            kind,
            dims: dims.to_vec(),
        })
    }
}

/// Maximum-entropy capacity of the queried tensor, in bits: `d` elements
/// of a binary set give `d` bits, `b`-bit reals give `b*d`, and the
/// ternary set gives `log2(3) * d` by the same counting argument.
pub fn capacity_bits(q: &CapacityQuery) -> f64 {
    let d: f64 = q.dims.iter().map(|&x| x as f64).product();
    match q.kind {
        ValueKind::Binary => d,
        ValueKind::RealBits(b) => b as f64 * d,
        ValueKind::Ternary => d * 3f64.log2(),
    }
}

/// Shannon entropy (bits) of the empirical distribution over the distinct
/// values observed in a buffer. Diagnostic only: spike tensors take few
/// distinct values, so the histogram is exact.
pub fn empirical_entropy_bits<T: Scalar>(values: &[T]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut entropy = 0.0;
    let mut run_start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || sorted[i].total_cmp(&sorted[run_start]) != std::cmp::Ordering::Equal {
            let p = (i - run_start) as f64 / n;
            entropy -= p * p.log2();
            run_start = i;
        }
    }
    entropy
}

/// Exact value domain of a tensor, by element scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    Binary,
    Ternary,
    NonNegative,
    Real,
}

pub fn classify_domain<T: Scalar>(t: &Tensor<T>) -> ValueDomain {
    let mut binary = true;
    let mut ternary = true;
    let mut non_negative = true;
    for &v in t.values().iter() {
        if v != T::zero() && v != T::one() {
            binary = false;
        }
        if v != T::zero() && v != T::one() && v != -T::one() {
            ternary = false;
        }
        if v < T::zero() {
            non_negative = false;
        }
        if !ternary && !non_negative {
            break;
        }
    }
    if binary {
        ValueDomain::Binary
    } else if ternary {
        ValueDomain::Ternary
    } else if non_negative {
        ValueDomain::NonNegative
    } else {
        ValueDomain::Real
    }
}

/// What kind of computation a report entry covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpCategory {
    Conv,
    Linear,
    AttnProduct,
    AttnAux,
    Neuron,
    Pool,
    Norm,
    Head,
}

/// Per-layer operation tally.
#[derive(Clone, Debug, Serialize)]
pub struct LayerOps {
    pub name: String,
    pub category: OpCategory,
    pub input_domain: ValueDomain,
    pub output_shape: Vec<usize>,
    pub additions: u64,
    pub multiplications: u64,
    pub comparisons: u64,
}

/// Whole-forward operation report.
#[derive(Clone, Debug, Default, Serialize)]
pub struct OpCountReport {
    pub layers: Vec<LayerOps>,
}

impl OpCountReport {
    pub fn push(&mut self, entry: LayerOps) {
        self.layers.push(entry);
    }

    pub fn total_additions(&self) -> u64 {
        self.layers.iter().map(|l| l.additions).sum()
    }

    pub fn total_multiplications(&self) -> u64 {
        self.layers.iter().map(|l| l.multiplications).sum()
    }

    pub fn total_comparisons(&self) -> u64 {
        self.layers.iter().map(|l| l.comparisons).sum()
    }

    /// Multiplications inside the attention matrix products only.
    pub fn attention_product_multiplications(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.category == OpCategory::AttnProduct)
            .map(|l| l.multiplications)
            .sum()
    }

    /// Flat `key = value` rendering, one line per layer and field.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&format!(
                "{name}.category = {cat:?}\n{name}.input_domain = {dom:?}\n\
                 {name}.additions = {adds}\n{name}.multiplications = {muls}\n\
                 {name}.comparisons = {cmps}\n",
                name = l.name,
                cat = l.category,
                dom = l.input_domain,
                adds = l.additions,
                muls = l.multiplications,
                cmps = l.comparisons,
            ));
        }
        out.push_str(&format!(
            "total.additions = {}\ntotal.multiplications = {}\ntotal.comparisons = {}\n",
            self.total_additions(),
            self.total_multiplications(),
            self.total_comparisons()
        ));
        out
    }

    /// One JSON record per layer.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&serde_json::to_string(l).map_err(|e| Error::Data(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Forward-pass instrumentation handle. Spike statistics are always
/// gathered (they feed the per-epoch metrics); the per-layer report is
/// only built when requested.
#[derive(Default)]
pub struct ForwardObserver {
    pub report: Option<OpCountReport>,
    pub spike_ones: u64,
    pub spike_total: u64,
}

impl ForwardObserver {
    /// Observer that only tracks spike rates.
    pub fn passive() -> Self {
        ForwardObserver::default()
    }

    /// Observer that additionally builds the per-layer operation report.
    pub fn counting() -> Self {
        ForwardObserver {
            report: Some(OpCountReport::default()),
            spike_ones: 0,
            spike_total: 0,
        }
    }

    pub fn counting_enabled(&self) -> bool {
        self.report.is_some()
    }

    pub fn record(&mut self, entry: LayerOps) {
        if let Some(report) = &mut self.report {
            report.push(entry);
        }
    }

    /// Feeds the spike-rate summary from one spike tensor.
    pub fn observe_spikes<T: Scalar>(&mut self, spikes: &Tensor<T>) {
        let ones = spikes.values().iter().filter(|&&v| v != T::zero()).count() as u64;
        self.spike_ones += ones;
        self.spike_total += spikes.numel() as u64;
    }

    pub fn spike_rate(&self) -> f64 {
        if self.spike_total == 0 {
            0.0
        } else {
            self.spike_ones as f64 / self.spike_total as f64
        }
    }

    /// Records one attention call as two product entries plus an auxiliary
    /// entry (scale/softmax work and the trailing neuron comparisons).
    pub fn record_attention(
        &mut self,
        name: &str,
        ops: &AttentionOps,
        qk_domain: ValueDomain,
        av_domain: ValueDomain,
        out_shape: &[usize],
    ) {
        if !self.counting_enabled() {
            return;
        }
        self.record(LayerOps {
            name: format!("{name}.qk_product"),
            category: OpCategory::AttnProduct,
            input_domain: qk_domain,
            output_shape: out_shape.to_vec(),
            additions: ops.qk.accumulates(),
            multiplications: ops.qk.multiplications,
            comparisons: 0,
        });
        self.record(LayerOps {
            name: format!("{name}.av_product"),
            category: OpCategory::AttnProduct,
            input_domain: av_domain,
            output_shape: out_shape.to_vec(),
            additions: ops.av.accumulates(),
            multiplications: ops.av.multiplications,
            comparisons: 0,
        });
        self.record(LayerOps {
            name: format!("{name}.aux"),
            category: OpCategory::AttnAux,
            input_domain: ValueDomain::Real,
            output_shape: out_shape.to_vec(),
            additions: ops.aux_additions,
            multiplications: ops.aux_multiplications,
            comparisons: ops.neuron_comparisons,
        });
    }
}

/// Records one spiking-neuron layer: the membrane integration is one
/// addition per element and the threshold one comparison per element.
/// Per-neuron reset/decay arithmetic is state-local (it does not scale
/// with synapse count) and is excluded from the multiply tally, following
/// the usual SNN accounting convention.
pub fn record_neuron<T: Scalar>(
    obs: &mut ForwardObserver,
    name: &str,
    membrane: &Tensor<T>,
    spikes: &Tensor<T>,
) {
    obs.observe_spikes(spikes);
    if obs.counting_enabled() {
        let elems = membrane.numel() as u64;
        let entry = LayerOps {
            name: name.to_string(),
            category: OpCategory::Neuron,
            input_domain: classify_domain(membrane),
            output_shape: spikes.shape().to_vec(),
            additions: elems,
            multiplications: 0,
            comparisons: elems,
        };
        obs.record(entry);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_capacity_is_element_count() {
        let q = CapacityQuery::new(ValueKind::Binary, &[2, 2, 2]).unwrap();
        assert_eq!(capacity_bits(&q), 8.0);
    }

    #[test]
    fn real32_capacity_is_32x_binary() {
        let q = CapacityQuery::new(ValueKind::RealBits(32), &[2, 2, 2]).unwrap();
        assert_eq!(capacity_bits(&q), 256.0);
    }

    #[test]
    fn ternary_capacity_matches_enumeration() {
        // 3^4 = 81 states.
        let q = CapacityQuery::new(ValueKind::Ternary, &[1, 1, 4]).unwrap();
        assert!((capacity_bits(&q) - 81f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(CapacityQuery::new(ValueKind::Binary, &[0, 3]).is_err());
        assert!(CapacityQuery::new(ValueKind::RealBits(0), &[3]).is_err());
    }

    #[test]
    fn entropy_of_fair_coin_is_one_bit() {
        let vals = vec![0.0f64, 1.0, 0.0, 1.0];
        assert!((empirical_entropy_bits(&vals) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_totals_are_sums() {
        let mut report = OpCountReport::default();
        for i in 0..3u64 {
            report.push(LayerOps {
                name: format!("l{i}"),
                category: OpCategory::Linear,
                input_domain: ValueDomain::Binary,
                output_shape: vec![1],
                additions: i,
                multiplications: 2 * i,
                comparisons: 3 * i,
            });
        }
        assert_eq!(report.total_additions(), 3);
        assert_eq!(report.total_multiplications(), 6);
        assert_eq!(report.total_comparisons(), 9);
    }
}
