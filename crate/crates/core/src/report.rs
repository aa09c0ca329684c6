//! Static summary of a configuration: slot utilization per layout,
//! activation parameter counts, depth against the chain, and modelled cost.

use ckks::HeParams;
use serde::{Deserialize, Serialize};

use crate::activation::{count_params, Granularity};
use crate::error::Result;
use crate::inference::{self, CostEstimate, OpTimings};
use crate::model::{ActivationKind, LayerSpec, NetworkSpec};
use crate::packing::{slot_utilization, Layout};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationRow {
    pub layer: usize,
    pub shape: (usize, usize, usize),
    pub granularity: Granularity,
    pub coefficients: usize,
    pub activations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub ring_degree: usize,
    pub slots: usize,
    pub max_level: usize,
    pub depth: usize,
    pub fits_chain: bool,
    pub batch_size: usize,
    /// One image's `H*W` slots per ciphertext.
    pub channelwise_utilization: f64,
    /// `M` images per ciphertext.
    pub elementwise_utilization: f64,
    pub activations: Vec<ActivationRow>,
    pub costs: Vec<CostEstimate>,
}

/// Accuracy of one trained model on one split, as written by `eval-plain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub activation: String,
    pub distilled: bool,
    pub seed: u64,
    pub split: String,
    pub accuracy: f64,
}

pub fn build(spec: &NetworkSpec, params: &HeParams, m: usize, timings: &OpTimings) -> Result<Report> {
    let shapes = spec.shapes()?;
    let mut activations = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Activation {
            activation: ActivationKind::Poly { granularity },
        } = layer
        {
            let (n, h, w) = shapes[i];
            let (coefficients, acts) = count_params(*granularity, n, h, w);
            activations.push(ActivationRow {
                layer: i,
                shape: (n, h, w),
                granularity: *granularity,
                coefficients,
                activations: acts,
            });
        }
    }
    let depth = inference::analytic_depth(spec);
    let (_, h, w) = spec.input;
    let slots = params.slot_count();
    let costs = [Layout::ElementWise, Layout::ChannelWise]
        .into_iter()
        .map(|l| inference::estimate_cost(spec, params, m, l, timings))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        ring_degree: params.ring_degree,
        slots,
        max_level: params.max_level(),
        depth,
        fits_chain: depth <= params.max_level(),
        batch_size: m,
        channelwise_utilization: slot_utilization((h * w).min(slots), params)?,
        elementwise_utilization: slot_utilization(m.min(slots), params)?,
        activations,
        costs,
    })
}

/// Mean accuracy per `(activation, distilled)` group.
pub fn accuracy_groups(records: &[EvalRecord]) -> Vec<(String, bool, f64, usize)> {
    let mut keys: Vec<(String, bool)> = records.iter().map(|r| (r.activation.clone(), r.distilled)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(a, d)| {
            let accs: Vec<f64> = records
                .iter()
                .filter(|r| r.activation == a && r.distilled == d)
                .map(|r| r.accuracy)
                .collect();
            let n = accs.len();
            (a, d, accs.iter().sum::<f64>() / n as f64, n)
        })
        .collect()
}
