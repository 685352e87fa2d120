//! Exact MAC accounting for routed chains and the dense baselines they are
//! compared against: a uniform-depth stack (UDT) and a width-gated stack
//! (W-MoE).

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{Block, Dims, ExpertKind};
use crate::model::DsMoe;
use crate::numerics::{ParamStore, Tape, Var};
use crate::routing::ChainTrace;

/// Analytic cost parameters for one expert pool at fixed block dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub dims: Dims,
    /// Router feature width `f`.
    pub feature_dim: usize,
    /// Expert families by id.
    pub registry: Vec<ExpertKind>,
    /// Parameter count of each expert, by id.
    pub expert_params: Vec<usize>,
    /// Depth of the uniform baseline savings are reported against.
    pub baseline_depth: usize,
}

impl CostModel {
    pub fn for_model(model: &DsMoe, baseline_depth: usize) -> Self {
        Self {
            dims: model.config.dims,
            feature_dim: model.config.feature_dim(),
            registry: model.experts.iter().map(|e| e.kind).collect(),
            expert_params: model.experts.iter().map(|e| model.store.numel(e.params())).collect(),
            baseline_depth,
        }
    }

    /// One block on `n` rows, cross-attending to `mem` filled slots:
    /// `4nd^2 + 2d sum(L^2) + 2nd ff`, plus `2nd^2 + 2sd^2 + 2nsd` with memory.
    pub fn block_macs(&self, n: usize, mem: usize) -> u64 {
        let d = self.dims.d_model as u64;
        let ff = self.dims.ff as u64;
        let nn = n as u64;
        let sq: u64 = self.dims.window_lengths(n).iter().map(|&l| (l * l) as u64).sum();
        let mut macs = 4 * nn * d * d + 2 * d * sq + 2 * nn * d * ff;
        if mem > 0 {
            let s = mem as u64;
            macs += 2 * nn * d * d + 2 * s * d * d + 2 * nn * s * d;
        }
        macs
    }

    /// Cost of running expert `id` on `n` rows with `filled` memory slots
    /// already written. Returns the MACs and the filled count afterwards.
    pub fn expert_macs(&self, id: usize, n: usize, filled: usize) -> Result<(u64, usize)> {
        let kind = *self
            .registry
            .get(id)
            .ok_or_else(|| Error::Trace(format!("expert {id} not in registry of {}", self.registry.len())))?;
        Ok(match kind {
            ExpertKind::Mce => (4 * self.dims.d_model as u64, filled),
            ExpertKind::Mie => {
                let mut macs = 0;
                let mut f = filled;
                for len in self.dims.window_lengths(n) {
                    macs += kind.blocks() as u64 * self.block_macs(len, f);
                    f = (f + 1).min(self.dims.slots);
                }
                (macs, f)
            }
            k => (k.blocks() as u64 * self.block_macs(n, 0), filled),
        })
    }

    /// `m f` for the router projection plus 3 for the complexity score.
    pub fn routing_macs(&self) -> u64 {
        (self.registry.len() * self.feature_dim + 3) as u64
    }

    /// Analytic per-step MACs of an executed chain, in step order.
    pub fn predict_steps(&self, n: usize, experts: &[usize]) -> Result<Vec<u64>> {
        let mut filled = 0;
        experts
            .iter()
            .map(|&j| {
                let (macs, f) = self.expert_macs(j, n, filled)?;
                filled = f;
                Ok(macs)
            })
            .collect()
    }
}

/// `d` identical blocks on `n` rows.
pub fn uniform_cost(d: usize, n: usize, cm: &CostModel) -> Result<u64> {
    if d == 0 || n == 0 {
        return Err(Error::config(format!("uniform_cost needs d, n >= 1, got d={d} n={n}")));
    }
    Ok(d as u64 * cm.block_macs(n, 0))
}

/// Cost summary of one routed inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_macs: u64,
    pub routing_macs: u64,
    pub step_macs: Vec<u64>,
    pub activated_params: usize,
    pub peak_activations: u64,
    pub baseline_macs: u64,
    pub savings: f64,
}

impl CostReport {
    pub fn flops(&self) -> u64 {
        2 * self.total_macs
    }
}

/// Measured cost of `trace` against a UDT of `cm.baseline_depth` blocks.
pub fn chain_cost(trace: &ChainTrace, cm: &CostModel) -> Result<CostReport> {
    trace.validate()?;
    let baseline = uniform_cost(cm.baseline_depth, trace.n, cm)?;
    let (peak, activated) = memory_report(trace, cm)?;
    Ok(CostReport {
        total_macs: trace.total_macs,
        routing_macs: trace.routing_macs,
        step_macs: trace.steps.iter().map(|s| s.macs).collect(),
        activated_params: activated,
        peak_activations: peak,
        baseline_macs: baseline,
        savings: 1.0 - trace.total_macs as f64 / baseline as f64,
    })
}

/// Activation floats held by the chain (input rows, every step's recorded
/// activations, and the slot matrix when an MIE ran) plus the parameter
/// count of the distinct experts executed.
pub fn memory_report(trace: &ChainTrace, cm: &CostModel) -> Result<(u64, usize)> {
    let d = cm.dims.d_model as u64;
    let mut peak = trace.n as u64 * d + trace.steps.iter().map(|s| s.activations).sum::<u64>();
    if trace.steps.iter().any(|s| s.kind == ExpertKind::Mie) {
        peak += cm.dims.slots as u64 * d;
    }
    let mut ids: Vec<usize> = trace.steps.iter().map(|s| s.expert_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut params = 0;
    for j in ids {
        params += cm
            .expert_params
            .get(j)
            .ok_or_else(|| Error::Trace(format!("expert {j} not in registry")))?;
    }
    Ok((peak, params))
}

/// Dense baseline stack: every input runs every block.
pub struct Baseline {
    pub dims: Dims,
    pub store: ParamStore,
    blocks: Vec<Block>,
    ffn_experts: usize,
}

/// Result of a baseline forward.
pub struct BaselineRun {
    pub h: Var,
    pub macs: u64,
    pub activations: u64,
}

impl Baseline {
    /// Uniform-depth transformer of `depth` blocks.
    pub fn udt(dims: Dims, depth: usize, seed: u64) -> Self {
        Self::build(dims, depth, 0, seed)
    }

    /// The UDT trunk with each feed-forward replaced by a top-1-of-`e`
    /// sequence-gated choice.
    pub fn wmoe(dims: Dims, depth: usize, e: usize, seed: u64) -> Self {
        Self::build(dims, depth, e, seed)
    }

    fn build(dims: Dims, depth: usize, e: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blocks = (0..depth)
            .map(|l| {
                let name = format!("baseline.b{l}");
                if e == 0 {
                    Block::new(&mut store, &name, &dims, false, &mut rng)
                } else {
                    Block::new_gated(&mut store, &name, &dims, e, &mut rng)
                }
            })
            .collect();
        Self { dims, store, blocks, ffn_experts: e }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Parameters touched by one input: all of them for the UDT, one
    /// feed-forward per block for the W-MoE.
    pub fn activated_params(&self) -> usize {
        let total = self.store.numel(&self.store.ids().collect::<Vec<_>>());
        if self.ffn_experts == 0 {
            return total;
        }
        let d = self.dims.d_model;
        let ffn = d * self.dims.ff + self.dims.ff + self.dims.ff * d + d;
        total - self.depth() * (self.ffn_experts - 1) * ffn
    }

    /// MACs of the gate projections per forward (zero for the UDT).
    pub fn gate_macs(&self) -> u64 {
        (self.depth() * self.dims.d_model * self.ffn_experts) as u64
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<BaselineRun> {
        let (m0, a0) = (tape.macs(), tape.activation_floats());
        let mut x = h;
        for b in &self.blocks {
            x = b.apply(tape, &self.store, x, None, &self.dims)?;
        }
        Ok(BaselineRun { h: x, macs: tape.macs() - m0, activations: tape.activation_floats() - a0 })
    }
}

/// One line of the cost comparison CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: String,
    pub n: usize,
    /// Blocks for a baseline, chain length for a routed model.
    pub depth_or_k: usize,
    pub macs: u64,
    pub flops: u64,
    pub routing_macs: u64,
    pub activated_params: usize,
    pub peak_activations: u64,
    pub savings: f64,
}

pub fn write_cost_csv<W: Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
