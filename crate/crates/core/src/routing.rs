//! Routing features, expert probabilities, top-k selection, depth buckets
//! and residual chain composition.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::complexity::ComplexityFeatures;
use crate::error::{Error, Result};
use crate::experts::{Dims, Expert, ExpertKind, MemoryState};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub const K_MIN: usize = 2;
pub const K_MAX: usize = 5;

/// Feature row `[mean-pool(h0), d_syn, c_sem, r, C]` of width `d_model + 4`.
///
/// `score` is the complexity score node (1x1) so that its weights receive
/// gradient through the router.
pub fn phi(tape: &mut Tape, h0: Var, feats: &ComplexityFeatures, score: Var) -> Result<Var> {
    let pooled = tape.mean_rows(h0);
    let f = tape.constant(Tensor::row(&feats.as_array()));
    tape.concat_cols(&[pooled, f, score])
}

/// `softmax(W . phi)` for `W: [m x f]`, `phi: [1 x f]`, as a `1 x m` row.
pub fn routing_probs(tape: &mut Tape, w: Var, phi: Var) -> Result<Var> {
    let wt = tape.transpose(w);
    let logits = tape.matmul(phi, wt)?;
    if !tape.value(logits).is_finite() {
        return Err(Error::Numeric("routing logits are not finite".into()));
    }
    tape.softmax(logits)
}

/// The `k` largest entries of `probs`, descending, ties to the lower id.
pub fn select_top_k(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(Error::config(format!("k = {k} outside 1..={}", probs.len())));
    }
    Ok(ranking(probs).into_iter().take(k).collect())
}

/// All ids ordered by descending probability, ties to the lower id.
pub fn ranking(probs: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids
}

/// Complexity-score cut points mapping a score to a chain length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Thresholds {
    pub const QUANTILES: [f64; 3] = [0.40, 0.75, 0.95];

    pub fn calibrate(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Calibration("need a nonempty set of finite scores".into()));
        }
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        let [a, b, c] = Self::QUANTILES.map(|q| percentile(&s, q));
        Ok(Self { t1: a, t2: b, t3: c })
    }
}

/// Chain length for a score: below `t1` gives 2, below `t2` 3, below `t3` 4, else 5.
pub fn choose_k(score: f64, thresholds: Option<&Thresholds>) -> Result<usize> {
    let t = thresholds.ok_or_else(|| Error::Calibration("choose_k called before calibration".into()))?;
    Ok(if score < t.t1 {
        2
    } else if score < t.t2 {
        3
    } else if score < t.t3 {
        4
    } else {
        5
    })
}

/// One executed chain step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub expert_id: usize,
    pub kind: ExpertKind,
    pub macs: u64,
    pub halt_prob: Option<f64>,
    /// Activation floats recorded on the tape during this step.
    pub activations: u64,
}

/// Per-inference record of routing and execution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub input_id: u64,
    pub tier: u8,
    pub n: usize,
    pub d_syn: usize,
    pub c_sem: f64,
    pub r: usize,
    #[serde(rename = "C")]
    pub score: f64,
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub k: usize,
    pub steps: Vec<TraceStep>,
    pub routing_macs: u64,
    pub total_macs: u64,
    pub correct: Option<bool>,
    pub predicted: Option<usize>,
}

impl ChainTrace {
    pub fn step_macs(&self) -> u64 {
        self.steps.iter().map(|s| s.macs).sum()
    }

    /// Checks `total = steps + routing` and that at least one step ran.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Trace(format!("input {} has no steps", self.input_id)));
        }
        if self.total_macs != self.step_macs() + self.routing_macs {
            return Err(Error::Trace(format!(
                "input {}: total {} != steps {} + routing {}",
                self.input_id,
                self.total_macs,
                self.step_macs(),
                self.routing_macs
            )));
        }
        Ok(())
    }
}

/// How a chain is executed.
#[derive(Clone, Debug)]
pub struct ChainPlan {
    /// Expert ids in execution order.
    pub order: Vec<usize>,
    /// Routing probabilities (`1 x m`); `None` runs every step with gate 1.
    pub probs: Option<Var>,
    /// Remaining experts by descending probability, for supervisor extension.
    pub reserve: Vec<usize>,
    pub control: Option<Control>,
    /// Stop gate gradients from reaching the router.
    pub detach_gates: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Control {
    pub tau_halt: f64,
    pub k_max: usize,
}

impl Default for Control {
    fn default() -> Self {
        Self { tau_halt: 0.9, k_max: K_MAX }
    }
}

/// Result of chain execution.
pub struct ChainOutput {
    pub h: Var,
    pub steps: Vec<TraceStep>,
    /// Supervisor outputs in execution order, for control losses.
    pub signals: Vec<crate::experts::SupervisorSignal>,
}

/// Apply experts in order: `h1 = g E(h0)`, `h_t = g E(h_{t-1}) + h_{t-1}`.
///
/// Supervisor steps leave `h` untouched and may halt, extend or shorten the
/// remaining chain when `plan.control` is set. Halting only takes effect once
/// a transforming expert has run.
pub fn compose_chain(
    tape: &mut Tape,
    store: &ParamStore,
    experts: &[Expert],
    plan: &ChainPlan,
    h0: Var,
    mem: &mut MemoryState,
    dims: &Dims,
) -> Result<ChainOutput> {
    if plan.order.is_empty() {
        return Err(Error::contract("empty expert selection"));
    }
    let gate_denom = match plan.probs {
        Some(p) => {
            let sel = tape.gather(p, &plan.order)?;
            let s = tape.sum(sel);
            Some((p, tape.scale(s, 1.0 / plan.order.len() as f64)))
        }
        None => None,
    };
    let mut pending: VecDeque<usize> = plan.order.iter().copied().collect();
    let mut reserve: VecDeque<usize> = plan.reserve.iter().copied().collect();
    let mut h = h0;
    let mut steps = Vec::new();
    let mut signals = Vec::new();
    let mut transformed = false;
    while let Some(j) = pending.pop_front() {
        let e = &experts[j];
        let (macs0, act0) = (tape.macs(), tape.activation_floats());
        if e.kind == ExpertKind::Mce {
            let sig = e.supervise(tape, store, h)?;
            steps.push(TraceStep {
                expert_id: j,
                kind: e.kind,
                macs: tape.macs() - macs0,
                halt_prob: Some(sig.halt_prob),
                activations: tape.activation_floats() - act0,
            });
            signals.push(sig);
            if let Some(c) = plan.control {
                match sig.depth_adjust {
                    1 if steps.len() + pending.len() < c.k_max => {
                        if let Some(pos) = reserve.iter().position(|&r| experts[r].kind != ExpertKind::Mce) {
                            pending.push_back(reserve.remove(pos).expect("position is valid"));
                        }
                    }
                    -1 => {
                        let keeps_transform = |p: &VecDeque<usize>| {
                            transformed || p.iter().any(|&r| experts[r].kind != ExpertKind::Mce)
                        };
                        if let Some(last) = pending.pop_back() {
                            if !keeps_transform(&pending) {
                                pending.push_back(last);
                            }
                        }
                    }
                    _ => {}
                }
                if sig.halt_prob > c.tau_halt && transformed {
                    break;
                }
            }
            continue;
        }
        let mut y = if e.kind == ExpertKind::Mie {
            e.apply(tape, store, h, Some(mem), dims)?
        } else {
            e.apply(tape, store, h, None, dims)?
        };
        if let Some((p, mean_sel)) = gate_denom {
            let pj = tape.gather(p, &[j])?;
            let mut g = tape.div_by(pj, mean_sel)?;
            if plan.detach_gates {
                g = tape.detach(g);
            }
            y = tape.scale_by(y, g)?;
        }
        if !steps.is_empty() {
            y = tape.add(y, h)?;
        }
        h = y;
        transformed = true;
        steps.push(TraceStep {
            expert_id: j,
            kind: e.kind,
            macs: tape.macs() - macs0,
            halt_prob: None,
            activations: tape.activation_floats() - act0,
        });
    }
    Ok(ChainOutput { h, steps, signals })
}
