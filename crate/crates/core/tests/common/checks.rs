//! Checks shared by the focused test targets and the acceptance runner.

use std::cell::RefCell;
use std::collections::VecDeque;

use dsmoe::experts::{Block, Dims, Expert, ExpertKind, MemoryState};
use dsmoe::model::{DsMoe, ModelConfig};
use dsmoe::numerics::{softmax, ParamId, ParamStore, Tape, Tensor, Var};
use dsmoe::routing::{
    choose_k, compose_chain, ranking, routing_probs, select_top_k, ChainPlan, Control, Thresholds, K_MAX, K_MIN,
};
use dsmoe::taskgen::{self, TierSpec};
use dsmoe::training::{routed_batch, LossWeights};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{grad_check, rand_tensor, rng, weighted_sum};

pub const GRAD_TOL: f64 = 1e-4;

/// Store with one random param per shape.
fn store_with(shapes: &[&[usize]], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let ids = shapes.iter().enumerate().map(|(i, sh)| s.add(format!("p{i}"), rand_tensor(&mut r, sh, 1.0))).collect();
    (s, ids)
}

fn unary(shape: &[usize], op: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let (mut s, ids) = store_with(&[shape], 11);
    grad_check(&mut s, &ids, |s| {
        let mut t = Tape::new();
        let x = t.param(s, ids[0]);
        let y = op(&mut t, x);
        let l = weighted_sum(&mut t, y, 5);
        (t, l)
    })
}

fn binary(a: &[usize], b: &[usize], op: impl Fn(&mut Tape, Var, Var) -> Var) -> f64 {
    let (mut s, ids) = store_with(&[a, b], 12);
    grad_check(&mut s, &ids, |s| {
        let mut t = Tape::new();
        let x = t.param(s, ids[0]);
        let y = t.param(s, ids[1]);
        let z = op(&mut t, x, y);
        let l = weighted_sum(&mut t, z, 6);
        (t, l)
    })
}

/// Worst relative gradient error of every differentiable tape op.
pub fn primitive_op_errors() -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("gelu", unary(&[3, 4], |t, x| t.gelu(x))),
        ("sigmoid", unary(&[3, 4], |t, x| t.sigmoid(x))),
        ("scale", unary(&[3, 4], |t, x| t.scale(x, -1.7))),
        (
            "log",
            unary(&[2, 3], |t, x| {
                let e = t.sigmoid(x);
                t.log(e)
            }),
        ),
        ("add", binary(&[3, 4], &[3, 4], |t, a, b| t.add(a, b).unwrap())),
        ("mul", binary(&[3, 4], &[3, 4], |t, a, b| t.mul(a, b).unwrap())),
        ("add_row", binary(&[3, 4], &[1, 4], |t, a, b| t.add_row(a, b).unwrap())),
        ("scale_by", binary(&[3, 4], &[1, 1], |t, a, s| t.scale_by(a, s).unwrap())),
        (
            "div_by",
            binary(&[3, 4], &[1, 1], |t, a, s| {
                // keep the divisor away from zero
                let sq = t.mul(s, s).unwrap();
                let one = t.constant(Tensor::scalar(1.0));
                let d = t.add(sq, one).unwrap();
                t.div_by(a, d).unwrap()
            }),
        ),
        ("matmul", binary(&[3, 5], &[5, 2], |t, a, b| t.matmul(a, b).unwrap())),
        ("transpose", unary(&[3, 5], |t, x| t.transpose(x))),
        ("slice_rows", unary(&[5, 3], |t, x| t.slice_rows(x, 1, 3).unwrap())),
        ("concat_rows", binary(&[2, 3], &[4, 3], |t, a, b| t.concat_rows(&[a, b, a]).unwrap())),
        ("concat_cols", binary(&[3, 2], &[3, 4], |t, a, b| t.concat_cols(&[b, a]).unwrap())),
        ("mean_rows", unary(&[4, 3], |t, x| t.mean_rows(x))),
        ("sum", unary(&[4, 3], |t, x| t.sum(x))),
        ("gather", unary(&[1, 6], |t, x| t.gather(x, &[4, 1, 4]).unwrap())),
        ("embedding", unary(&[5, 3], |t, x| t.embedding(x, &[2, 0, 2, 4]).unwrap())),
        ("reshape", unary(&[4, 3], |t, x| t.reshape(x, 2, 6).unwrap())),
        ("softmax", unary(&[3, 5], |t, x| t.softmax(x).unwrap())),
        (
            "fan-out",
            unary(&[2, 3], |t, x| {
                let y = t.mul(x, x).unwrap();
                t.add(y, x).unwrap()
            }),
        ),
    ];
    let (mut s, ids) = store_with(&[&[3, 6], &[1, 6], &[1, 6]], 13);
    let err = grad_check(&mut s, &ids, |s| {
        let mut t = Tape::new();
        let (x, g, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
        let y = t.layer_norm(x, g, b).unwrap();
        let l = weighted_sum(&mut t, y, 7);
        (t, l)
    });
    out.push(("layer_norm", err));
    let (mut s, ids) = store_with(&[&[4, 5]], 14);
    let err = grad_check(&mut s, &ids, |s| {
        let mut t = Tape::new();
        let x = t.param(s, ids[0]);
        let l = t.cross_entropy(x, &[0, 4, 2, 2]).unwrap();
        (t, l)
    });
    out.push(("cross_entropy", err));
    out
}

fn small_dims() -> Dims {
    Dims { d_model: 8, ff: 12, window: 4, slots: 3 }
}

/// Worst relative gradient error of blocks and of every expert family.
pub fn module_errors() -> Vec<(String, f64)> {
    let dims = small_dims();
    let mut out = Vec::new();
    for with_mem in [false, true] {
        let mut r = rng(21);
        let mut s = ParamStore::new();
        let b = Block::new(&mut s, "b", &dims, with_mem, &mut r);
        let x0 = s.add("x", rand_tensor(&mut r, &[6, 8], 1.0));
        let m0 = s.add("mem", rand_tensor(&mut r, &[2, 8], 1.0));
        let ids: Vec<ParamId> = s.ids().collect();
        let err = grad_check(&mut s, &ids, |s| {
            let mut t = Tape::new();
            let x = t.param(s, x0);
            let mem = with_mem.then(|| t.param(s, m0));
            let y = b.apply(&mut t, s, x, mem, &dims).unwrap();
            let l = weighted_sum(&mut t, y, 9);
            (t, l)
        });
        out.push((format!("block (memory {with_mem})"), err));
    }

    let mut r = rng(22);
    let mut s = ParamStore::new();
    let b = Block::new_gated(&mut s, "g", &dims, 3, &mut r);
    let x0 = s.add("x", rand_tensor(&mut r, &[5, 8], 1.0));
    let ids: Vec<ParamId> = s.ids().collect();
    let err = grad_check(&mut s, &ids, |s| {
        let mut t = Tape::new();
        let x = t.param(s, x0);
        let y = b.apply(&mut t, s, x, None, &dims).unwrap();
        let l = weighted_sum(&mut t, y, 10);
        (t, l)
    });
    out.push(("gated block".into(), err));

    for kind in ExpertKind::ALL {
        let mut r = rng(30 + kind.index() as u64);
        let mut s = ParamStore::new();
        let e = Expert::new(&mut s, 0, kind, &dims, &mut r);
        // randomise the zero-initialised supervisor heads
        for id in e.params().to_vec() {
            if !s.get(id).name.contains(".ctl.") {
                continue;
            }
            let shape = s.value(id).shape().to_vec();
            *s.value_mut(id) = rand_tensor(&mut r, &shape, 0.5);
        }
        let x0 = s.add("x", rand_tensor(&mut r, &[9, 8], 1.0));
        let ids: Vec<ParamId> = s.ids().collect();
        let err = grad_check(&mut s, &ids, |s| {
            let mut t = Tape::new();
            let x = t.param(s, x0);
            let l = match kind {
                ExpertKind::Mce => {
                    let sig = e.supervise(&mut t, s, x).unwrap();
                    let a = weighted_sum(&mut t, sig.halt_logit, 11);
                    let b = weighted_sum(&mut t, sig.adjust_logits, 12);
                    t.add(a, b).unwrap()
                }
                ExpertKind::Mie => {
                    let mut mem = MemoryState::new(dims.slots);
                    let y = e.apply(&mut t, s, x, Some(&mut mem), &dims).unwrap();
                    // a second pass reads the slots written by the first
                    let y2 = e.apply(&mut t, s, y, Some(&mut mem), &dims).unwrap();
                    weighted_sum(&mut t, y2, 13)
                }
                _ => {
                    let y = e.apply(&mut t, s, x, None, &dims).unwrap();
                    weighted_sum(&mut t, y, 14)
                }
            };
            (t, l)
        });
        out.push((kind.to_string(), err));
    }
    out
}

/// The whole routed model at d_model=8 with one expert per family (m=5)
/// and chains of k=2, under the joint loss.
pub fn micro_model_error() -> f64 {
    let cfg = ModelConfig {
        dims: Dims { d_model: 8, ff: 12, window: 24, slots: 4 },
        experts_per_family: 1,
        seed: 3,
        ..Default::default()
    };
    let mut model = DsMoe::new(cfg).unwrap();
    assert_eq!(model.num_experts(), 5);
    model.thresholds = Some(Thresholds { t1: 1e9, t2: 2e9, t3: 3e9 });
    let mut r = rng(40);
    // break the zero-initialised router and supervisor symmetry
    let ids: Vec<ParamId> = model.model_params();
    for &id in &ids {
        let name = &model.store.get(id).name;
        if name == "router.w" || name.contains(".ctl.") {
            let shape = model.store.value(id).shape().to_vec();
            *model.store.value_mut(id) = rand_tensor(&mut r, &shape, 0.3);
        }
    }
    let mut batch = taskgen::generate(&TierSpec::new(0, 1).unwrap(), 1).unwrap();
    batch.extend(taskgen::generate(&TierSpec::new(1, 2).unwrap(), 1).unwrap());
    let refs: Vec<_> = batch.iter().collect();
    let w = LossWeights { lambda1: 0.5, lambda2: 0.3 };
    let probe = routed_batch(&model, &refs, w).unwrap();
    assert_eq!(probe.metrics.mean_k, 2.0);
    let mut store = model.store.clone();
    let model = RefCell::new(model);
    grad_check(&mut store, &ids, |s| {
        let mut m = model.borrow_mut();
        m.store = s.clone();
        let out = routed_batch(&m, &refs, w).unwrap();
        (out.tape, out.loss)
    })
}

struct Case {
    order: Vec<usize>,
    probs: Option<Vec<f64>>,
    reserve: Vec<usize>,
    control: Option<Control>,
    h0: Tensor,
}

/// Straight-line chain semantics on plain vectors: gates and residuals are
/// computed here, only the expert maps themselves come from the library.
fn interpret(experts: &[Expert], store: &ParamStore, dims: &Dims, c: &Case) -> (Tensor, Vec<usize>) {
    let mut tape = Tape::new();
    let mut mem = MemoryState::new(dims.slots);
    let mean_sel = c.probs.as_ref().map(|p| c.order.iter().map(|&j| p[j]).sum::<f64>() / c.order.len() as f64);
    let mut pending: VecDeque<usize> = c.order.iter().copied().collect();
    let mut reserve: VecDeque<usize> = c.reserve.iter().copied().collect();
    let mut h = c.h0.clone();
    let mut executed = Vec::new();
    let mut transformed = false;
    while let Some(j) = pending.pop_front() {
        let e = &experts[j];
        executed.push(j);
        let x = tape.constant(h.clone());
        if e.kind == ExpertKind::Mce {
            let sig = e.supervise(&mut tape, store, x).unwrap();
            let Some(ctl) = c.control else { continue };
            if sig.depth_adjust == 1 && executed.len() + pending.len() < ctl.k_max {
                if let Some(pos) = reserve.iter().position(|&r| experts[r].kind != ExpertKind::Mce) {
                    pending.push_back(reserve.remove(pos).unwrap());
                }
            }
            if sig.depth_adjust == -1 {
                if let Some(last) = pending.pop_back() {
                    let left = pending.iter().any(|&r| experts[r].kind != ExpertKind::Mce);
                    if !transformed && !left {
                        pending.push_back(last);
                    }
                }
            }
            if sig.halt_prob > ctl.tau_halt && transformed {
                break;
            }
            continue;
        }
        let y = if e.kind == ExpertKind::Mie {
            e.apply(&mut tape, store, x, Some(&mut mem), dims).unwrap()
        } else {
            e.apply(&mut tape, store, x, None, dims).unwrap()
        };
        let g = match (&c.probs, mean_sel) {
            (Some(p), Some(m)) => p[j] / m,
            _ => 1.0,
        };
        let y = tape.value(y).data().to_vec();
        let first = executed.len() == 1;
        let next: Vec<f64> =
            y.iter().zip(h.data()).map(|(yv, hv)| if first { g * yv } else { g * yv + hv }).collect();
        h = Tensor::new(h.shape().to_vec(), next).unwrap();
        transformed = true;
    }
    (h, executed)
}

pub struct OracleReport {
    /// Largest max-abs difference between the library and the interpreter.
    pub worst: f64,
    /// Cases whose executed expert sequence differed.
    pub mismatched: usize,
    pub halts: usize,
    pub grew: usize,
    pub shrank: usize,
}

/// Random chains over a mixed pool with live control heads, each run
/// through `compose_chain` and through the reference interpreter.
pub fn chain_oracle(cases: usize, seed: u64) -> OracleReport {
    let dims = small_dims();
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let kinds = [
        ExpertKind::Spe,
        ExpertKind::Cre,
        ExpertKind::Lie,
        ExpertKind::Mie,
        ExpertKind::Mce,
        ExpertKind::Spe,
        ExpertKind::Mie,
        ExpertKind::Mce,
    ];
    let experts: Vec<Expert> =
        kinds.iter().enumerate().map(|(i, &k)| Expert::new(&mut store, i, k, &dims, &mut r)).collect();
    // large random control heads so halting, extension and shortening all occur
    for e in experts.iter().filter(|e| e.kind == ExpertKind::Mce) {
        for &id in e.params() {
            if store.get(id).name.contains(".ctl.halt") || store.get(id).name.contains(".ctl.adjust") {
                let shape = store.value(id).shape().to_vec();
                *store.value_mut(id) = rand_tensor(&mut r, &shape, 3.0);
            }
        }
    }
    let m = experts.len();
    let mut rep = OracleReport { worst: 0.0, mismatched: 0, halts: 0, grew: 0, shrank: 0 };
    for _ in 0..cases {
        let k = r.gen_range(2..=5);
        let n = r.gen_range(1..=10);
        let mut ids: Vec<usize> = (0..m).collect();
        ids.shuffle(&mut r);
        let order = ids[..k].to_vec();
        let reserve = ids[k..].to_vec();
        let probs = r.gen_bool(0.8).then(|| {
            let raw: Vec<f64> = (0..m).map(|_| r.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect::<Vec<f64>>()
        });
        let control = r.gen_bool(0.7).then(|| Control { tau_halt: r.gen_range(0.3..0.95), k_max: r.gen_range(k..=6) });
        let case = Case { order, probs, reserve, control, h0: rand_tensor(&mut r, &[n, 8], 1.0) };

        let mut tape = Tape::new();
        let h0 = tape.constant(case.h0.clone());
        let p = case.probs.as_ref().map(|p| tape.constant(Tensor::row(p)));
        let plan = ChainPlan {
            order: case.order.clone(),
            probs: p,
            reserve: case.reserve.clone(),
            control: case.control,
            detach_gates: r.gen_bool(0.5),
        };
        let mut mem = MemoryState::new(dims.slots);
        let out = compose_chain(&mut tape, &store, &experts, &plan, h0, &mut mem, &dims).unwrap();
        let (want, executed) = interpret(&experts, &store, &dims, &case);
        let got: Vec<usize> = out.steps.iter().map(|s| s.expert_id).collect();
        if got != executed {
            rep.mismatched += 1;
            continue;
        }
        rep.worst = rep.worst.max(tape.value(out.h).max_abs_diff(&want));
        let (ran, planned) = (executed.len(), case.order.len());
        rep.halts += usize::from(ran < planned);
        rep.grew += usize::from(ran > planned);
        rep.shrank += usize::from(out.signals.iter().any(|s| s.depth_adjust == -1));
    }
    rep
}

pub fn probs_of(w: &[f64], m: usize, phi: &[f64]) -> Vec<f64> {
    let f = phi.len();
    let mut tape = Tape::new();
    let wv = tape.constant(Tensor::new(vec![m, f], w.to_vec()).unwrap());
    let pv = tape.constant(Tensor::row(phi));
    let p = routing_probs(&mut tape, wv, pv).unwrap();
    tape.value(p).data().to_vec()
}

/// Selection by repeated linear scans for the largest remaining value,
/// first index winning ties.
pub fn scan_top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; p.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..p.len() {
            if !taken[i] && best.is_none_or(|b| p[i] > p[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Seeded sweep over the routing contracts; returns the first violation.
pub fn routing_contracts(cases: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let (m, f) = (r.gen_range(2..=12), r.gen_range(1..=10));
        let w: Vec<f64> = (0..m * f).map(|_| r.gen_range(-5.0..5.0)).collect();
        let phi: Vec<f64> = (0..f).map(|_| r.gen_range(-3.0..3.0)).collect();
        let p = probs_of(&w, m, &phi);
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(format!("case {case}: not on the simplex (sum {sum})"));
        }
        let k = r.gen_range(K_MIN..=K_MAX.min(m));
        let sel = select_top_k(&p, k).map_err(|e| e.to_string())?;
        if sel != scan_top_k(&p, k) {
            return Err(format!("case {case}: top-{k} {sel:?} differs from the scan"));
        }
        // quantised probabilities force ties
        let levels: Vec<f64> = (0..m).map(|_| r.gen_range(0..4) as f64).collect();
        if select_top_k(&levels, k).map_err(|e| e.to_string())? != scan_top_k(&levels, k) {
            return Err(format!("case {case}: tie-break differs on {levels:?}"));
        }
        let c = r.gen_range(0.05..20.0);
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        if ranking(&probs_of(&scaled, m, &phi))[0] != ranking(&p)[0] {
            return Err(format!("case {case}: argmax moved under scaling by {c}"));
        }
        let logits: Vec<f64> = (0..m).map(|i| (0..f).map(|j| w[i * f + j] * phi[j]).sum()).collect();
        if ranking(&softmax(&logits).unwrap())[0] != ranking(&p)[0] {
            return Err(format!("case {case}: router argmax differs from the logit argmax"));
        }
        let mut cuts = [r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0)];
        cuts.sort_by(f64::total_cmp);
        let t = Thresholds { t1: cuts[0], t2: cuts[1], t3: cuts[2] };
        let (a, b) = (r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (kl, kh) = (choose_k(lo, Some(&t)).unwrap(), choose_k(hi, Some(&t)).unwrap());
        if kl > kh || !(K_MIN..=K_MAX).contains(&kl) || !(K_MIN..=K_MAX).contains(&kh) {
            return Err(format!("case {case}: chain length {kl} at {lo} vs {kh} at {hi}"));
        }
    }
    Ok(())
}
