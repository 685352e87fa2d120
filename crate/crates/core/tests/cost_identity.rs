use dsmoe::efficiency::{chain_cost, memory_report, uniform_cost, Baseline, CostModel};
use dsmoe::experts::{Dims, ExpertKind};
use dsmoe::harness::{eval_corpus, Ablation, CorpusConfig, RunConfig};
use dsmoe::model::{DsMoe, ModelConfig, Route};
use dsmoe::numerics::Tape;
use dsmoe::taskgen::NUM_CLASSES;

fn small_cfg() -> RunConfig {
    RunConfig {
        model: ModelConfig { dims: Dims { d_model: 16, ff: 24, window: 24, slots: 8 }, ..Default::default() },
        corpus: CorpusConfig { eval_per_tier: 6, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn traces_match_profiler_and_analytic_counts_for_every_variant() {
    let base = small_cfg();
    let samples = eval_corpus(&base).unwrap();
    for a in Ablation::ALL {
        let cfg = RunConfig { ablation: a, ..base.clone() };
        let mut model = DsMoe::new(cfg.model_config().unwrap()).unwrap();
        model.calibrate(&samples).unwrap();
        let cm = CostModel::for_model(&model, 8);
        let d = model.config.dims.d_model as u64;
        for s in &samples {
            let mut tape = Tape::new();
            let before = tape.macs();
            let fwd = model.forward(&mut tape, s, Route::Auto).unwrap();
            let delta = tape.macs() - before;
            let t = &fwd.trace;
            // the head runs after the chain: LN then a d x classes projection
            assert_eq!(delta, t.total_macs + d * NUM_CLASSES as u64, "{}: profiler delta", a.name());
            assert_eq!(t.total_macs, t.step_macs() + t.routing_macs);
            let ids: Vec<usize> = t.steps.iter().map(|s| s.expert_id).collect();
            let predicted = cm.predict_steps(t.n, &ids).unwrap();
            let measured: Vec<u64> = t.steps.iter().map(|s| s.macs).collect();
            assert_eq!(predicted, measured, "{}: analytic step costs", a.name());
            let want_routing = if model.config.routing { cm.routing_macs() } else { 0 };
            assert_eq!(t.routing_macs, want_routing);
            let report = chain_cost(t, &cm).unwrap();
            assert_eq!(report.step_macs.iter().sum::<u64>() + report.routing_macs, report.total_macs);
            assert_eq!(report.flops(), 2 * report.total_macs);
        }
    }
}

#[test]
fn uniform_cost_matches_a_profiled_stack() {
    let dims = Dims { d_model: 16, ff: 24, window: 6, slots: 4 };
    let model = DsMoe::new(ModelConfig { dims, ..Default::default() }).unwrap();
    let cm = CostModel::for_model(&model, 8);
    for n in [1, 5, 6, 7, 13, 30] {
        let udt = Baseline::udt(dims, 8, 1);
        let mut tape = Tape::new();
        let h = model.embed(&mut tape, &vec![3; n]).unwrap();
        let run = udt.forward(&mut tape, h).unwrap();
        assert_eq!(run.macs, uniform_cost(8, n, &cm).unwrap(), "n={n}");
        let wmoe = Baseline::wmoe(dims, 8, 4, 1);
        let mut tape = Tape::new();
        let h = model.embed(&mut tape, &vec![3; n]).unwrap();
        let run = wmoe.forward(&mut tape, h).unwrap();
        assert_eq!(run.macs, uniform_cost(8, n, &cm).unwrap() + wmoe.gate_macs());
    }
    assert_eq!(uniform_cost(24, 40, &cm).unwrap(), 24 * uniform_cost(1, 40, &cm).unwrap());
}

#[test]
fn identical_blocks_give_exact_ratios() {
    let dims = Dims { d_model: 16, ff: 24, window: 24, slots: 4 };
    let cfg = ModelConfig { dims, families: vec![ExpertKind::Spe], experts_per_family: 8, ..Default::default() };
    let mut model = DsMoe::new(cfg).unwrap();
    let samples = eval_corpus(&small_cfg()).unwrap();
    model.calibrate(&samples).unwrap();
    let cm = CostModel::for_model(&model, 8);
    let udt = Baseline::udt(dims, 8, 1);
    let total_params: usize = cm.expert_params.iter().sum();
    for s in samples.iter().filter(|s| s.tier == 0) {
        let t = model.predict(s).unwrap();
        assert_eq!(t.k, 2);
        let (_, params) = memory_report(&t, &cm).unwrap();
        // 2 of 8 identical single-block experts against an 8-block stack
        assert_eq!(params * 8, total_params * 2);
        assert_eq!(params * 8, udt.activated_params() * 2);
        let r = chain_cost(&t, &cm).unwrap();
        let want = 1.0 - (2 * cm.block_macs(t.n, 0) + cm.routing_macs()) as f64 / (8 * cm.block_macs(t.n, 0)) as f64;
        assert!((r.savings - want).abs() < 1e-15);
        assert!(r.savings > 0.74 && r.savings <= 0.75);
    }
}

#[test]
fn memory_counts_slots_and_grows_with_chain_length() {
    let dims = Dims { d_model: 16, ff: 24, window: 6, slots: 4 };
    let model = DsMoe::new(ModelConfig { dims, ..Default::default() }).unwrap();
    let cm = CostModel::for_model(&model, 8);
    let mut tape = Tape::new();
    let tokens = vec![5; 14];
    let h0 = model.embed(&mut tape, &tokens).unwrap();
    let udt = Baseline::udt(dims, 8, 1).forward(&mut tape, h0).unwrap();
    let udt_peak = udt.activations + (tokens.len() * dims.d_model) as u64;
    let spe = model.family_experts(0);
    let mie = model.family_experts(3);
    let mut peaks = Vec::new();
    for chain in [vec![spe[0], spe[1]], vec![spe[0], spe[1], mie[0]]] {
        let mut tape = Tape::new();
        let h0 = model.embed(&mut tape, &tokens).unwrap();
        let plan = dsmoe::routing::ChainPlan {
            order: chain.clone(),
            probs: None,
            reserve: vec![],
            control: None,
            detach_gates: false,
        };
        let mut mem = dsmoe::experts::MemoryState::new(dims.slots);
        let out = dsmoe::routing::compose_chain(&mut tape, &model.store, &model.experts, &plan, h0, &mut mem, &dims).unwrap();
        let macs: u64 = out.steps.iter().map(|s| s.macs).sum();
        let trace = dsmoe::routing::ChainTrace {
            input_id: 0,
            tier: 0,
            n: tokens.len(),
            d_syn: 0,
            c_sem: 0.0,
            r: 0,
            score: 0.0,
            probs: vec![],
            selected: chain.clone(),
            k: chain.len(),
            steps: out.steps.clone(),
            routing_macs: 0,
            total_macs: macs,
            correct: None,
            predicted: None,
        };
        let (peak, _) = memory_report(&trace, &cm).unwrap();
        let step_sum: u64 = out.steps.iter().map(|s| s.activations).sum();
        let slots = if chain.contains(&mie[0]) { (dims.slots * dims.d_model) as u64 } else { 0 };
        assert_eq!(peak, (tokens.len() * dims.d_model) as u64 + step_sum + slots);
        peaks.push(peak);
    }
    assert!(peaks[0] < peaks[1]);
    assert!(peaks[1] < udt_peak, "k=3 chain {} vs 8-block stack {udt_peak}", peaks[1]);
}
