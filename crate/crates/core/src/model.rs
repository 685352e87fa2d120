//! The full routed model: embedding, complexity-aware router, expert pool,
//! chain execution and output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complexity::{complexity_score, extract_features, ComplexityFeatures, ComplexityWeights};
use crate::error::{Error, Result};
use crate::experts::{Dims, Expert, ExpertKind, LayerNorm, MemoryState, SupervisorSignal};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::routing::{self, ChainPlan, ChainTrace, Control, Thresholds};
use crate::taskgen::{SampleRecord, NUM_CLASSES};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: Dims,
    pub experts_per_family: usize,
    /// Families present in the pool, in canonical order.
    pub families: Vec<ExpertKind>,
    /// `false` runs one expert per family with unit gates (no router).
    pub routing: bool,
    /// Let supervisor signals halt or resize chains.
    pub mce_control: bool,
    pub tau_halt: f64,
    pub k_max: usize,
    pub detach_gates: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            experts_per_family: 2,
            families: ExpertKind::ALL.to_vec(),
            routing: true,
            mce_control: true,
            tau_halt: 0.9,
            k_max: routing::K_MAX,
            detach_gates: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.d_model == 0 || d.ff == 0 || d.window == 0 || d.slots == 0 {
            return Err(Error::config(format!("dimensions must be positive: {d:?}")));
        }
        if self.experts_per_family == 0 {
            return Err(Error::config("experts_per_family must be at least 1"));
        }
        if self.families.is_empty() {
            return Err(Error::config("model needs at least one expert family"));
        }
        if !self.families.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("families must be distinct and in canonical order"));
        }
        if self.families == [ExpertKind::Mce] {
            return Err(Error::config("a supervisor-only pool cannot transform hidden states"));
        }
        if !(0.0..=1.0).contains(&self.tau_halt) {
            return Err(Error::config(format!("tau_halt {} not in [0, 1]", self.tau_halt)));
        }
        if self.k_max < routing::K_MIN {
            return Err(Error::config(format!("k_max {} below {}", self.k_max, routing::K_MIN)));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.families.len() * self.experts_per_family
    }

    pub fn feature_dim(&self) -> usize {
        self.dims.d_model + 4
    }
}

/// Result of one forward pass over a single input.
pub struct Forward {
    /// `1 x NUM_CLASSES` output logits.
    pub logits: Var,
    /// `1 x m` routing probabilities when the router ran.
    pub probs: Option<Var>,
    pub trace: ChainTrace,
    pub signals: Vec<SupervisorSignal>,
    pub features: ComplexityFeatures,
}

/// How the experts for one input are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Route {
    #[default]
    Auto,
    /// Every expert of one family (index into `families`), by probability.
    Family(usize),
}

#[derive(Clone, Debug)]
pub struct DsMoe {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub experts: Vec<Expert>,
    pub thresholds: Option<Thresholds>,
    embed: ParamId,
    pos: ParamId,
    router: ParamId,
    cweights: ParamId,
    head_ln: LayerNorm,
    head_w: ParamId,
    head_b: ParamId,
    membership: Tensor,
}

impl DsMoe {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dims.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let vocab = Vocab::standard();
        let embed = store.add_uniform("embed.tok", &[vocab.len(), d], 1.0, &mut rng);
        let pos = store.add_uniform("embed.pos", &[config.dims.window, d], 0.5, &mut rng);
        let m = config.num_experts();
        let router = store.add_const("router.w", &[m, config.feature_dim()], 0.0);
        let cweights = store.add_const("complexity.w", &[3, 1], 1.0);
        let mut experts = Vec::with_capacity(m);
        for &kind in &config.families {
            for _ in 0..config.experts_per_family {
                experts.push(Expert::new(&mut store, experts.len(), kind, &config.dims, &mut rng));
            }
        }
        let head_ln = LayerNorm::new(&mut store, "head.ln", d);
        let head_w = store.add_uniform("head.w", &[d, NUM_CLASSES], 1.0 / (d as f64).sqrt(), &mut rng);
        let head_b = store.add_const("head.b", &[1, NUM_CLASSES], 0.0);
        let nf = config.families.len();
        let mut membership = Tensor::zeros(&[m, nf]);
        for (j, e) in experts.iter().enumerate() {
            let f = config.families.iter().position(|&k| k == e.kind).expect("family present");
            membership.data_mut()[j * nf + f] = 1.0;
        }
        Ok(Self {
            config,
            store,
            experts,
            thresholds: None,
            embed,
            pos,
            router,
            cweights,
            head_ln,
            head_w,
            head_b,
            membership,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn embedding_params(&self) -> Vec<ParamId> {
        vec![self.embed, self.pos]
    }

    /// Router weights plus the complexity weights.
    pub fn router_params(&self) -> Vec<ParamId> {
        vec![self.router, self.cweights]
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.head_w, self.head_b];
        ids.extend(self.store.iter().filter(|(_, p)| p.name.starts_with("head.ln.")).map(|(id, _)| id));
        ids
    }

    pub fn expert_params(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(|e| e.params().iter().copied()).collect()
    }

    /// Every parameter of the deployed model (pretraining heads excluded).
    pub fn model_params(&self) -> Vec<ParamId> {
        let mut ids = self.embedding_params();
        ids.extend(self.router_params());
        ids.extend(self.expert_params());
        ids.extend(self.head_params());
        ids.sort();
        ids
    }

    /// `families × m` family-membership matrix transposed: `[m x families]`.
    pub fn membership(&self) -> &Tensor {
        &self.membership
    }

    pub fn complexity_weights(&self) -> ComplexityWeights {
        let w = self.store.value(self.cweights).data();
        ComplexityWeights::from_array([w[0], w[1], w[2]])
    }

    /// Family index (into `config.families`) a routing hint maps to.
    pub fn hint_family(&self, hint: ExpertKind) -> usize {
        hint.fallbacks()
            .iter()
            .find_map(|k| self.config.families.iter().position(|f| f == k))
            .expect("model has at least one family")
    }

    pub fn family_experts(&self, family: usize) -> Vec<usize> {
        let kind = self.config.families[family];
        self.experts.iter().filter(|e| e.kind == kind).map(|e| e.id).collect()
    }

    /// Chain run by the router-free variant: the first expert of every
    /// family, in canonical family order.
    pub fn fixed_chain(&self) -> Vec<usize> {
        (0..self.config.families.len()).map(|f| self.family_experts(f)[0]).collect()
    }

    /// Recompute `choose_k` cut points from the scores of `corpus`.
    pub fn calibrate(&mut self, corpus: &[SampleRecord]) -> Result<Thresholds> {
        let w = self.complexity_weights();
        let vocab = Vocab::standard();
        let scores = corpus
            .iter()
            .map(|s| complexity_score(&extract_features(&vocab.sequence(s.tokens.clone())?)?, &w))
            .collect::<Result<Vec<_>>>()?;
        let t = Thresholds::calibrate(&scores)?;
        self.thresholds = Some(t);
        Ok(t)
    }

    /// `h0 = E_tok[x_i] + E_pos[i mod window]`.
    pub fn embed(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let table = tape.param(&self.store, self.embed);
        let tok = tape.embedding(table, tokens)?;
        let pos_idx: Vec<usize> = (0..tokens.len()).map(|i| i % self.config.dims.window).collect();
        let pt = tape.param(&self.store, self.pos);
        let pos = tape.embedding(pt, &pos_idx)?;
        tape.add(tok, pos)
    }

    /// Output head on the last row of `h`.
    pub fn head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let n = tape.value(h).rows();
        let last = tape.slice_rows(h, n - 1, 1)?;
        self.head_on_row(tape, last)
    }

    fn head_on_row(&self, tape: &mut Tape, row: Var) -> Result<Var> {
        let z = self.head_ln.apply(tape, &self.store, row)?;
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        let y = tape.matmul(z, w)?;
        tape.add_row(y, b)
    }

    pub fn forward(&self, tape: &mut Tape, sample: &SampleRecord, route: Route) -> Result<Forward> {
        let vocab = Vocab::standard();
        let seq = vocab.sequence(sample.tokens.clone())?;
        let features = extract_features(&seq)?;
        let h0 = self.embed(tape, &seq.tokens)?;
        let m = self.num_experts();
        let start = tape.macs();
        let (probs, plan, k, score) = if self.config.routing {
            let w = tape.param(&self.store, self.cweights);
            let f = tape.constant(Tensor::row(&features.as_array()));
            let c = tape.matmul(f, w)?;
            let phi = routing::phi(tape, h0, &features, c)?;
            let wr = tape.param(&self.store, self.router);
            let p = routing::routing_probs(tape, wr, phi)?;
            let score = tape.scalar(c);
            let rank = routing::ranking(tape.value(p).data());
            let (order, reserve): (Vec<usize>, Vec<usize>) = match route {
                Route::Auto => {
                    let k = routing::choose_k(score, self.thresholds.as_ref())?.min(m);
                    (rank[..k].to_vec(), rank[k..].to_vec())
                }
                Route::Family(fam) => {
                    let members = self.family_experts(fam);
                    rank.iter().copied().partition(|j| members.contains(j))
                }
            };
            let k = order.len();
            let control = self.config.mce_control.then_some(Control {
                tau_halt: self.config.tau_halt,
                k_max: self.config.k_max,
            });
            let plan = ChainPlan { order, probs: Some(p), reserve, control, detach_gates: self.config.detach_gates };
            (Some(p), plan, k, score)
        } else {
            let score = complexity_score(&features, &self.complexity_weights())?;
            let order = self.fixed_chain();
            let k = order.len();
            let plan = ChainPlan { order, probs: None, reserve: vec![], control: None, detach_gates: false };
            (None, plan, k, score)
        };
        let routing_macs = tape.macs() - start;
        let mut mem = MemoryState::new(self.config.dims.slots);
        let out = routing::compose_chain(tape, &self.store, &self.experts, &plan, h0, &mut mem, &self.config.dims)?;
        let total_macs = tape.macs() - start;
        let logits = self.head(tape, out.h)?;
        let trace = ChainTrace {
            input_id: sample.id,
            tier: sample.tier,
            n: seq.len(),
            d_syn: features.d_syn,
            c_sem: features.c_sem,
            r: features.r,
            score,
            probs: probs.map(|p| tape.value(p).data().to_vec()).unwrap_or_default(),
            selected: plan.order.clone(),
            k,
            steps: out.steps,
            routing_macs,
            total_macs,
            correct: None,
            predicted: None,
        };
        trace.validate()?;
        Ok(Forward { logits, probs, trace, signals: out.signals, features })
    }

    /// Inference on one sample with a fresh tape; fills `correct`.
    pub fn predict(&self, sample: &SampleRecord) -> Result<ChainTrace> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, sample, Route::Auto)?;
        let mut trace = fwd.trace;
        let pred = argmax(tape.value(fwd.logits).data());
        trace.predicted = Some(pred);
        trace.correct = Some(pred == sample.answer);
        Ok(trace)
    }

    /// Parameters activated by a trace: the executed experts only.
    pub fn activated_params(&self, trace: &ChainTrace) -> usize {
        let mut ids: Vec<usize> = trace.steps.iter().map(|s| s.expert_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.iter().map(|&j| self.store.numel(self.experts[j].params())).sum()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
