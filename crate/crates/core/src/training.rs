//! Joint loss terms and the four-stage training curriculum.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertKind, LayerNorm, MemoryState};
use crate::model::{DsMoe, Route};
use crate::numerics::{Adam, ParamId, ParamStore, Tape, Tensor, Var};
use crate::taskgen::{self, SampleRecord, TierSpec, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.01 }
    }
}

/// `m * sum_j f_j * p_j` over a batch of probability rows `[B x m]`.
///
/// `f_j` is the fraction of inputs whose selection contains `j`, divided by
/// that input's `k`; `p_j` is the mean probability. Only `p` carries gradient.
pub fn balance_loss(tape: &mut Tape, probs: Var, selections: &[Vec<usize>]) -> Result<Var> {
    let (b, m) = (tape.value(probs).rows(), tape.value(probs).cols());
    if selections.len() != b || b == 0 {
        return Err(Error::shape(format!("{} selections for {b} probability rows", selections.len())));
    }
    let mut f = vec![0.0; m];
    for sel in selections {
        if sel.is_empty() {
            return Err(Error::contract("empty selection in balance loss"));
        }
        for &j in sel {
            f[j] += 1.0 / (sel.len() * b) as f64;
        }
    }
    let pbar = tape.mean_rows(probs);
    let fbar = tape.constant(Tensor::row(&f));
    let prod = tape.mul(pbar, fbar)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, m as f64))
}

/// Cross-entropy of the family-marginal probability against family labels.
/// `membership` is `[m x families]` with one 1 per row.
pub fn routing_loss(tape: &mut Tape, probs: Var, membership: &Tensor, labels: &[usize]) -> Result<Var> {
    let b = tape.value(probs).rows();
    let nf = membership.cols();
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= nf) {
        return Err(Error::Label(format!("family label {bad} outside {nf} families")));
    }
    let mm = tape.constant(membership.clone());
    let marg = tape.matmul(probs, mm)?;
    let logm = tape.log(marg);
    let mut pick = vec![0.0; b * nf];
    for (i, &l) in labels.iter().enumerate() {
        pick[i * nf + l] = -1.0 / b as f64;
    }
    let pick = tape.constant(Tensor::new(vec![b, nf], pick)?);
    let terms = tape.mul(logm, pick)?;
    Ok(tape.sum(terms))
}

/// `L_task + lambda1 L_routing + lambda2 L_balance`.
pub fn joint_loss(tape: &mut Tape, task: Var, routing: Var, balance: Var, w: LossWeights) -> Result<Var> {
    for v in [task, routing, balance] {
        if !tape.value(v).is_finite() {
            return Err(Error::Numeric("non-finite loss component".into()));
        }
    }
    let r = tape.scale(routing, w.lambda1);
    let bl = tape.scale(balance, w.lambda2);
    let s = tape.add(task, r)?;
    tape.add(s, bl)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    PretrainExperts,
    IntegrateRouting,
    ChainTraining,
    JointEndToEnd,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Self::PretrainExperts, Self::IntegrateRouting, Self::ChainTraining, Self::JointEndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Self::PretrainExperts => "pretrain",
            Self::IntegrateRouting => "integrate",
            Self::ChainTraining => "chain",
            Self::JointEndToEnd => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBudgets {
    pub pretrain: usize,
    pub integrate: usize,
    pub chain: usize,
    pub joint: usize,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self::scaled(20_000)
    }
}

impl StageBudgets {
    pub fn get(&self, s: Stage) -> usize {
        match s {
            Stage::PretrainExperts => self.pretrain,
            Stage::IntegrateRouting => self.integrate,
            Stage::ChainTraining => self.chain,
            Stage::JointEndToEnd => self.joint,
        }
    }

    pub fn total(&self) -> usize {
        self.pretrain + self.integrate + self.chain + self.joint
    }

    /// Split `total` steps in the default 40/10/25/25 proportions.
    pub fn scaled(total: usize) -> Self {
        let pretrain = total * 2 / 5;
        let integrate = total / 10;
        let chain = (total - pretrain - integrate) / 2;
        Self { pretrain, integrate, chain, joint: total - pretrain - integrate - chain }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub budgets: StageBudgets,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate once pretrained experts run inside chains.
    pub finetune_lr: f64,
    pub loss: LossWeights,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub seed: u64,
    /// Metrics are logged every `log_every` steps and at each stage end.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budgets: StageBudgets::default(),
            batch: 8,
            lr: 1e-3,
            finetune_lr: 3e-4,
            loss: LossWeights::default(),
            clip: 1.0,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.finetune_lr > 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::config(format!("learning rates {} / {}", self.lr, self.finetune_lr)));
        }
        let l = self.loss;
        if !(l.lambda1 >= 0.0 && l.lambda2 >= 0.0 && l.lambda1.is_finite() && l.lambda2.is_finite()) {
            return Err(Error::config(format!("loss weights {l:?}")));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be at least 1"));
        }
        Ok(())
    }
}

/// One row of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: String,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_task")]
    pub task: f64,
    #[serde(rename = "L_routing")]
    pub routing: f64,
    #[serde(rename = "L_balance")]
    pub balance: f64,
    pub routing_accuracy: f64,
    pub utilization_entropy: f64,
    pub mean_k: f64,
    pub mean_chain_length: f64,
    pub macs_per_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub steps: usize,
    pub trainable_params: usize,
    /// Checksum of every parameter outside the stage's trainable groups,
    /// identical before and after the stage.
    pub frozen_checksum: String,
}

/// Shannon entropy (nats) of the normalized counts.
pub fn entropy(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

struct TempHead {
    ln: LayerNorm,
    w: ParamId,
    b: ParamId,
}

impl TempHead {
    /// The expert's head, reused if an earlier pretraining call left one.
    fn new(store: &mut ParamStore, expert: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let name = format!("pretrain.e{expert}");
        if let (Some(ln), Some(w), Some(b)) =
            (LayerNorm::find(store, &format!("{name}.ln")), store.id(&format!("{name}.w")), store.id(&format!("{name}.b")))
        {
            return Self { ln, w, b };
        }
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d);
        let w = store.add_uniform(format!("{name}.w"), &[d, NUM_CLASSES], 1.0 / (d as f64).sqrt(), rng);
        let b = store.add_const(format!("{name}.b"), &[1, NUM_CLASSES], 0.0);
        Self { ln, w, b }
    }

    fn params(&self, store: &ParamStore, expert: usize) -> Vec<ParamId> {
        let prefix = format!("pretrain.e{expert}.");
        store.iter().filter(|(_, p)| p.name.starts_with(&prefix)).map(|(id, _)| id).collect()
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let n = tape.value(h).rows();
        let last = tape.slice_rows(h, n - 1, 1)?;
        let z = self.ln.apply(tape, store, last)?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(z, w)?;
        tape.add_row(y, b)
    }
}

/// Depth-control targets: (halt, adjust class) with adjust classes
/// 0 = shorten, 1 = keep, 2 = extend. A meta wrapper always asks for depth.
pub fn control_targets(sample: &SampleRecord) -> (usize, usize) {
    match sample.tier {
        0 => (1, 0),
        1 | 2 => (0, 1),
        _ => (0, 2),
    }
}

/// Tier trained by each family during pretraining.
pub fn pretrain_tier(kind: ExpertKind) -> u8 {
    kind.index() as u8
}

/// Relative pretraining weight. Modular arithmetic has a long plateau before
/// it snaps in; MIE steps are costly and its recall gains little from more.
pub fn pretrain_weight(kind: ExpertKind) -> usize {
    match kind {
        ExpertKind::Spe | ExpertKind::Mce => 1,
        ExpertKind::Cre | ExpertKind::Mie => 2,
        ExpertKind::Lie => 8,
    }
}

/// Per-expert pretraining steps: `budget` split by weight, largest remainder.
pub fn pretrain_shares(model: &DsMoe, budget: usize) -> Result<Vec<usize>> {
    let w: Vec<f64> = model.experts.iter().map(|e| pretrain_weight(e.kind) as f64).collect();
    let total: f64 = w.iter().sum();
    let ratios: Vec<f64> = w.iter().map(|x| x / total).collect();
    taskgen::mix_counts(&ratios, budget)
}

fn clip_and_step(store: &mut ParamStore, opt: &mut Adam, clip: f64) -> Result<()> {
    if clip > 0.0 {
        let n = store.grad_norm();
        if !n.is_finite() {
            return Err(Error::Numeric("gradient norm is not finite".into()));
        }
        if n > clip {
            store.scale_grads(clip / n);
        }
    }
    opt.step(store)
}

/// Loss terms and statistics of one routed batch.
pub struct BatchOutcome {
    pub tape: Tape,
    pub loss: Var,
    pub metrics: StepMetrics,
}

/// Forward a routed batch and build the joint loss on one tape.
pub fn routed_batch(model: &DsMoe, batch: &[&SampleRecord], w: LossWeights) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let m = model.num_experts();
    let mut logits = Vec::with_capacity(batch.len());
    let mut probs = Vec::new();
    let mut selections = Vec::new();
    let mut labels = Vec::new();
    let mut answers = Vec::new();
    let mut usage = vec![0.0; m];
    let (mut ks, mut lens, mut hits) = (0usize, 0usize, 0usize);
    for s in batch {
        if s.hint != taskgen::tier_hint(s.tier)? {
            return Err(Error::Data(format!("sample {} carries hint {} for tier {}", s.id, s.hint, s.tier)));
        }
        let fwd = model.forward(&mut tape, s, Route::Auto)?;
        let label = model.hint_family(s.hint);
        if let Some(p) = fwd.probs {
            let pv = tape.value(p).data();
            let mut fam = vec![0.0; model.config.families.len()];
            for (j, e) in model.experts.iter().enumerate() {
                fam[model.hint_family(e.kind)] += pv[j];
            }
            if crate::model::argmax(&fam) == label {
                hits += 1;
            }
            probs.push(p);
        }
        for st in &fwd.trace.steps {
            usage[st.expert_id] += 1.0;
        }
        ks += fwd.trace.k;
        lens += fwd.trace.steps.len();
        selections.push(fwd.trace.selected.clone());
        labels.push(label);
        answers.push(s.answer);
        logits.push(fwd.logits);
    }
    let forward_macs = tape.macs();
    let all = tape.concat_rows(&logits)?;
    let task = tape.cross_entropy(all, &answers)?;
    let (routing, balance) = if probs.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let p = tape.concat_rows(&probs)?;
        (routing_loss(&mut tape, p, model.membership(), &labels)?, balance_loss(&mut tape, p, &selections)?)
    };
    let loss = joint_loss(&mut tape, task, routing, balance, w)?;
    let b = batch.len() as f64;
    let metrics = StepMetrics {
        step: 0,
        stage: String::new(),
        loss: tape.scalar(loss),
        task: tape.scalar(task),
        routing: tape.scalar(routing),
        balance: tape.scalar(balance),
        routing_accuracy: if probs.is_empty() { 0.0 } else { hits as f64 / b },
        utilization_entropy: entropy(&usage),
        mean_k: ks as f64 / b,
        mean_chain_length: lens as f64 / b,
        macs_per_step: forward_macs,
    };
    Ok(BatchOutcome { tape, loss, metrics })
}

/// Runs the curriculum on a model, drawing stages 2-4 from `corpus`.
pub struct Curriculum<'a> {
    pub model: &'a mut DsMoe,
    pub cfg: &'a TrainConfig,
    corpus: &'a [SampleRecord],
    cursor: usize,
    /// Corpus indices per tier, with a read position each, for balanced batches.
    by_tier: Vec<(Vec<usize>, usize)>,
    rng: ChaCha8Rng,
    global_step: usize,
}

impl<'a> Curriculum<'a> {
    pub fn new(model: &'a mut DsMoe, cfg: &'a TrainConfig, corpus: &'a [SampleRecord]) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Data("empty training corpus".into()));
        }
        let mut by_tier = vec![(Vec::new(), 0); taskgen::NUM_TIERS];
        for (i, s) in corpus.iter().enumerate() {
            if let Some(t) = by_tier.get_mut(s.tier as usize) {
                t.0.push(i);
            }
        }
        by_tier.retain(|t| !t.0.is_empty());
        Ok(Self { model, cfg, corpus, cursor: 0, by_tier, rng: ChaCha8Rng::seed_from_u64(cfg.seed), global_step: 0 })
    }

    /// Each row from a tier drawn uniformly among those present.
    fn balanced_batch(&mut self) -> Vec<&'a SampleRecord> {
        let corpus = self.corpus;
        (0..self.cfg.batch)
            .map(|_| {
                let t = self.rng.gen_range(0..self.by_tier.len());
                let (idx, pos) = &mut self.by_tier[t];
                let s = &corpus[idx[*pos]];
                *pos = (*pos + 1) % idx.len();
                s
            })
            .collect()
    }

    fn next_batch(&mut self, max_tier: u8) -> Vec<&'a SampleRecord> {
        let corpus = self.corpus;
        let mut out = Vec::with_capacity(self.cfg.batch);
        let mut scanned = 0;
        while out.len() < self.cfg.batch {
            let s = &corpus[self.cursor];
            self.cursor = (self.cursor + 1) % corpus.len();
            scanned += 1;
            if s.tier <= max_tier || scanned > corpus.len() {
                out.push(s);
            }
        }
        out
    }

    fn frozen_checksum(&self, trainable: &[ParamId]) -> String {
        let frozen: Vec<ParamId> = self.model.store.ids().filter(|id| !trainable.contains(id)).collect();
        self.model.store.checksum(&frozen)
    }

    fn emit(&mut self, mut m: StepMetrics, stage: Stage, last: bool, log: &mut dyn FnMut(&StepMetrics)) {
        self.global_step += 1;
        if self.global_step % self.cfg.log_every == 0 || last {
            m.step = self.global_step;
            m.stage = stage.name().to_string();
            log(&m);
        }
    }

    /// Execute all four stages in order.
    pub fn run(&mut self, log: &mut dyn FnMut(&StepMetrics)) -> Result<Vec<StageRecord>> {
        if let Some(s) = Stage::ALL.into_iter().find(|&s| self.cfg.budgets.get(s) == 0) {
            return Err(Error::config(format!("stage {} has no step budget", s.name())));
        }
        let mut records = Vec::with_capacity(4);
        for stage in Stage::ALL {
            records.push(self.run_stage(stage, log)?);
        }
        Ok(records)
    }

    pub fn run_stage(&mut self, stage: Stage, log: &mut dyn FnMut(&StepMetrics)) -> Result<StageRecord> {
        let budget = self.cfg.budgets.get(stage);
        match stage {
            Stage::PretrainExperts => self.pretrain(budget, log),
            _ => self.routed_stage(stage, budget, log),
        }
    }

    fn pretrain(&mut self, budget: usize, log: &mut dyn FnMut(&StepMetrics)) -> Result<StageRecord> {
        let before = self.model.store.clone();
        let mut all_trainable = Vec::new();
        let mut steps_done = 0;
        let shares = pretrain_shares(self.model, budget)?;
        let last = shares.iter().rposition(|&s| s > 0);
        for (j, &steps) in shares.iter().enumerate() {
            if steps == 0 {
                continue;
            }
            all_trainable.extend(self.pretrain_single(j, steps, Some(j) == last, log)?);
            steps_done += steps;
        }
        // Everything outside the experts and their temporary heads is unchanged.
        let frozen: Vec<ParamId> = before.ids().filter(|id| !all_trainable.contains(id)).collect();
        let sum = before.checksum(&frozen);
        if self.model.store.checksum(&frozen) != sum {
            return Err(Error::contract("pretraining changed non-expert parameters"));
        }
        self.model.store.set_all_trainable();
        Ok(StageRecord {
            stage: Stage::PretrainExperts,
            steps: steps_done,
            trainable_params: self.model.store.numel(&all_trainable),
            frozen_checksum: sum,
        })
    }

    /// Train expert `j` alone; returns the parameters that were trainable.
    fn pretrain_single(
        &mut self,
        j: usize,
        steps: usize,
        last: bool,
        log: &mut dyn FnMut(&StepMetrics),
    ) -> Result<Vec<ParamId>> {
        let d = self.model.config.dims.d_model;
        let kind = self.model.experts[j].kind;
        let mut trainable = self.model.experts[j].params().to_vec();
        let head = if kind == ExpertKind::Mce {
            None
        } else {
            let h = TempHead::new(&mut self.model.store, j, d, &mut self.rng);
            trainable.extend(h.params(&self.model.store, j));
            Some(h)
        };
        let frozen_before = self.frozen_checksum(&trainable);
        self.model.store.set_trainable(&trainable);
        let mut opt = Adam::new(self.cfg.lr);
        let mut stream = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
        for i in 0..steps {
            let batch: Vec<SampleRecord> = (0..self.cfg.batch)
                .map(|_| {
                    let tier = if kind == ExpertKind::Mce {
                        stream.gen_range(0..taskgen::NUM_TIERS as u8)
                    } else {
                        pretrain_tier(kind)
                    };
                    let spec = TierSpec::new(tier, stream.next_u64())?;
                    Ok(taskgen::generate(&spec, 1)?.remove(0))
                })
                .collect::<Result<_>>()?;
            let (tape, loss, metrics) = self.pretrain_batch(j, head.as_ref(), &batch)?;
            self.model.store.zero_grad();
            tape.backward(loss, &mut self.model.store)?;
            clip_and_step(&mut self.model.store, &mut opt, self.cfg.clip)?;
            self.emit(metrics, Stage::PretrainExperts, last && i + 1 == steps, log);
        }
        if self.frozen_checksum(&trainable) != frozen_before {
            return Err(Error::contract(format!("pretraining expert {j} touched frozen parameters")));
        }
        Ok(trainable)
    }

    fn pretrain_batch(
        &self,
        j: usize,
        head: Option<&TempHead>,
        batch: &[SampleRecord],
    ) -> Result<(Tape, Var, StepMetrics)> {
        let model = &*self.model;
        let e = &model.experts[j];
        let dims = model.config.dims;
        let mut tape = Tape::new();
        let mut rows = Vec::new();
        let mut adj_rows = Vec::new();
        let mut halt_t = Vec::new();
        let mut adj_t = Vec::new();
        for s in batch {
            let h0 = model.embed(&mut tape, &s.tokens)?;
            match head {
                Some(head) => {
                    let mut mem = MemoryState::new(dims.slots);
                    let mem = (e.kind == ExpertKind::Mie).then_some(&mut mem);
                    let h = e.apply(&mut tape, &model.store, h0, mem, &dims)?;
                    rows.push(head.apply(&mut tape, &model.store, h)?);
                }
                None => {
                    let sig = e.supervise(&mut tape, &model.store, h0)?;
                    let zero = tape.constant(Tensor::scalar(0.0));
                    rows.push(tape.concat_cols(&[zero, sig.halt_logit])?);
                    adj_rows.push(sig.adjust_logits);
                    let (h, a) = control_targets(s);
                    halt_t.push(h);
                    adj_t.push(a);
                }
            }
        }
        let macs = tape.macs();
        let logits = tape.concat_rows(&rows)?;
        let loss = if head.is_some() {
            let answers: Vec<usize> = batch.iter().map(|s| s.answer).collect();
            tape.cross_entropy(logits, &answers)?
        } else {
            let l1 = tape.cross_entropy(logits, &halt_t)?;
            let al = tape.concat_rows(&adj_rows)?;
            let l2 = tape.cross_entropy(al, &adj_t)?;
            tape.add(l1, l2)?
        };
        let v = tape.scalar(loss);
        let metrics = StepMetrics {
            step: 0,
            stage: String::new(),
            loss: v,
            task: v,
            routing: 0.0,
            balance: 0.0,
            routing_accuracy: 0.0,
            utilization_entropy: 0.0,
            mean_k: 1.0,
            mean_chain_length: 1.0,
            macs_per_step: macs,
        };
        Ok((tape, loss, metrics))
    }

    fn stage_params(&self, stage: Stage) -> Vec<ParamId> {
        let m = &*self.model;
        let experts: Vec<ParamId> = m
            .experts
            .iter()
            .filter(|e| e.kind != ExpertKind::Mce)
            .flat_map(|e| e.params().iter().copied())
            .collect();
        let mut ids = match stage {
            Stage::PretrainExperts => experts,
            Stage::IntegrateRouting => {
                if m.config.routing {
                    m.router_params()
                } else {
                    vec![]
                }
            }
            Stage::ChainTraining => {
                let mut v = experts;
                v.extend(m.embedding_params());
                v.extend(m.head_params());
                v
            }
            Stage::JointEndToEnd => {
                let mut v = experts;
                v.extend(m.embedding_params());
                v.extend(m.head_params());
                if m.config.routing {
                    v.extend(m.router_params());
                }
                v
            }
        };
        ids.sort();
        ids
    }

    fn routed_stage(&mut self, stage: Stage, budget: usize, log: &mut dyn FnMut(&StepMetrics)) -> Result<StageRecord> {
        let trainable = self.stage_params(stage);
        let frozen_before = self.frozen_checksum(&trainable);
        if self.model.thresholds.is_none() || stage == Stage::IntegrateRouting {
            self.model.calibrate(self.corpus)?;
        }
        let steps = if trainable.is_empty() { 0 } else { budget };
        self.model.store.set_trainable(&trainable);
        let lr = if stage == Stage::IntegrateRouting { self.cfg.lr } else { self.cfg.finetune_lr };
        let mut opt = Adam::new(lr);
        for i in 0..steps {
            let max_tier = if stage == Stage::IntegrateRouting {
                ((i * taskgen::NUM_TIERS) / steps).min(taskgen::NUM_TIERS - 1) as u8
            } else {
                (taskgen::NUM_TIERS - 1) as u8
            };
            let batch = if stage == Stage::ChainTraining { self.balanced_batch() } else { self.next_batch(max_tier) };
            let out = routed_batch(self.model, &batch, self.cfg.loss)?;
            self.model.store.zero_grad();
            out.tape.backward(out.loss, &mut self.model.store)?;
            clip_and_step(&mut self.model.store, &mut opt, self.cfg.clip)?;
            self.emit(out.metrics, stage, i + 1 == steps, log);
        }
        if self.frozen_checksum(&trainable) != frozen_before {
            return Err(Error::contract(format!("stage {} touched frozen parameters", stage.name())));
        }
        if matches!(stage, Stage::IntegrateRouting | Stage::JointEndToEnd) && self.model.config.routing {
            self.model.calibrate(self.corpus)?;
        }
        self.model.store.set_all_trainable();
        Ok(StageRecord {
            stage,
            steps,
            trainable_params: self.model.store.numel(&trainable),
            frozen_checksum: frozen_before,
        })
    }
}

/// Convenience: run the whole curriculum.
pub fn run_curriculum(
    model: &mut DsMoe,
    cfg: &TrainConfig,
    corpus: &[SampleRecord],
    log: &mut dyn FnMut(&StepMetrics),
) -> Result<Vec<StageRecord>> {
    Curriculum::new(model, cfg, corpus)?.run(log)
}

/// Train one expert alone on its family tier with a temporary head.
/// Returns the expert's trainable parameter ids (expert plus head).
pub fn pretrain_expert(
    model: &mut DsMoe,
    expert: usize,
    tier: u8,
    steps: usize,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepMetrics),
) -> Result<Vec<ParamId>> {
    let kind = model.experts.get(expert).ok_or_else(|| Error::config(format!("no expert {expert}")))?.kind;
    if pretrain_tier(kind) != tier {
        return Err(Error::config(format!("{kind} pretrains on tier {}, not {tier}", pretrain_tier(kind))));
    }
    let placeholder = [SampleRecord {
        id: 0,
        tier: 0,
        inner_tier: None,
        hint: ExpertKind::Spe,
        tokens: vec![0],
        answer: 0,
        seed: 0,
    }];
    let mut c = Curriculum::new(model, cfg, &placeholder)?;
    let ids = c.pretrain_single(expert, steps, true, log)?;
    c.model.store.set_all_trainable();
    Ok(ids)
}

/// Accuracy of expert `j` with its temporary pretraining head on `samples`.
pub fn pretrain_accuracy(model: &DsMoe, j: usize, samples: &[SampleRecord]) -> Result<f64> {
    let prefix = format!("pretrain.e{j}");
    let id = |n: &str| {
        model.store.id(&format!("{prefix}.{n}")).ok_or_else(|| Error::config(format!("expert {j} has no pretraining head")))
    };
    let (g, b, w, hb) = (id("ln.g")?, id("ln.b")?, id("w")?, id("b")?);
    let dims = model.config.dims;
    let e = &model.experts[j];
    let mut hits = 0;
    for s in samples {
        let mut tape = Tape::new();
        let h0 = model.embed(&mut tape, &s.tokens)?;
        let mut mem = MemoryState::new(dims.slots);
        let mem = (e.kind == ExpertKind::Mie).then_some(&mut mem);
        let h = e.apply(&mut tape, &model.store, h0, mem, &dims)?;
        let n = tape.value(h).rows();
        let last = tape.slice_rows(h, n - 1, 1)?;
        let (gv, bv) = (tape.param(&model.store, g), tape.param(&model.store, b));
        let z = tape.layer_norm(last, gv, bv)?;
        let wv = tape.param(&model.store, w);
        let y = tape.matmul(z, wv)?;
        let bb = tape.param(&model.store, hb);
        let y = tape.add_row(y, bb)?;
        if crate::model::argmax(tape.value(y).data()) == s.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}
