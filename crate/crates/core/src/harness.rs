//! Run orchestration: configs, corpora, training, evaluation, ablations,
//! trace dumps and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::efficiency::{self, Baseline, CostModel, CostRow};
use crate::error::{Error, Result};
use crate::experts::ExpertKind;
use crate::model::{DsMoe, ModelConfig};
use crate::numerics::{checkpoint, Tape};
use crate::routing::{ChainTrace, Thresholds};
use crate::taskgen::{self, SampleRecord, TierSpec, NUM_TIERS};
use crate::training::{self, StageRecord, StepMetrics, TrainConfig};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    DsMoe,
    Udt,
    WMoe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoRouting,
    NoMce,
    NoMie,
    ShallowOnly,
    DeepOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 6] =
        [Self::Full, Self::NoRouting, Self::NoMce, Self::NoMie, Self::ShallowOnly, Self::DeepOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoRouting => "no-routing",
            Self::NoMce => "no-mce",
            Self::NoMie => "no-mie",
            Self::ShallowOnly => "shallow-only",
            Self::DeepOnly => "deep-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown ablation {s:?}")))
    }

    /// Model configuration for this variant of `base`.
    pub fn apply(self, base: &ModelConfig) -> Result<ModelConfig> {
        use ExpertKind::*;
        let mut c = base.clone();
        let need = |k: ExpertKind| {
            if base.families.contains(&k) {
                Ok(())
            } else {
                Err(Error::config(format!("{} needs a {k} family in the base pool", self.name())))
            }
        };
        match self {
            Self::Full => {}
            Self::NoRouting => {
                if !base.routing {
                    return Err(Error::config("no-routing applied to a router-free config"));
                }
                c.routing = false;
                c.mce_control = false;
            }
            Self::NoMce => {
                need(Mce)?;
                c.families.retain(|&k| k != Mce);
                c.mce_control = false;
            }
            Self::NoMie => {
                need(Mie)?;
                c.families.retain(|&k| k != Mie);
            }
            Self::ShallowOnly => {
                need(Spe)?;
                need(Cre)?;
                c.families = vec![Spe, Cre];
                c.mce_control = false;
            }
            Self::DeepOnly => {
                need(Lie)?;
                c.families = vec![Lie];
                c.mce_control = false;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub total: usize,
    /// Fraction of the last mix bucket that goes to tier 4 rather than tier 3.
    pub tier4_share: f64,
    pub eval_per_tier: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { total: 40_000, tier4_share: 0.5, eval_per_tier: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: ModelVariant,
    pub ablation: Ablation,
    pub model: ModelConfig,
    /// Depth of the uniform baseline used for savings.
    pub udt_depth: usize,
    /// Feed-forward experts per block of the width-gated baseline.
    pub wmoe_experts: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::DsMoe,
            ablation: Ablation::Full,
            model: ModelConfig::default(),
            udt_depth: 8,
            wmoe_experts: 4,
            seed: 7,
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Salts that separate the seed streams derived from `RunConfig::seed`.
const MODEL_SALT: u64 = 0x6d6f_6465;
const TRAIN_SALT: u64 = 0x7472_6169;
const EVAL_SALT: u64 = 0x6576_616c;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.udt_depth == 0 {
            return Err(Error::config("udt_depth must be at least 1"));
        }
        if self.wmoe_experts < 2 {
            return Err(Error::config("wmoe_experts must be at least 2"));
        }
        if self.corpus.total == 0 || self.corpus.eval_per_tier == 0 {
            return Err(Error::config("corpus sizes must be positive"));
        }
        self.train.validate()?;
        self.model_config()?;
        Ok(())
    }

    /// Model configuration with the ablation and seed applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = self.ablation.apply(&self.model)?;
        c.seed = self.seed ^ MODEL_SALT;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed ^ TRAIN_SALT, ..self.train.clone() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Overlay the keys present in `text` onto `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let mut base = toml::Value::try_from(self).map_err(|e| Error::config(format!("config: {e}")))?;
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        merge(&mut base, over);
        base.try_into().map_err(|e| Error::config(format!("config: {e}")))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Training mix corpus for `cfg`.
pub fn train_corpus(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    taskgen::mix_corpus(
        &taskgen::default_specs(cfg.seed),
        &taskgen::DEFAULT_RATIOS,
        cfg.corpus.total,
        cfg.corpus.tier4_share,
        cfg.seed,
    )
}

/// Held-out set with `eval_per_tier` samples of every tier.
pub fn eval_corpus(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for tier in 0..NUM_TIERS as u8 {
        let spec = TierSpec::new(tier, cfg.seed ^ EVAL_SALT ^ ((tier as u64 + 1) << 32))?;
        let mut s = taskgen::generate(&spec, cfg.corpus.eval_per_tier)?;
        for (i, r) in s.iter_mut().enumerate() {
            r.id = (tier as u64) * 1_000_000 + i as u64;
        }
        out.extend(s);
    }
    Ok(out)
}

/// Mix weight of each tier in the training distribution.
pub fn tier_weights(cfg: &RunConfig) -> [f64; NUM_TIERS] {
    let r = taskgen::DEFAULT_RATIOS;
    let s = cfg.corpus.tier4_share;
    [r[0], r[1], r[2], r[3] * (1.0 - s), r[3] * s]
}

/// A trained model with its training history.
pub struct TrainedRun {
    pub model: DsMoe,
    pub stages: Vec<StageRecord>,
    pub log: Vec<StepMetrics>,
}

pub fn train(cfg: &RunConfig, corpus: &[SampleRecord], progress: &mut dyn FnMut(&StepMetrics)) -> Result<TrainedRun> {
    cfg.validate()?;
    if cfg.variant != ModelVariant::DsMoe {
        return Err(Error::config("baselines are cost-only and cannot be trained"));
    }
    let mut model = DsMoe::new(cfg.model_config()?)?;
    let mut log = Vec::new();
    let stages = training::run_curriculum(&mut model, &cfg.train_config(), corpus, &mut |m| {
        progress(m);
        log.push(m.clone());
    })?;
    Ok(TrainedRun { model, stages, log })
}

/// One evaluation row; `tier` is a tier number or `all` for the
/// mix-weighted aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub tier: String,
    pub samples: usize,
    pub accuracy: f64,
    pub macs: f64,
    pub activated_params: f64,
    pub peak_activations: f64,
    pub chain_length: f64,
    pub routing_accuracy: f64,
    pub utilization_entropy: f64,
    pub baseline_macs: f64,
    pub savings: f64,
}

/// Evaluation output: per-tier rows, the aggregate row last.
pub struct Evaluation {
    pub rows: Vec<MetricsRow>,
    pub traces: Vec<ChainTrace>,
    /// Share of executed steps taken by each expert over the whole set.
    pub utilization: Vec<f64>,
    /// Wall-clock seconds; informative only.
    pub seconds: f64,
}

impl Evaluation {
    pub fn tier(&self, t: u8) -> &MetricsRow {
        let key = t.to_string();
        self.rows.iter().find(|r| r.tier == key).expect("every tier evaluated")
    }

    pub fn aggregate(&self) -> &MetricsRow {
        self.rows.last().expect("aggregate row present")
    }
}

/// Share of executed steps per expert.
pub fn utilization(traces: &[ChainTrace], m: usize) -> Vec<f64> {
    let mut counts = vec![0.0; m];
    for t in traces {
        for s in &t.steps {
            counts[s.expert_id] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub fn evaluate(model: &DsMoe, samples: &[SampleRecord], cfg: &RunConfig, variant: &str) -> Result<Evaluation> {
    let start = std::time::Instant::now();
    let cm = CostModel::for_model(model, cfg.udt_depth);
    let m = model.num_experts();
    let mut traces = Vec::with_capacity(samples.len());
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let t = model.predict(s)?;
        reports.push(efficiency::chain_cost(&t, &cm)?);
        traces.push(t);
    }
    let mut rows = Vec::new();
    for tier in 0..NUM_TIERS as u8 {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].tier == tier).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!("evaluation set has no tier-{tier} samples")));
        }
        let n = idx.len() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| idx.iter().map(|&i| f(i)).sum::<f64>() / n;
        let tier_traces: Vec<ChainTrace> = idx.iter().map(|&i| traces[i].clone()).collect();
        let macs = mean(&|i| reports[i].total_macs as f64);
        let base = mean(&|i| reports[i].baseline_macs as f64);
        rows.push(MetricsRow {
            variant: variant.to_string(),
            tier: tier.to_string(),
            samples: idx.len(),
            accuracy: mean(&|i| traces[i].correct.unwrap_or(false) as u8 as f64),
            macs,
            activated_params: mean(&|i| reports[i].activated_params as f64),
            peak_activations: mean(&|i| reports[i].peak_activations as f64),
            chain_length: mean(&|i| traces[i].steps.len() as f64),
            routing_accuracy: mean(&|i| routed_to_hint(model, &samples[i], &traces[i]) as u8 as f64),
            utilization_entropy: training::entropy(&utilization(&tier_traces, m)),
            baseline_macs: base,
            savings: 1.0 - macs / base,
        });
    }
    let w = tier_weights(cfg);
    let wavg = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().zip(w).map(|(r, w)| w * f(r)).sum::<f64>();
    let util = utilization(&traces, m);
    let macs = wavg(&|r| r.macs);
    let base = wavg(&|r| r.baseline_macs);
    let agg = MetricsRow {
        variant: variant.to_string(),
        tier: "all".into(),
        samples: samples.len(),
        accuracy: wavg(&|r| r.accuracy),
        macs,
        activated_params: wavg(&|r| r.activated_params),
        peak_activations: wavg(&|r| r.peak_activations),
        chain_length: wavg(&|r| r.chain_length),
        routing_accuracy: wavg(&|r| r.routing_accuracy),
        utilization_entropy: training::entropy(&util),
        baseline_macs: base,
        savings: 1.0 - macs / base,
    };
    rows.push(agg);
    Ok(Evaluation { rows, traces, utilization: util, seconds: start.elapsed().as_secs_f64() })
}

/// Whether the highest-probability expert belongs to the family the
/// sample's hint maps to in this pool. Router-free models never match.
fn routed_to_hint(model: &DsMoe, sample: &SampleRecord, trace: &ChainTrace) -> bool {
    if trace.probs.is_empty() {
        return false;
    }
    let top = crate::routing::ranking(&trace.probs)[0];
    model.experts[top].kind == model.config.families[model.hint_family(sample.hint)]
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

pub fn write_traces(traces: &[ChainTrace], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<ChainTrace>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn write_utilization(model: &DsMoe, util: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["expert_id", "family", "share"])?;
    for (j, u) in util.iter().enumerate() {
        w.write_record([j.to_string(), model.experts[j].kind.to_string(), format!("{u}")])?;
    }
    w.flush()?;
    Ok(())
}

/// One step of a chain summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainLink {
    pub family: ExpertKind,
    pub expert_id: usize,
    pub prob: Option<f64>,
    pub macs: u64,
}

/// Per-input chain summaries and the tier-by-family share of executed steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interpretability {
    pub chains: Vec<(u64, Vec<ChainLink>)>,
    /// `heatmap[tier][family]`, rows summing to 1 for tiers that were seen.
    pub heatmap: Vec<[f64; 5]>,
}

impl Interpretability {
    /// Most executed family per tier (`None` for unseen tiers).
    pub fn dominant(&self) -> Vec<Option<ExpertKind>> {
        self.heatmap
            .iter()
            .map(|row| {
                let i = crate::routing::ranking(row)[0];
                (row[i] > 0.0).then_some(ExpertKind::ALL[i])
            })
            .collect()
    }
}

pub fn interpretability_dump(traces: &[ChainTrace]) -> Interpretability {
    let mut heat = vec![[0.0; 5]; NUM_TIERS];
    let chains = traces
        .iter()
        .map(|t| {
            let links = t
                .steps
                .iter()
                .map(|s| {
                    heat[t.tier as usize][s.kind.index()] += 1.0;
                    ChainLink { family: s.kind, expert_id: s.expert_id, prob: t.probs.get(s.expert_id).copied(), macs: s.macs }
                })
                .collect();
            (t.input_id, links)
        })
        .collect();
    for row in &mut heat {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Interpretability { chains, heatmap: heat }
}

/// Human-readable rendering of one trace.
pub fn render_trace(t: &ChainTrace) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "input {} tier {} n={} d_syn={} c_sem={:.3} r={} C={:.3} k={}",
        t.input_id, t.tier, t.n, t.d_syn, t.c_sem, t.r, t.score, t.k
    );
    for (i, st) in t.steps.iter().enumerate() {
        let p = t.probs.get(st.expert_id).map(|p| format!("p={p:.3}")).unwrap_or_else(|| "p=-".into());
        let halt = st.halt_prob.map(|h| format!(" halt={h:.3}")).unwrap_or_default();
        let _ = writeln!(s, "  {}. {} #{} {} macs={}{}", i + 1, st.kind, st.expert_id, p, st.macs, halt);
    }
    let verdict = match (t.predicted, t.correct) {
        (Some(p), Some(true)) => format!("predicted {p} (correct)"),
        (Some(p), Some(false)) => format!("predicted {p} (wrong)"),
        _ => "no prediction".into(),
    };
    let _ = writeln!(s, "  routing {} MACs, total {} MACs, {}", t.routing_macs, t.total_macs, verdict);
    s
}

/// Saved model directory layout.
const WEIGHTS: &str = "weights.ckpt";
const MODEL_CONFIG: &str = "model.toml";
const THRESHOLDS: &str = "thresholds.json";
const REGISTRY: &str = "experts.json";

/// One line of the expert registry written next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: usize,
    pub kind: ExpertKind,
    pub internal_depth: usize,
    pub d_model: usize,
    /// Truncated sha256 of the expert parameter names and values.
    pub checksum: String,
}

pub fn registry(model: &DsMoe) -> Vec<RegistryEntry> {
    model
        .experts
        .iter()
        .map(|e| RegistryEntry {
            id: e.id,
            kind: e.kind,
            internal_depth: e.internal_depth(),
            d_model: model.config.dims.d_model,
            checksum: model.store.checksum(e.params()),
        })
        .collect()
}

pub fn save_model(model: &DsMoe, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint::save(&model.store.subset(&model.model_params()), &dir.join(WEIGHTS))?;
    let cfg = toml::to_string(&model.config).map_err(|e| Error::config(format!("config: {e}")))?;
    fs::write(dir.join(MODEL_CONFIG), cfg)?;
    fs::write(dir.join(THRESHOLDS), serde_json::to_string_pretty(&model.thresholds)?)?;
    fs::write(dir.join(REGISTRY), serde_json::to_string_pretty(&registry(model))?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<DsMoe> {
    let cfg: ModelConfig = toml::from_str(&fs::read_to_string(dir.join(MODEL_CONFIG))?)
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let mut model = DsMoe::new(cfg)?;
    model.store.load_values_from(&checkpoint::load(&dir.join(WEIGHTS))?)?;
    let th: Option<Thresholds> = serde_json::from_reader(BufReader::new(File::open(dir.join(THRESHOLDS))?))?;
    model.thresholds = th;
    let saved: Vec<RegistryEntry> = serde_json::from_reader(BufReader::new(File::open(dir.join(REGISTRY))?))?;
    if saved != registry(&model) {
        return Err(Error::Checkpoint("expert registry does not match the loaded weights".into()));
    }
    Ok(model)
}

/// Complexity features of every sample, for inspection.
pub fn write_features_csv(model: &DsMoe, samples: &[SampleRecord], path: &Path) -> Result<()> {
    let vocab = Vocab::standard();
    let w = model.complexity_weights();
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["id", "tier", "n", "d_syn", "c_sem", "r", "C"])?;
    for s in samples {
        let f = crate::complexity::extract_features(&vocab.sequence(s.tokens.clone())?)?;
        let c = crate::complexity::complexity_score(&f, &w)?;
        out.write_record([
            s.id.to_string(),
            s.tier.to_string(),
            s.tokens.len().to_string(),
            f.d_syn.to_string(),
            format!("{}", f.c_sem),
            f.r.to_string(),
            format!("{c}"),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Train and evaluate one configuration, writing its artifacts to
/// `cfg.out_dir`.
pub fn run_variant(
    cfg: &RunConfig,
    corpus: &[SampleRecord],
    eval: &[SampleRecord],
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<(TrainedRun, Evaluation)> {
    let run = train(cfg, corpus, progress)?;
    let ev = evaluate(&run.model, eval, cfg, cfg.ablation.name())?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    save_model(&run.model, &dir.join("model"))?;
    write_train_log(&run.log, &dir.join("train_log.csv"))?;
    fs::write(dir.join("stages.json"), serde_json::to_string_pretty(&run.stages)?)?;
    write_metrics_csv(&ev.rows, &dir.join("metrics.csv"))?;
    write_traces(&ev.traces, &dir.join("traces.jsonl"))?;
    write_utilization(&run.model, &ev.utilization, &dir.join("utilization.csv"))?;
    fs::write(dir.join("timing.txt"), format!("eval_seconds {:.3} (informative)\n", ev.seconds))?;
    Ok((run, ev))
}

pub fn write_train_log(log: &[StepMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in log {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

/// Train and evaluate every ablation of `base` on one shared corpus and
/// evaluation set. Each variant writes to `<out_dir>/<name>`.
pub fn run_ablation(
    base: &RunConfig,
    only: Option<&[Ablation]>,
    progress: &mut dyn FnMut(Ablation, &StepMetrics),
) -> Result<Vec<(Ablation, Evaluation)>> {
    let corpus = train_corpus(base)?;
    let eval = eval_corpus(base)?;
    let mut out = Vec::new();
    for a in only.unwrap_or(&Ablation::ALL) {
        let cfg = RunConfig { ablation: *a, out_dir: base.out_dir.join(a.name()), ..base.clone() };
        let (_, ev) = run_variant(&cfg, &corpus, &eval, &mut |m| progress(*a, m))?;
        out.push((*a, ev));
    }
    write_ablation_summary(&out, &base.out_dir)?;
    Ok(out)
}

fn write_ablation_summary(results: &[(Ablation, Evaluation)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rows: Vec<MetricsRow> = results.iter().flat_map(|(_, e)| e.rows.iter().cloned()).collect();
    write_metrics_csv(&rows, &dir.join("ablation.csv"))?;
    let mut md = String::new();
    for (a, e) in results {
        let _ = writeln!(md, "## {}\n", a.name());
        md.push_str(&metrics_table(&e.rows));
        md.push('\n');
    }
    fs::write(dir.join("ablation.md"), md)?;
    Ok(())
}

pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut s = String::from(
        "| variant | tier | acc | MACs | FLOPs | savings | chain | routing acc | entropy |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.0} | {:.0} | {:.3} | {:.2} | {:.3} | {:.3} |",
            r.variant,
            r.tier,
            r.accuracy,
            r.macs,
            2.0 * r.macs,
            r.savings,
            r.chain_length,
            r.routing_accuracy,
            r.utilization_entropy
        );
    }
    s
}

/// Measured cost of the dense baselines on `samples` (mean per input).
pub fn baseline_costs(cfg: &RunConfig, samples: &[SampleRecord]) -> Result<Vec<CostRow>> {
    let dims = cfg.model.dims;
    let udt = Baseline::udt(dims, cfg.udt_depth, cfg.seed);
    let wmoe = Baseline::wmoe(dims, cfg.udt_depth, cfg.wmoe_experts, cfg.seed);
    let embedder = DsMoe::new(cfg.model_config()?)?;
    let mut rows = Vec::new();
    for (name, b) in [("udt", &udt), ("w-moe", &wmoe)] {
        let (mut macs, mut act, mut n) = (0u64, 0u64, 0usize);
        for s in samples {
            let mut tape = Tape::new();
            let h = embedder.embed(&mut tape, &s.tokens)?;
            let r = b.forward(&mut tape, h)?;
            macs += r.macs;
            act += r.activations + (s.tokens.len() * dims.d_model) as u64;
            n += s.tokens.len();
        }
        let c = samples.len().max(1) as u64;
        rows.push(CostRow {
            variant: name.into(),
            n: n / c as usize,
            depth_or_k: b.depth(),
            macs: macs / c,
            flops: 2 * macs / c,
            routing_macs: b.gate_macs(),
            activated_params: b.activated_params(),
            peak_activations: act / c,
            savings: 0.0,
        });
    }
    let base = rows[0].macs as f64;
    for r in &mut rows {
        r.savings = 1.0 - r.macs as f64 / base;
    }
    Ok(rows)
}

/// Merge the metrics files under `runs` into one comparison table, with
/// dense-baseline costs measured on `samples`.
pub fn report(cfg: &RunConfig, runs: &[PathBuf], samples: &[SampleRecord], out: &Path) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for dir in runs {
        let p = if dir.is_dir() { dir.join("metrics.csv") } else { dir.clone() };
        rows.extend(read_metrics_csv(&p)?);
    }
    write_metrics_csv(&rows, &out.join("report.csv"))?;
    let costs = baseline_costs(cfg, samples)?;
    let mut f = File::create(out.join("baselines.csv"))?;
    efficiency::write_cost_csv(&costs, &mut f)?;
    let mut md = String::from("# Comparison\n\n");
    md.push_str(&metrics_table(&rows));
    let _ = writeln!(md, "\n# Dense baselines (mean per input)\n");
    md.push_str("| model | blocks | MACs | FLOPs | activated params | activations |\n|---|---|---|---|---|---|\n");
    for c in &costs {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            c.variant, c.depth_or_k, c.macs, c.flops, c.activated_params, c.peak_activations
        );
    }
    let by_tier = savings_by_variant(&rows);
    if !by_tier.is_empty() {
        let _ = writeln!(md, "\n# Savings against a {}-block UDT\n", cfg.udt_depth);
        for (v, s) in by_tier {
            let cells: Vec<String> = s.iter().map(|(t, x)| format!("{t}: {x:.3}")).collect();
            let _ = writeln!(md, "- {v}: {}", cells.join(", "));
        }
    }
    fs::write(out.join("report.md"), &md)?;
    Ok(md)
}

fn savings_by_variant(rows: &[MetricsRow]) -> BTreeMap<String, Vec<(String, f64)>> {
    let mut m: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for r in rows {
        m.entry(r.variant.clone()).or_default().push((r.tier.clone(), r.savings));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_map_to_pools() {
        let base = ModelConfig::default();
        use ExpertKind::*;
        assert_eq!(Ablation::ShallowOnly.apply(&base).unwrap().families, vec![Spe, Cre]);
        assert_eq!(Ablation::DeepOnly.apply(&base).unwrap().families, vec![Lie]);
        assert!(!Ablation::NoMie.apply(&base).unwrap().families.contains(&Mie));
        assert!(!Ablation::NoRouting.apply(&base).unwrap().routing);
        let no_mie = Ablation::NoMie.apply(&base).unwrap();
        assert!(Ablation::NoMie.apply(&no_mie).is_err());
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
    }

    #[test]
    fn merge_overrides_only_given_keys() {
        let base = RunConfig::default();
        let c = base.merge_toml("seed = 3\n[train]\nbatch = 4\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.batch, 4);
        assert_eq!(c.train.lr, base.train.lr);
        assert!(base.merge_toml("bogus = 1").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn heatmap_rows_normalize() {
        let cfg = RunConfig { corpus: CorpusConfig { eval_per_tier: 3, ..Default::default() }, ..Default::default() };
        let model_cfg = ModelConfig { dims: crate::experts::Dims { d_model: 8, ff: 16, window: 24, slots: 4 }, ..Default::default() };
        let mut model = DsMoe::new(model_cfg).unwrap();
        let eval = eval_corpus(&cfg).unwrap();
        model.calibrate(&eval).unwrap();
        let traces: Vec<ChainTrace> = eval.iter().map(|s| model.predict(s).unwrap()).collect();
        let dump = interpretability_dump(&traces);
        for row in &dump.heatmap {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(dump.chains.len(), traces.len());
    }
}
