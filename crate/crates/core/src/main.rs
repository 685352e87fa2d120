use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsmoe::efficiency::{self, CostModel, CostRow};
use dsmoe::harness::{self, Ablation, RunConfig};
use dsmoe::model::DsMoe;
use dsmoe::taskgen;
use dsmoe::training::StepMetrics;
use dsmoe::Result;

#[derive(Parser)]
#[command(name = "dsmoe", version, about = "Depth-specialised mixture-of-experts reasoning model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; keys present in the file override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (file for `gen`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print training metrics to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a mixed training corpus as JSONL.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        total: Option<usize>,
    },
    /// Run the four-stage curriculum and evaluate the result.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = Ablation::parse)]
        ablation: Option<Ablation>,
        /// Total step budget, split 40/10/25/25 across stages.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a saved model on the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train and evaluate all six ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Restrict to these variants (comma separated).
        #[arg(long, value_delimiter = ',', value_parser = Ablation::parse)]
        only: Vec<Ablation>,
    },
    /// Pretty-print stored chain traces.
    Trace {
        traces: PathBuf,
        /// Input id to show; all traces when omitted.
        #[arg(long)]
        id: Option<u64>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Merge metrics files into comparison tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories or metrics CSV files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Measure costs against a 24-block baseline.
        #[arg(long)]
        deep_baseline: bool,
    },
    /// Analytic cost table for single-family chains against the baseline.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 24)]
        n: usize,
        #[arg(long)]
        deep_baseline: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = &c.config {
        cfg = cfg.merge_toml(&fs::read_to_string(p)?)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(verbose: bool) -> impl FnMut(&StepMetrics) {
    move |m| {
        if verbose {
            eprintln!(
                "{} {:>6} L={:.4} task={:.4} routing_acc={:.3} H={:.3} len={:.2}",
                m.stage, m.step, m.loss, m.task, m.routing_accuracy, m.utilization_entropy, m.mean_chain_length
            );
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { common, total } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = total {
                cfg.corpus.total = t;
                cfg.validate()?;
            }
            let corpus = harness::train_corpus(&cfg)?;
            let path = common.out.unwrap_or_else(|| PathBuf::from("corpus.jsonl"));
            taskgen::write_jsonl(BufWriter::new(File::create(&path)?), &corpus)?;
            println!("wrote {} samples to {}", corpus.len(), path.display());
        }
        Cmd::Train { common, ablation, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = ablation {
                cfg.ablation = a;
            }
            if let Some(s) = steps {
                cfg.train.budgets = dsmoe::training::StageBudgets::scaled(s);
            }
            let corpus = harness::train_corpus(&cfg)?;
            let eval = harness::eval_corpus(&cfg)?;
            let (_, ev) = harness::run_variant(&cfg, &corpus, &eval, &mut progress(common.verbose))?;
            print!("{}", harness::metrics_table(&ev.rows));
        }
        Cmd::Eval { common, model } => {
            let cfg = load_config(&common)?;
            let m = harness::load_model(&model)?;
            let eval = harness::eval_corpus(&cfg)?;
            let ev = harness::evaluate(&m, &eval, &cfg, cfg.ablation.name())?;
            fs::create_dir_all(&cfg.out_dir)?;
            harness::write_metrics_csv(&ev.rows, &cfg.out_dir.join("metrics.csv"))?;
            harness::write_traces(&ev.traces, &cfg.out_dir.join("traces.jsonl"))?;
            harness::write_utilization(&m, &ev.utilization, &cfg.out_dir.join("utilization.csv"))?;
            let dump = harness::interpretability_dump(&ev.traces);
            fs::write(cfg.out_dir.join("interpretability.json"), serde_json::to_string(&dump)?)?;
            print!("{}", harness::metrics_table(&ev.rows));
        }
        Cmd::Ablate { common, steps, only } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.train.budgets = dsmoe::training::StageBudgets::scaled(s);
            }
            let only = (!only.is_empty()).then_some(only.as_slice());
            let mut p = progress(common.verbose);
            let res = harness::run_ablation(&cfg, only, &mut |_, m| p(m))?;
            for (a, ev) in res {
                println!("## {}", a.name());
                print!("{}", harness::metrics_table(&ev.rows));
            }
        }
        Cmd::Trace { traces, id, limit } => {
            let all = harness::read_traces(&traces)?;
            let shown: Vec<_> = match id {
                Some(i) => all.iter().filter(|t| t.input_id == i).collect(),
                None => all.iter().take(limit).collect(),
            };
            if shown.is_empty() {
                return Err(dsmoe::Error::Trace(format!("no matching trace in {}", traces.display())));
            }
            for t in shown {
                print!("{}", harness::render_trace(t));
            }
        }
        Cmd::Report { common, runs, deep_baseline } => {
            let mut cfg = load_config(&common)?;
            if deep_baseline {
                cfg.udt_depth = 24;
            }
            let sample_cfg = RunConfig { corpus: harness::CorpusConfig { eval_per_tier: 20, ..cfg.corpus.clone() }, ..cfg.clone() };
            let samples = harness::eval_corpus(&sample_cfg)?;
            let md = harness::report(&cfg, &runs, &samples, &cfg.out_dir)?;
            print!("{md}");
        }
        Cmd::Cost { common, n, deep_baseline } => {
            let mut cfg = load_config(&common)?;
            if deep_baseline {
                cfg.udt_depth = 24;
            }
            let model = DsMoe::new(cfg.model_config()?)?;
            let cm = CostModel::for_model(&model, cfg.udt_depth);
            let base = efficiency::uniform_cost(cfg.udt_depth, n, &cm)?;
            let mut rows = vec![CostRow {
                variant: "udt".into(),
                n,
                depth_or_k: cfg.udt_depth,
                macs: base,
                flops: 2 * base,
                routing_macs: 0,
                activated_params: 0,
                peak_activations: 0,
                savings: 0.0,
            }];
            for (f, &kind) in model.config.families.iter().enumerate() {
                let first = model.family_experts(f)[0];
                for k in dsmoe::routing::K_MIN..=dsmoe::routing::K_MAX {
                    let chain = vec![first; k];
                    let macs: u64 = cm.predict_steps(n, &chain)?.iter().sum::<u64>() + cm.routing_macs();
                    rows.push(CostRow {
                        variant: format!("{kind}x{k}"),
                        n,
                        depth_or_k: k,
                        macs,
                        flops: 2 * macs,
                        routing_macs: cm.routing_macs(),
                        activated_params: cm.expert_params[first],
                        peak_activations: 0,
                        savings: 1.0 - macs as f64 / base as f64,
                    });
                }
            }
            efficiency::write_cost_csv(&rows, std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
