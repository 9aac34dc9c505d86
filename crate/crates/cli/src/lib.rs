//! Command-line interface: suite generation, expert training, adaptation,
//! merging, evaluation, interference measurement, the experiment battery and
//! report regeneration.
//!
//! Configuration layering: built-in defaults ← `--config` TOML file ← CLI
//! flags. Exit codes: 0 success, 1 usage/configuration error, 2 numeric
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use modelfuse_core::checkpoint::{self, Checkpoint};
use modelfuse_core::error::Error;
use modelfuse_core::experiment::{run_experiment, HarnessConfig};
use modelfuse_core::interference::xi;
use modelfuse_core::merge::{merge, MergeConfig, MergeMethod};
use modelfuse_core::model::apply;
use modelfuse_core::report::Report;
use modelfuse_core::ri::resolve_interference;
use modelfuse_core::suite::{gen_suite, AuxSource, SuiteSpec};
use modelfuse_core::train::{evaluate, mean_accuracy, train_experts};
use modelfuse_core::{with_jobs, Result};

#[derive(Parser, Debug)]
#[command(
    name = "modelfuse",
    version,
    about = "Desk-scale laboratory for merging fine-tuned experts into one multitask model"
)]
struct Cli {
    /// TOML configuration file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed driving suite, training, adaptation and aux sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts and experiment runs.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,

    /// Worker-thread cap; results are identical for any value.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic multi-task suite spec.
    GenSuite {
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        eval_per_class: Option<usize>,
        /// Write the suite spec as a TOML file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one expert per task and save the bundle.
    TrainExperts {
        /// Suite spec TOML (falls back to the config file's [suite]).
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt every expert's task vector on auxiliary data.
    RiAdapt {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Aux source kind: gaussian_noise, structured_synthetic,
        /// near_distribution, oracle_task_data.
        #[arg(long)]
        aux: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge a bundle's task vectors into one model.
    Merge {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        topk: Option<f64>,
        #[arg(long)]
        common_fraction: Option<f64>,
        /// Use the literal published formula variants for Iso-C and TSV-M.
        #[arg(long)]
        literal: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-task accuracy of a model (default: the bundle's shared init).
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Cross-task interference of a merged model against its bundle.
    Xi {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Run a named experiment (see `experiment help` for the list).
    Experiment {
        name: String,
        /// Run-directory name (defaults to a timestamp).
        #[arg(long)]
        tag: Option<String>,
    },
    /// Regenerate tables from a stored run and print them.
    Report { path: PathBuf },
}

// ── Config file ─────────────────────────────────────────────────────

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    suite: Option<SuiteSection>,
    train: Option<TrainSection>,
    ri: Option<RiSection>,
    aux: Option<AuxSection>,
    experiment: Option<ExperimentSection>,
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct SuiteSection {
    dim: Option<usize>,
    classes: Option<usize>,
    tasks: Option<usize>,
    sigma: Option<f64>,
    train_per_class: Option<usize>,
    eval_per_class: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    pretrain_epochs: Option<usize>,
    pretrain_lr: Option<f64>,
    seed: Option<u64>,
    /// Own-task accuracy gate; zero or negative disables it.
    gate: Option<f64>,
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct RiSection {
    steps: Option<usize>,
    alpha: Option<f64>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    metric: Option<String>,
    adaptive: Option<bool>,
    early_stop: Option<bool>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct AuxSection {
    kind: Option<String>,
    perturbation: Option<f64>,
    rank_bound: Option<usize>,
    pool: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    methods: Option<Vec<String>>,
    distill_methods: Option<Vec<String>>,
    literal_formulas: Option<bool>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn apply_suite(spec: &mut SuiteSpec, s: &SuiteSection) {
    if let Some(v) = s.dim {
        spec.input_dim = v;
    }
    if let Some(v) = s.classes {
        spec.classes = v;
    }
    if let Some(v) = s.tasks {
        spec.tasks = v;
    }
    if let Some(v) = s.sigma {
        spec.sigma = v;
    }
    if let Some(v) = s.train_per_class {
        spec.train_per_class = v;
    }
    if let Some(v) = s.eval_per_class {
        spec.eval_per_class = v;
    }
    if let Some(v) = s.seed {
        spec.seed = v;
    }
}

fn build_harness(file: &FileConfig, seed: Option<u64>) -> Result<HarnessConfig> {
    let mut cfg = HarnessConfig::default();
    if let Some(s) = &file.suite {
        apply_suite(&mut cfg.suite, s);
    }
    if let Some(t) = &file.train {
        if let Some(v) = t.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = t.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = t.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = t.weight_decay {
            cfg.train.weight_decay = v;
        }
        if let Some(v) = t.pretrain_epochs {
            cfg.train.pretrain_epochs = v;
        }
        if let Some(v) = t.pretrain_lr {
            cfg.train.pretrain_lr = v;
        }
        if let Some(v) = t.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = t.gate {
            cfg.train.accuracy_gate = if v > 0.0 { Some(v) } else { None };
        }
    }
    if let Some(r) = &file.ri {
        if let Some(v) = r.steps {
            cfg.ri.steps = v;
        }
        if let Some(v) = r.alpha {
            cfg.ri.alpha = v;
        }
        if let Some(v) = r.lr {
            cfg.ri.lr = v;
        }
        if let Some(v) = r.weight_decay {
            cfg.ri.weight_decay = v;
        }
        if let Some(v) = r.batch_size {
            cfg.ri.batch_size = v;
        }
        if let Some(m) = &r.metric {
            cfg.ri.metric = m.parse()?;
        }
        if let Some(true) = r.adaptive {
            cfg.ri.optimizer = modelfuse_core::autodiff::OptimMode::Adaptive;
        }
        if let Some(v) = r.early_stop {
            cfg.ri.early_stop = v;
        }
        if let Some(v) = r.seed {
            cfg.ri.seed = v;
        }
    }
    if let Some(a) = &file.aux {
        if let Some(k) = &a.kind {
            cfg.aux.kind = k.parse()?;
        }
        if let Some(v) = a.perturbation {
            cfg.aux.perturbation = v;
        }
        if let Some(v) = a.rank_bound {
            cfg.aux.rank_bound = v;
        }
        if let Some(v) = a.pool {
            cfg.aux.pool = Some(v);
        }
        if let Some(v) = a.seed {
            cfg.aux.seed = v;
        }
    }
    if let Some(e) = &file.experiment {
        if let Some(methods) = &e.methods {
            cfg.methods = methods
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<MergeMethod>>>()?;
        }
        if let Some(methods) = &e.distill_methods {
            cfg.distill_methods = methods
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<MergeMethod>>>()?;
        }
        if let Some(v) = e.literal_formulas {
            cfg.literal_formulas = v;
        }
    }
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

/// Rebuilds the suite a checkpoint was produced from via its embedded id.
fn suite_from_checkpoint(suite_id: &str) -> Result<modelfuse_core::suite::TaskSuite> {
    gen_suite(&SuiteSpec::from_id(suite_id)?)
}

// ── Entry point ─────────────────────────────────────────────────────

/// Parses arguments and runs; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let jobs = cli.jobs;
    match with_jobs(jobs, move || dispatch(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    let out_dir = cli.out_dir.clone();

    match cli.cmd {
        Cmd::GenSuite {
            dim,
            classes,
            tasks,
            sigma,
            train_per_class,
            eval_per_class,
            out,
        } => {
            let mut spec = SuiteSpec::default();
            if let Some(s) = &file.suite {
                apply_suite(&mut spec, s);
            }
            if let Some(v) = dim {
                spec.input_dim = v;
            }
            if let Some(v) = classes {
                spec.classes = v;
            }
            if let Some(v) = tasks {
                spec.tasks = v;
            }
            if let Some(v) = sigma {
                spec.sigma = v;
            }
            if let Some(v) = train_per_class {
                spec.train_per_class = v;
            }
            if let Some(v) = eval_per_class {
                spec.eval_per_class = v;
            }
            if let Some(v) = cli.seed {
                spec.seed = v;
            }
            let suite = gen_suite(&spec)?;
            println!("suite {}", suite.id);
            for (t, classes) in suite.task_classes.iter().enumerate() {
                println!("  task {t}: classes {classes:?}");
            }
            if let Some(path) = out {
                let text = format!(
                    "[suite]\ndim = {}\nclasses = {}\ntasks = {}\nsigma = {}\ntrain_per_class = {}\neval_per_class = {}\nseed = {}\n",
                    spec.input_dim,
                    spec.classes,
                    spec.tasks,
                    spec.sigma,
                    spec.train_per_class,
                    spec.eval_per_class,
                    spec.seed
                );
                std::fs::write(&path, text)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }

        Cmd::TrainExperts { suite, epochs, out } => {
            let mut cfg = build_harness(&file, cli.seed)?;
            if let Some(path) = suite {
                let sub = load_file_config(Some(&path))?;
                if let Some(s) = &sub.suite {
                    apply_suite(&mut cfg.suite, s);
                }
                if let Some(v) = cli.seed {
                    cfg = cfg.with_seed(v);
                }
            }
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            let suite = gen_suite(&cfg.suite)?;
            let bundle = train_experts(&suite, &cfg.train)?;
            let mut own = Vec::new();
            for t in 0..bundle.tasks() {
                let theta = bundle.expert_params(t)?;
                own.push(evaluate(&theta, &bundle.heads, &suite)?[t]);
            }
            let path = out.unwrap_or_else(|| out_dir.join("bundle.mfckpt"));
            checkpoint::save(&path, &Checkpoint::Bundle(bundle))?;
            println!(
                "trained {} experts (own-task accuracy: {})",
                own.len(),
                own.iter()
                    .map(|a| format!("{a:.3}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            println!("wrote {}", path.display());
            Ok(())
        }

        Cmd::RiAdapt {
            bundle,
            steps,
            alpha,
            metric,
            lr,
            weight_decay,
            batch_size,
            aux,
            out,
        } => {
            let mut cfg = build_harness(&file, cli.seed)?;
            if let Some(v) = steps {
                cfg.ri.steps = v;
            }
            if let Some(v) = alpha {
                cfg.ri.alpha = v;
            }
            if let Some(m) = metric {
                cfg.ri.metric = m.parse()?;
            }
            if let Some(v) = lr {
                cfg.ri.lr = v;
            }
            if let Some(v) = weight_decay {
                cfg.ri.weight_decay = v;
            }
            if let Some(v) = batch_size {
                cfg.ri.batch_size = v;
            }
            if let Some(k) = aux {
                cfg.aux.kind = k.parse()?;
            }
            let loaded = checkpoint::load::<f64>(&bundle)?.into_bundle()?;
            let suite = suite_from_checkpoint(&loaded.suite_id)?;
            let source = AuxSource::new(cfg.aux.clone(), suite.spec.input_dim, Some(&suite))?;
            let outcome = resolve_interference(&loaded, &source, &cfg.ri)?;
            for trace in &outcome.traces {
                let last = trace.l_ri.last().copied().unwrap_or(0.0);
                let first = trace.l_ri.first().copied().unwrap_or(0.0);
                let status = match trace.diverged {
                    Some(s) => format!("diverged at step {s}"),
                    None => format!("loss {first:.5} -> {last:.5}"),
                };
                println!("expert {}: {status}", trace.expert);
            }
            let adapted = loaded.with_vectors(outcome.vectors)?;
            let path = out.unwrap_or_else(|| out_dir.join("adapted.mfckpt"));
            checkpoint::save(&path, &Checkpoint::Bundle(adapted))?;
            println!("wrote {}", path.display());
            Ok(())
        }

        Cmd::Merge {
            bundle,
            method,
            lambda,
            topk,
            common_fraction,
            literal,
            out,
        } => {
            let loaded = checkpoint::load::<f64>(&bundle)?.into_bundle()?;
            let mut mcfg = MergeConfig::new(method.parse()?, loaded.tasks());
            mcfg.lambda = lambda;
            mcfg.topk = topk;
            mcfg.common_fraction = common_fraction;
            mcfg.literal_formulas = literal;
            let output = merge(&loaded, &mcfg)?;
            for (layer, warning) in output.warnings() {
                eprintln!("warning: {layer}: {warning}");
            }
            let theta_m = apply(&loaded.theta0, &output.vector, 1.0)?;
            let path = out.unwrap_or_else(|| out_dir.join(format!("merged_{method}.mfckpt")));
            checkpoint::save(
                &path,
                &Checkpoint::Params {
                    params: theta_m,
                    suite_id: loaded.suite_id.clone(),
                    origin: Some(loaded.theta0.fingerprint()),
                },
            )?;
            println!(
                "merged {} tasks with {} (λ = {})",
                loaded.tasks(),
                method,
                output.lambda
            );
            println!("wrote {}", path.display());
            Ok(())
        }

        Cmd::Eval { bundle, model } => {
            let loaded = checkpoint::load::<f64>(&bundle)?.into_bundle()?;
            let suite = suite_from_checkpoint(&loaded.suite_id)?;
            let theta = match model {
                Some(path) => {
                    let (params, origin) = checkpoint::load::<f64>(&path)?.into_params()?;
                    if let Some(fp) = origin {
                        if fp != loaded.theta0.fingerprint() {
                            return Err(Error::Provenance(
                                "model origin does not match the bundle's shared init".into(),
                            ));
                        }
                    }
                    params
                }
                None => loaded.theta0.clone(),
            };
            let acc = evaluate(&theta, &loaded.heads, &suite)?;
            for (t, a) in acc.iter().enumerate() {
                println!("task {t}: {a:.6}");
            }
            println!("mean: {:.6}", mean_accuracy(&acc));
            Ok(())
        }

        Cmd::Xi {
            bundle,
            merged,
            metric,
        } => {
            let loaded = checkpoint::load::<f64>(&bundle)?.into_bundle()?;
            let (params, origin) = checkpoint::load::<f64>(&merged)?.into_params()?;
            if let Some(fp) = origin {
                if fp != loaded.theta0.fingerprint() {
                    return Err(Error::Provenance(
                        "merged model origin does not match the bundle's shared init".into(),
                    ));
                }
            }
            let suite = suite_from_checkpoint(&loaded.suite_id)?;
            let m = match metric {
                Some(m) => m.parse()?,
                None => modelfuse_core::metric::DistanceMetric::Kl,
            };
            let rep = xi(&loaded, &params, &suite.eval_inputs(), m, &suite.id)?;
            for (t, v) in rep.per_task.iter().enumerate() {
                println!("xi task {t}: {v}");
            }
            println!("xi total: {}", rep.total);
            Ok(())
        }

        Cmd::Experiment { name, tag } => {
            let cfg = build_harness(&file, cli.seed)?;
            let dir = run_experiment(&name, &cfg, &out_dir, tag.as_deref())?;
            println!("wrote {}", dir.display());
            Ok(())
        }

        Cmd::Report { path } => {
            let (report_path, dir) = if path.is_dir() {
                (path.join("report.txt"), path)
            } else {
                let dir = path
                    .parent()
                    .map(|p| p.to_path_buf())
                    .unwrap_or_else(|| PathBuf::from("."));
                (path, dir)
            };
            let text = std::fs::read_to_string(&report_path)?;
            let report = Report::decode(&text)?;
            report.write_tables(&dir)?;
            println!("experiment {}", report.experiment);
            for t in &report.tables {
                println!("\n[{}]", t.name);
                print_table(t);
            }
            Ok(())
        }
    }
}

fn print_table(t: &modelfuse_core::report::Table) {
    let mut widths: Vec<usize> = t.columns.iter().map(|c| c.len()).collect();
    for row in &t.rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:>w$}", w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", fmt_row(&t.columns));
    for row in &t.rows {
        println!("{}", fmt_row(row));
    }
}

/// Keyed overlay used by tests to confirm flag precedence.
pub fn config_layers_for_test(
    file_text: &str,
    seed: Option<u64>,
) -> Result<BTreeMap<String, String>> {
    let file: FileConfig = toml::from_str(file_text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = build_harness(&file, seed)?;
    let mut out = BTreeMap::new();
    out.insert("suite.id".into(), cfg.suite.id());
    out.insert("ri.steps".into(), cfg.ri.steps.to_string());
    out.insert("ri.lr".into(), cfg.ri.lr.to_string());
    out.insert("train.epochs".into(), cfg.train.epochs.to_string());
    out.insert("aux.kind".into(), cfg.aux.kind.to_string());
    Ok(out)
}
