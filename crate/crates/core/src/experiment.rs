//! The experiment battery: suite generation, expert training, adaptation and
//! merging wired into named, seeded, fully reproducible experiments that
//! emit canonical reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::interference::{xi, InterferenceReport};
use crate::merge::{merge, MergeConfig, MergeMethod};
use crate::metric::DistanceMetric;
use crate::model::{apply, ExpertBundle, ParamSet, TaskVector};
use crate::report::{fmt_acc, fmt_val, Report, Table};
use crate::ri::{
    merge_distill_aux, resolve_interference, ri_loss, zero_shot_distill, BatchSource, RiConfig,
    RiOutcome,
};
use crate::rng::{Prng, PRNG_ALGORITHM};
use crate::suite::{gen_suite, AuxConfig, AuxKind, AuxSource, SuiteSpec, TaskSuite};
use crate::train::{evaluate, mean_accuracy, train_experts, TrainConfig};

pub const EXPERIMENTS: [&str; 8] = [
    "merge_grid",
    "distance_metrics",
    "distill_baselines",
    "aux_sources",
    "hp_sensitivity",
    "aux_size",
    "avg_scale_sweep",
    "trajectory",
];

/// Everything a single experiment run needs; one seed drives all stages.
#[derive(Clone, Debug)]
pub struct HarnessConfig {
    pub suite: SuiteSpec,
    pub train: TrainConfig,
    pub ri: RiConfig<f64>,
    pub aux: AuxConfig,
    pub methods: Vec<MergeMethod>,
    /// Methods carried through the distillation-baseline comparison.
    pub distill_methods: Vec<MergeMethod>,
    pub literal_formulas: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            suite: SuiteSpec::default(),
            train: TrainConfig::default(),
            ri: RiConfig {
                steps: 500,
                ..RiConfig::default()
            },
            aux: AuxConfig {
                kind: AuxKind::StructuredSynthetic,
                ..AuxConfig::default()
            },
            methods: MergeMethod::ALL.to_vec(),
            distill_methods: vec![
                MergeMethod::TaskArithmetic,
                MergeMethod::IsoC,
                MergeMethod::TsvM,
            ],
            literal_formulas: false,
        }
    }
}

impl HarnessConfig {
    /// Propagates one master seed into every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.suite.seed = seed;
        self.train.seed = seed;
        self.ri.seed = seed;
        self.aux.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.suite.seed
    }

    fn merge_config(&self, method: MergeMethod) -> MergeConfig {
        let mut cfg = MergeConfig::new(method, self.suite.tasks);
        cfg.literal_formulas = self.literal_formulas;
        cfg
    }

    fn snapshot_meta(&self, report: &mut Report, aux_id: &str) {
        report.push_meta("version", crate::VERSION);
        report.push_meta("prng", PRNG_ALGORITHM);
        report.push_meta("seed", self.seed());
        report.push_meta("config.suite.id", self.suite.id());
        report.push_meta("config.train.epochs", self.train.epochs);
        report.push_meta("config.train.lr", self.train.lr);
        report.push_meta("config.train.batch_size", self.train.batch_size);
        report.push_meta("config.train.pretrain_epochs", self.train.pretrain_epochs);
        report.push_meta("config.train.pretrain_lr", self.train.pretrain_lr);
        report.push_meta("config.ri.steps", self.ri.steps);
        report.push_meta("config.ri.alpha", self.ri.alpha);
        report.push_meta("config.ri.lr", self.ri.lr);
        report.push_meta("config.ri.weight_decay", self.ri.weight_decay);
        report.push_meta("config.ri.batch_size", self.ri.batch_size);
        report.push_meta("config.ri.metric", self.ri.metric);
        report.push_meta("config.ri.optimizer", self.ri.optimizer.name());
        report.push_meta("config.aux.id", aux_id);
        report.push_meta(
            "config.methods",
            self.methods
                .iter()
                .map(|m| m.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        report.push_meta(
            "note.structured_synthetic",
            "rank/pattern_parameters_are_artifact-defined_diversity_analogs",
        );
    }
}

struct Prepared {
    suite: TaskSuite,
    bundle: ExpertBundle<f64>,
    aux: AuxSource,
}

fn prepare(cfg: &HarnessConfig) -> Result<Prepared> {
    let suite = gen_suite(&cfg.suite)?;
    let bundle = train_experts(&suite, &cfg.train)?;
    let aux = AuxSource::new(cfg.aux.clone(), cfg.suite.input_dim, Some(&suite))?;
    Ok(Prepared { suite, bundle, aux })
}

fn merged_accuracy(
    bundle: &ExpertBundle<f64>,
    suite: &TaskSuite,
    vector: &TaskVector<f64>,
) -> Result<(ParamSet<f64>, Vec<f64>)> {
    let theta = apply(&bundle.theta0, vector, 1.0)?;
    let acc = evaluate(&theta, &bundle.heads, suite)?;
    Ok((theta, acc))
}

fn acc_row(label: &str, acc: &[f64]) -> Vec<String> {
    let mut row = vec![label.to_string()];
    row.extend(acc.iter().map(|&a| fmt_acc(a)));
    row.push(fmt_acc(mean_accuracy(acc)));
    row
}

fn xi_row(label: &str, rep: &InterferenceReport<f64>) -> Vec<String> {
    let mut row = vec![label.to_string()];
    row.extend(rep.per_task.iter().map(|&v| fmt_val(v)));
    row.push(fmt_val(rep.total));
    row
}

fn acc_columns(tasks: usize) -> Vec<String> {
    let mut cols = vec!["row".to_string()];
    cols.extend((0..tasks).map(|t| format!("task{t}")));
    cols.push("mean".into());
    cols
}

fn ri_trace_table(outcome: &RiOutcome<f64>) -> Table {
    let mut t = Table::new("ri_trace", &["expert", "step", "l1", "l2_over_nm1", "l_ri"]);
    for trace in &outcome.traces {
        for s in 0..trace.steps_run {
            t.push_row(vec![
                trace.expert.to_string(),
                s.to_string(),
                fmt_val(trace.l1[s]),
                fmt_val(trace.l2_norm[s]),
                fmt_val(trace.l_ri[s]),
            ]);
        }
    }
    t
}

// ── merge_grid ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MergeCell {
    pub method: MergeMethod,
    pub adapted: bool,
    pub acc: Vec<f64>,
    pub xi: InterferenceReport<f64>,
}

#[derive(Clone, Debug)]
pub struct MergeGridResult {
    pub zero_shot: Vec<f64>,
    pub finetuned: Vec<f64>,
    pub cells: Vec<MergeCell>,
    pub outcome: RiOutcome<f64>,
    pub bundle: ExpertBundle<f64>,
    pub adapted_bundle: ExpertBundle<f64>,
}

/// Every merging method with and without adaptation, plus reference rows.
pub fn merge_grid(cfg: &HarnessConfig) -> Result<(MergeGridResult, Report)> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let evals = p.suite.eval_inputs();

    let zero_shot = evaluate(&p.bundle.theta0, &p.bundle.heads, &p.suite)?;
    let mut finetuned = Vec::with_capacity(p.bundle.tasks());
    for t in 0..p.bundle.tasks() {
        let theta = p.bundle.expert_params(t)?;
        finetuned.push(evaluate(&theta, &p.bundle.heads, &p.suite)?[t]);
    }

    let outcome = resolve_interference(&p.bundle, &p.aux, &cfg.ri)?;
    let adapted = p.bundle.with_vectors(outcome.vectors.clone())?;

    let mut cells = Vec::new();
    let mut acc_table = Table::new("accuracy", &[]);
    acc_table.columns = acc_columns(p.suite.spec.tasks);
    acc_table.push_row(acc_row("zero_shot", &zero_shot));
    acc_table.push_row(acc_row("finetuned", &finetuned));
    let xi_cols: Vec<String> = {
        let mut c = vec!["row".to_string()];
        c.extend((0..p.suite.spec.tasks).map(|t| format!("task{t}")));
        c.push("total".into());
        c
    };
    let mut xi_table = Table::new("xi", &[]);
    xi_table.columns = xi_cols;
    let mut info = Table::new("merge_info", &["method", "lambda", "warnings"]);

    for &method in &cfg.methods {
        let mcfg = cfg.merge_config(method);
        for (adapted_run, source) in [(false, &p.bundle), (true, &adapted)] {
            let out = merge(source, &mcfg)?;
            let (theta, acc) = merged_accuracy(&p.bundle, &p.suite, &out.vector)?;
            let rep = xi(&p.bundle, &theta, &evals, cfg.ri.metric, &p.suite.id)?;
            let label = if adapted_run {
                format!("{method}+ri")
            } else {
                method.to_string()
            };
            acc_table.push_row(acc_row(&label, &acc));
            xi_table.push_row(xi_row(&label, &rep));
            if !adapted_run {
                info.push_row(vec![
                    method.to_string(),
                    fmt_val(out.lambda),
                    out.warnings().count().to_string(),
                ]);
            }
            cells.push(MergeCell {
                method,
                adapted: adapted_run,
                acc,
                xi: rep,
            });
        }
    }

    let mut report = Report::new("merge_grid");
    report.push_time("generated", unix_now());
    report.push_time("wall_secs", start.elapsed().as_secs_f64());
    for t in &outcome.traces {
        report.push_time(&format!("ri_wall_secs.expert{}", t.expert), t.wall_secs);
    }
    cfg.snapshot_meta(&mut report, &p.aux.id());
    report.push_table(acc_table);
    report.push_table(xi_table);
    report.push_table(info);
    report.push_table(ri_trace_table(&outcome));

    Ok((
        MergeGridResult {
            zero_shot,
            finetuned,
            cells,
            outcome,
            bundle: p.bundle,
            adapted_bundle: adapted,
        },
        report,
    ))
}

// ── trajectory ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrajectoryResult {
    pub steps: Vec<usize>,
    /// Mean adaptation loss over experts on a held-out aux batch.
    pub l_ri_aux: Vec<f64>,
    pub xi_ta: Vec<f64>,
    pub xi_ties: Vec<f64>,
    pub acc_ta: Vec<f64>,
    pub acc_ties: Vec<f64>,
    pub traces: Vec<Vec<f64>>,
}

/// Aligned per-checkpoint series: adaptation loss on auxiliary data,
/// interference on task data, and merged accuracy, for TA and TIES.
pub fn trajectory(cfg: &HarnessConfig) -> Result<(TrajectoryResult, Report)> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let evals = p.suite.eval_inputs();

    let mut ricfg = cfg.ri.clone();
    if ricfg.snapshot_every.is_none() {
        ricfg.snapshot_every = Some((ricfg.steps / 10).max(1));
    }
    let outcome = resolve_interference(&p.bundle, &p.aux, &ricfg)?;

    let mut held_rng = Prng::seed(cfg.ri.seed).derive("aux-eval", 0);
    let held_batch = p.aux.batch(&mut held_rng, cfg.ri.batch_size)?;

    let ta_cfg = cfg.merge_config(MergeMethod::TaskArithmetic);
    let ties_cfg = cfg.merge_config(MergeMethod::Ties);

    let mut result = TrajectoryResult {
        steps: Vec::new(),
        l_ri_aux: Vec::new(),
        xi_ta: Vec::new(),
        xi_ties: Vec::new(),
        acc_ta: Vec::new(),
        acc_ties: Vec::new(),
        traces: outcome.traces.iter().map(|t| t.l_ri.clone()).collect(),
    };
    let mut table = Table::new(
        "trajectory",
        &["step", "l_ri_aux", "xi_ta", "xi_ties", "acc_ta", "acc_ties"],
    );

    for (step, vectors) in &outcome.snapshots {
        let mut lri_sum = 0.0;
        for (i, v) in vectors.iter().enumerate() {
            let (lri, _, _) = ri_loss(
                &held_batch,
                &p.bundle.theta0,
                &p.bundle.vectors[i],
                v,
                &p.bundle.heads,
                i,
                cfg.ri.alpha,
                cfg.ri.metric,
            )?;
            lri_sum += lri;
        }
        let lri_mean = lri_sum / vectors.len() as f64;

        let snap_bundle = p.bundle.with_vectors(vectors.clone())?;
        let ta_out = merge(&snap_bundle, &ta_cfg)?;
        let (ta_theta, ta_acc) = merged_accuracy(&p.bundle, &p.suite, &ta_out.vector)?;
        let ta_xi = xi(&p.bundle, &ta_theta, &evals, cfg.ri.metric, &p.suite.id)?;
        let ties_out = merge(&snap_bundle, &ties_cfg)?;
        let (ties_theta, ties_acc) = merged_accuracy(&p.bundle, &p.suite, &ties_out.vector)?;
        let ties_xi = xi(&p.bundle, &ties_theta, &evals, cfg.ri.metric, &p.suite.id)?;

        result.steps.push(*step);
        result.l_ri_aux.push(lri_mean);
        result.xi_ta.push(ta_xi.total);
        result.xi_ties.push(ties_xi.total);
        result.acc_ta.push(mean_accuracy(&ta_acc));
        result.acc_ties.push(mean_accuracy(&ties_acc));
        table.push_row(vec![
            step.to_string(),
            fmt_val(lri_mean),
            fmt_val(ta_xi.total),
            fmt_val(ties_xi.total),
            fmt_acc(mean_accuracy(&ta_acc)),
            fmt_acc(mean_accuracy(&ties_acc)),
        ]);
    }

    let mut report = Report::new("trajectory");
    report.push_time("generated", unix_now());
    report.push_time("wall_secs", start.elapsed().as_secs_f64());
    cfg.snapshot_meta(&mut report, &p.aux.id());
    report.push_table(table);
    report.push_table(ri_trace_table(&outcome));
    Ok((result, report))
}

// ── distill_baselines ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DistillRow {
    pub method: MergeMethod,
    pub baseline: f64,
    pub distill_aux: f64,
    pub ri: f64,
}

#[derive(Clone, Debug)]
pub struct DistillResult {
    pub zero_shot: f64,
    pub zero_shot_distill: f64,
    pub finetuned: f64,
    pub rows: Vec<DistillRow>,
}

/// Merging versus multitask distillation on auxiliary data.
pub fn distill_baselines(cfg: &HarnessConfig) -> Result<(DistillResult, Report)> {
    let start = Instant::now();
    let p = prepare(cfg)?;

    let zero_shot = mean_accuracy(&evaluate(&p.bundle.theta0, &p.bundle.heads, &p.suite)?);
    let mut finetuned = Vec::new();
    for t in 0..p.bundle.tasks() {
        let theta = p.bundle.expert_params(t)?;
        finetuned.push(evaluate(&theta, &p.bundle.heads, &p.suite)?[t]);
    }
    let finetuned = mean_accuracy(&finetuned);

    let (theta_zd, _) = zero_shot_distill(&p.bundle, &p.aux, &cfg.ri)?;
    let zero_shot_distill_acc = mean_accuracy(&evaluate(&theta_zd, &p.bundle.heads, &p.suite)?);

    let outcome = resolve_interference(&p.bundle, &p.aux, &cfg.ri)?;
    let adapted = p.bundle.with_vectors(outcome.vectors)?;

    let mut rows = Vec::new();
    let mut table = Table::new("distill", &["method", "baseline", "distill_aux", "ri"]);
    for &method in &cfg.distill_methods {
        let mcfg = cfg.merge_config(method);
        let base_out = merge(&p.bundle, &mcfg)?;
        let (_, base_acc) = merged_accuracy(&p.bundle, &p.suite, &base_out.vector)?;
        let (tau_d, _) = merge_distill_aux(&p.bundle, &base_out.vector, &p.aux, &cfg.ri)?;
        let (_, d_acc) = merged_accuracy(&p.bundle, &p.suite, &tau_d)?;
        let ri_out = merge(&adapted, &mcfg)?;
        let (_, ri_acc) = merged_accuracy(&p.bundle, &p.suite, &ri_out.vector)?;
        let row = DistillRow {
            method,
            baseline: mean_accuracy(&base_acc),
            distill_aux: mean_accuracy(&d_acc),
            ri: mean_accuracy(&ri_acc),
        };
        table.push_row(vec![
            method.to_string(),
            fmt_acc(row.baseline),
            fmt_acc(row.distill_aux),
            fmt_acc(row.ri),
        ]);
        rows.push(row);
    }

    let mut reference = Table::new("distill_reference", &["row", "mean_accuracy"]);
    reference.push_row(vec!["zero_shot".into(), fmt_acc(zero_shot)]);
    reference.push_row(vec![
        "zero_shot_distill".into(),
        fmt_acc(zero_shot_distill_acc),
    ]);
    reference.push_row(vec!["finetuned".into(), fmt_acc(finetuned)]);

    let mut report = Report::new("distill_baselines");
    report.push_time("generated", unix_now());
    report.push_time("wall_secs", start.elapsed().as_secs_f64());
    cfg.snapshot_meta(&mut report, &p.aux.id());
    report.push_table(reference);
    report.push_table(table);

    Ok((
        DistillResult {
            zero_shot,
            zero_shot_distill: zero_shot_distill_acc,
            finetuned,
            rows,
        },
        report,
    ))
}

// ── distance_metrics ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DistanceMetricsResult {
    pub methods: Vec<MergeMethod>,
    pub baseline: Vec<f64>,
    pub rows: Vec<(DistanceMetric, Vec<f64>)>,
}

/// Adaptation quality under each distance metric.
pub fn distance_metrics(cfg: &HarnessConfig) -> Result<(DistanceMetricsResult, Report)> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let methods = vec![MergeMethod::TsvM, MergeMethod::IsoC, MergeMethod::IsoCts];

    let mut columns = vec!["row".to_string()];
    columns.extend(methods.iter().map(|m| m.name().to_string()));
    columns.push("mean".into());
    let mut table = Table::new("distance_metrics", &[]);
    table.columns = columns;

    let accs_for = |bundle: &ExpertBundle<f64>| -> Result<Vec<f64>> {
        methods
            .iter()
            .map(|&m| {
                let out = merge(bundle, &cfg.merge_config(m))?;
                let (_, acc) = merged_accuracy(&p.bundle, &p.suite, &out.vector)?;
                Ok(mean_accuracy(&acc))
            })
            .collect()
    };

    let baseline = accs_for(&p.bundle)?;
    let mut row = vec!["no_ri".to_string()];
    row.extend(baseline.iter().map(|&a| fmt_acc(a)));
    row.push(fmt_acc(mean_accuracy(&baseline)));
    table.push_row(row);

    let mut rows = Vec::new();
    for metric in DistanceMetric::ALL {
        let mut ricfg = cfg.ri.clone();
        ricfg.metric = metric;
        let outcome = resolve_interference(&p.bundle, &p.aux, &ricfg)?;
        let adapted = p.bundle.with_vectors(outcome.vectors)?;
        let accs = accs_for(&adapted)?;
        let mut row = vec![format!("ri_{metric}")];
        row.extend(accs.iter().map(|&a| fmt_acc(a)));
        row.push(fmt_acc(mean_accuracy(&accs)));
        table.push_row(row);
        rows.push((metric, accs));
    }

    let mut report = Report::new("distance_metrics");
    report.push_time("generated", unix_now());
    report.push_time("wall_secs", start.elapsed().as_secs_f64());
    cfg.snapshot_meta(&mut report, &p.aux.id());
    report.push_table(table);
    Ok((
        DistanceMetricsResult {
            methods,
            baseline,
            rows,
        },
        report,
    ))
}

// ── aux_sources ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AuxSourcesResult {
    pub baseline_ta: f64,
    pub baseline_tsvm: f64,
    pub rows: Vec<(AuxKind, bool, f64, f64)>,
}

/// Adaptation driven by each auxiliary-data source.
pub fn aux_sources(cfg: &HarnessConfig) -> Result<(AuxSourcesResult, Report)> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let ta = cfg.merge_config(MergeMethod::TaskArithmetic);
    let tsvm = cfg.merge_config(MergeMethod::TsvM);

    let acc_pair = |bundle: &ExpertBundle<f64>| -> Result<(f64, f64)> {
        let a = merge(bundle, &ta)?;
        let (_, aa) = merged_accuracy(&p.bundle, &p.suite, &a.vector)?;
        let b = merge(bundle, &tsvm)?;
        let (_, bb) = merged_accuracy(&p.bundle, &p.suite, &b.vector)?;
        Ok((mean_accuracy(&aa), mean_accuracy(&bb)))
    };

    let (baseline_ta, baseline_tsvm) = acc_pair(&p.bundle)?;
    let mut table = Table::new(
        "aux_sources",
        &["source", "privileged", "acc_ta_ri", "acc_tsvm_ri"],
    );
    table.push_row(vec![
        "none".into(),
        "no".into(),
        fmt_acc(baseline_ta),
        fmt_acc(baseline_tsvm),
    ]);

    let mut rows = Vec::new();
    for kind in AuxKind::ALL {
        let aux_cfg = AuxConfig {
            kind,
            ..cfg.aux.clone()
        };
        let source = AuxSource::new(aux_cfg, cfg.suite.input_dim, Some(&p.suite))?;
        let outcome = resolve_interference(&p.bundle, &source, &cfg.ri)?;
        let adapted = p.bundle.with_vectors(outcome.vectors)?;
        let (a, b) = acc_pair(&adapted)?;
        table.push_row(vec![
            kind.to_string(),
            if source.privileged() { "yes" } else { "no" }.into(),
            fmt_acc(a),
            fmt_acc(b),
        ]);
        rows.push((kind, source.privileged(), a, b));
    }

    let mut report = Report::new("aux_sources");
    report.push_time("generated", unix_now());
    report.push_time("wall_secs", start.elapsed().as_secs_f64());
    cfg.snapshot_meta(&mut report, &p.aux.id());
    report.push_table(table);
    Ok((
        AuxSourcesResult {
            baseline_ta,
            baseline_tsvm,
            rows,
        },
        report,
    ))
}

// ── hp_sensitivity ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct HpRow {
    pub method: MergeMethod,
    pub lambdas: Vec<f64>,
    pub base: Vec<f64>,
    pub ri: Vec<f64>,
}

impl HpRow {
    pub fn base_range(&self) -> f64 {
        range_of(&self.base)
    }

    pub fn ri_range(&self) -> f64 {
        range_of(&self.ri)
    }
}

fn range_of(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::MIN, f64::max);
    let min = v.iter().copied().fold(f64::MAX, f64::min);
    max - min
}

#[derive(Clone, Debug)]
pub struct HpSensitivityResult {
    pub rows: Vec<HpRow>,
}

/// Accuracy across the scaling-coefficient grids with and without
/// adaptation; 30 intermediate grid points per method.
pub fn hp_sensitivity(cfg: &HarnessConfig) -> Result<(HpSensitivityResult, Report)> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let outcome = resolve_interference(&p.bundle, &p.aux, &cfg.ri)?;
    let adapted = p.bundle.with_vectors(outcome.vectors)?;

    let grids: [(MergeMethod, f64); 2] =
        [(MergeMethod::TaskArithmetic, 1.0), (MergeMethod::Ties, 3.0)];
    let mut rows = Vec::new();
    let mut table = Table::new(
        "hp_sensitivity",
        &["method", "lambda", "acc_base", "acc_ri"],
    );
    for (method, hi) in grids {
        let lambdas: Vec<f64> = (1..=30).map(|i| hi * i as f64 / 31.0).collect();
        let mut base = Vec::with_capacity(30);
        let mut ri = Vec::with_capacity(30);
        for &lam in &lambdas {
            let mut mcfg = cfg.merge_config(method);
            mcfg.lambda = Some(lam);
            let b = merge(&p.bundle, &mcfg)?;
            let (_, ab) = merged_accuracy(&p.bundle, &p.suite, &b.vector)?;
            let r = merge(&adapted, &mcfg)?;
            let (_, ar) = merged_accuracy(&p.bundle, &p.suite, &r.vector)?;
            table.push_row(vec![
                method.to_string(),
                fmt_val(lam),
                fmt_acc(mean_accuracy(&ab)),
                fmt_acc(mean_accuracy(&ar)),
            ]);
            base.push(mean_accuracy(&ab));
            ri.push(mean_accuracy(&ar));
        }
        rows.push(HpRow {
            method,
            lambdas,
            base,
            ri,
        });
    }

    let mut ranges = Table::new("hp_ranges", &["method", "range_base", "range_ri"]);
    for row in &rows {
        ranges.push_row(vec![
            row.method.to_string(),
            fmt_acc(row.base_range()),
            fmt_acc(row.ri_range()),
        ]);
    }

    let mut report = Report::new("hp_sensitivity");
    report.push_time("generated", unix_now());
    report.push_time("wall_secs", start.elapsed().as_secs_f64());
    cfg.snapshot_meta(&mut report, &p.aux.id());
    report.push_table(table);
    report.push_table(ranges);
    Ok((HpSensitivityResult { rows }, report))
}

// ── aux_size ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AuxSizeResult {
    pub fractions: Vec<f64>,
    pub methods: Vec<MergeMethod>,
    pub baseline: Vec<f64>,
    /// `rows[f][m]`: accuracy at fraction `f` for method `m`.
    pub rows: Vec<Vec<f64>>,
}

/// Adaptation with the auxiliary pool subsampled to fractions of the full
/// step budget.
pub fn aux_size(cfg: &HarnessConfig) -> Result<(AuxSizeResult, Report)> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let methods = vec![MergeMethod::IsoC, MergeMethod::IsoCts, MergeMethod::TsvM];
    let fractions = vec![1.0, 0.8, 0.6, 0.4, 0.2];
    let budget = cfg.ri.steps * cfg.ri.batch_size;

    let accs_for = |bundle: &ExpertBundle<f64>| -> Result<Vec<f64>> {
        methods
            .iter()
            .map(|&m| {
                let out = merge(bundle, &cfg.merge_config(m))?;
                let (_, acc) = merged_accuracy(&p.bundle, &p.suite, &out.vector)?;
                Ok(mean_accuracy(&acc))
            })
            .collect()
    };

    let mut columns = vec!["fraction".to_string(), "pool".to_string()];
    columns.extend(methods.iter().map(|m| m.name().to_string()));
    let mut table = Table::new("aux_size", &[]);
    table.columns = columns;

    let baseline = accs_for(&p.bundle)?;
    {
        let mut row = vec!["no_ri".to_string(), "0".to_string()];
        row.extend(baseline.iter().map(|&a| fmt_acc(a)));
        table.push_row(row);
    }

    let mut rows = Vec::new();
    for &frac in &fractions {
        let pool = ((budget as f64 * frac).ceil() as usize).max(1);
        let aux_cfg = AuxConfig {
            pool: Some(pool),
            ..cfg.aux.clone()
        };
        let source = AuxSource::new(aux_cfg, cfg.suite.input_dim, Some(&p.suite))?;
        let outcome = resolve_interference(&p.bundle, &source, &cfg.ri)?;
        let adapted = p.bundle.with_vectors(outcome.vectors)?;
        let accs = accs_for(&adapted)?;
        let mut row = vec![fmt_val(frac), pool.to_string()];
        row.extend(accs.iter().map(|&a| fmt_acc(a)));
        table.push_row(row);
        rows.push(accs);
    }

    let mut report = Report::new("aux_size");
    report.push_time("generated", unix_now());
    report.push_time("wall_secs", start.elapsed().as_secs_f64());
    cfg.snapshot_meta(&mut report, &p.aux.id());
    report.push_table(table);
    Ok((
        AuxSizeResult {
            fractions,
            methods,
            baseline,
            rows,
        },
        report,
    ))
}

// ── avg_scale_sweep ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AvgScaleResult {
    pub lambdas: Vec<f64>,
    pub acc: Vec<f64>,
    pub zero_shot: f64,
}

/// Scaling sweep over the summed adapted vectors: 13 coefficients from 0;
/// the zero coefficient is exactly the zero-shot model.
pub fn avg_scale_sweep(cfg: &HarnessConfig) -> Result<(AvgScaleResult, Report)> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let outcome = resolve_interference(&p.bundle, &p.aux, &cfg.ri)?;
    let adapted = p.bundle.with_vectors(outcome.vectors)?;

    let zero_shot = mean_accuracy(&evaluate(&p.bundle.theta0, &p.bundle.heads, &p.suite)?);
    let lambdas: Vec<f64> = (0..13).map(|i| i as f64 * 0.1).collect();
    let mut acc = Vec::with_capacity(13);
    let mut table = Table::new("avg_scale_sweep", &["lambda", "acc"]);
    for &lam in &lambdas {
        let a = if lam == 0.0 {
            // Scaling by zero reproduces the shared initialization exactly.
            zero_shot
        } else {
            let mut mcfg = cfg.merge_config(MergeMethod::TaskArithmetic);
            mcfg.lambda = Some(lam);
            let out = merge(&adapted, &mcfg)?;
            let (_, a) = merged_accuracy(&p.bundle, &p.suite, &out.vector)?;
            mean_accuracy(&a)
        };
        table.push_row(vec![fmt_val(lam), fmt_acc(a)]);
        acc.push(a);
    }

    let mut report = Report::new("avg_scale_sweep");
    report.push_time("generated", unix_now());
    report.push_time("wall_secs", start.elapsed().as_secs_f64());
    cfg.snapshot_meta(&mut report, &p.aux.id());
    let mut zs = Table::new("reference", &["row", "mean_accuracy"]);
    zs.push_row(vec!["zero_shot".into(), fmt_acc(zero_shot)]);
    report.push_table(zs);
    report.push_table(table);
    Ok((
        AvgScaleResult {
            lambdas,
            acc,
            zero_shot,
        },
        report,
    ))
}

// ── dispatch ────────────────────────────────────────────────────────

fn unix_now() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// Runs a named experiment and writes its report under
/// `out_dir/<name>/<tag>/`, returning the run directory. `merge_grid` also
/// saves the trained and adapted bundles as checkpoints.
pub fn run_experiment(
    name: &str,
    cfg: &HarnessConfig,
    out_dir: &Path,
    tag: Option<&str>,
) -> Result<PathBuf> {
    if !EXPERIMENTS.contains(&name) {
        return Err(Error::Config(format!(
            "unknown experiment '{name}' (valid: {})",
            EXPERIMENTS.join(", ")
        )));
    }
    let dir = out_dir
        .join(name)
        .join(tag.map(|t| t.to_string()).unwrap_or_else(unix_now));
    std::fs::create_dir_all(&dir)?;

    let report = match name {
        "merge_grid" => {
            let (result, report) = merge_grid(cfg)?;
            let ckpt_dir = dir.join("checkpoints");
            checkpoint::save(
                &ckpt_dir.join("bundle.mfckpt"),
                &Checkpoint::Bundle(result.bundle.clone()),
            )?;
            checkpoint::save(
                &ckpt_dir.join("adapted.mfckpt"),
                &Checkpoint::Bundle(result.adapted_bundle.clone()),
            )?;
            report
        }
        "distance_metrics" => distance_metrics(cfg)?.1,
        "distill_baselines" => distill_baselines(cfg)?.1,
        "aux_sources" => aux_sources(cfg)?.1,
        "hp_sensitivity" => hp_sensitivity(cfg)?.1,
        "aux_size" => aux_size(cfg)?.1,
        "avg_scale_sweep" => avg_scale_sweep(cfg)?.1,
        "trajectory" => trajectory(cfg)?.1,
        _ => unreachable!("validated above"),
    };
    report.write(&dir)?;
    Ok(dir)
}
