//! Resolving interference: per-expert twin distillation on auxiliary data.
//!
//! Each expert's task vector is copied and adapted so that, on auxiliary
//! batches, the adapted model (1) keeps matching the original expert under
//! its own head (task preservation) and (2) matches the shared
//! initialization under every other head (interference reduction). The
//! combined objective is `L₁ + α/(N−1)·L₂`; teachers are evaluated outside
//! the graph, so only the adapted copy receives gradients.
//!
//! The same machinery drives the two distillation baselines: adapting an
//! already-merged vector toward all experts, and adapting the shared
//! initialization directly.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::{sgd_step, Graph, NodeId, OptimMode, OptimState};
use crate::error::{Error, Result};
use crate::metric::DistanceMetric;
use crate::model::{
    apply, backbone_forward, model_logits, ExpertBundle, ParamSet, TaskHead, TaskVector,
};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Supplies auxiliary input batches; implementations live in the harness.
pub trait BatchSource<T: Scalar>: Sync {
    fn batch(&self, rng: &mut Prng, batch_size: usize) -> Result<Tensor<T>>;
    fn id(&self) -> String;
    /// True when the source draws on actual task data.
    fn privileged(&self) -> bool {
        false
    }
}

/// The published learning rate, tuned for full-scale vision backbones. The
/// desk-scale default below keeps the same protocol (small fixed rate, fixed
/// step budget, decoupled decay) at a magnitude where the loss elbow lands
/// inside a 500-step budget on the desk suite's tiny networks.
pub const FULL_SCALE_LR: f64 = 1e-6;
pub const DESK_SCALE_LR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct RiConfig<T: Scalar = f64> {
    pub alpha: T,
    pub metric: DistanceMetric,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: T,
    pub weight_decay: T,
    pub optimizer: OptimMode,
    pub seed: u64,
    /// Stop once the 100-step moving average improves by less than 0.1%.
    pub early_stop: bool,
    /// Record adapted vectors every this many steps (plus start and end).
    pub snapshot_every: Option<usize>,
}

impl<T: Scalar> Default for RiConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            metric: DistanceMetric::Kl,
            steps: 2500,
            batch_size: 128,
            lr: T::of(DESK_SCALE_LR),
            weight_decay: T::of(1e-4),
            optimizer: OptimMode::Plain,
            seed: 0,
            early_stop: false,
            snapshot_every: None,
        }
    }
}

impl<T: Scalar> RiConfig<T> {
    fn validate(&self) -> Result<()> {
        if self.alpha < T::zero() {
            return Err(Error::Config("α must be ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.lr.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.weight_decay < T::zero() {
            return Err(Error::Config("weight decay must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Per-step loss records for one expert's adaptation.
#[derive(Clone, Debug)]
pub struct RiTrace<T: Scalar = f64> {
    pub expert: usize,
    /// Task-preservation loss per step.
    pub l1: Vec<T>,
    /// Interference-reduction loss per step, already divided by N−1.
    pub l2_norm: Vec<T>,
    /// Combined objective per step.
    pub l_ri: Vec<T>,
    pub steps_run: usize,
    /// Step at which a non-finite loss aborted this expert, if any.
    pub diverged: Option<usize>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct RiOutcome<T: Scalar = f64> {
    pub vectors: Vec<TaskVector<T>>,
    pub traces: Vec<RiTrace<T>>,
    /// `(step, adapted vectors of every expert at that step)`.
    pub snapshots: Vec<(usize, Vec<TaskVector<T>>)>,
}

#[derive(Clone, Debug)]
pub struct DistillTrace<T: Scalar = f64> {
    pub loss: Vec<T>,
    pub steps_run: usize,
    pub diverged: Option<usize>,
    pub wall_secs: f64,
}

// ── Loss assembly ───────────────────────────────────────────────────

/// Builds the student forward pass `heads(backbone(θ₀ + τ, x))` with τ as
/// the trainable parameters; returns per-head logit nodes.
fn student_graph<T: Scalar>(
    theta0: &ParamSet<T>,
    tau: &ParamSet<T>,
    heads: &[TaskHead<T>],
    x: &Tensor<T>,
) -> Result<(Graph<T>, Vec<NodeId>)> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let mut eff = BTreeMap::new();
    for (name, base) in theta0.iter() {
        let c = g.constant(base.clone());
        let p = g.param(name, tau.get(name)?.clone());
        eff.insert(name.clone(), g.add(c, p));
    }
    let h1 = g.affine(xn, eff["backbone.l1.w"], eff["backbone.l1.b"]);
    let a1 = g.tanh(h1);
    let h2 = g.affine(a1, eff["backbone.l2.w"], eff["backbone.l2.b"]);
    let emb = g.tanh(h2);
    let mut logits = Vec::with_capacity(heads.len());
    for head in heads {
        let w = g.constant(head.weight.clone());
        let b = g.constant(head.bias.clone());
        logits.push(g.affine(emb, w, b));
    }
    Ok((g, logits))
}

/// Combined adaptation loss for one expert on one batch:
/// `(L_RI, L₁, L₂)` where `L_RI = L₁ + α/(N−1)·L₂` (and `L₂ = 0` for N = 1).
/// Teachers are recomputed from frozen parameters, never differentiated.
#[allow(clippy::too_many_arguments)]
pub fn ri_loss<T: Scalar>(
    x: &Tensor<T>,
    theta0: &ParamSet<T>,
    tau_teacher: &TaskVector<T>,
    tau_student: &TaskVector<T>,
    heads: &[TaskHead<T>],
    own: usize,
    alpha: T,
    metric: DistanceMetric,
) -> Result<(T, T, T)> {
    if own >= heads.len() {
        return Err(Error::Config(format!(
            "expert {own} out of {} heads",
            heads.len()
        )));
    }
    let n = heads.len();
    let theta_teacher = apply(theta0, tau_teacher, T::one())?;
    let theta_student = apply(theta0, tau_student, T::one())?;
    let emb_student = backbone_forward(&theta_student, x)?;
    let emb_zero = backbone_forward(theta0, x)?;

    let own_teacher = model_logits(&theta_teacher, &heads[own], x)?;
    let own_student = heads[own].forward(&emb_student)?;
    let l1 = crate::metric::dist(metric, &own_teacher, &own_student)?;

    let mut l2 = T::zero();
    for (j, head) in heads.iter().enumerate() {
        if j == own {
            continue;
        }
        let teacher = head.forward(&emb_zero)?;
        let student = head.forward(&emb_student)?;
        l2 = l2 + crate::metric::dist(metric, &teacher, &student)?;
    }
    let l_ri = if n > 1 {
        l1 + alpha / T::of((n - 1) as f64) * l2
    } else {
        l1
    };
    Ok((l_ri, l1, l2))
}

// ── Adaptation loops ────────────────────────────────────────────────

struct ExpertRun<T: Scalar> {
    tau: ParamSet<T>,
    trace: RiTrace<T>,
    snapshots: Vec<(usize, ParamSet<T>)>,
}

fn snapshot_steps(steps: usize, every: Option<usize>) -> Vec<usize> {
    let mut out = vec![0];
    if let Some(k) = every {
        if k > 0 {
            let mut s = k;
            while s < steps {
                out.push(s);
                s += k;
            }
        }
    }
    if steps > 0 {
        out.push(steps);
    }
    out.dedup();
    out
}

fn adapt_expert<T: Scalar>(
    bundle: &ExpertBundle<T>,
    aux: &dyn BatchSource<T>,
    cfg: &RiConfig<T>,
    own: usize,
) -> Result<ExpertRun<T>> {
    let start = Instant::now();
    let n = bundle.tasks();
    let theta0 = &bundle.theta0;
    let theta_teacher = bundle.expert_params(own)?;
    let weight = if n > 1 {
        cfg.alpha / T::of((n - 1) as f64)
    } else {
        T::zero()
    };
    let schedule = snapshot_steps(cfg.steps, cfg.snapshot_every);
    let rng_root = Prng::seed(cfg.seed).derive("ri-expert", own as u64);

    let initial = bundle.vectors[own].delta().clone();
    let mut tau = initial.clone();
    let mut opt = OptimState::new(cfg.lr, cfg.weight_decay, cfg.optimizer);
    let mut trace = RiTrace {
        expert: own,
        l1: Vec::with_capacity(cfg.steps),
        l2_norm: Vec::with_capacity(cfg.steps),
        l_ri: Vec::with_capacity(cfg.steps),
        steps_run: 0,
        diverged: None,
        wall_secs: 0.0,
    };
    let mut snapshots = Vec::new();

    for step in 0..cfg.steps {
        if schedule.contains(&step) {
            snapshots.push((step, tau.clone()));
        }
        let mut srng = rng_root.derive("step", step as u64);
        let x = aux.batch(&mut srng, cfg.batch_size)?;

        let own_teacher = model_logits(&theta_teacher, &bundle.heads[own], &x)?;
        let emb_zero = backbone_forward(theta0, &x)?;

        let (mut g, logits) = student_graph(theta0, &tau, &bundle.heads, &x)?;
        let l1 = g.dist_from_logits(cfg.metric, &own_teacher, logits[own]);
        let mut l2_sum = None;
        for (j, head) in bundle.heads.iter().enumerate() {
            if j == own {
                continue;
            }
            let teacher = head.forward(&emb_zero)?;
            let d = g.dist_from_logits(cfg.metric, &teacher, logits[j]);
            l2_sum = Some(match l2_sum {
                None => d,
                Some(prev) => g.add(prev, d),
            });
        }
        let loss = match l2_sum {
            Some(l2) => {
                let scaled = g.scale(l2, weight);
                g.add(l1, scaled)
            }
            None => l1,
        };
        g.forward(&BTreeMap::new())?;

        let l1_v = g.value(l1)?.at(0);
        let l2_v = match l2_sum {
            Some(id) => g.value(id)?.at(0),
            None => T::zero(),
        };
        let lri_v = g.value(loss)?.at(0);
        if !lri_v.is_finite() || !l1_v.is_finite() || !l2_v.is_finite() {
            trace.diverged = Some(step);
            tau = initial;
            break;
        }
        let l2n = if n > 1 {
            l2_v / T::of((n - 1) as f64)
        } else {
            T::zero()
        };
        trace.l1.push(l1_v);
        trace.l2_norm.push(l2n);
        trace.l_ri.push(lri_v);
        trace.steps_run = step + 1;

        let grads = g.backward(loss)?;
        sgd_step(tau.tensors_mut(), &grads, &mut opt)?;

        if cfg.early_stop && (step + 1) >= 200 && (step + 1) % 100 == 0 {
            let h = &trace.l_ri;
            let cur: T = mean(&h[h.len() - 100..]);
            let prev: T = mean(&h[h.len() - 200..h.len() - 100]);
            if prev > T::zero() && (prev - cur) / prev < T::of(1e-3) {
                break;
            }
        }
    }
    // Fill the remaining scheduled snapshots with the final state so every
    // expert reports the same step grid even after an early exit.
    for &s in &schedule {
        if !snapshots.iter().any(|(step, _)| *step == s) && s >= trace.steps_run {
            snapshots.push((s, tau.clone()));
        }
    }
    snapshots.sort_by_key(|(s, _)| *s);
    trace.wall_secs = start.elapsed().as_secs_f64();
    Ok(ExpertRun {
        tau,
        trace,
        snapshots,
    })
}

fn mean<T: Scalar>(vals: &[T]) -> T {
    vals.iter().fold(T::zero(), |a, &v| a + v) / T::of(vals.len() as f64)
}

/// Adapts every expert's task vector independently. Experts run on derived
/// PRNG streams, so the result is bit-identical regardless of how many
/// workers execute them.
pub fn resolve_interference<T: Scalar>(
    bundle: &ExpertBundle<T>,
    aux: &dyn BatchSource<T>,
    cfg: &RiConfig<T>,
) -> Result<RiOutcome<T>> {
    cfg.validate()?;
    let runs: Vec<Result<ExpertRun<T>>> = (0..bundle.tasks())
        .into_par_iter()
        .map(|i| adapt_expert(bundle, aux, cfg, i))
        .collect();

    let origin = bundle.vectors[0].origin();
    let mut vectors = Vec::with_capacity(bundle.tasks());
    let mut traces = Vec::with_capacity(bundle.tasks());
    let mut per_expert_snaps = Vec::with_capacity(bundle.tasks());
    for run in runs {
        let run = run?;
        vectors.push(TaskVector::new(run.tau, origin));
        traces.push(run.trace);
        per_expert_snaps.push(run.snapshots);
    }

    let mut snapshots = Vec::new();
    if cfg.snapshot_every.is_some() || !per_expert_snaps[0].is_empty() {
        let grid: Vec<usize> = per_expert_snaps[0].iter().map(|(s, _)| *s).collect();
        for (gi, &step) in grid.iter().enumerate() {
            let at_step: Vec<TaskVector<T>> = per_expert_snaps
                .iter()
                .map(|snaps| TaskVector::new(snaps[gi].1.clone(), origin))
                .collect();
            snapshots.push((step, at_step));
        }
    }

    Ok(RiOutcome {
        vectors,
        traces,
        snapshots,
    })
}

/// Gradient descent on an already-merged vector toward all experts' outputs
/// on auxiliary batches; the multitask distillation baseline.
pub fn merge_distill_aux<T: Scalar>(
    bundle: &ExpertBundle<T>,
    tau_m: &TaskVector<T>,
    aux: &dyn BatchSource<T>,
    cfg: &RiConfig<T>,
) -> Result<(TaskVector<T>, DistillTrace<T>)> {
    cfg.validate()?;
    let start = Instant::now();
    let theta0 = &bundle.theta0;
    if tau_m.origin() != theta0.fingerprint() {
        return Err(Error::Provenance(
            "merged vector origin does not match the bundle's shared init".into(),
        ));
    }
    let teachers: Vec<ParamSet<T>> = (0..bundle.tasks())
        .map(|i| bundle.expert_params(i))
        .collect::<Result<_>>()?;
    let rng_root = Prng::seed(cfg.seed).derive("distill", 0);

    let init_tau = tau_m.delta().clone();
    let mut tau = init_tau.clone();
    let mut opt = OptimState::new(cfg.lr, cfg.weight_decay, cfg.optimizer);
    let mut trace = DistillTrace {
        loss: Vec::with_capacity(cfg.steps),
        steps_run: 0,
        diverged: None,
        wall_secs: 0.0,
    };

    for step in 0..cfg.steps {
        let mut srng = rng_root.derive("step", step as u64);
        let x = aux.batch(&mut srng, cfg.batch_size)?;

        let (mut g, logits) = student_graph(theta0, &tau, &bundle.heads, &x)?;
        let mut loss = None;
        for (i, head) in bundle.heads.iter().enumerate() {
            let teacher = model_logits(&teachers[i], head, &x)?;
            let d = g.dist_from_logits(cfg.metric, &teacher, logits[i]);
            loss = Some(match loss {
                None => d,
                Some(prev) => g.add(prev, d),
            });
        }
        let loss = loss.ok_or_else(|| Error::Config("empty bundle".into()))?;
        g.forward(&BTreeMap::new())?;
        let v = g.value(loss)?.at(0);
        if !v.is_finite() {
            trace.diverged = Some(step);
            tau = init_tau;
            break;
        }
        trace.loss.push(v);
        trace.steps_run = step + 1;
        let grads = g.backward(loss)?;
        sgd_step(tau.tensors_mut(), &grads, &mut opt)?;
    }
    trace.wall_secs = start.elapsed().as_secs_f64();
    Ok((TaskVector::new(tau, tau_m.origin()), trace))
}

/// Distills the experts into the shared initialization directly: identical
/// to [`merge_distill_aux`] started from the zero vector.
pub fn zero_shot_distill<T: Scalar>(
    bundle: &ExpertBundle<T>,
    aux: &dyn BatchSource<T>,
    cfg: &RiConfig<T>,
) -> Result<(ParamSet<T>, DistillTrace<T>)> {
    let zero = TaskVector::zeros_like(&bundle.theta0);
    let (adapted, trace) = merge_distill_aux(bundle, &zero, aux, cfg)?;
    Ok((apply(&bundle.theta0, &adapted, T::one())?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interference::xi;
    use crate::model::{extract_task_vector, init_backbone, TaskHead, EMBED_WIDTH};

    struct GaussianAux {
        dim: usize,
    }

    impl BatchSource<f64> for GaussianAux {
        fn batch(&self, rng: &mut Prng, b: usize) -> Result<Tensor<f64>> {
            Ok(rng.gaussian(&[b, self.dim]))
        }
        fn id(&self) -> String {
            "gaussian-test".into()
        }
    }

    fn toy_bundle(n: usize, dim: usize, drift: f64) -> ExpertBundle<f64> {
        let rng = Prng::seed(4040);
        let theta0: ParamSet<f64> = init_backbone(dim, &rng);
        let mut vectors = Vec::new();
        let mut heads = Vec::new();
        for i in 0..n {
            let mut r = rng.derive("expert", i as u64);
            let mut moved = ParamSet::new();
            for (name, t) in theta0.iter() {
                let noise: Tensor<f64> = r.gaussian(t.shape());
                moved.insert(name, t.add(&noise.scale(drift)).unwrap());
            }
            vectors.push(extract_task_vector(&moved, &theta0).unwrap());
            heads.push(TaskHead::new(i, r.gaussian(&[EMBED_WIDTH, 3]), r.gaussian(&[3])).unwrap());
        }
        ExpertBundle::new(theta0, vectors, heads, "toy".into()).unwrap()
    }

    fn small_cfg(steps: usize) -> RiConfig<f64> {
        RiConfig {
            steps,
            batch_size: 16,
            seed: 9,
            ..RiConfig::default()
        }
    }

    #[test]
    fn ri_loss_zero_when_student_equals_teacher_and_vector_is_inert() {
        // Zero task vector: student == teacher == θ₀ on every head.
        let bundle = toy_bundle(2, 5, 0.0);
        let mut rng = Prng::seed(1);
        let x: Tensor = rng.gaussian(&[6, 5]);
        let (lri, l1, l2) = ri_loss(
            &x,
            &bundle.theta0,
            &bundle.vectors[0],
            &bundle.vectors[0],
            &bundle.heads,
            0,
            1.0,
            DistanceMetric::Kl,
        )
        .unwrap();
        assert_eq!(l1, 0.0);
        assert_eq!(l2, 0.0);
        assert_eq!(lri, 0.0);
    }

    #[test]
    fn alpha_zero_reduces_to_task_preservation() {
        let bundle = toy_bundle(3, 5, 0.1);
        let mut rng = Prng::seed(2);
        let x: Tensor = rng.gaussian(&[6, 5]);
        let student = bundle.vectors[1].scale(0.5);
        let (lri, l1, _) = ri_loss(
            &x,
            &bundle.theta0,
            &bundle.vectors[1],
            &student,
            &bundle.heads,
            1,
            0.0,
            DistanceMetric::Kl,
        )
        .unwrap();
        assert_eq!(lri, l1);
    }

    #[test]
    fn ri_loss_matches_hand_assembled_pieces() {
        let bundle = toy_bundle(3, 5, 0.1);
        let mut rng = Prng::seed(3);
        let x: Tensor = rng.gaussian(&[6, 5]);
        let student = bundle.vectors[0].scale(0.7);
        let alpha = 0.8;
        let (lri, l1, l2) = ri_loss(
            &x,
            &bundle.theta0,
            &bundle.vectors[0],
            &student,
            &bundle.heads,
            0,
            alpha,
            DistanceMetric::Kl,
        )
        .unwrap();

        // Assemble from independent dist calls.
        let theta_t = bundle.expert_params(0).unwrap();
        let theta_s = apply(&bundle.theta0, &student, 1.0).unwrap();
        let d1 = crate::metric::dist(
            DistanceMetric::Kl,
            &model_logits(&theta_t, &bundle.heads[0], &x).unwrap(),
            &model_logits(&theta_s, &bundle.heads[0], &x).unwrap(),
        )
        .unwrap();
        let mut d_others = 0.0;
        for j in [1usize, 2] {
            d_others += crate::metric::dist(
                DistanceMetric::Kl,
                &model_logits(&bundle.theta0, &bundle.heads[j], &x).unwrap(),
                &model_logits(&theta_s, &bundle.heads[j], &x).unwrap(),
            )
            .unwrap();
        }
        assert!((l1 - d1).abs() <= 1e-12);
        assert!((l2 - d_others).abs() <= 1e-12);
        assert!((lri - (d1 + alpha / 2.0 * d_others)).abs() <= 1e-12);
    }

    #[test]
    fn alpha_linearity() {
        let bundle = toy_bundle(3, 5, 0.1);
        let mut rng = Prng::seed(4);
        let x: Tensor = rng.gaussian(&[6, 5]);
        let student = bundle.vectors[0].scale(0.6);
        let at = |alpha: f64| {
            ri_loss(
                &x,
                &bundle.theta0,
                &bundle.vectors[0],
                &student,
                &bundle.heads,
                0,
                alpha,
                DistanceMetric::Kl,
            )
            .unwrap()
            .0
        };
        let (l0, l1, l2) = (at(0.0), at(0.7), at(1.4));
        assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() <= 1e-10);
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let bundle = toy_bundle(2, 5, 0.1);
        let aux = GaussianAux { dim: 5 };
        let out = resolve_interference(&bundle, &aux, &small_cfg(0)).unwrap();
        for (a, b) in out.vectors.iter().zip(&bundle.vectors) {
            assert_eq!(a.delta(), b.delta());
        }
        assert_eq!(out.traces[0].steps_run, 0);
    }

    #[test]
    fn teachers_stay_frozen_and_loss_drops() {
        let bundle = toy_bundle(2, 5, 0.3);
        let before = bundle.clone();
        let aux = GaussianAux { dim: 5 };
        let out = resolve_interference(&bundle, &aux, &small_cfg(120)).unwrap();

        assert_eq!(bundle.theta0, before.theta0);
        for (a, b) in bundle.vectors.iter().zip(&before.vectors) {
            assert_eq!(a.delta(), b.delta());
        }
        for (a, b) in bundle.heads.iter().zip(&before.heads) {
            assert_eq!(a, b);
        }

        for t in &out.traces {
            assert_eq!(t.steps_run, 120);
            assert!(t.diverged.is_none());
            let first = mean(&t.l_ri[..20]);
            let last = mean(&t.l_ri[100..]);
            assert!(last < first, "expert {}: {first} → {last}", t.expert);
            assert!(t.l_ri.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn adaptation_is_scheduling_independent() {
        let bundle = toy_bundle(3, 5, 0.2);
        let aux = GaussianAux { dim: 5 };
        let cfg = small_cfg(40);
        let serial = crate::with_jobs(Some(1), || {
            resolve_interference(&bundle, &aux, &cfg).unwrap()
        });
        let parallel = crate::with_jobs(Some(4), || {
            resolve_interference(&bundle, &aux, &cfg).unwrap()
        });
        for (a, b) in serial.vectors.iter().zip(&parallel.vectors) {
            assert_eq!(a.delta(), b.delta());
        }
    }

    #[test]
    fn snapshots_cover_the_grid() {
        let bundle = toy_bundle(2, 5, 0.2);
        let aux = GaussianAux { dim: 5 };
        let mut cfg = small_cfg(30);
        cfg.snapshot_every = Some(10);
        let out = resolve_interference(&bundle, &aux, &cfg).unwrap();
        let steps: Vec<usize> = out.snapshots.iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![0, 10, 20, 30]);
        // Snapshot 0 is the original vectors.
        for (v, orig) in out.snapshots[0].1.iter().zip(&bundle.vectors) {
            assert_eq!(v.delta(), orig.delta());
        }
    }

    #[test]
    fn single_task_reduces_to_task_preservation() {
        let bundle = toy_bundle(1, 5, 0.2);
        let aux = GaussianAux { dim: 5 };
        let out = resolve_interference(&bundle, &aux, &small_cfg(50)).unwrap();
        let t = &out.traces[0];
        assert!(t.l2_norm.iter().all(|&v| v == 0.0));
        // Drift away from the teacher stays small; reported, not asserted
        // beyond a sanity bound.
        let drift = out.vectors[0]
            .delta()
            .sub(bundle.vectors[0].delta())
            .unwrap()
            .frob_norm();
        assert!(drift.is_finite());
    }

    #[test]
    fn distill_step_zero_equals_xi_on_the_same_batch() {
        let bundle = toy_bundle(3, 5, 0.25);
        let aux = GaussianAux { dim: 5 };
        let mut cfg = small_cfg(1);
        cfg.seed = 77;

        // The merged vector: plain mean of the task vectors.
        let mut sum = bundle.vectors[0].delta().clone();
        for v in &bundle.vectors[1..] {
            sum = sum.add(v.delta()).unwrap();
        }
        let tau_m = TaskVector::new(sum.scale(1.0 / 3.0), bundle.vectors[0].origin());

        let (_, trace) = merge_distill_aux(&bundle, &tau_m, &aux, &cfg).unwrap();

        // Recreate the exact first batch the loop saw.
        let mut srng = Prng::seed(77).derive("distill", 0).derive("step", 0);
        let x = aux.batch(&mut srng, cfg.batch_size).unwrap();
        let theta_m = apply(&bundle.theta0, &tau_m, 1.0).unwrap();
        let evals = vec![x.clone(), x.clone(), x];
        let rep = xi(&bundle, &theta_m, &evals, DistanceMetric::Kl, "aux").unwrap();
        assert!(
            (trace.loss[0] - rep.total).abs() <= 1e-12,
            "{} vs {}",
            trace.loss[0],
            rep.total
        );
    }

    #[test]
    fn distill_zero_steps_keeps_the_vector_and_loss_decreases_over_500() {
        let bundle = toy_bundle(1, 5, 0.3);
        let aux = GaussianAux { dim: 5 };
        let tau_m = bundle.vectors[0].scale(0.2);
        let (same, _) = merge_distill_aux(&bundle, &tau_m, &aux, &small_cfg(0)).unwrap();
        assert_eq!(same.delta(), tau_m.delta());

        let (_, trace) = merge_distill_aux(&bundle, &tau_m, &aux, &small_cfg(500)).unwrap();
        let first = mean(&trace.loss[..50]);
        let last = mean(&trace.loss[450..]);
        assert!(last < first, "{first} → {last}");
    }

    #[test]
    fn zero_shot_distill_matches_distill_from_zero_vector() {
        let bundle = toy_bundle(2, 5, 0.25);
        let aux = GaussianAux { dim: 5 };
        let cfg = small_cfg(25);
        let (theta_zd, trace_a) = zero_shot_distill(&bundle, &aux, &cfg).unwrap();
        let zero = TaskVector::zeros_like(&bundle.theta0);
        let (tau, trace_b) = merge_distill_aux(&bundle, &zero, &aux, &cfg).unwrap();
        let theta_direct = apply(&bundle.theta0, &tau, 1.0).unwrap();
        assert_eq!(theta_zd, theta_direct);
        assert_eq!(trace_a.loss, trace_b.loss);
    }

    #[test]
    fn ri_gradient_matches_finite_differences_on_a_tiny_net() {
        let bundle = toy_bundle(2, 3, 0.2);
        let mut rng = Prng::seed(12);
        let x: Tensor = rng.gaussian(&[4, 3]);
        let alpha = 1.0;

        // Analytic gradient via the graph.
        let tau = bundle.vectors[0].delta().clone();
        let own_teacher =
            model_logits(&bundle.expert_params(0).unwrap(), &bundle.heads[0], &x).unwrap();
        let emb_zero = backbone_forward(&bundle.theta0, &x).unwrap();
        let (mut g, logits) = student_graph(&bundle.theta0, &tau, &bundle.heads, &x).unwrap();
        let l1 = g.dist_from_logits(DistanceMetric::Kl, &own_teacher, logits[0]);
        let teacher1 = bundle.heads[1].forward(&emb_zero).unwrap();
        let d1 = g.dist_from_logits(DistanceMetric::Kl, &teacher1, logits[1]);
        let s = g.scale(d1, alpha);
        let loss = g.add(l1, s);
        g.forward(&BTreeMap::new()).unwrap();
        let grads = g.backward(loss).unwrap();

        // Finite differences through the pure ri_loss.
        let h = 1e-5;
        for name in ["backbone.l1.w", "backbone.l2.b"] {
            let base = tau.get(name).unwrap().clone();
            for k in [0usize, base.len() / 2, base.len() - 1] {
                let probe = |delta: f64| {
                    let mut d = tau.clone();
                    let mut vals = base.data().to_vec();
                    vals[k] += delta;
                    d.insert(name, Tensor::new(base.shape().to_vec(), vals).unwrap());
                    let tv = TaskVector::new(d, bundle.vectors[0].origin());
                    ri_loss(
                        &x,
                        &bundle.theta0,
                        &bundle.vectors[0],
                        &tv,
                        &bundle.heads,
                        0,
                        alpha,
                        DistanceMetric::Kl,
                    )
                    .unwrap()
                    .0
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let analytic = grads[name].at(k);
                let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    ((numeric - analytic) / denom).abs() <= 1e-5,
                    "{name}[{k}]: {analytic} vs {numeric}"
                );
            }
        }
    }
}
