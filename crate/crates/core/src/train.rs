//! Expert training on a synthetic suite: a short coarse pretraining phase
//! produces the shared initialization θ₀ (binary classification of a random
//! class partition through a throwaway head), then each expert fine-tunes
//! backbone plus its own head on its task with cross-entropy.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::autodiff::{sgd_step, Graph, OptimMode, OptimState};
use crate::error::{Error, Result};
use crate::metric::DistanceMetric;
use crate::model::{
    extract_task_vector, init_backbone, model_logits, ExpertBundle, ParamSet, TaskHead, EMBED_WIDTH,
};
use crate::rng::Prng;
use crate::suite::{TaskData, TaskSuite};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
    /// Every expert must reach this own-task eval accuracy; `None` disables
    /// the gate (used for degenerate settings like zero epochs).
    pub accuracy_gate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: 0.2,
            weight_decay: 0.0,
            pretrain_epochs: 5,
            pretrain_lr: 0.05,
            seed: 7,
            accuracy_gate: Some(0.9),
        }
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor<f64> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], data)
}

/// Cross-entropy training of backbone+head parameters on one dataset.
/// `params` holds the backbone tensors plus `head.w`/`head.b`.
#[allow(clippy::too_many_arguments)]
fn train_classifier(
    params: &mut BTreeMap<String, Tensor<f64>>,
    data: &TaskData,
    classes: usize,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    batch_size: usize,
    order_rng: &Prng,
) -> Result<()> {
    let rows = data.y.len();
    let mut opt = OptimState::new(lr, weight_decay, OptimMode::Plain);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..rows).collect();
        order_rng.derive("epoch", epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let x = data.x.select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.y[i]).collect();
            let targets = one_hot(&labels, classes);

            let mut g = Graph::new();
            let xn = g.constant(x);
            let mut ids = BTreeMap::new();
            for (name, t) in params.iter() {
                ids.insert(name.clone(), g.param(name, t.clone()));
            }
            let h1 = g.affine(xn, ids["backbone.l1.w"], ids["backbone.l1.b"]);
            let a1 = g.tanh(h1);
            let h2 = g.affine(a1, ids["backbone.l2.w"], ids["backbone.l2.b"]);
            let emb = g.tanh(h2);
            let logits = g.affine(emb, ids["head.w"], ids["head.b"]);
            let loss = g.dist_from_probs(DistanceMetric::CrossEntropy, &targets, logits);
            g.forward(&BTreeMap::new())?;
            let v = g.value(loss)?.at(0);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            sgd_step(params, &grads, &mut opt)?;
        }
    }
    Ok(())
}

/// Coarse pretraining: classify a random binary partition of all suite
/// classes, pooled across tasks, through a throwaway two-way head.
fn pretrain_theta0(suite: &TaskSuite, cfg: &TrainConfig) -> Result<ParamSet<f64>> {
    let root = Prng::seed(cfg.seed);
    let theta = init_backbone::<f64>(suite.spec.input_dim, &root.derive("init", 0));
    if cfg.pretrain_epochs == 0 {
        return Ok(theta);
    }

    let mut bit = vec![0usize; suite.spec.classes];
    let mut ids: Vec<usize> = (0..suite.spec.classes).collect();
    root.derive("pretrain-partition", 0).shuffle(&mut ids);
    for &c in ids.iter().take(suite.spec.classes / 2) {
        bit[c] = 1;
    }

    let parts: Vec<&Tensor<f64>> = suite.train.iter().map(|d| &d.x).collect();
    let x = Tensor::vconcat(&parts)?;
    let mut y = Vec::with_capacity(x.shape()[0]);
    for (t, data) in suite.train.iter().enumerate() {
        for &pos in &data.y {
            y.push(bit[suite.task_classes[t][pos]]);
        }
    }
    let pooled = TaskData { x, y };

    let mut params = theta.tensors().clone();
    let mut hrng = root.derive("pretrain-head", 0);
    params.insert(
        "head.w".into(),
        hrng.gaussian::<f64>(&[EMBED_WIDTH, 2])
            .scale(1.0 / (EMBED_WIDTH as f64).sqrt()),
    );
    params.insert("head.b".into(), Tensor::zeros(vec![2]));
    train_classifier(
        &mut params,
        &pooled,
        2,
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        cfg.weight_decay,
        cfg.batch_size,
        &root.derive("pretrain-order", 0),
    )?;
    params.remove("head.w");
    params.remove("head.b");
    Ok(ParamSet::from_map(params))
}

/// Trains one expert per task from the shared initialization and returns
/// the bundle of θ₀, task vectors and heads.
pub fn train_experts(suite: &TaskSuite, cfg: &TrainConfig) -> Result<ExpertBundle<f64>> {
    let root = Prng::seed(cfg.seed);
    let theta0 = pretrain_theta0(suite, cfg)?;

    type ExpertOut = (usize, ParamSet<f64>, TaskHead<f64>);
    let results: Vec<Result<ExpertOut>> = (0..suite.spec.tasks)
        .into_par_iter()
        .map(|task| {
            let classes = suite.classes_of_task(task);
            let mut params = theta0.tensors().clone();
            let mut hrng = root.derive("head", task as u64);
            params.insert(
                "head.w".into(),
                hrng.gaussian::<f64>(&[EMBED_WIDTH, classes])
                    .scale(1.0 / (EMBED_WIDTH as f64).sqrt()),
            );
            params.insert("head.b".into(), Tensor::zeros(vec![classes]));
            train_classifier(
                &mut params,
                &suite.train[task],
                classes,
                cfg.epochs,
                cfg.lr,
                cfg.weight_decay,
                cfg.batch_size,
                &root.derive("expert-order", task as u64),
            )?;
            let head = TaskHead::new(
                task,
                params.remove("head.w").expect("inserted above"),
                params.remove("head.b").expect("inserted above"),
            )?;
            Ok((task, ParamSet::from_map(params), head))
        })
        .collect();

    let mut vectors = Vec::with_capacity(suite.spec.tasks);
    let mut heads = Vec::with_capacity(suite.spec.tasks);
    for r in results {
        let (_, theta_i, head) = r?;
        vectors.push(extract_task_vector(&theta_i, &theta0)?);
        heads.push(head);
    }
    let bundle = ExpertBundle::new(theta0, vectors, heads, suite.id.clone())?;

    if let Some(gate) = cfg.accuracy_gate {
        let mut failing = Vec::new();
        for task in 0..bundle.tasks() {
            let theta_i = bundle.expert_params(task)?;
            let acc = task_accuracy(&theta_i, &bundle.heads[task], &suite.eval[task])?;
            if acc < gate {
                failing.push(format!("task {task}: {acc:.3}"));
            }
        }
        if !failing.is_empty() {
            return Err(Error::Training(format!(
                "experts below the {gate} accuracy gate ({})",
                failing.join(", ")
            )));
        }
    }
    Ok(bundle)
}

fn task_accuracy(theta: &ParamSet<f64>, head: &TaskHead<f64>, data: &TaskData) -> Result<f64> {
    let logits = model_logits(theta, head, &data.x)?;
    let (rows, cols) = logits.dims2()?;
    let mut correct = 0usize;
    for i in 0..rows {
        let mut arg = 0;
        let mut best = logits.get2(i, 0);
        for c in 1..cols {
            let v = logits.get2(i, c);
            if v > best {
                best = v;
                arg = c;
            }
        }
        if arg == data.y[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / rows as f64)
}

/// Per-task accuracy of `theta` paired with each task's head on the
/// evaluation split.
pub fn evaluate(
    theta: &ParamSet<f64>,
    heads: &[TaskHead<f64>],
    suite: &TaskSuite,
) -> Result<Vec<f64>> {
    if heads.len() != suite.spec.tasks {
        return Err(Error::Config(format!(
            "{} heads for {} tasks",
            heads.len(),
            suite.spec.tasks
        )));
    }
    heads
        .iter()
        .enumerate()
        .map(|(t, head)| task_accuracy(theta, head, &suite.eval[t]))
        .collect()
}

pub fn mean_accuracy(acc: &[f64]) -> f64 {
    acc.iter().sum::<f64>() / acc.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suite::{gen_suite, SuiteSpec};

    fn tiny_spec() -> SuiteSpec {
        SuiteSpec {
            input_dim: 8,
            classes: 6,
            tasks: 2,
            sigma: 0.4,
            train_per_class: 40,
            eval_per_class: 20,
            seed: 11,
        }
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            pretrain_epochs: 2,
            seed: 11,
            accuracy_gate: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_gives_zero_vectors_and_zero_shot_accuracy() {
        let suite = gen_suite(&tiny_spec()).unwrap();
        let bundle = train_experts(&suite, &quick_cfg(0)).unwrap();
        for v in &bundle.vectors {
            assert_eq!(v.delta().frob_norm(), 0.0);
        }
        // Expert accuracy equals zero-shot accuracy when θ_i == θ₀.
        let zero_shot = evaluate(&bundle.theta0, &bundle.heads, &suite).unwrap();
        for t in 0..bundle.tasks() {
            let theta_i = bundle.expert_params(t).unwrap();
            let acc = evaluate(&theta_i, &bundle.heads, &suite).unwrap();
            assert_eq!(acc, zero_shot);
        }
    }

    #[test]
    fn training_reaches_the_gate_on_a_small_suite() {
        let suite = gen_suite(&tiny_spec()).unwrap();
        let mut cfg = quick_cfg(15);
        cfg.accuracy_gate = Some(0.9);
        let bundle = train_experts(&suite, &cfg).unwrap();
        for t in 0..bundle.tasks() {
            let theta_i = bundle.expert_params(t).unwrap();
            let acc = evaluate(&theta_i, &bundle.heads, &suite).unwrap();
            assert!(acc[t] >= 0.9, "task {t}: {}", acc[t]);
        }
        // Fine-tuning moved the backbone.
        for v in &bundle.vectors {
            assert!(v.delta().frob_norm() > 0.0);
        }
    }

    #[test]
    fn gate_failure_is_a_training_error() {
        let suite = gen_suite(&tiny_spec()).unwrap();
        let mut cfg = quick_cfg(0);
        cfg.accuracy_gate = Some(0.9);
        match train_experts(&suite, &cfg) {
            Err(Error::Training(msg)) => assert!(msg.contains("task"), "{msg}"),
            other => panic!("expected a training failure, got {other:?}"),
        }
    }

    #[test]
    fn different_seeds_different_fingerprints() {
        let suite = gen_suite(&tiny_spec()).unwrap();
        let a = train_experts(&suite, &quick_cfg(1)).unwrap();
        let mut cfg = quick_cfg(1);
        cfg.seed = 99;
        let b = train_experts(&suite, &cfg).unwrap();
        assert_ne!(a.theta0.fingerprint(), b.theta0.fingerprint());
    }

    #[test]
    fn training_is_deterministic() {
        let suite = gen_suite(&tiny_spec()).unwrap();
        let a = train_experts(&suite, &quick_cfg(3)).unwrap();
        let b = train_experts(&suite, &quick_cfg(3)).unwrap();
        assert_eq!(a.theta0.fingerprint(), b.theta0.fingerprint());
        for (va, vb) in a.vectors.iter().zip(&b.vectors) {
            assert_eq!(va.delta(), vb.delta());
        }
    }

    #[test]
    fn random_head_is_at_chance_level() {
        // Balanced 5-class tasks whose noise swamps the class structure:
        // random untrained logits sit at chance, 0.2 ± 0.05.
        let spec = SuiteSpec {
            input_dim: 8,
            classes: 10,
            tasks: 2,
            sigma: 50.0,
            train_per_class: 10,
            eval_per_class: 200,
            seed: 5,
        };
        let suite = gen_suite(&spec).unwrap();
        let mut cfg = quick_cfg(0);
        cfg.pretrain_epochs = 0;
        let bundle = train_experts(&suite, &cfg).unwrap();
        let acc = evaluate(&bundle.theta0, &bundle.heads, &suite).unwrap();
        for (t, a) in acc.iter().enumerate() {
            assert!((a - 0.2).abs() <= 0.05, "task {t}: {a}");
        }
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let suite = gen_suite(&tiny_spec()).unwrap();
        let bundle = train_experts(&suite, &quick_cfg(2)).unwrap();
        let acc = evaluate(&bundle.theta0, &bundle.heads, &suite).unwrap();

        let mut shuffled = suite.clone();
        let rows = shuffled.eval[0].y.len();
        let order: Vec<usize> = (0..rows).rev().collect();
        shuffled.eval[0] = TaskData {
            x: shuffled.eval[0].x.select_rows(&order).unwrap(),
            y: order.iter().map(|&i| shuffled.eval[0].y[i]).collect(),
        };
        let acc2 = evaluate(&bundle.theta0, &bundle.heads, &shuffled).unwrap();
        assert_eq!(acc, acc2);
    }
}
