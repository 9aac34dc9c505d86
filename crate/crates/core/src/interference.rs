//! Cross-task interference: the summed expected distance between the merged
//! model's and each expert's head outputs on that expert's own evaluation
//! data. Zero interference means the merged model reproduces every expert
//! exactly where it matters.

use crate::error::{Error, Result};
use crate::metric::{dist, DistanceMetric};
use crate::model::{apply, model_logits, ExpertBundle, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InterferenceReport<T: Scalar = f64> {
    pub metric: DistanceMetric,
    pub eval_id: String,
    pub per_task: Vec<T>,
    pub total: T,
    pub samples: Vec<usize>,
}

/// Per-task deviation of `theta_m` from each expert, measured through that
/// task's head on that task's evaluation batch; the total sums the parts.
pub fn xi<T: Scalar>(
    bundle: &ExpertBundle<T>,
    theta_m: &ParamSet<T>,
    eval_inputs: &[Tensor<T>],
    metric: DistanceMetric,
    eval_id: &str,
) -> Result<InterferenceReport<T>> {
    if eval_inputs.len() != bundle.tasks() {
        return Err(Error::Config(format!(
            "{} evaluation batches for {} tasks",
            eval_inputs.len(),
            bundle.tasks()
        )));
    }
    let mut per_task = Vec::with_capacity(bundle.tasks());
    let mut samples = Vec::with_capacity(bundle.tasks());
    for (i, x) in eval_inputs.iter().enumerate() {
        let theta_i = apply(&bundle.theta0, &bundle.vectors[i], T::one())?;
        let teacher = model_logits(&theta_i, &bundle.heads[i], x)?;
        let student = model_logits(theta_m, &bundle.heads[i], x)?;
        per_task.push(dist(metric, &teacher, &student)?);
        samples.push(x.shape()[0]);
    }
    let total = per_task.iter().fold(T::zero(), |acc, &v| acc + v);
    Ok(InterferenceReport {
        metric,
        eval_id: eval_id.to_string(),
        per_task,
        total,
        samples,
    })
}
