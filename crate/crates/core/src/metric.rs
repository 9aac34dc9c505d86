//! Distance metrics between head outputs: KL divergence and cross-entropy
//! over softmaxed logits (reported in nats), mean squared error over raw
//! logits. One code path serves both the standalone `dist` operation and the
//! loss nodes in the autodiff graph, so their values agree bit for bit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMetric {
    Kl,
    CrossEntropy,
    Mse,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::Kl,
        DistanceMetric::CrossEntropy,
        DistanceMetric::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::Kl => "kl",
            DistanceMetric::CrossEntropy => "cross_entropy",
            DistanceMetric::Mse => "mse",
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(DistanceMetric::Kl),
            "cross_entropy" | "ce" => Ok(DistanceMetric::CrossEntropy),
            "mse" => Ok(DistanceMetric::Mse),
            other => Err(Error::Config(format!(
                "unknown distance metric '{other}' (valid: kl, cross_entropy, mse)"
            ))),
        }
    }
}

/// The frozen side of a distance loss: probabilities, log-probabilities and
/// raw logits of the teacher, precomputed once.
#[derive(Clone, Debug)]
pub struct TeacherSide<T: Scalar = f64> {
    pub probs: Tensor<T>,
    pub logp: Tensor<T>,
    pub raw: Tensor<T>,
}

impl<T: Scalar> TeacherSide<T> {
    pub fn from_logits(logits: &Tensor<T>) -> Self {
        let logp = logits.log_softmax();
        let probs = logp.map(|v| v.exp());
        Self {
            probs,
            logp,
            raw: logits.clone(),
        }
    }

    /// From an explicit distribution (e.g. one-hot labels); `0·ln 0 = 0`.
    pub fn from_probs(probs: &Tensor<T>) -> Self {
        let logp = probs.map(|p| if p > T::zero() { p.ln() } else { T::zero() });
        Self {
            probs: probs.clone(),
            logp,
            raw: probs.clone(),
        }
    }
}

/// Batch-mean distance between teacher and student logits.
pub fn dist<T: Scalar>(
    metric: DistanceMetric,
    teacher_logits: &Tensor<T>,
    student_logits: &Tensor<T>,
) -> Result<T> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::Shape(format!(
            "dist over {:?} vs {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    let teacher = TeacherSide::from_logits(teacher_logits);
    loss_forward(metric, &teacher, student_logits)
}

/// Forward value shared with the graph loss node.
pub(crate) fn loss_forward<T: Scalar>(
    metric: DistanceMetric,
    teacher: &TeacherSide<T>,
    student_logits: &Tensor<T>,
) -> Result<T> {
    if teacher.probs.shape() != student_logits.shape() {
        return Err(Error::Shape(format!(
            "dist over {:?} vs {:?}",
            teacher.probs.shape(),
            student_logits.shape()
        )));
    }
    let width = *student_logits.shape().last().expect("non-empty");
    let rows = student_logits.len() / width;
    let value = match metric {
        DistanceMetric::Mse => {
            let n = T::of(student_logits.len() as f64);
            teacher
                .raw
                .data()
                .iter()
                .zip(student_logits.data())
                .fold(T::zero(), |acc, (&t, &s)| acc + (t - s) * (t - s))
                / n
        }
        DistanceMetric::Kl | DistanceMetric::CrossEntropy => {
            let lq = student_logits.log_softmax();
            let mut total = T::zero();
            for r in 0..rows {
                let mut row = T::zero();
                for c in 0..width {
                    let k = r * width + c;
                    let p = teacher.probs.data()[k];
                    row = row
                        + match metric {
                            DistanceMetric::Kl => p * (teacher.logp.data()[k] - lq.data()[k]),
                            DistanceMetric::CrossEntropy => -(p * lq.data()[k]),
                            DistanceMetric::Mse => unreachable!(),
                        };
                }
                total = total + row;
            }
            total / T::of(rows as f64)
        }
    };
    Ok(value)
}

/// Gradient of `upstream · loss` with respect to the student logits.
pub(crate) fn loss_backward<T: Scalar>(
    metric: DistanceMetric,
    teacher: &TeacherSide<T>,
    student_logits: &Tensor<T>,
    upstream: T,
) -> Tensor<T> {
    let width = *student_logits.shape().last().expect("non-empty");
    let rows = student_logits.len() / width;
    match metric {
        DistanceMetric::Mse => {
            let n = T::of(student_logits.len() as f64);
            student_logits
                .zip_map(&teacher.raw, |s, t| T::of(2.0) * (s - t) / n * upstream)
                .expect("same shape")
        }
        DistanceMetric::Kl | DistanceMetric::CrossEntropy => {
            // For both, d/dz of the batch mean is (softmax(z) − p) / rows
            // (teacher distributions sum to one).
            let q = student_logits.log_softmax().map(|v| v.exp());
            let b = T::of(rows as f64);
            q.zip_map(&teacher.probs, |qv, pv| (qv - pv) / b * upstream)
                .expect("same shape")
        }
    }
}
