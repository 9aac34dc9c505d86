//! Merging operators over task vectors: averaging, task arithmetic, TIES,
//! KnOTS, TSV-M, Iso-C and Iso-CTS, with recommended default hyperparameters
//! resolved from the task count.
//!
//! Every method works layer by layer (per named tensor) and scales its
//! combined vector by a single coefficient λ. Per-coordinate sums over tasks
//! run through `stable_sum`, so the gradient-free methods are exactly
//! invariant to task order; the SVD-based ones are invariant up to the
//! decomposition's sign conventions.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ExpertBundle, ParamSet, TaskVector};
use crate::scalar::Scalar;
use crate::svd::{scale_columns, svd};
use crate::tensor::{stable_sum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMethod {
    Averaging,
    TaskArithmetic,
    Ties,
    Knots,
    TsvM,
    IsoC,
    IsoCts,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 7] = [
        MergeMethod::Averaging,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::Knots,
        MergeMethod::TsvM,
        MergeMethod::IsoC,
        MergeMethod::IsoCts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Averaging => "averaging",
            MergeMethod::TaskArithmetic => "ta",
            MergeMethod::Ties => "ties",
            MergeMethod::Knots => "knots",
            MergeMethod::TsvM => "tsvm",
            MergeMethod::IsoC => "iso_c",
            MergeMethod::IsoCts => "iso_cts",
        }
    }

    pub fn names() -> String {
        Self::ALL
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown merge method '{s}' (valid: {})",
                    Self::names()
                ))
            })
    }
}

// ── Default hyperparameters ─────────────────────────────────────────

const TA_LAMBDA: [(f64, f64); 4] = [(2.0, 0.42), (8.0, 0.30), (14.0, 0.22), (20.0, 0.15)];
const ISO_C_LAMBDA: [(f64, f64); 4] = [(2.0, 1.9), (8.0, 1.3), (14.0, 1.0), (20.0, 0.9)];
const ISO_CTS_LAMBDA: [(f64, f64); 4] = [(2.0, 2.1), (8.0, 1.5), (14.0, 1.2), (20.0, 1.1)];
pub const DEFAULT_TOPK: f64 = 0.2;
pub const DEFAULT_COMMON_FRACTION: f64 = 0.8;

/// Anchor values are returned verbatim; other task counts interpolate
/// (and extrapolate) log-log between the published anchors.
fn lambda_from_anchors(anchors: &[(f64, f64)], n: usize) -> f64 {
    let x = n as f64;
    for &(ax, ay) in anchors {
        if x == ax {
            return ay;
        }
    }
    let seg = if x < anchors[0].0 {
        (anchors[0], anchors[1])
    } else if x >= anchors[anchors.len() - 1].0 {
        (anchors[anchors.len() - 2], anchors[anchors.len() - 1])
    } else {
        let mut seg = (anchors[0], anchors[1]);
        for w in anchors.windows(2) {
            if x > w[0].0 && x < w[1].0 {
                seg = (w[0], w[1]);
            }
        }
        seg
    };
    let ((x0, y0), (x1, y1)) = seg;
    let t = (x.ln() - x0.ln()) / (x1.ln() - x0.ln());
    (y0.ln() + t * (y1.ln() - y0.ln())).exp()
}

/// Recommended scaling coefficient for `method` when merging `n` tasks.
pub fn default_lambda(method: MergeMethod, n: usize) -> f64 {
    match method {
        MergeMethod::Averaging | MergeMethod::Ties | MergeMethod::Knots | MergeMethod::TsvM => 1.0,
        MergeMethod::TaskArithmetic => lambda_from_anchors(&TA_LAMBDA, n),
        MergeMethod::IsoC => lambda_from_anchors(&ISO_C_LAMBDA, n),
        MergeMethod::IsoCts => lambda_from_anchors(&ISO_CTS_LAMBDA, n),
    }
}

#[derive(Clone, Debug)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub tasks: usize,
    /// Scaling coefficient; defaults per method and task count.
    pub lambda: Option<f64>,
    /// Fraction of entries kept by the TIES trim, in (0, 1].
    pub topk: Option<f64>,
    /// Fraction of top singular directions flattened by Iso-CTS, in (0, 1].
    pub common_fraction: Option<f64>,
    /// Use the literal published formulas for Iso-C and TSV-M, which
    /// algebraically collapse to plain means, instead of the default
    /// non-degenerate readings.
    pub literal_formulas: bool,
}

impl MergeConfig {
    pub fn new(method: MergeMethod, tasks: usize) -> Self {
        Self {
            method,
            tasks,
            lambda: None,
            topk: None,
            common_fraction: None,
            literal_formulas: false,
        }
    }

    pub fn resolved_lambda(&self) -> f64 {
        self.lambda
            .unwrap_or_else(|| default_lambda(self.method, self.tasks))
    }

    pub fn resolved_topk(&self) -> f64 {
        self.topk.unwrap_or(DEFAULT_TOPK)
    }

    pub fn resolved_common_fraction(&self) -> f64 {
        self.common_fraction.unwrap_or(DEFAULT_COMMON_FRACTION)
    }

    fn validate(&self) -> Result<()> {
        let lambda = self.resolved_lambda();
        if lambda.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("λ must be > 0, got {lambda}")));
        }
        let topk = self.resolved_topk();
        if !(topk > 0.0 && topk <= 1.0) {
            return Err(Error::Config(format!("topk must be in (0,1], got {topk}")));
        }
        let cf = self.resolved_common_fraction();
        if !(cf > 0.0 && cf <= 1.0) {
            return Err(Error::Config(format!(
                "common-space fraction must be in (0,1], got {cf}"
            )));
        }
        if self.method == MergeMethod::IsoCts && self.tasks < 2 {
            return Err(Error::Config("iso_cts needs at least 2 tasks".into()));
        }
        Ok(())
    }
}

/// Per-layer record of what the merge did.
#[derive(Clone, Debug, Default)]
pub struct LayerDiag {
    pub name: String,
    /// Fraction of each task's squared mass surviving the trim (TIES family).
    pub kept_mass: Vec<f64>,
    /// Fraction of retained entries agreeing with the elected sign.
    pub sign_agreement: Option<f64>,
    /// Singular values seen by the spectrum-shaping methods.
    pub spectrum: Vec<f64>,
    /// Per-task similarity coefficients (Iso-CTS).
    pub coefficients: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct MergeOutput<T: Scalar = f64> {
    pub vector: TaskVector<T>,
    pub lambda: f64,
    pub layers: Vec<LayerDiag>,
}

impl<T: Scalar> MergeOutput<T> {
    pub fn warnings(&self) -> impl Iterator<Item = (&str, &str)> {
        self.layers.iter().flat_map(|l| {
            l.warnings
                .iter()
                .map(move |w| (l.name.as_str(), w.as_str()))
        })
    }
}

/// Merges the bundle's task vectors with the configured method.
pub fn merge<T: Scalar>(bundle: &ExpertBundle<T>, cfg: &MergeConfig) -> Result<MergeOutput<T>> {
    if cfg.tasks != bundle.tasks() {
        return Err(Error::Config(format!(
            "config expects {} tasks, bundle has {}",
            cfg.tasks,
            bundle.tasks()
        )));
    }
    cfg.validate()?;
    let lambda = T::of(cfg.resolved_lambda());
    let topk = cfg.resolved_topk();
    let cf = cfg.resolved_common_fraction();

    let mut delta = ParamSet::new();
    let mut layers = Vec::new();
    let names: Vec<String> = bundle.vectors[0].delta().names().cloned().collect();
    for name in names {
        let mats: Vec<&Tensor<T>> = bundle
            .vectors
            .iter()
            .map(|v| v.delta().get(&name))
            .collect::<Result<_>>()?;
        let mut diag = LayerDiag {
            name: name.clone(),
            ..LayerDiag::default()
        };
        let merged = merge_layer(
            cfg.method,
            &mats,
            lambda,
            topk,
            cf,
            cfg.literal_formulas,
            &mut diag,
        )?;
        delta.insert(&name, merged);
        layers.push(diag);
    }

    Ok(MergeOutput {
        vector: TaskVector::new(delta, bundle.vectors[0].origin()),
        lambda: cfg.resolved_lambda(),
        layers,
    })
}

fn merge_layer<T: Scalar>(
    method: MergeMethod,
    mats: &[&Tensor<T>],
    lambda: T,
    topk: f64,
    cf: f64,
    literal: bool,
    diag: &mut LayerDiag,
) -> Result<Tensor<T>> {
    let is_matrix = mats[0].rank() == 2;
    match method {
        MergeMethod::Averaging => Ok(mean_tensors(mats).scale(lambda)),
        MergeMethod::TaskArithmetic => Ok(sum_tensors(mats).scale(lambda)),
        MergeMethod::Ties => Ok(ties_combine(mats, topk, diag).scale(lambda)),
        MergeMethod::Knots => {
            if is_matrix {
                knots_layer(mats, topk, lambda, diag)
            } else {
                Ok(ties_combine(mats, topk, diag).scale(lambda))
            }
        }
        MergeMethod::TsvM => {
            if is_matrix {
                tsvm_layer(mats, lambda, literal, diag)
            } else {
                Ok(sign_elected_average(mats, literal).scale(lambda))
            }
        }
        MergeMethod::IsoC => {
            if literal {
                // The literal whitened-mean formulation collapses to the
                // plain mean: the whitened deviations average to zero.
                Ok(mean_tensors(mats).scale(lambda))
            } else if is_matrix {
                iso_c_layer(mats, lambda, diag)
            } else {
                Ok(mean_tensors(mats).scale(lambda))
            }
        }
        MergeMethod::IsoCts => {
            if is_matrix {
                iso_cts_layer(mats, lambda, cf, diag)
            } else {
                Ok(mean_tensors(mats).scale(lambda))
            }
        }
    }
}

// ── Shared combinators ──────────────────────────────────────────────

fn sum_tensors<T: Scalar>(mats: &[&Tensor<T>]) -> Tensor<T> {
    let len = mats[0].len();
    let mut out = Vec::with_capacity(len);
    let mut scratch = vec![T::zero(); mats.len()];
    for k in 0..len {
        for (s, m) in scratch.iter_mut().zip(mats) {
            *s = m.data()[k];
        }
        out.push(stable_sum(&mut scratch));
    }
    Tensor::from_parts(mats[0].shape().to_vec(), out)
}

fn mean_tensors<T: Scalar>(mats: &[&Tensor<T>]) -> Tensor<T> {
    let n = T::of(mats.len() as f64);
    sum_tensors(mats).map(|v| v / n)
}

/// Indices of the `k` largest-magnitude entries; boundary ties keep the
/// lower flat index.
fn trim_mask<T: Scalar>(t: &Tensor<T>, topk: f64) -> Vec<bool> {
    let len = t.len();
    let keep = ((topk * len as f64).ceil() as usize).clamp(1, len);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.sort_unstable_by(|&a, &b| {
        t.data()[b]
            .abs()
            .partial_cmp(&t.data()[a].abs())
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; len];
    for &i in &idx[..keep] {
        mask[i] = true;
    }
    mask
}

/// Trim → elect sign → disjoint mean. The per-task kept-mass fractions and
/// the sign-agreement rate land in `diag`.
fn ties_combine<T: Scalar>(mats: &[&Tensor<T>], topk: f64, diag: &mut LayerDiag) -> Tensor<T> {
    let len = mats[0].len();
    let masks: Vec<Vec<bool>> = mats.iter().map(|m| trim_mask(m, topk)).collect();

    for (m, mask) in mats.iter().zip(&masks) {
        let total: f64 = m.data().iter().map(|v| (v.f64()).powi(2)).sum();
        let kept: f64 = m
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .map(|(v, _)| v.f64().powi(2))
            .sum();
        diag.kept_mass
            .push(if total > 0.0 { kept / total } else { 1.0 });
    }

    let mut out = Vec::with_capacity(len);
    let mut scratch = Vec::with_capacity(mats.len());
    let mut agreeing = 0usize;
    let mut retained = 0usize;
    for k in 0..len {
        scratch.clear();
        for (m, mask) in mats.iter().zip(&masks) {
            scratch.push(if mask[k] { m.data()[k] } else { T::zero() });
        }
        let mut addends = scratch.clone();
        let total = stable_sum(&mut addends);
        let elected = if total > T::zero() {
            T::one()
        } else if total < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        if elected == T::zero() {
            out.push(T::zero());
            continue;
        }
        let mut matching: Vec<T> = scratch
            .iter()
            .copied()
            .filter(|&v| v != T::zero() && v.signum() == elected)
            .collect();
        let nonzero = scratch.iter().filter(|&&v| v != T::zero()).count();
        retained += nonzero;
        agreeing += matching.len();
        if matching.is_empty() {
            out.push(T::zero());
        } else {
            let count = T::of(matching.len() as f64);
            out.push(stable_sum(&mut matching) / count);
        }
    }
    if retained > 0 {
        diag.sign_agreement = Some(agreeing as f64 / retained as f64);
    }
    Tensor::from_parts(mats[0].shape().to_vec(), out)
}

/// Coordinatewise sign election over full tensors: the elected sign of the
/// summed entries, carrying the mean magnitude of the agreeing tasks. The
/// literal reading is the plain mean.
fn sign_elected_average<T: Scalar>(mats: &[&Tensor<T>], literal: bool) -> Tensor<T> {
    if literal {
        return mean_tensors(mats);
    }
    let len = mats[0].len();
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let mut vals: Vec<T> = mats.iter().map(|m| m.data()[k]).collect();
        let total = stable_sum(&mut vals.clone());
        let elected = if total > T::zero() {
            T::one()
        } else if total < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        if elected == T::zero() {
            out.push(T::zero());
            continue;
        }
        vals.retain(|&v| v != T::zero() && v.signum() == elected);
        if vals.is_empty() {
            out.push(T::zero());
        } else {
            let count = T::of(vals.len() as f64);
            let mut mags: Vec<T> = vals.iter().map(|v| v.abs()).collect();
            out.push(elected * (stable_sum(&mut mags) / count));
        }
    }
    Tensor::from_parts(mats[0].shape().to_vec(), out)
}

// ── SVD-based methods ───────────────────────────────────────────────

fn knots_layer<T: Scalar>(
    mats: &[&Tensor<T>],
    topk: f64,
    lambda: T,
    diag: &mut LayerDiag,
) -> Result<Tensor<T>> {
    let (_, n) = mats[0].dims2()?;
    let stacked = Tensor::hconcat(mats)?;
    let dec = svd(&stacked)?;
    diag.spectrum = dec.s.data().iter().map(|v| v.f64()).collect();

    // Per-task blocks of Vᵀ (r×n each), aligned by the shared U·Σ.
    let vt = dec.v.transposed()?;
    let blocks: Vec<Tensor<T>> = (0..mats.len())
        .map(|i| vt.col_block(i * n, (i + 1) * n))
        .collect::<Result<_>>()?;
    let block_refs: Vec<&Tensor<T>> = blocks.iter().collect();
    let merged_vt = ties_combine(&block_refs, topk, diag);

    let us = scale_columns(&dec.u, dec.s.data());
    Ok(us.matmul(&merged_vt)?.scale(lambda))
}

fn tsvm_layer<T: Scalar>(
    mats: &[&Tensor<T>],
    lambda: T,
    literal: bool,
    diag: &mut LayerDiag,
) -> Result<Tensor<T>> {
    let (m, n) = mats[0].dims2()?;
    let r = m.min(n);
    let stacked = Tensor::hconcat(mats)?;
    let dec = svd(&stacked)?;
    diag.spectrum = dec.s.data().iter().map(|v| v.f64()).collect();

    // Shared subspace: top-r left singular vectors of the stacked matrix.
    let p = dec.u.col_block(0, r)?;
    let pt = p.transposed()?;
    let projected: Vec<Tensor<T>> = mats.iter().map(|t| pt.matmul(t)).collect::<Result<_>>()?;
    let proj_refs: Vec<&Tensor<T>> = projected.iter().collect();
    let combined = sign_elected_average(&proj_refs, literal);
    Ok(p.matmul(&combined)?.scale(lambda))
}

fn iso_c_layer<T: Scalar>(
    mats: &[&Tensor<T>],
    lambda: T,
    diag: &mut LayerDiag,
) -> Result<Tensor<T>> {
    let summed = sum_tensors(mats);
    flatten_spectrum(&summed, 1.0, lambda, diag)
}

fn iso_cts_layer<T: Scalar>(
    mats: &[&Tensor<T>],
    lambda: T,
    cf: f64,
    diag: &mut LayerDiag,
) -> Result<Tensor<T>> {
    const SIMILARITY_FLOOR: f64 = 1e-3;
    let n_tasks = mats.len();

    // Per-task coefficient: mean cosine similarity to the other tasks,
    // floored so anticorrelated tasks are not erased outright.
    let mut coeffs = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let mut acc = 0.0;
        for j in 0..n_tasks {
            if i == j {
                continue;
            }
            acc += cosine(mats[i], mats[j])?;
        }
        let mean = acc / (n_tasks as f64 - 1.0);
        coeffs.push(mean.max(SIMILARITY_FLOOR));
    }
    diag.coefficients = coeffs.clone();
    if coeffs.iter().all(|&c| c == SIMILARITY_FLOOR) {
        diag.warnings
            .push("all similarity coefficients at floor; weights degenerate to uniform".into());
    }

    // Weighted combination scaled back to sum magnitude.
    let total: f64 = coeffs.iter().sum();
    let len = mats[0].len();
    let mut data = Vec::with_capacity(len);
    let mut scratch = vec![T::zero(); n_tasks];
    let scale = T::of(n_tasks as f64 / total);
    for k in 0..len {
        for ((s, m), &c) in scratch.iter_mut().zip(mats).zip(&coeffs) {
            *s = m.data()[k] * T::of(c);
        }
        data.push(stable_sum(&mut scratch) * scale);
    }
    let weighted = Tensor::from_parts(mats[0].shape().to_vec(), data);
    flatten_spectrum(&weighted, cf, lambda, diag)
}

/// Replaces the top `fraction` of singular values by their mean, leaving the
/// tail untouched, and rebuilds the matrix scaled by λ.
fn flatten_spectrum<T: Scalar>(
    t: &Tensor<T>,
    fraction: f64,
    lambda: T,
    diag: &mut LayerDiag,
) -> Result<Tensor<T>> {
    let dec = svd(t)?;
    diag.spectrum = dec.s.data().iter().map(|v| v.f64()).collect();
    let r = dec.s.len();
    let k = ((fraction * r as f64).ceil() as usize).clamp(1, r);
    let head = &dec.s.data()[..k];
    let mean = head.iter().fold(T::zero(), |a, &v| a + v) / T::of(k as f64);
    let mut flat: Vec<T> = vec![mean; k];
    flat.extend_from_slice(&dec.s.data()[k..]);
    let us = scale_columns(&dec.u, &flat);
    Ok(us.matmul(&dec.v.transposed()?)?.scale(lambda))
}

fn cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let na = a.frob_norm().f64();
    let nb = b.frob_norm().f64();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(a.dot(b)?.f64() / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_backbone, ExpertBundle, TaskHead, EMBED_WIDTH};
    use crate::rng::Prng;

    fn vec_tensor(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    fn diag() -> LayerDiag {
        LayerDiag::default()
    }

    #[test]
    fn table_defaults_resolve_verbatim() {
        for (n, want) in [(2, 0.42), (8, 0.30), (14, 0.22), (20, 0.15)] {
            assert_eq!(default_lambda(MergeMethod::TaskArithmetic, n), want);
        }
        for (n, want) in [(2, 1.9), (8, 1.3), (14, 1.0), (20, 0.9)] {
            assert_eq!(default_lambda(MergeMethod::IsoC, n), want);
        }
        for (n, want) in [(2, 2.1), (8, 1.5), (14, 1.2), (20, 1.1)] {
            assert_eq!(default_lambda(MergeMethod::IsoCts, n), want);
        }
        for n in [2, 8, 14, 20] {
            assert_eq!(default_lambda(MergeMethod::Ties, n), 1.0);
            assert_eq!(default_lambda(MergeMethod::Knots, n), 1.0);
            assert_eq!(default_lambda(MergeMethod::TsvM, n), 1.0);
        }
        // Interpolated values stay inside the bracketing anchors.
        let l4 = default_lambda(MergeMethod::TaskArithmetic, 4);
        assert!(l4 < 0.42 && l4 > 0.30, "{l4}");
    }

    #[test]
    fn ties_hand_case() {
        let t1 = vec_tensor(&[1.0, -2.0, 3.0, 0.1]);
        let t2 = vec_tensor(&[2.0, 1.5, -1.0, 0.2]);
        let mut d = diag();
        let out = ties_combine(&[&t1, &t2], 0.5, &mut d);
        assert_eq!(out.data(), &[2.0, -2.0, 3.0, 0.0]);
        assert_eq!(d.kept_mass.len(), 2);
    }

    #[test]
    fn ties_single_task_full_topk_is_identity() {
        let t1 = vec_tensor(&[0.5, -0.25, 0.0, 4.0]);
        let out = ties_combine(&[&t1], 1.0, &mut diag());
        assert_eq!(out.data(), t1.data());
    }

    #[test]
    fn ties_cancellation_gives_zero() {
        let t1 = vec_tensor(&[1.0, -2.0, 0.5]);
        let t2 = t1.scale(-1.0);
        let out = ties_combine(&[&t1, &t2], 1.0, &mut diag());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_matches_brute_force_oracle() {
        // Independent straightforward reimplementation.
        fn oracle(mats: &[Vec<f64>], topk: f64) -> Vec<f64> {
            let len = mats[0].len();
            let n = mats.len();
            let mut trimmed = vec![vec![0.0; len]; n];
            for (ti, m) in mats.iter().enumerate() {
                let keep = ((topk * len as f64).ceil() as usize).clamp(1, len);
                let mut order: Vec<usize> = (0..len).collect();
                order
                    .sort_by(|&a, &b| m[b].abs().partial_cmp(&m[a].abs()).unwrap().then(a.cmp(&b)));
                for &i in order.iter().take(keep) {
                    trimmed[ti][i] = m[i];
                }
            }
            (0..len)
                .map(|k| {
                    let sum: f64 = (0..n).map(|t| trimmed[t][k]).sum();
                    let sign = if sum > 0.0 {
                        1.0
                    } else if sum < 0.0 {
                        -1.0
                    } else {
                        return 0.0;
                    };
                    let picks: Vec<f64> = (0..n)
                        .map(|t| trimmed[t][k])
                        .filter(|&v| v != 0.0 && v.signum() == sign)
                        .collect();
                    if picks.is_empty() {
                        0.0
                    } else {
                        picks.iter().sum::<f64>() / picks.len() as f64
                    }
                })
                .collect()
        }

        let mut rng = Prng::seed(2024);
        for case in 0..50 {
            let n = 1 + rng.uniform_index(4);
            let len = 1 + rng.uniform_index(12);
            let topk = [0.25, 0.5, 0.75, 1.0][rng.uniform_index(4)];
            let mats: Vec<Tensor<f64>> = (0..n)
                .map(|_| rng.gaussian::<f64>(&[len]).map(|v| (v * 4.0).round() / 4.0))
                .collect();
            let refs: Vec<&Tensor<f64>> = mats.iter().collect();
            let got = ties_combine(&refs, topk, &mut diag());
            let want = oracle(
                &mats.iter().map(|m| m.data().to_vec()).collect::<Vec<_>>(),
                topk,
            );
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "case {case}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn knots_identity_cases() {
        let mut rng = Prng::seed(88);
        let t1: Tensor = rng.gaussian(&[6, 4]);

        // Single task at topk 1: UΣVᵀ round trip.
        let out = knots_layer(&[&t1], 1.0, 1.0, &mut diag()).unwrap();
        let diff = out.sub(&t1).unwrap().max_abs();
        assert!(diff <= 1e-9, "{diff}");

        // Identical tasks at topk 1 reproduce the shared vector.
        let out = knots_layer(&[&t1, &t1, &t1], 1.0, 1.0, &mut diag()).unwrap();
        let diff = out.sub(&t1).unwrap().max_abs();
        assert!(diff <= 1e-9, "{diff}");
    }

    #[test]
    fn knots_is_permutation_invariant() {
        let mut rng = Prng::seed(99);
        let mats: Vec<Tensor<f64>> = (0..3).map(|_| rng.gaussian(&[5, 4])).collect();
        let fwd: Vec<&Tensor<f64>> = mats.iter().collect();
        let rev: Vec<&Tensor<f64>> = mats.iter().rev().collect();
        let a = knots_layer(&fwd, 0.5, 1.0, &mut diag()).unwrap();
        let b = knots_layer(&rev, 0.5, 1.0, &mut diag()).unwrap();
        let diff = a.sub(&b).unwrap().max_abs();
        assert!(diff <= 1e-8, "{diff}");
    }

    #[test]
    fn tsvm_identity_and_projection() {
        let mut rng = Prng::seed(13);
        let t1: Tensor = rng.gaussian(&[6, 4]);
        let out = tsvm_layer(&[&t1], 1.0, false, &mut diag()).unwrap();
        let diff = out.sub(&t1).unwrap().max_abs();
        assert!(diff <= 1e-9, "single task: {diff}");

        let out = tsvm_layer(&[&t1, &t1], 1.0, false, &mut diag()).unwrap();
        let diff = out.sub(&t1).unwrap().max_abs();
        assert!(diff <= 1e-9, "identical tasks: {diff}");

        // Output of a random case lies in span(P): re-projection is lossless.
        let mats: Vec<Tensor<f64>> = (0..4).map(|_| rng.gaussian(&[6, 4])).collect();
        let refs: Vec<&Tensor<f64>> = mats.iter().collect();
        let out = tsvm_layer(&refs, 1.0, false, &mut diag()).unwrap();
        let stacked = Tensor::hconcat(&refs).unwrap();
        let dec = svd(&stacked).unwrap();
        let p = dec.u.col_block(0, 4).unwrap();
        let reproj = p
            .matmul(&p.transposed().unwrap().matmul(&out).unwrap())
            .unwrap();
        let residual = reproj.sub(&out).unwrap().max_abs();
        assert!(residual <= 1e-9, "{residual}");
    }

    #[test]
    fn iso_c_flattens_the_spectrum() {
        // Build a matrix with singular values {3, 1}; the merged layer must
        // have spectrum {2, 2}.
        let a = Tensor::<f64>::from_rows(vec![vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut d = diag();
        let out = iso_c_layer(&[&a], 1.0, &mut d).unwrap();
        let dec = svd(&out).unwrap();
        assert!((dec.s.at(0) - 2.0).abs() <= 1e-10);
        assert!((dec.s.at(1) - 2.0).abs() <= 1e-10);

        // Frobenius norm of a flat spectrum: λ·mean(s)·√r.
        let norm = out.frob_norm();
        assert!((norm - 2.0 * 2.0f64.sqrt()).abs() <= 1e-10, "{norm}");

        // A layer whose summed vector is already isotropic is a fixed point.
        let mut rng = Prng::seed(7);
        let g: Tensor = rng.gaussian(&[4, 4]);
        let dec = svd(&g).unwrap();
        let iso = dec.u.matmul(&dec.v.transposed().unwrap()).unwrap();
        let out = iso_c_layer(&[&iso], 1.0, &mut diag()).unwrap();
        let diff = out.sub(&iso).unwrap().max_abs();
        assert!(diff <= 1e-9, "{diff}");
    }

    #[test]
    fn iso_cts_reduces_to_iso_c() {
        let mut rng = Prng::seed(8);
        let t: Tensor = rng.gaussian(&[5, 3]);
        // Identical tasks → uniform weights; cf = 1 → full flatten.
        let refs = [&t, &t, &t];
        let cts = iso_cts_layer(&refs, 1.0, 1.0, &mut diag()).unwrap();
        let summed = sum_tensors(&refs);
        let isoc = flatten_spectrum(&summed, 1.0, 1.0, &mut diag()).unwrap();
        let diff = cts.sub(&isoc).unwrap().max_abs();
        assert!(diff <= 1e-9, "{diff}");
    }

    #[test]
    fn iso_cts_orthogonal_tasks_floor_with_warning() {
        // Two exactly orthogonal layer matrices.
        let a = Tensor::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(vec![vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut d = diag();
        let _ = iso_cts_layer(&[&a, &b], 1.0, 0.8, &mut d).unwrap();
        assert_eq!(d.coefficients, vec![1e-3, 1e-3]);
        assert!(!d.warnings.is_empty());
    }

    // ── merge() dispatch over bundles ───────────────────────────────

    fn bundle_with_vectors(deltas: Vec<ParamSet<f64>>) -> ExpertBundle<f64> {
        let rng = Prng::seed(555);
        let theta0: ParamSet<f64> = init_backbone(4, &rng);
        let fp = theta0.fingerprint();
        let n = deltas.len();
        let vectors = deltas.into_iter().map(|d| TaskVector::new(d, fp)).collect();
        let heads = (0..n)
            .map(|i| {
                let mut hrng = rng.derive("head", i as u64);
                TaskHead::new(i, hrng.gaussian(&[EMBED_WIDTH, 2]), hrng.gaussian(&[2])).unwrap()
            })
            .collect();
        ExpertBundle::new(theta0, vectors, heads, "s".into()).unwrap()
    }

    fn random_deltas(n: usize, seed: u64) -> Vec<ParamSet<f64>> {
        let rng = Prng::seed(seed);
        let theta0: ParamSet<f64> = init_backbone(4, &Prng::seed(555));
        (0..n)
            .map(|i| {
                let mut d = ParamSet::new();
                let mut r = rng.derive("delta", i as u64);
                for (name, t) in theta0.iter() {
                    d.insert(name, r.gaussian(t.shape()));
                }
                d
            })
            .collect()
    }

    #[test]
    fn averaging_examples() {
        let deltas = random_deltas(1, 1);
        let tau0 = deltas[0].clone();
        let b = bundle_with_vectors(deltas);
        let mut cfg = MergeConfig::new(MergeMethod::Averaging, 1);
        cfg.lambda = Some(1.0);
        let out = merge(&b, &cfg).unwrap();
        assert_eq!(out.vector.delta(), &tau0);

        // τ₁ = [2], τ₂ = [4] → [3] on every coordinate.
        let two = tau0.map(|_| 2.0);
        let four = tau0.map(|_| 4.0);
        let b = bundle_with_vectors(vec![two, four]);
        let mut cfg = MergeConfig::new(MergeMethod::Averaging, 2);
        cfg.lambda = Some(1.0);
        let out = merge(&b, &cfg).unwrap();
        assert!(out
            .vector
            .delta()
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn ta_examples_and_homogeneity() {
        let deltas = random_deltas(2, 3);
        let b = bundle_with_vectors(deltas.clone());

        // λ = 1/N reproduces averaging with λ = 1.
        let mut ta = MergeConfig::new(MergeMethod::TaskArithmetic, 2);
        ta.lambda = Some(0.5);
        let mut avg = MergeConfig::new(MergeMethod::Averaging, 2);
        avg.lambda = Some(1.0);
        let a = merge(&b, &ta).unwrap();
        let c = merge(&b, &avg).unwrap();
        for (name, t) in a.vector.delta().iter() {
            let diff = t
                .sub(c.vector.delta().get(name).unwrap())
                .unwrap()
                .max_abs();
            assert!(diff <= 1e-15, "{name}");
        }

        // λ = 0 is rejected (must be positive).
        let mut z = MergeConfig::new(MergeMethod::TaskArithmetic, 2);
        z.lambda = Some(0.0);
        assert!(merge(&b, &z).is_err());

        // Exact homogeneity under dyadic scaling.
        let scaled = bundle_with_vectors(deltas.iter().map(|d| d.scale(2.0)).collect());
        let mut cfg = MergeConfig::new(MergeMethod::TaskArithmetic, 2);
        cfg.lambda = Some(0.3);
        let direct = merge(&scaled, &cfg).unwrap();
        let base = merge(&b, &cfg).unwrap();
        for (name, t) in direct.vector.delta().iter() {
            let want = base.vector.delta().get(name).unwrap().scale(2.0);
            assert_eq!(t, &want, "{name}");
        }
    }

    #[test]
    fn ta_hand_value() {
        let deltas = random_deltas(2, 9);
        let ones: Vec<ParamSet<f64>> = deltas.iter().map(|d| d.map(|_| 1.0)).collect();
        let b = bundle_with_vectors(ones);
        let mut cfg = MergeConfig::new(MergeMethod::TaskArithmetic, 2);
        cfg.lambda = Some(0.3);
        let out = merge(&b, &cfg).unwrap();
        assert!(out
            .vector
            .delta()
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| (v - 0.6).abs() <= 1e-15)));
    }

    #[test]
    fn all_methods_are_permutation_invariant_and_keep_origin() {
        let deltas = random_deltas(3, 17);
        let fwd = bundle_with_vectors(deltas.clone());
        let mut rev_deltas = deltas;
        rev_deltas.reverse();
        let rev = bundle_with_vectors(rev_deltas);

        for method in MergeMethod::ALL {
            let cfg = MergeConfig::new(method, 3);
            let a = merge(&fwd, &cfg).unwrap();
            let b = merge(&rev, &cfg).unwrap();
            assert_eq!(a.vector.origin(), fwd.vectors[0].origin(), "{method}");
            for (name, t) in a.vector.delta().iter() {
                let other = b.vector.delta().get(name).unwrap();
                match method {
                    MergeMethod::Averaging
                    | MergeMethod::TaskArithmetic
                    | MergeMethod::Ties
                    | MergeMethod::IsoC => {
                        assert_eq!(t, other, "{method}/{name} must be exactly invariant")
                    }
                    _ => {
                        let diff = t.sub(other).unwrap().max_abs();
                        assert!(diff <= 1e-8, "{method}/{name}: {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn merge_rejects_task_count_mismatch_and_iso_cts_single() {
        let b = bundle_with_vectors(random_deltas(2, 5));
        let cfg = MergeConfig::new(MergeMethod::Averaging, 3);
        assert!(matches!(merge(&b, &cfg), Err(Error::Config(_))));

        let single = bundle_with_vectors(random_deltas(1, 5));
        let cfg = MergeConfig::new(MergeMethod::IsoCts, 1);
        assert!(matches!(merge(&single, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_method_string_is_rejected_with_the_list() {
        let err = "wudi".parse::<MergeMethod>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("wudi") && msg.contains("averaging") && msg.contains("iso_cts"));
    }

    #[test]
    fn averaging_single_task_merged_model_equals_expert() {
        let deltas = random_deltas(1, 21);
        let b = bundle_with_vectors(deltas);
        let mut cfg = MergeConfig::new(MergeMethod::Averaging, 1);
        cfg.lambda = Some(1.0);
        let out = merge(&b, &cfg).unwrap();
        let merged = crate::model::apply(&b.theta0, &out.vector, 1.0).unwrap();
        let expert = b.expert_params(0).unwrap();
        assert_eq!(merged, expert);
    }
}
