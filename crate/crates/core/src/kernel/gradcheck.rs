//! Central finite-difference checks of the analytic gradients.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    ar_cross_entropy, consistency_loss, contrastive_loss, info_nce, total_loss, KernelError,
    LossInput, LossOutput, Matrix, VariantInput,
};
use crate::data::PerturbationLevel;

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Largest max-relative-error a trial may report and still pass.
pub const TOLERANCE: f64 = 1e-6;

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)`, where
/// `numeric` is `(f(x+ε) − f(x−ε)) / 2ε`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64, KernelError>
where
    F: FnMut(&[f64]) -> Result<f64, KernelError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(KernelError::Epsilon(eps));
    }
    if x.len() != analytic.len() {
        return Err(KernelError::Shape(format!(
            "{} coordinates but {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(KernelError::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Flattens logits (per level), then hidden states (per level), then negatives.
pub fn flatten_input(input: &LossInput, negatives: &[Vec<f64>]) -> Vec<f64> {
    let mut x = Vec::new();
    for v in input.variants.values() {
        x.extend_from_slice(v.logits.data());
    }
    for v in input.variants.values() {
        x.extend_from_slice(v.hidden.data());
    }
    for n in negatives {
        x.extend_from_slice(n);
    }
    x
}

/// Gradients laid out like [`flatten_input`].
pub fn flatten_gradients(out: &LossOutput) -> Vec<f64> {
    let mut g = Vec::new();
    for m in out.grad_logits.values() {
        g.extend_from_slice(m.data());
    }
    for m in out.grad_hidden.values() {
        g.extend_from_slice(m.data());
    }
    for n in &out.grad_negatives {
        g.extend_from_slice(n);
    }
    g
}

/// Inverse of [`flatten_input`] against a template with the same shapes.
pub fn unflatten_input(
    template: &LossInput,
    negative_count: usize,
    x: &[f64],
) -> Result<(LossInput, Vec<Vec<f64>>), KernelError> {
    let mut rest = x;
    let mut take = |n: usize| -> Result<Vec<f64>, KernelError> {
        if rest.len() < n {
            return Err(KernelError::Shape("flattened input too short".into()));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head.to_vec())
    };
    let mut variants = template.variants.clone();
    for v in variants.values_mut() {
        let (r, c) = v.logits.shape();
        v.logits = Matrix::new(r, c, take(r * c)?)?;
    }
    for v in variants.values_mut() {
        let (r, c) = v.hidden.shape();
        v.hidden = Matrix::new(r, c, take(r * c)?)?;
    }
    let dim = template.variants[&PerturbationLevel::Original].hidden.cols();
    let negatives = (0..negative_count)
        .map(|_| take(dim))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        LossInput {
            variants,
            vocab_size: template.vocab_size,
            temperature: template.temperature,
        },
        negatives,
    ))
}

/// Loss operations with a checked gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedOp {
    CrossEntropy,
    Consistency,
    InfoNce,
    Contrastive,
    Total,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 5] = [
        CheckedOp::CrossEntropy,
        CheckedOp::Consistency,
        CheckedOp::InfoNce,
        CheckedOp::Contrastive,
        CheckedOp::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::CrossEntropy => "ar_cross_entropy",
            CheckedOp::Consistency => "consistency_loss",
            CheckedOp::InfoNce => "info_nce",
            CheckedOp::Contrastive => "contrastive_loss",
            CheckedOp::Total => "total_loss",
        }
    }
}

impl fmt::Display for CheckedOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(rows, cols, normal_vec(rng, rows * cols, scale)).expect("finite normal draws")
}

/// Random loss input with a random subset of perturbed levels.
pub fn random_loss_input(rng: &mut ChaCha8Rng) -> (LossInput, Vec<Vec<f64>>) {
    let vocab = rng.random_range(2..=6);
    let dim = rng.random_range(2..=5);
    let temperature = rng.random_range(0.1..=1.0);
    let mut variants = BTreeMap::new();
    for level in PerturbationLevel::ALL {
        if level.is_perturbed() && rng.random_bool(0.25) {
            continue;
        }
        let steps = rng.random_range(1..=3);
        let rows = rng.random_range(1..=3);
        variants.insert(
            level,
            VariantInput {
                logits: random_matrix(rng, steps, vocab, 2.0),
                targets: (0..steps).map(|_| rng.random_range(0..vocab)).collect(),
                hidden: random_matrix(rng, rows, dim, 1.0),
            },
        );
    }
    let negatives = (0..rng.random_range(0..=3))
        .map(|_| normal_vec(rng, dim, 1.0))
        .collect();
    let input = LossInput::new(variants, vocab, temperature).expect("consistent random input");
    (input, negatives)
}

fn check_loss_input<F>(input: &LossInput, negatives: &[Vec<f64>], eps: f64, op: F) -> Result<f64, KernelError>
where
    F: Fn(&LossInput, &[Vec<f64>]) -> Result<LossOutput, KernelError>,
{
    let analytic = flatten_gradients(&op(input, negatives)?);
    let x = flatten_input(input, negatives);
    grad_check(
        |p| {
            let (inp, negs) = unflatten_input(input, negatives.len(), p)?;
            Ok(op(&inp, &negs)?.value)
        },
        &x,
        &analytic,
        eps,
    )
}

/// Draws one random instance for `op` and returns its max relative error.
pub fn random_trial(op: CheckedOp, rng: &mut ChaCha8Rng, eps: f64) -> Result<f64, KernelError> {
    match op {
        CheckedOp::CrossEntropy => {
            let (t, v) = (rng.random_range(1..=4), rng.random_range(2..=6));
            let logits = random_matrix(rng, t, v, 2.0);
            let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
            let (_, grad) = ar_cross_entropy(&logits, &targets)?;
            grad_check(
                |p| Ok(ar_cross_entropy(&Matrix::new(t, v, p.to_vec())?, &targets)?.0),
                logits.data(),
                grad.data(),
                eps,
            )
        }
        CheckedOp::InfoNce => {
            let dim = rng.random_range(2..=6);
            let n_pos = rng.random_range(1..=3);
            let n_neg = rng.random_range(0..=4);
            let temperature = rng.random_range(0.1..=1.0);
            let x = normal_vec(rng, dim * (1 + n_pos + n_neg), 1.0);
            info_nce_check(&x, dim, n_pos, temperature, eps)
        }
        CheckedOp::Consistency => {
            let (input, _) = random_loss_input(rng);
            check_loss_input(&input, &[], eps, |i, _| consistency_loss(i))
        }
        CheckedOp::Contrastive => {
            let (input, negs) = random_loss_input(rng);
            check_loss_input(&input, &negs, eps, contrastive_loss)
        }
        CheckedOp::Total => {
            let (input, negs) = random_loss_input(rng);
            check_loss_input(&input, &negs, eps, total_loss)
        }
    }
}

/// Checks [`info_nce`] at `x = [anchor, positives.., negatives..]`, each `dim` wide.
pub fn info_nce_check(x: &[f64], dim: usize, n_pos: usize, temperature: f64, eps: f64) -> Result<f64, KernelError> {
    let split = |x: &[f64]| -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut chunks = x.chunks(dim).map(<[f64]>::to_vec);
        let anchor = chunks.next().unwrap_or_default();
        let pos: Vec<_> = chunks.by_ref().take(n_pos).collect();
        (anchor, pos, chunks.collect())
    };
    let (a, p, n) = split(x);
    let out = info_nce(&a, &p, &n, temperature)?;
    let mut analytic = out.grad_anchor;
    out.grad_positives.iter().for_each(|g| analytic.extend(g));
    out.grad_negatives.iter().for_each(|g| analytic.extend(g));
    grad_check(
        |v| {
            let (a, p, n) = split(v);
            Ok(info_nce(&a, &p, &n, temperature)?.value)
        },
        x,
        &analytic,
        eps,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub op: CheckedOp,
    pub trials: usize,
    pub max_error: f64,
    pub failures: usize,
}

impl TrialSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runs `trials` random instances of `op` from `seed`.
pub fn run_trials(op: CheckedOp, trials: usize, eps: f64, seed: u64) -> Result<TrialSummary, KernelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = TrialSummary {
        op,
        trials,
        max_error: 0.0,
        failures: 0,
    };
    for _ in 0..trials {
        let err = random_trial(op, &mut rng, eps)?;
        summary.max_error = summary.max_error.max(err);
        if err >= TOLERANCE {
            summary.failures += 1;
        }
    }
    Ok(summary)
}
