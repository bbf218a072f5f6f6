use std::collections::BTreeMap;

use super::{KernelError, Matrix};
use crate::data::PerturbationLevel;

/// Temperature used when none is configured.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

const MIN_NORM: f64 = 1e-12;

/// `ln Σ exp(x)` with max subtraction. Returns `(lse, max)`.
fn log_sum_exp_parts(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    (m + sum.ln(), m)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    log_sum_exp_parts(xs).0
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Summed token cross-entropy `Σ_t −log softmax(logits_t)[y_t]` and its gradient
/// with respect to the logits.
pub fn ar_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix), KernelError> {
    if targets.is_empty() {
        return Err(KernelError::EmptySequence);
    }
    if targets.len() != logits.rows() {
        return Err(KernelError::Shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let vocab = logits.cols();
    let mut value = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), vocab);
    for (t, (row, &y)) in logits.iter_rows().zip(targets).enumerate() {
        if y >= vocab {
            return Err(KernelError::TargetOutOfRange {
                position: t,
                id: y,
                vocab,
            });
        }
        let (_, m) = log_sum_exp_parts(row);
        let sum: f64 = row.iter().map(|x| (x - m).exp()).sum();
        value += (m - row[y]) + sum.ln();
        let g = grad.row_mut(t);
        for (gv, x) in g.iter_mut().zip(row) {
            *gv = (x - m).exp() / sum;
        }
        g[y] -= 1.0;
    }
    Ok((value, grad))
}

/// Column-wise mean of an `L × D` matrix.
pub fn mean_pool(hidden: &Matrix) -> Result<Vec<f64>, KernelError> {
    if hidden.rows() == 0 {
        return Err(KernelError::EmptySequence);
    }
    let mut out = vec![0.0; hidden.cols()];
    for row in hidden.iter_rows() {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    let n = hidden.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Gradient of a pooled vector spread back over `rows` hidden rows.
pub fn mean_pool_backward(grad_pooled: &[f64], rows: usize) -> Matrix {
    let mut g = Matrix::zeros(rows, grad_pooled.len());
    let n = rows as f64;
    for r in 0..rows {
        g.row_mut(r)
            .iter_mut()
            .zip(grad_pooled)
            .for_each(|(o, v)| *o = v / n);
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(f64, f64), KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::Shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(KernelError::ZeroNorm);
    }
    Ok((na, nb))
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, KernelError> {
    let (na, nb) = check_pair(a, b)?;
    Ok(dot(a, b) / (na * nb))
}

/// Cosine similarity with its gradients with respect to `a` and `b`.
pub fn cosine_sim_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), KernelError> {
    let (na, nb) = check_pair(a, b)?;
    let c = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    Ok((c, ga, gb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub value: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positives: Vec<Vec<f64>>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// Contrastive loss of one anchor against its positives and shared negatives.
///
/// Each positive is scored against a denominator holding its own term plus
/// every negative; the other positives are not part of it.
pub fn info_nce(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<InfoNceOutput, KernelError> {
    if positives.is_empty() {
        return Err(KernelError::NoPositives);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(KernelError::Temperature(temperature));
    }
    let pos: Vec<_> = positives
        .iter()
        .map(|p| cosine_sim_grad(anchor, p))
        .collect::<Result<_, _>>()?;
    let neg: Vec<_> = negatives
        .iter()
        .map(|n| cosine_sim_grad(anchor, n))
        .collect::<Result<_, _>>()?;
    let neg_logits: Vec<f64> = neg.iter().map(|(c, _, _)| c / temperature).collect();

    let mut value = 0.0;
    // d value / d logit
    let mut d_pos = vec![0.0; pos.len()];
    let mut d_neg = vec![0.0; neg.len()];
    let mut logits = Vec::with_capacity(neg.len() + 1);
    for (p, (c, _, _)) in pos.iter().enumerate() {
        let s = c / temperature;
        logits.clear();
        logits.push(s);
        logits.extend_from_slice(&neg_logits);
        let (_, m) = log_sum_exp_parts(&logits);
        let sum: f64 = logits.iter().map(|x| (x - m).exp()).sum();
        value += (m - s) + sum.ln();
        d_pos[p] += (s - m).exp() / sum - 1.0;
        for (j, x) in neg_logits.iter().enumerate() {
            d_neg[j] += (x - m).exp() / sum;
        }
    }

    let mut grad_anchor = vec![0.0; anchor.len()];
    let mut grad_positives = Vec::with_capacity(pos.len());
    for ((_, ga, gp), d) in pos.iter().zip(&d_pos) {
        let k = d / temperature;
        grad_anchor.iter_mut().zip(ga).for_each(|(o, g)| *o += k * g);
        grad_positives.push(gp.iter().map(|g| k * g).collect());
    }
    let mut grad_negatives = Vec::with_capacity(neg.len());
    for ((_, ga, gn), d) in neg.iter().zip(&d_neg) {
        let k = d / temperature;
        grad_anchor.iter_mut().zip(ga).for_each(|(o, g)| *o += k * g);
        grad_negatives.push(gn.iter().map(|g| k * g).collect());
    }
    Ok(InfoNceOutput {
        value,
        grad_anchor,
        grad_positives,
        grad_negatives,
    })
}

/// Backbone outputs for one cluster member.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantInput {
    /// `T × V` next-token logits.
    pub logits: Matrix,
    /// Target ids, one per logit row.
    pub targets: Vec<usize>,
    /// `L × D` hidden states, mean pooled into the member embedding.
    pub hidden: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossInput {
    pub variants: BTreeMap<PerturbationLevel, VariantInput>,
    pub vocab_size: usize,
    pub temperature: f64,
}

impl LossInput {
    pub fn new(
        variants: BTreeMap<PerturbationLevel, VariantInput>,
        vocab_size: usize,
        temperature: f64,
    ) -> Result<Self, KernelError> {
        let input = LossInput {
            variants,
            vocab_size,
            temperature,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(KernelError::Temperature(self.temperature));
        }
        let original = self
            .variants
            .get(&PerturbationLevel::Original)
            .ok_or(KernelError::MissingOriginal)?;
        let dim = original.hidden.cols();
        for (level, v) in &self.variants {
            if v.targets.len() != v.logits.rows() {
                return Err(KernelError::Shape(format!(
                    "{level}: {} targets for {} logit rows",
                    v.targets.len(),
                    v.logits.rows()
                )));
            }
            if v.logits.cols() != self.vocab_size {
                return Err(KernelError::Shape(format!(
                    "{level}: logits have {} columns, vocabulary is {}",
                    v.logits.cols(),
                    self.vocab_size
                )));
            }
            if v.hidden.cols() != dim {
                return Err(KernelError::Shape(format!(
                    "{level}: hidden width {} differs from original's {dim}",
                    v.hidden.cols()
                )));
            }
        }
        Ok(())
    }

    fn original(&self) -> &VariantInput {
        &self.variants[&PerturbationLevel::Original]
    }
}

/// Loss value with gradients shaped like the inputs. Every variant present
/// in the input has an entry in both gradient maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: BTreeMap<PerturbationLevel, Matrix>,
    pub grad_hidden: BTreeMap<PerturbationLevel, Matrix>,
    /// One gradient per batch negative, in input order.
    pub grad_negatives: Vec<Vec<f64>>,
}

impl LossOutput {
    fn zeros(input: &LossInput, negatives: usize) -> Self {
        let dim = input.original().hidden.cols();
        LossOutput {
            value: 0.0,
            grad_logits: input
                .variants
                .iter()
                .map(|(l, v)| (*l, Matrix::zeros(v.logits.rows(), v.logits.cols())))
                .collect(),
            grad_hidden: input
                .variants
                .iter()
                .map(|(l, v)| (*l, Matrix::zeros(v.hidden.rows(), v.hidden.cols())))
                .collect(),
            grad_negatives: vec![vec![0.0; dim]; negatives],
        }
    }
}

/// Cross-entropy of the original plus every present perturbed variant.
pub fn consistency_loss(input: &LossInput) -> Result<LossOutput, KernelError> {
    input.validate()?;
    let mut out = LossOutput::zeros(input, 0);
    for (level, v) in &input.variants {
        let (value, grad) = ar_cross_entropy(&v.logits, &v.targets)?;
        out.value += value;
        out.grad_logits.insert(*level, grad);
    }
    Ok(out)
}

/// InfoNCE over mean-pooled hidden states: the original is the anchor, the
/// perturbed variants are positives. Zero when no perturbed variant is present.
pub fn contrastive_loss(input: &LossInput, negatives: &[Vec<f64>]) -> Result<LossOutput, KernelError> {
    input.validate()?;
    let dim = input.original().hidden.cols();
    if let Some(n) = negatives.iter().find(|n| n.len() != dim) {
        return Err(KernelError::Shape(format!(
            "negative of width {} against hidden width {dim}",
            n.len()
        )));
    }
    let mut out = LossOutput::zeros(input, negatives.len());
    let positive_levels: Vec<PerturbationLevel> = input
        .variants
        .keys()
        .copied()
        .filter(|l| l.is_perturbed())
        .collect();
    if positive_levels.is_empty() {
        return Ok(out);
    }
    let anchor = mean_pool(&input.original().hidden)?;
    let positives: Vec<Vec<f64>> = positive_levels
        .iter()
        .map(|l| mean_pool(&input.variants[l].hidden))
        .collect::<Result<_, _>>()?;
    let nce = info_nce(&anchor, &positives, negatives, input.temperature)?;
    out.value = nce.value;
    out.grad_hidden.insert(
        PerturbationLevel::Original,
        mean_pool_backward(&nce.grad_anchor, input.original().hidden.rows()),
    );
    for (level, g) in positive_levels.iter().zip(&nce.grad_positives) {
        out.grad_hidden
            .insert(*level, mean_pool_backward(g, input.variants[level].hidden.rows()));
    }
    out.grad_negatives = nce.grad_negatives;
    Ok(out)
}

/// `(L_ctr + L_consistency) / 2` with averaged gradients.
pub fn total_loss(input: &LossInput, negatives: &[Vec<f64>]) -> Result<LossOutput, KernelError> {
    let cons = consistency_loss(input)?;
    let ctr = contrastive_loss(input, negatives)?;
    Ok(average(&ctr, &cons))
}

fn average(a: &LossOutput, b: &LossOutput) -> LossOutput {
    let combine = |x: &BTreeMap<PerturbationLevel, Matrix>, y: &BTreeMap<PerturbationLevel, Matrix>| {
        x.iter()
            .map(|(l, m)| {
                let mut sum = m.clone();
                sum.add_scaled(&y[l], 1.0);
                sum.scale(0.5);
                (*l, sum)
            })
            .collect()
    };
    let n = a.grad_negatives.len().max(b.grad_negatives.len());
    let grad_negatives = (0..n)
        .map(|j| {
            let (x, y) = (a.grad_negatives.get(j), b.grad_negatives.get(j));
            let dim = x.or(y).map_or(0, Vec::len);
            (0..dim)
                .map(|k| 0.5 * (x.map_or(0.0, |g| g[k]) + y.map_or(0.0, |g| g[k])))
                .collect()
        })
        .collect();
    LossOutput {
        value: 0.5 * (a.value + b.value),
        grad_logits: combine(&a.grad_logits, &b.grad_logits),
        grad_hidden: combine(&a.grad_hidden, &b.grad_hidden),
        grad_negatives,
    }
}
