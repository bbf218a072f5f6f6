//! A tiny differentiable model trained on synthetic question clusters.
//!
//! Each concept has a pool of synonym tokens. Original questions use the
//! two canonical synonyms; perturbed variants swap in the others, with the
//! semantic level replacing both. The model mean-pools token embeddings and
//! projects the pooled vector onto the answer vocabulary, so hidden states
//! feed both the answer logits and the contrastive embedding.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnswerType, ClusterMember, PerturbationLevel, Prediction, QuestionCluster};
use crate::kernel::{
    ar_cross_entropy, consistency_loss, contrastive_loss, mean_pool, total_loss, KernelError,
    LossInput, LossOutput, Matrix, VariantInput, DEFAULT_TEMPERATURE,
};
use crate::metrics::{self, ClusterScore, RobustnessReport};
use crate::scoring::{self, ScoringOutcome};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid task: {0}")]
    Task(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const ANSWER_WORDS: [&str; 10] = [
    "yes", "no", "left", "right", "lung", "liver", "heart", "kidney", "brain", "spleen",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub concepts: usize,
    /// Surface forms per concept in each split; a multiple of 4.
    pub surface_forms: usize,
    pub synonyms: usize,
    pub style_tokens: usize,
    pub answer_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            concepts: 8,
            surface_forms: 4,
            synonyms: 4,
            style_tokens: 6,
            answer_vocab: 6,
            seed: 0,
        }
    }
}

impl SyntheticTask {
    pub fn input_vocab(&self) -> usize {
        self.concepts * self.synonyms + self.style_tokens
    }

    fn validate(&self) -> Result<(), ToyError> {
        if self.concepts < 2 {
            return Err(ToyError::Task(format!("need at least 2 concepts, got {}", self.concepts)));
        }
        if self.answer_vocab < 2 {
            return Err(ToyError::Task(format!(
                "need at least 2 answers, got {}",
                self.answer_vocab
            )));
        }
        if self.surface_forms < 4 || !self.surface_forms.is_multiple_of(4) {
            return Err(ToyError::Task(format!(
                "surface forms must be a positive multiple of 4, got {}",
                self.surface_forms
            )));
        }
        if self.synonyms < 4 {
            return Err(ToyError::Task("need at least 4 synonyms per concept".into()));
        }
        if self.style_tokens < 3 {
            return Err(ToyError::Task("need at least 3 style tokens".into()));
        }
        Ok(())
    }
}

/// A cluster with its token ids per level.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCluster {
    pub cluster: QuestionCluster,
    pub concept: usize,
    pub answer: usize,
    pub forms: BTreeMap<PerturbationLevel, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub task: SyntheticTask,
    pub tokens: Vec<String>,
    pub answers: Vec<String>,
    pub train: Vec<ToyCluster>,
    pub test: Vec<ToyCluster>,
}

impl ToyDataset {
    pub fn test_clusters(&self) -> Vec<QuestionCluster> {
        self.test.iter().map(|c| c.cluster.clone()).collect()
    }
}

fn answer_word(k: usize) -> String {
    ANSWER_WORDS
        .get(k)
        .map_or_else(|| format!("answer{k}"), |w| (*w).to_owned())
}

/// Builds disjoint train and test clusters. Deterministic in `task.seed`.
pub fn gen_synthetic(task: &SyntheticTask) -> Result<ToyDataset, ToyError> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let syn = |c: usize, k: usize| c * task.synonyms + k;
    let style_base = task.concepts * task.synonyms;

    let mut tokens = Vec::with_capacity(task.input_vocab());
    for c in 0..task.concepts {
        for k in 0..task.synonyms {
            tokens.push(format!("c{c}s{k}"));
        }
    }
    for s in 0..task.style_tokens {
        tokens.push(format!("w{s}"));
    }
    let answers: Vec<String> = (0..task.answer_vocab).map(answer_word).collect();

    let mut concept_answer: Vec<usize> = (0..task.concepts).map(|c| c % task.answer_vocab).collect();
    concept_answer.shuffle(&mut rng);

    let clusters_per_split = task.surface_forms / 4;
    let mut used: HashSet<Vec<usize>> = HashSet::new();
    let draw_styles = |rng: &mut ChaCha8Rng| -> [usize; 2] {
        let a = rng.random_range(0..task.style_tokens);
        let mut b = rng.random_range(0..task.style_tokens - 1);
        if b >= a {
            b += 1;
        }
        [style_base + a, style_base + b]
    };
    let draw_alt = |rng: &mut ChaCha8Rng, avoid: usize| -> usize {
        loop {
            let k = rng.random_range(2..task.synonyms);
            if k != avoid {
                return k;
            }
        }
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for split in 0..2 {
        for (c, &answer) in concept_answer.iter().enumerate() {
            for n in 0..clusters_per_split {
                let mut attempt = 0;
                let forms = loop {
                    attempt += 1;
                    if attempt > 1000 {
                        return Err(ToyError::Task(
                            "not enough distinct surface forms; raise synonyms or style tokens".into(),
                        ));
                    }
                    let near = draw_styles(&mut rng);
                    let far = draw_styles(&mut rng);
                    let i = draw_alt(&mut rng, usize::MAX);
                    let j = draw_alt(&mut rng, i);
                    let candidate = BTreeMap::from([
                        (PerturbationLevel::Original, vec![syn(c, 0), syn(c, 1), near[0], near[1]]),
                        (PerturbationLevel::Word, vec![syn(c, 0), syn(c, i), near[0], near[1]]),
                        (PerturbationLevel::Sentence, vec![syn(c, j), syn(c, 1), far[0], far[1]]),
                        (PerturbationLevel::Semantic, vec![syn(c, i), syn(c, j), far[1], far[0]]),
                    ]);
                    let keys: Vec<Vec<usize>> = candidate
                        .values()
                        .map(|f| {
                            let mut k = f.clone();
                            k.sort_unstable();
                            k
                        })
                        .collect();
                    let distinct: HashSet<_> = keys.iter().collect();
                    if distinct.len() == 4 && keys.iter().all(|k| !used.contains(k)) {
                        used.extend(keys);
                        break candidate;
                    }
                };
                let gold = answers[answer].clone();
                let answer_type = if matches!(gold.as_str(), "yes" | "no") {
                    AnswerType::Closed
                } else {
                    AnswerType::Open
                };
                let name = if split == 0 { "train" } else { "test" };
                let cluster = QuestionCluster {
                    cluster_id: format!("{name}-c{c}-{n}"),
                    image_ref: format!("synthetic/{c}"),
                    answer_type,
                    members: forms
                        .iter()
                        .map(|(level, toks)| ClusterMember {
                            level: *level,
                            question: toks.iter().map(|t| tokens[*t].as_str()).collect::<Vec<_>>().join(" "),
                            gold_answer: gold.clone(),
                        })
                        .collect(),
                };
                let tc = ToyCluster {
                    cluster,
                    concept: c,
                    answer,
                    forms,
                };
                if split == 0 {
                    train.push(tc);
                } else {
                    test.push(tc);
                }
            }
        }
    }
    Ok(ToyDataset {
        task: task.clone(),
        tokens,
        answers,
        train,
        test,
    })
}

/// Token embedding table followed by mean pooling and a linear answer head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub embedding: Matrix,
    pub projection: Matrix,
}

impl ToyModel {
    pub fn new(input_vocab: usize, dim: usize, answer_vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let emb_scale = 1.0 / (dim as f64).sqrt();
        let embedding = Matrix::new(input_vocab, dim, draw(input_vocab * dim, emb_scale))
            .expect("finite initial embedding");
        let projection = Matrix::new(dim, answer_vocab, draw(dim * answer_vocab, 0.1))
            .expect("finite initial projection");
        ToyModel {
            embedding,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden(&self, tokens: &[usize]) -> Matrix {
        let rows: Vec<Vec<f64>> = tokens.iter().map(|t| self.embedding.row(*t).to_vec()).collect();
        Matrix::from_rows(&rows).expect("token sequence is nonempty")
    }

    fn logits_from_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        let v = self.projection.cols();
        let mut out = vec![0.0; v];
        for (d, h) in pooled.iter().enumerate() {
            out.iter_mut()
                .zip(self.projection.row(d))
                .for_each(|(o, w)| *o += h * w);
        }
        out
    }

    pub fn logits(&self, tokens: &[usize]) -> Vec<f64> {
        let pooled = mean_pool(&self.hidden(tokens)).expect("nonempty");
        self.logits_from_pooled(&pooled)
    }

    /// Argmax answer id; ties go to the lowest id.
    pub fn predict(&self, tokens: &[usize]) -> usize {
        let logits = self.logits(tokens);
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    }

    fn all_finite(&self) -> bool {
        self.embedding
            .data()
            .iter()
            .chain(self.projection.data())
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Original questions only.
    Sft,
    /// Cross-entropy over every variant.
    Consistency,
    /// Original cross-entropy plus InfoNCE.
    Contrastive,
    /// Average of the consistency and contrastive losses.
    Ccl,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Sft,
        TrainMode::Consistency,
        TrainMode::Contrastive,
        TrainMode::Ccl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Sft => "sft",
            TrainMode::Consistency => "consistency",
            TrainMode::Contrastive => "contrastive",
            TrainMode::Ccl => "ccl",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = ToyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ToyError::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub steps: usize,
    /// Clusters per step; 0 means the full training set.
    pub batch_size: usize,
    pub temperature: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Ccl,
            learning_rate: 0.5,
            steps: 500,
            batch_size: 0,
            temperature: DEFAULT_TEMPERATURE,
            dim: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ToyError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ToyError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ToyError::Config(format!("temperature {}", self.temperature)));
        }
        if self.dim == 0 {
            return Err(ToyError::Config("dim must be positive".into()));
        }
        Ok(())
    }
}

/// Task and training settings read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToySettings {
    pub task: SyntheticTask,
    pub train: TrainConfig,
}

impl ToySettings {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ToyError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ToyError> {
            value
                .parse()
                .map_err(|_| ToyError::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "mode" => self.train.mode = value.parse()?,
            "lr" | "learning_rate" => self.train.learning_rate = num(key, value)?,
            "steps" => self.train.steps = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "temperature" | "tau" => self.train.temperature = num(key, value)?,
            "dim" => self.train.dim = num(key, value)?,
            "seed" => {
                let seed = num(key, value)?;
                self.train.seed = seed;
                self.task.seed = seed;
            }
            "concepts" => self.task.concepts = num(key, value)?,
            "surface_forms" => self.task.surface_forms = num(key, value)?,
            "synonyms" => self.task.synonyms = num(key, value)?,
            "style_tokens" => self.task.style_tokens = num(key, value)?,
            "answer_vocab" => self.task.answer_vocab = num(key, value)?,
            other => return Err(ToyError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ToyError> {
        let mut s = ToySettings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ToyError::Config(format!("line {}: expected key = value", n + 1)))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ToyError> {
        let text = std::fs::read_to_string(path).map_err(|source| ToyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// Loss of one cluster under `mode`, as a kernel [`LossOutput`].
fn cluster_loss(
    model: &ToyModel,
    cluster: &ToyCluster,
    negatives: &[Vec<f64>],
    mode: TrainMode,
    temperature: f64,
) -> Result<(LossInput, LossOutput), KernelError> {
    let levels: Vec<PerturbationLevel> = match mode {
        TrainMode::Sft => vec![PerturbationLevel::Original],
        _ => cluster.forms.keys().copied().collect(),
    };
    let mut variants = BTreeMap::new();
    for level in levels {
        let toks = &cluster.forms[&level];
        let hidden = model.hidden(toks);
        let logits = model.logits_from_pooled(&mean_pool(&hidden)?);
        variants.insert(
            level,
            VariantInput {
                logits: Matrix::new(1, logits.len(), logits)?,
                targets: vec![cluster.answer],
                hidden,
            },
        );
    }
    let input = LossInput::new(variants, model.projection.cols(), temperature)?;
    let out = match mode {
        TrainMode::Sft | TrainMode::Consistency => consistency_loss(&input)?,
        TrainMode::Ccl => total_loss(&input, negatives)?,
        TrainMode::Contrastive => {
            let mut out = contrastive_loss(&input, negatives)?;
            let original = &input.variants[&PerturbationLevel::Original];
            let (ce, grad) = ar_cross_entropy(&original.logits, &original.targets)?;
            out.value += ce;
            out.grad_logits.insert(PerturbationLevel::Original, grad);
            out
        }
    };
    Ok((input, out))
}

#[derive(Debug, Clone, PartialEq)]
struct Gradients {
    embedding: Matrix,
    projection: Matrix,
}

/// Mean loss over `batch` and its parameter gradients.
fn batch_loss(
    model: &ToyModel,
    data: &[ToyCluster],
    batch: &[usize],
    mode: TrainMode,
    temperature: f64,
) -> Result<(f64, Gradients), KernelError> {
    let mut grads = Gradients {
        embedding: Matrix::zeros(model.embedding.rows(), model.embedding.cols()),
        projection: Matrix::zeros(model.projection.rows(), model.projection.cols()),
    };
    let use_negatives = matches!(mode, TrainMode::Contrastive | TrainMode::Ccl);
    let anchors: Vec<Vec<f64>> = if use_negatives {
        batch
            .iter()
            .map(|&i| mean_pool(&model.hidden(&data[i].forms[&PerturbationLevel::Original])))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;

    let mut backprop_hidden = |tokens: &[usize], grad: &Matrix, k: f64| {
        for (row, t) in grad.iter_rows().zip(tokens) {
            grads
                .embedding
                .row_mut(*t)
                .iter_mut()
                .zip(row)
                .for_each(|(g, v)| *g += k * v);
        }
    };

    for (pos, &i) in batch.iter().enumerate() {
        let cluster = &data[i];
        let neg_ids: Vec<usize> = if use_negatives {
            (0..batch.len()).filter(|&p| p != pos).collect()
        } else {
            Vec::new()
        };
        let negatives: Vec<Vec<f64>> = neg_ids.iter().map(|&p| anchors[p].clone()).collect();
        let (input, out) = cluster_loss(model, cluster, &negatives, mode, temperature)?;
        total += out.value * scale;

        for (level, variant) in &input.variants {
            let tokens = &cluster.forms[level];
            let pooled = mean_pool(&variant.hidden)?;
            let g_logits = out.grad_logits[level].row(0);
            // projection: d/dW = pooled^T g
            for (d, h) in pooled.iter().enumerate() {
                grads
                    .projection
                    .row_mut(d)
                    .iter_mut()
                    .zip(g_logits)
                    .for_each(|(g, v)| *g += scale * h * v);
            }
            // pooled: d/dh = W g, spread over rows
            let g_pooled: Vec<f64> = (0..model.dim())
                .map(|d| {
                    model
                        .projection
                        .row(d)
                        .iter()
                        .zip(g_logits)
                        .map(|(w, v)| w * v)
                        .sum()
                })
                .collect();
            let mut g_hidden = crate::kernel::mean_pool_backward(&g_pooled, tokens.len());
            g_hidden.add_scaled(&out.grad_hidden[level], 1.0);
            backprop_hidden(tokens, &g_hidden, scale);
        }
        for (&p, g) in neg_ids.iter().zip(&out.grad_negatives) {
            let tokens = &data[batch[p]].forms[&PerturbationLevel::Original];
            let g_hidden = crate::kernel::mean_pool_backward(g, tokens.len());
            backprop_hidden(tokens, &g_hidden, scale);
        }
    }
    Ok((total, grads))
}

/// Per-step training losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// `step,loss` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Plain gradient descent on `data.train`. Single-threaded and deterministic.
pub fn train(
    mut model: ToyModel,
    data: &ToyDataset,
    config: &TrainConfig,
) -> Result<(ToyModel, LossCurve), ToyError> {
    config.validate()?;
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let batch_size = if config.batch_size == 0 || config.batch_size >= n {
        n
    } else {
        config.batch_size
    };
    let mut curve = LossCurve::default();
    let mut cursor = 0;
    for step in 0..config.steps {
        let batch: Vec<usize> = (0..batch_size).map(|k| order[(cursor + k) % n]).collect();
        cursor = (cursor + batch_size) % n;
        let (loss, grads) = batch_loss(&model, &data.train, &batch, config.mode, config.temperature)?;
        if !loss.is_finite() {
            return Err(ToyError::NonFinite { step, what: "loss" });
        }
        curve.losses.push(loss);
        model.embedding.add_scaled(&grads.embedding, -config.learning_rate);
        model.projection.add_scaled(&grads.projection, -config.learning_rate);
        if !model.all_finite() {
            return Err(ToyError::NonFinite {
                step,
                what: "parameters",
            });
        }
    }
    Ok((model, curve))
}

/// Mean training loss of `model` over the full training set under `mode`.
pub fn train_loss(model: &ToyModel, data: &ToyDataset, mode: TrainMode, temperature: f64) -> Result<f64, ToyError> {
    let all: Vec<usize> = (0..data.train.len()).collect();
    Ok(batch_loss(model, &data.train, &all, mode, temperature)?.0)
}

/// Greedy answers for every member of `clusters`.
pub fn predict_clusters(model: &ToyModel, data: &ToyDataset, clusters: &[ToyCluster], model_id: &str) -> Vec<Prediction> {
    clusters
        .iter()
        .flat_map(|c| {
            c.forms.iter().map(move |(level, toks)| Prediction {
                cluster_id: c.cluster.cluster_id.clone(),
                level: *level,
                answer_text: data.answers[model.predict(toks)].clone(),
                model_id: model_id.to_owned(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: RobustnessReport,
    pub cluster_scores: Vec<ClusterScore>,
    /// Mean member score over all test members, in percent.
    pub accuracy: f64,
}

pub fn evaluate(model: &ToyModel, data: &ToyDataset, model_id: &str) -> Evaluation {
    let clusters = data.test_clusters();
    let preds = predict_clusters(model, data, &data.test, model_id);
    let outcome: ScoringOutcome =
        scoring::score_predictions(&clusters, &preds, model_id).expect("predictions match clusters");
    let (cluster_scores, report) =
        metrics::evaluate(model_id, &clusters, &outcome).expect("scores are consistent");
    let accuracy = outcome.scores.iter().map(|s| s.score).sum::<f64>() / outcome.scores.len() as f64 * 100.0;
    Evaluation {
        report,
        cluster_scores,
        accuracy,
    }
}

/// Greedy decoding on the test clusters, scored into a robustness report.
pub fn eval_consistency(model: &ToyModel, data: &ToyDataset, model_id: &str) -> RobustnessReport {
    evaluate(model, data, model_id).report
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub mode: TrainMode,
    pub seed: u64,
    pub curve: LossCurve,
    pub evaluation: Evaluation,
}

impl RunResult {
    pub fn mean_mad(&self) -> f64 {
        self.evaluation.report.consistency.mean_mad_percent.unwrap_or(0.0)
    }
}

/// Generates the task for `settings.task`, trains a fresh model and evaluates it.
pub fn run(settings: &ToySettings) -> Result<RunResult, ToyError> {
    let data = gen_synthetic(&settings.task)?;
    let cfg = &settings.train;
    let model = ToyModel::new(data.task.input_vocab(), cfg.dim, data.task.answer_vocab, cfg.seed);
    let (model, curve) = train(model, &data, cfg)?;
    let evaluation = evaluate(&model, &data, &format!("toy-{}-seed{}", cfg.mode, cfg.seed));
    Ok(RunResult {
        mode: cfg.mode,
        seed: cfg.seed,
        curve,
        evaluation,
    })
}

/// Runs every mode for every seed, seeding the task and the model alike.
pub fn run_grid(base: &ToySettings, modes: &[TrainMode], seeds: &[u64]) -> Result<Vec<RunResult>, ToyError> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &mode in modes {
            let mut s = base.clone();
            s.task.seed = seed;
            s.train.seed = seed;
            s.train.mode = mode;
            out.push(run(&s)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gradcheck::grad_check;

    fn small() -> SyntheticTask {
        SyntheticTask {
            seed: 5,
            ..SyntheticTask::default()
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        assert_eq!(gen_synthetic(&small()).unwrap(), gen_synthetic(&small()).unwrap());
        let other = gen_synthetic(&SyntheticTask { seed: 6, ..small() }).unwrap();
        assert_ne!(other, gen_synthetic(&small()).unwrap());
    }

    #[test]
    fn cluster_counts() {
        let d = gen_synthetic(&small()).unwrap();
        assert_eq!(d.train.len(), 8);
        assert_eq!(d.test.len(), 8);
        assert!(d.train.iter().chain(&d.test).all(|c| c.cluster.members.len() == 4));
        assert!(d.train.iter().chain(&d.test).all(|c| c.cluster.validate().is_ok()));
        let d = gen_synthetic(&SyntheticTask { surface_forms: 8, ..small() }).unwrap();
        assert_eq!(d.train.len(), 16);
    }

    #[test]
    fn splits_share_concepts_not_forms() {
        let d = gen_synthetic(&small()).unwrap();
        let forms = |cs: &[ToyCluster]| -> HashSet<Vec<usize>> {
            cs.iter()
                .flat_map(|c| c.forms.values())
                .map(|f| {
                    let mut f = f.clone();
                    f.sort_unstable();
                    f
                })
                .collect()
        };
        assert!(forms(&d.train).is_disjoint(&forms(&d.test)));
        let concepts = |cs: &[ToyCluster]| cs.iter().map(|c| c.concept).collect::<HashSet<_>>();
        assert_eq!(concepts(&d.train), concepts(&d.test));
    }

    #[test]
    fn degenerate_task_is_rejected() {
        assert!(matches!(
            gen_synthetic(&SyntheticTask { concepts: 1, ..small() }),
            Err(ToyError::Task(_))
        ));
        assert!(gen_synthetic(&SyntheticTask { answer_vocab: 1, ..small() }).is_err());
        assert!(gen_synthetic(&SyntheticTask { surface_forms: 6, ..small() }).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = gen_synthetic(&small()).unwrap();
        let model = ToyModel::new(d.task.input_vocab(), 8, d.task.answer_vocab, 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            steps: 5,
            ..TrainConfig::default()
        };
        let (trained, curve) = train(model.clone(), &d, &cfg).unwrap();
        assert_eq!(trained, model);
        assert_eq!(curve.losses.len(), 5);
    }

    #[test]
    fn identical_seeds_give_identical_curves() {
        let settings = ToySettings {
            train: TrainConfig {
                steps: 50,
                ..TrainConfig::default()
            },
            ..ToySettings::default()
        };
        let a = run(&settings).unwrap();
        let b = run(&settings).unwrap();
        let bits = |c: &LossCurve| c.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.curve), bits(&b.curve));
    }

    #[test]
    fn ccl_descends() {
        let r = run(&ToySettings::default()).unwrap();
        assert!(r.curve.last().unwrap() < r.curve.initial().unwrap());
    }

    /// Parameter gradients of the whole batch loss against finite differences.
    #[test]
    fn batch_gradients_match_finite_differences() {
        let d = gen_synthetic(&SyntheticTask {
            concepts: 3,
            ..small()
        })
        .unwrap();
        let model = ToyModel::new(d.task.input_vocab(), 4, d.task.answer_vocab, 2);
        let batch: Vec<usize> = (0..d.train.len()).collect();
        for mode in TrainMode::ALL {
            let (_, g) = batch_loss(&model, &d.train, &batch, mode, 0.5).unwrap();
            let mut x = model.embedding.data().to_vec();
            x.extend_from_slice(model.projection.data());
            let mut analytic = g.embedding.data().to_vec();
            analytic.extend_from_slice(g.projection.data());
            let ne = model.embedding.data().len();
            let err = grad_check(
                |p| {
                    let mut m = model.clone();
                    m.embedding.data_mut().copy_from_slice(&p[..ne]);
                    m.projection.data_mut().copy_from_slice(&p[ne..]);
                    Ok(batch_loss(&m, &d.train, &batch, mode, 0.5)?.0)
                },
                &x,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{mode}: {err}");
        }
    }

    #[test]
    fn settings_parse_and_precedence() {
        let s = ToySettings::parse("# comment\nmode = sft\nlr=0.1\nsteps = 7 # trailing\nseed=3\n").unwrap();
        assert_eq!(s.train.mode, TrainMode::Sft);
        assert_eq!(s.train.learning_rate, 0.1);
        assert_eq!(s.train.steps, 7);
        assert_eq!(s.task.seed, 3);
        assert!(ToySettings::parse("bogus = 1").is_err());
        assert!(ToySettings::parse("mode = fancy").is_err());
        assert!(ToySettings::parse("just words").is_err());
    }

    #[test]
    fn constant_model_is_consistent() {
        let d = gen_synthetic(&small()).unwrap();
        let mut model = ToyModel::new(d.task.input_vocab(), 4, d.task.answer_vocab, 0);
        // zero projection: every logit ties, argmax picks answer 0 for all
        model.projection = Matrix::zeros(4, d.task.answer_vocab);
        let ev = evaluate(&model, &d, "const");
        assert_eq!(ev.report.consistency.mean_mad_percent, Some(0.0));
        let expected = d.test.iter().filter(|c| c.answer == 0).count() as f64 / d.test.len() as f64 * 100.0;
        assert!((ev.accuracy - expected).abs() < 1e-9);
    }
}
