use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::client::{AgentClient, ChatTransport, Exchange, Message, RateLimiter, Semaphore, TranscriptStore};
use super::config::{AgentRole, PipelineConfig, PipelineSettings, TranscriptMode};
use super::prompts::{Template, TemplateSet};
use super::rules::{item_seed, rule_word_perturb};
use super::PipelineError;
use crate::data::{
    is_yes_no, read_records, save_clusters, AnswerType, ClusterMember, PerturbationLevel,
    QuestionCluster, VqaItem,
};
use crate::scoring::normalize;

pub const RECORDS_FILE: &str = "pipeline.jsonl";
pub const CLUSTERS_FILE: &str = "clusters.jsonl";
pub const TRANSCRIPTS_DIR: &str = "transcripts";

/// One generated rewording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub level: PerturbationLevel,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSource {
    /// Local rule, no endpoint involved.
    Rule,
    /// Validating agent.
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub level: PerturbationLevel,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub source: VerdictSource,
}

impl Verdict {
    fn accept(level: PerturbationLevel, source: VerdictSource) -> Self {
        Verdict {
            level,
            accepted: true,
            reason: None,
            source,
        }
    }

    fn reject(level: PerturbationLevel, source: VerdictSource, reason: impl Into<String>) -> Self {
        Verdict {
            level,
            accepted: false,
            reason: Some(reason.into()),
            source,
        }
    }
}

/// Which stage produced a stored exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRef {
    pub stage: String,
    pub key: String,
}

/// Everything the pipeline learned about one item; one line of `pipeline.jsonl`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineRecord {
    pub item_id: String,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub reasoning: Option<String>,
    #[serde(default)]
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub verdicts: Vec<Verdict>,
    #[serde(default)]
    pub cluster: Option<QuestionCluster>,
    #[serde(default)]
    pub rejection: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub transcripts: Vec<TranscriptRef>,
}

impl PipelineRecord {
    fn new(item_id: &str) -> Self {
        PipelineRecord {
            item_id: item_id.to_string(),
            ..Default::default()
        }
    }

    /// Finished items are never sent to an endpoint again.
    pub fn is_final(&self) -> bool {
        self.cluster.is_some() || self.rejection.is_some()
    }

    fn note(&mut self, stage: impl Into<String>, exchange: &Exchange) {
        self.transcripts.push(TranscriptRef {
            stage: stage.into(),
            key: exchange.key.clone(),
        });
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub items: usize,
    /// Items finished by an earlier run and left untouched.
    pub resumed: usize,
    pub clusters: usize,
    /// `(item_id, reason)` for items that ended without a cluster.
    pub rejected: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

fn vars<'a>(pairs: &[(&'a str, &'a str)]) -> BTreeMap<&'a str, &'a str> {
    pairs.iter().copied().collect()
}

fn messages(t: &Template) -> Vec<Message> {
    let mut out = Vec::with_capacity(2);
    if let Some(system) = &t.system {
        out.push(Message::system(system.clone()));
    }
    out.push(Message::user(t.user.clone()));
    out
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        Some("tif" | "tiff") => "image/tiff",
        _ => "application/octet-stream",
    }
}

/// URL form of an item's image: remote URLs pass through, files become `data:` URLs.
pub fn image_url(image_ref: &str, image_root: &Path) -> Result<String, PipelineError> {
    if ["http://", "https://", "data:"]
        .iter()
        .any(|p| image_ref.starts_with(p))
    {
        return Ok(image_ref.to_string());
    }
    let path = image_root.join(image_ref);
    let bytes = std::fs::read(&path).map_err(|e| PipelineError::Io {
        path: path.clone(),
        source: e,
    })?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", mime_for(&path)))
}

pub fn run_caption(
    item: &VqaItem,
    image_url: &str,
    client: &AgentClient<'_>,
    templates: &TemplateSet,
) -> Result<Exchange, PipelineError> {
    let t = templates.get(client.config.template_id())?.render(&vars(&[
        ("question", &item.question),
        ("answer", &item.gold_answer),
    ]));
    let mut msgs = Vec::new();
    if let Some(system) = t.system {
        msgs.push(Message::system(system));
    }
    msgs.push(Message::user_with_image(t.user, image_url));
    client.chat(&msgs)
}

pub fn run_reasoning(
    caption: &str,
    item: &VqaItem,
    client: &AgentClient<'_>,
    templates: &TemplateSet,
) -> Result<Exchange, PipelineError> {
    if caption.trim().is_empty() {
        return Err(PipelineError::EmptyResponse {
            role: AgentRole::Caption,
        });
    }
    let t = templates.get(client.config.template_id())?.render(&vars(&[
        ("question", &item.question),
        ("answer", &item.gold_answer),
        ("caption", caption),
    ]));
    client.chat(&messages(&t))
}

/// Reads the three tagged variants out of a meta-agent reply.
///
/// The reply must contain a JSON object with keys `word`, `sentence` and
/// `semantic`; each value is a question string or `{"question", "answer"}`.
/// Text around the object (prose, code fences) is ignored.
pub fn parse_variants(reply: &str, item: &VqaItem) -> Result<Vec<Candidate>, String> {
    let (Some(start), Some(end)) = (reply.find('{'), reply.rfind('}')) else {
        return Err("no JSON object in reply".into());
    };
    if end < start {
        return Err("no JSON object in reply".into());
    }
    let value: Value =
        serde_json::from_str(&reply[start..=end]).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("reply is not a JSON object")?;
    let mut out = Vec::with_capacity(3);
    for level in PerturbationLevel::PERTURBED {
        let entry = obj
            .get(level.as_str())
            .ok_or_else(|| format!("missing `{level}` variant"))?;
        let (question, answer) = match entry {
            Value::String(q) => (q.as_str(), None),
            Value::Object(o) => (
                o.get("question")
                    .and_then(Value::as_str)
                    .ok_or_else(|| format!("`{level}` variant has no question string"))?,
                o.get("answer").and_then(Value::as_str),
            ),
            _ => return Err(format!("`{level}` variant is neither a string nor an object")),
        };
        if question.trim().is_empty() {
            return Err(format!("`{level}` variant question is empty"));
        }
        let answer = answer
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .unwrap_or(&item.gold_answer);
        out.push(Candidate {
            level,
            question: question.trim().to_string(),
            answer: answer.to_string(),
        });
    }
    Ok(out)
}

/// Asks the meta agent for three variants, re-prompting once with a format reminder.
pub fn run_meta_generate(
    caption: &str,
    reasoning: &str,
    item: &VqaItem,
    client: &AgentClient<'_>,
    templates: &TemplateSet,
    reminder_template: &str,
) -> Result<(Vec<Candidate>, Vec<TranscriptRef>), PipelineError> {
    let t = templates.get(client.config.template_id())?.render(&vars(&[
        ("question", &item.question),
        ("answer", &item.gold_answer),
        ("caption", caption),
        ("reasoning", reasoning),
    ]));
    let mut msgs = messages(&t);
    let first = client.chat(&msgs)?;
    let mut refs = vec![TranscriptRef {
        stage: "meta".into(),
        key: first.key.clone(),
    }];
    let message = match parse_variants(&first.text, item) {
        Ok(c) => return Ok((c, refs)),
        Err(m) => m,
    };
    let reminder = templates.get(reminder_template)?.render(&vars(&[
        ("question", &item.question),
        ("answer", &item.gold_answer),
        ("problem", &message),
    ]));
    msgs.push(Message::assistant(first.text));
    msgs.push(Message::user(reminder.user));
    let second = client.chat(&msgs)?;
    refs.push(TranscriptRef {
        stage: "meta_retry".into(),
        key: second.key.clone(),
    });
    match parse_variants(&second.text, item) {
        Ok(c) => Ok((c, refs)),
        Err(message) => Err(PipelineError::Unparseable {
            item_id: item.item_id.clone(),
            message,
        }),
    }
}

/// Verdicts from local rules alone; `None` means the variant needs the agent.
pub fn rule_verdicts(
    item: &VqaItem,
    candidates: &[Candidate],
    allow_reworded_answers: bool,
) -> Vec<Option<Verdict>> {
    let original = normalize(&item.question).joined();
    let mut seen: Vec<(String, PerturbationLevel)> = Vec::new();
    candidates
        .iter()
        .map(|c| {
            let norm = normalize(&c.question).joined();
            let reject = |reason: String| Some(Verdict::reject(c.level, VerdictSource::Rule, reason));
            let verdict = if norm.is_empty() {
                reject("question is empty after normalization".into())
            } else if norm == original {
                reject("identical to the original question".into())
            } else if let Some((_, level)) = seen.iter().find(|(q, _)| *q == norm) {
                reject(format!("duplicate of the {level} variant"))
            } else if allow_reworded_answers
                && item.answer_type == AnswerType::Closed
                && !is_yes_no(&c.answer)
            {
                reject(format!("closed question needs a yes/no answer, got `{}`", c.answer))
            } else {
                None
            };
            seen.push((norm, c.level));
            verdict
        })
        .collect()
}

/// First word of a validator reply decides; anything after REJECT is the reason.
pub fn parse_verdict(level: PerturbationLevel, reply: &str) -> Verdict {
    let trimmed = reply.trim();
    let word_end = trimmed
        .find(|c: char| !c.is_alphabetic())
        .unwrap_or(trimmed.len());
    let rest = trimmed[word_end..]
        .trim_start_matches(|c: char| c.is_whitespace() || ":-.,".contains(c))
        .trim();
    match trimmed[..word_end].to_lowercase().as_str() {
        "accept" | "accepted" => Verdict::accept(level, VerdictSource::Agent),
        "reject" | "rejected" => Verdict::reject(
            level,
            VerdictSource::Agent,
            if rest.is_empty() { "rejected by validator" } else { rest },
        ),
        _ => {
            let mut shown = trimmed.to_string();
            shown.truncate(80);
            Verdict::reject(level, VerdictSource::Agent, format!("unrecognized verdict `{shown}`"))
        }
    }
}

/// Local rules first, then the validating agent for every survivor.
pub fn run_validation(
    item: &VqaItem,
    candidates: &[Candidate],
    client: &AgentClient<'_>,
    templates: &TemplateSet,
    template_id: &str,
    allow_reworded_answers: bool,
) -> Result<(Vec<Verdict>, Vec<TranscriptRef>), PipelineError> {
    let template = templates.get(template_id)?;
    let mut verdicts = Vec::with_capacity(candidates.len());
    let mut refs = Vec::new();
    for (c, rule) in candidates
        .iter()
        .zip(rule_verdicts(item, candidates, allow_reworded_answers))
    {
        if let Some(v) = rule {
            verdicts.push(v);
            continue;
        }
        let t = template.render(&vars(&[
            ("question", &item.question),
            ("answer", &item.gold_answer),
            ("level", c.level.as_str()),
            ("variant", &c.question),
            ("variant_answer", &c.answer),
        ]));
        let exchange = client.chat(&messages(&t))?;
        refs.push(TranscriptRef {
            stage: format!("validation:{}", c.level),
            key: exchange.key.clone(),
        });
        verdicts.push(parse_verdict(c.level, &exchange.text));
    }
    Ok((verdicts, refs))
}

/// Builds the cluster from accepted variants only.
///
/// Returns the cluster or a rejection reason, plus warnings for dropped levels.
pub fn assemble_cluster(
    item: &VqaItem,
    candidates: &[Candidate],
    verdicts: &[Verdict],
    allow_reworded_answers: bool,
) -> (Result<QuestionCluster, String>, Vec<String>) {
    let mut members = vec![ClusterMember {
        level: PerturbationLevel::Original,
        question: item.question.clone(),
        gold_answer: item.gold_answer.clone(),
    }];
    let mut warnings = Vec::new();
    for c in candidates {
        match verdicts.iter().find(|v| v.level == c.level) {
            Some(v) if v.accepted => members.push(ClusterMember {
                level: c.level,
                question: c.question.clone(),
                gold_answer: if allow_reworded_answers {
                    c.answer.clone()
                } else {
                    item.gold_answer.clone()
                },
            }),
            Some(v) => warnings.push(format!(
                "{}: {} variant rejected: {}",
                item.item_id,
                c.level,
                v.reason.as_deref().unwrap_or("no reason given")
            )),
            None => warnings.push(format!("{}: {} variant has no verdict", item.item_id, c.level)),
        }
    }
    if members.len() == 1 {
        return (Err("no variant passed validation".into()), warnings);
    }
    let cluster = QuestionCluster {
        cluster_id: item.item_id.clone(),
        image_ref: item.image_ref.clone(),
        answer_type: item.answer_type,
        members,
    };
    match cluster.validate() {
        Ok(()) => (Ok(cluster), warnings),
        Err((field, msg)) => (Err(format!("invalid cluster ({field}): {msg}")), warnings),
    }
}

fn finish(record: &mut PipelineRecord, item: &VqaItem, allow_reworded_answers: bool) {
    let (result, warnings) =
        assemble_cluster(item, &record.candidates, &record.verdicts, allow_reworded_answers);
    record.warnings = warnings;
    match result {
        Ok(c) => record.cluster = Some(c),
        Err(reason) => record.rejection = Some(reason),
    }
}

/// Agent-backed cluster construction over a fixed configuration.
pub struct Pipeline {
    settings: PipelineSettings,
    caption: super::AgentConfig,
    reasoning: super::AgentConfig,
    meta: super::AgentConfig,
    transport: Box<dyn ChatTransport>,
    templates: TemplateSet,
    limiters: HashMap<String, RateLimiter>,
    slots: [Semaphore; 3],
    store: Option<TranscriptStore>,
    image_root: PathBuf,
}

impl Pipeline {
    /// `transcripts` and `image_root` default to `<out_dir>/transcripts` and
    /// the working directory when unset in the settings.
    pub fn new(
        config: PipelineConfig,
        transport: Box<dyn ChatTransport>,
        out_dir: &Path,
    ) -> Result<Self, PipelineError> {
        let templates = match &config.settings.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::builtin(),
        };
        for agent in config.agents() {
            templates.get(agent.template_id())?;
        }
        templates.get(config.settings.validation_template.as_deref().unwrap_or("validation"))?;
        templates.get(config.settings.reminder_template.as_deref().unwrap_or("meta_reminder"))?;

        let mut rates: HashMap<String, f64> = HashMap::new();
        for agent in config.agents() {
            let rate = rates.entry(agent.endpoint.clone()).or_insert(agent.rate_limit);
            *rate = rate.min(agent.rate_limit);
        }
        let limiters = rates
            .into_iter()
            .map(|(endpoint, rate)| (endpoint, RateLimiter::new(rate)))
            .collect();
        let store = match config.settings.transcript_mode {
            TranscriptMode::Live => None,
            _ => Some(TranscriptStore::new(
                config
                    .settings
                    .transcripts
                    .clone()
                    .unwrap_or_else(|| out_dir.join(TRANSCRIPTS_DIR)),
            )),
        };
        let image_root = config.settings.image_root.clone().unwrap_or_default();
        Ok(Pipeline {
            slots: [
                Semaphore::new(config.caption.max_in_flight),
                Semaphore::new(config.reasoning.max_in_flight),
                Semaphore::new(config.meta.max_in_flight),
            ],
            settings: config.settings,
            caption: config.caption,
            reasoning: config.reasoning,
            meta: config.meta,
            transport,
            templates,
            limiters,
            store,
            image_root,
        })
    }

    pub fn client(&self, role: AgentRole) -> AgentClient<'_> {
        let (config, slots) = match role {
            AgentRole::Caption => (&self.caption, &self.slots[0]),
            AgentRole::Reasoning => (&self.reasoning, &self.slots[1]),
            AgentRole::Meta => (&self.meta, &self.slots[2]),
        };
        AgentClient {
            config,
            transport: self.transport.as_ref(),
            limiter: &self.limiters[&config.endpoint],
            slots,
            store: self.store.as_ref(),
            mode: self.settings.transcript_mode,
        }
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    /// Runs every stage still missing from `prior` for one item.
    ///
    /// The returned record carries whatever was completed, even on error.
    pub fn process_item(
        &self,
        item: &VqaItem,
        prior: Option<&PipelineRecord>,
    ) -> (PipelineRecord, Option<PipelineError>) {
        let mut record = PipelineRecord::new(&item.item_id);
        if let Some(p) = prior {
            record.caption = p.caption.clone();
            record.reasoning = p.reasoning.clone();
            record.transcripts = p
                .transcripts
                .iter()
                .filter(|t| t.stage == "caption" || t.stage == "reasoning")
                .cloned()
                .collect();
        }
        match self.stages(item, &mut record) {
            Ok(()) => (record, None),
            Err(PipelineError::Unparseable { message, .. }) => {
                record.rejection = Some(format!("meta reply unparseable after re-prompt: {message}"));
                (record, None)
            }
            Err(e) => {
                record.error = Some(e.to_string());
                (record, Some(e))
            }
        }
    }

    fn stages(&self, item: &VqaItem, record: &mut PipelineRecord) -> Result<(), PipelineError> {
        if record.caption.is_none() {
            let url = image_url(&item.image_ref, &self.image_root)?;
            let ex = run_caption(item, &url, &self.client(AgentRole::Caption), &self.templates)?;
            record.note("caption", &ex);
            record.caption = Some(ex.text);
        }
        let caption = record.caption.clone().unwrap_or_default();
        if record.reasoning.is_none() {
            let ex = run_reasoning(&caption, item, &self.client(AgentRole::Reasoning), &self.templates)?;
            record.note("reasoning", &ex);
            record.reasoning = Some(ex.text);
        }
        let reasoning = record.reasoning.clone().unwrap_or_default();
        let meta = self.client(AgentRole::Meta);
        let reminder = self.settings.reminder_template.as_deref().unwrap_or("meta_reminder");
        let (candidates, refs) =
            run_meta_generate(&caption, &reasoning, item, &meta, &self.templates, reminder)?;
        record.transcripts.extend(refs);
        record.candidates = candidates;
        let validation = self.settings.validation_template.as_deref().unwrap_or("validation");
        let allow = self.settings.allow_reworded_answers;
        let (verdicts, refs) =
            run_validation(item, &record.candidates, &meta, &self.templates, validation, allow)?;
        record.transcripts.extend(refs);
        record.verdicts = verdicts;
        finish(record, item, allow);
        Ok(())
    }

    /// Processes `items` into `out_dir`, resuming from an existing record file.
    pub fn run(&self, items: &[VqaItem], out_dir: &Path) -> Result<RunSummary, PipelineError> {
        drive(items, out_dir, self.settings.concurrency, |item, prior| {
            self.process_item(item, prior)
        })
    }
}

/// Word-level clusters from [`rule_word_perturb`] alone; no endpoints.
pub fn offline_record(item: &VqaItem, seed: u64) -> PipelineRecord {
    let mut record = PipelineRecord::new(&item.item_id);
    match rule_word_perturb(&item.question, item_seed(seed, &item.item_id)) {
        Ok(question) => {
            record.candidates = vec![Candidate {
                level: PerturbationLevel::Word,
                question,
                answer: item.gold_answer.clone(),
            }];
            record.verdicts = rule_verdicts(item, &record.candidates, false)
                .into_iter()
                .zip(&record.candidates)
                .map(|(v, c)| v.unwrap_or_else(|| Verdict::accept(c.level, VerdictSource::Rule)))
                .collect();
            finish(&mut record, item, false);
        }
        Err(e) => record.rejection = Some(e.to_string()),
    }
    record
}

pub fn run_offline(
    items: &[VqaItem],
    out_dir: &Path,
    seed: u64,
) -> Result<RunSummary, PipelineError> {
    drive(items, out_dir, 1, |item, _| (offline_record(item, seed), None))
}

/// Last record per item from an existing record file.
pub fn load_records(path: &Path) -> Result<HashMap<String, PipelineRecord>, PipelineError> {
    if !path.exists() {
        return Ok(HashMap::new());
    }
    Ok(read_records::<PipelineRecord>(path)?
        .into_iter()
        .map(|(_, r)| (r.item_id.clone(), r))
        .collect())
}

struct RecordWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl RecordWriter {
    fn open(path: &Path) -> Result<Self, PipelineError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PipelineError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        Ok(RecordWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    fn append(&mut self, record: &PipelineRecord) -> Result<(), PipelineError> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| PipelineError::Io {
                path: self.path.clone(),
                source: e,
            })
    }
}

type Outcome = (PipelineRecord, Option<PipelineError>);

/// Shared driver: workers process pending items, one writer appends records in
/// item order, then the cluster file is rebuilt from the final records.
fn drive<F>(items: &[VqaItem], out_dir: &Path, workers: usize, work: F) -> Result<RunSummary, PipelineError>
where
    F: Fn(&VqaItem, Option<&PipelineRecord>) -> Outcome + Sync,
{
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let records_path = out_dir.join(RECORDS_FILE);
    let mut records = load_records(&records_path)?;
    let pending: Vec<usize> = (0..items.len())
        .filter(|&i| !records.get(&items[i].item_id).is_some_and(PipelineRecord::is_final))
        .collect();
    let mut summary = RunSummary {
        items: items.len(),
        resumed: items.len() - pending.len(),
        ..Default::default()
    };

    let mut writer = RecordWriter::open(&records_path)?;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut first_error: Option<(usize, PipelineError)> = None;
    let mut write_error: Option<PipelineError> = None;
    let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
    let prior = &records;
    let written = thread::scope(|s| {
        for _ in 0..workers.max(1).min(pending.len().max(1)) {
            let tx = tx.clone();
            let (next, stop, pending, work) = (&next, &stop, &pending, &work);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&idx) = pending.get(slot) else { break };
                let item = &items[idx];
                let outcome = work(item, prior.get(&item.item_id));
                if outcome.1.is_some() {
                    stop.store(true, Ordering::SeqCst);
                }
                if tx.send((slot, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffered: BTreeMap<usize, Outcome> = BTreeMap::new();
        let mut want = 0;
        let mut emit = |slot: usize, (record, err): Outcome, written: &mut Vec<(usize, PipelineRecord)>| {
            if write_error.is_none() {
                if let Err(e) = writer.append(&record) {
                    write_error = Some(e);
                    stop.store(true, Ordering::SeqCst);
                }
            }
            if let Some(e) = err {
                if first_error.as_ref().is_none_or(|(s, _)| slot < *s) {
                    first_error = Some((slot, e));
                }
            }
            written.push((slot, record));
        };
        let mut written = Vec::new();
        for (slot, outcome) in rx {
            buffered.insert(slot, outcome);
            while let Some(outcome) = buffered.remove(&want) {
                emit(want, outcome, &mut written);
                want += 1;
            }
        }
        for (slot, outcome) in std::mem::take(&mut buffered) {
            emit(slot, outcome, &mut written);
        }
        written
    });
    for (_, record) in written {
        records.insert(record.item_id.clone(), record);
    }

    let mut clusters = Vec::new();
    for item in items {
        let Some(record) = records.get(&item.item_id) else {
            continue;
        };
        summary.warnings.extend(record.warnings.iter().cloned());
        if let Some(c) = &record.cluster {
            clusters.push(c.clone());
        } else if let Some(reason) = &record.rejection {
            summary.rejected.push((item.item_id.clone(), reason.clone()));
        }
    }
    summary.clusters = clusters.len();
    save_clusters(&clusters, out_dir.join(CLUSTERS_FILE))?;
    if let Some(e) = write_error {
        return Err(e);
    }
    if let Some((_, e)) = first_error {
        return Err(e);
    }
    Ok(summary)
}
