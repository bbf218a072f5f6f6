//! VQA items, question clusters and predictions, with line-delimited JSON
//! ingest and byte-stable persistence.
//!
//! Every file handled here is one JSON record per line, `\n`-terminated.
//! Field order on the wire follows struct declaration order.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::normalize;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate {kind} `{id}`")]
    Duplicate {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        id: String,
    },
    #[error("{path}:{line}: invalid field `{field}`: {message}")]
    Invalid {
        path: PathBuf,
        line: usize,
        field: &'static str,
        message: String,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Free-form (open) or yes/no (closed) question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Mri,
    #[serde(alias = "x-ray")]
    Xray,
    Pathology,
    Other,
}

/// Which rewording a cluster member carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationLevel {
    Original,
    Word,
    Sentence,
    Semantic,
}

impl PerturbationLevel {
    pub const ALL: [PerturbationLevel; 4] = [
        PerturbationLevel::Original,
        PerturbationLevel::Word,
        PerturbationLevel::Sentence,
        PerturbationLevel::Semantic,
    ];

    pub const PERTURBED: [PerturbationLevel; 3] = [
        PerturbationLevel::Word,
        PerturbationLevel::Sentence,
        PerturbationLevel::Semantic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationLevel::Original => "original",
            PerturbationLevel::Word => "word",
            PerturbationLevel::Sentence => "sentence",
            PerturbationLevel::Semantic => "semantic",
        }
    }

    pub fn is_perturbed(self) -> bool {
        self != PerturbationLevel::Original
    }
}

impl fmt::Display for PerturbationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PerturbationLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PerturbationLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown level `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaItem {
    pub item_id: String,
    pub image_ref: String,
    pub question: String,
    pub gold_answer: String,
    pub answer_type: AnswerType,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterMember {
    pub level: PerturbationLevel,
    pub question: String,
    pub gold_answer: String,
}

/// An original question plus its reworded variants over one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionCluster {
    pub cluster_id: String,
    pub image_ref: String,
    pub answer_type: AnswerType,
    pub members: Vec<ClusterMember>,
}

impl QuestionCluster {
    pub fn member(&self, level: PerturbationLevel) -> Option<&ClusterMember> {
        self.members.iter().find(|m| m.level == level)
    }

    pub fn missing_levels(&self) -> Vec<PerturbationLevel> {
        PerturbationLevel::PERTURBED
            .into_iter()
            .filter(|l| self.member(*l).is_none())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing_levels().is_empty()
    }

    /// Checks every structural invariant; returns the offending field and a message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.cluster_id.trim().is_empty() {
            return Err(("cluster_id", "must be nonempty".into()));
        }
        if self.members.is_empty() || self.members.len() > 4 {
            return Err((
                "members",
                format!("expected 1..=4 members, found {}", self.members.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for m in &self.members {
            if !seen.insert(m.level) {
                return Err(("members", format!("more than one `{}` member", m.level)));
            }
            if m.question.trim().is_empty() {
                return Err(("question", format!("empty question at level `{}`", m.level)));
            }
            if m.gold_answer.trim().is_empty() {
                return Err(("gold_answer", format!("empty answer at level `{}`", m.level)));
            }
            if self.answer_type == AnswerType::Closed && !is_yes_no(&m.gold_answer) {
                return Err((
                    "answer_type",
                    format!(
                        "closed cluster has non yes/no answer `{}` at level `{}`",
                        m.gold_answer, m.level
                    ),
                ));
            }
        }
        if !seen.contains(&PerturbationLevel::Original) {
            return Err(("members", "no `original` member".into()));
        }
        Ok(())
    }
}

/// A model's free-text answer for one cluster member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub cluster_id: String,
    pub level: PerturbationLevel,
    pub answer_text: String,
    pub model_id: String,
}

/// Non-fatal finding from [`load_clusters`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterWarning {
    pub cluster_id: String,
    pub line: usize,
    pub missing: Vec<PerturbationLevel>,
}

impl fmt::Display for ClusterWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let levels: Vec<_> = self.missing.iter().map(|l| l.as_str()).collect();
        write!(
            f,
            "line {}: cluster `{}` is incomplete (missing {})",
            self.line,
            self.cluster_id,
            levels.join(", ")
        )
    }
}

pub(crate) fn is_yes_no(answer: &str) -> bool {
    let norm = normalize(answer);
    norm.tokens.len() == 1 && matches!(norm.tokens[0].as_str(), "yes" | "no")
}

pub(crate) fn read_records<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<(usize, T)>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, record));
    }
    Ok(out)
}

pub(crate) fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize infallibly");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

fn validate_item(item: &VqaItem) -> Result<(), (&'static str, String)> {
    if item.item_id.trim().is_empty() {
        return Err(("item_id", "must be nonempty".into()));
    }
    if item.question.trim().is_empty() {
        return Err(("question", "must be nonempty".into()));
    }
    if item.gold_answer.trim().is_empty() {
        return Err(("gold_answer", "must be nonempty".into()));
    }
    if item.answer_type == AnswerType::Closed && !is_yes_no(&item.gold_answer) {
        return Err((
            "answer_type",
            format!(
                "closed item requires a yes/no gold answer, found `{}`",
                item.gold_answer
            ),
        ));
    }
    Ok(())
}

pub fn load_items(path: impl AsRef<Path>) -> Result<Vec<VqaItem>, DataError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (line, item) in read_records::<VqaItem>(path)? {
        validate_item(&item).map_err(|(field, message)| DataError::Invalid {
            path: path.to_path_buf(),
            line,
            field,
            message,
        })?;
        if !seen.insert(item.item_id.clone()) {
            return Err(DataError::Duplicate {
                path: path.to_path_buf(),
                line,
                kind: "item_id",
                id: item.item_id,
            });
        }
        items.push(item);
    }
    Ok(items)
}

pub fn save_items(items: &[VqaItem], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_records(path.as_ref(), items)
}

/// Loads and validates clusters. Incomplete clusters are returned along with a warning each.
pub fn load_clusters(
    path: impl AsRef<Path>,
) -> Result<(Vec<QuestionCluster>, Vec<ClusterWarning>), DataError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut clusters = Vec::new();
    let mut warnings = Vec::new();
    for (line, cluster) in read_records::<QuestionCluster>(path)? {
        cluster
            .validate()
            .map_err(|(field, message)| DataError::Invalid {
                path: path.to_path_buf(),
                line,
                field,
                message,
            })?;
        if !seen.insert(cluster.cluster_id.clone()) {
            return Err(DataError::Duplicate {
                path: path.to_path_buf(),
                line,
                kind: "cluster_id",
                id: cluster.cluster_id,
            });
        }
        let missing = cluster.missing_levels();
        if !missing.is_empty() {
            warnings.push(ClusterWarning {
                cluster_id: cluster.cluster_id.clone(),
                line,
                missing,
            });
        }
        clusters.push(cluster);
    }
    Ok((clusters, warnings))
}

pub fn save_clusters(clusters: &[QuestionCluster], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_records(path.as_ref(), clusters)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, DataError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut preds = Vec::new();
    for (line, p) in read_records::<Prediction>(path)? {
        let key = (p.cluster_id.clone(), p.level, p.model_id.clone());
        if !seen.insert(key) {
            return Err(DataError::Duplicate {
                path: path.to_path_buf(),
                line,
                kind: "prediction",
                id: format!("{}/{}/{}", p.cluster_id, p.level, p.model_id),
            });
        }
        preds.push(p);
    }
    Ok(preds)
}

pub fn write_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_records(path.as_ref(), preds)
}

/// Index of clusters by id, in id order.
pub fn cluster_index(clusters: &[QuestionCluster]) -> BTreeMap<&str, &QuestionCluster> {
    clusters.iter().map(|c| (c.cluster_id.as_str(), c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn member(level: PerturbationLevel, q: &str) -> ClusterMember {
        ClusterMember {
            level,
            question: q.into(),
            gold_answer: "left lung".into(),
        }
    }

    fn full_cluster(id: &str) -> QuestionCluster {
        QuestionCluster {
            cluster_id: id.into(),
            image_ref: "img/1.png".into(),
            answer_type: AnswerType::Open,
            members: vec![
                member(PerturbationLevel::Original, "where is the mass"),
                member(PerturbationLevel::Word, "where is the lesion"),
                member(PerturbationLevel::Sentence, "the mass is located where"),
                member(PerturbationLevel::Semantic, "which organ holds the mass"),
            ],
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_two_items() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "items.jsonl",
            concat!(
                r#"{"item_id":"a","image_ref":"i.png","question":"is there a fracture","gold_answer":"yes","answer_type":"closed","modality":"xray"}"#,
                "\n",
                r#"{"item_id":"b","image_ref":"j.png","question":"where is it","gold_answer":"left lung","answer_type":"open","modality":"ct"}"#,
                "\n"
            ),
        );
        let items = load_items(&p).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].modality, Modality::Ct);
    }

    #[test]
    fn closed_item_with_maybe_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "items.jsonl",
            r#"{"item_id":"a","image_ref":"i.png","question":"is it","gold_answer":"maybe","answer_type":"closed","modality":"mri"}"#,
        );
        match load_items(&p) {
            Err(DataError::Invalid { field, line, .. }) => {
                assert_eq!(field, "answer_type");
                assert_eq!(line, 1);
            }
            other => panic!("expected invalid answer_type, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_no_items() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "items.jsonl", "");
        assert!(load_items(&p).unwrap().is_empty());
    }

    #[test]
    fn duplicate_item_and_parse_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"item_id":"a","image_ref":"i.png","question":"q","gold_answer":"no","answer_type":"closed","modality":"other"}"#;
        let p = write(&dir, "dup.jsonl", &format!("{rec}\n{rec}\n"));
        assert!(matches!(
            load_items(&p),
            Err(DataError::Duplicate { line: 2, .. })
        ));
        let p = write(&dir, "bad.jsonl", &format!("{rec}\n{{not json\n"));
        assert!(matches!(load_items(&p), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn complete_cluster_has_no_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_clusters(&[full_cluster("c1")], &p).unwrap();
        let (clusters, warnings) = load_clusters(&p).unwrap();
        assert_eq!(clusters.len(), 1);
        assert!(warnings.is_empty());
    }

    #[test]
    fn missing_semantic_gives_one_warning() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = full_cluster("c1");
        c.members.pop();
        let p = dir.path().join("c.jsonl");
        save_clusters(&[c], &p).unwrap();
        let (clusters, warnings) = load_clusters(&p).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].missing, vec![PerturbationLevel::Semantic]);
    }

    #[test]
    fn two_word_members_is_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = full_cluster("c1");
        c.members[3].level = PerturbationLevel::Word;
        let p = dir.path().join("c.jsonl");
        save_clusters(&[c.clone()], &p).unwrap();
        assert!(matches!(
            load_clusters(&p),
            Err(DataError::Invalid { field: "members", .. })
        ));
        c.members[3].level = PerturbationLevel::Semantic;
        c.members[1].level = PerturbationLevel::Original;
        save_clusters(&[c], &p).unwrap();
        assert!(load_clusters(&p).is_err());
    }

    #[test]
    fn save_twice_is_byte_identical_and_newline_terminated() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let clusters = vec![full_cluster("c1"), full_cluster("c2")];
        save_clusters(&clusters, &a).unwrap();
        save_clusters(&clusters, &b).unwrap();
        let bytes = fs::read(&a).unwrap();
        assert_eq!(bytes, fs::read(&b).unwrap());
        assert!(bytes.ends_with(b"}\n"));
        assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 2);
        let first = String::from_utf8(bytes).unwrap();
        assert!(first.starts_with(r#"{"cluster_id":"c1","image_ref":"#));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_clusters(&[full_cluster("c")], "/nonexistent-dir/x/c.jsonl").unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent-dir/x/c.jsonl"));
    }

    #[test]
    fn predictions_round_trip_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let pred = Prediction {
            cluster_id: "c1".into(),
            level: PerturbationLevel::Word,
            answer_text: "Yes.".into(),
            model_id: "m".into(),
        };
        write_predictions(std::slice::from_ref(&pred), &p).unwrap();
        assert_eq!(load_predictions(&p).unwrap(), vec![pred.clone()]);
        write_predictions(&[pred.clone(), pred], &p).unwrap();
        assert!(matches!(
            load_predictions(&p),
            Err(DataError::Duplicate { .. })
        ));
    }

    #[test]
    fn level_wire_names() {
        for l in PerturbationLevel::ALL {
            let json = serde_json::to_string(&l).unwrap();
            assert_eq!(json, format!("\"{}\"", l.as_str()));
            assert_eq!(l.as_str().parse::<PerturbationLevel>().unwrap(), l);
        }
    }

    fn arb_cluster() -> impl Strategy<Value = QuestionCluster> {
        (
            "[a-z0-9]{1,8}",
            proptest::sample::subsequence(PerturbationLevel::PERTURBED.to_vec(), 0..=3),
            prop::bool::ANY,
            "[a-z ]{0,10}",
        )
            .prop_map(|(id, mut levels, closed, extra)| {
                levels.insert(0, PerturbationLevel::Original);
                let answer = if closed { "yes" } else { "right kidney" };
                QuestionCluster {
                    cluster_id: id,
                    image_ref: "img.png".into(),
                    answer_type: if closed {
                        AnswerType::Closed
                    } else {
                        AnswerType::Open
                    },
                    members: levels
                        .into_iter()
                        .map(|level| ClusterMember {
                            level,
                            question: format!("q {level} \"{extra}\" é"),
                            gold_answer: answer.into(),
                        })
                        .collect(),
                }
            })
    }

    proptest! {
        #[test]
        fn cluster_round_trip(clusters in prop::collection::vec(arb_cluster(), 0..6)) {
            let mut uniq = BTreeMap::new();
            for c in clusters { uniq.insert(c.cluster_id.clone(), c); }
            let clusters: Vec<_> = uniq.into_values().collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.jsonl");
            save_clusters(&clusters, &p).unwrap();
            let (loaded, _) = load_clusters(&p).unwrap();
            prop_assert!(loaded.iter().all(|c| (1..=4).contains(&c.members.len())));
            prop_assert_eq!(loaded, clusters);
        }
    }
}
