//! Cluster consistency metrics (MAD, CV) and the robustness report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnswerType, QuestionCluster};
use crate::scoring::{MemberScore, ScoringOutcome};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot compute a statistic over an empty cluster")]
    Empty,
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
}

fn mean(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Mean absolute deviation around the cluster mean.
pub fn cluster_mad(scores: &[f64]) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mu = mean(scores);
    Ok(scores.iter().map(|x| (x - mu).abs()).sum::<f64>() / scores.len() as f64)
}

/// Coefficient of variation in percent, using the population standard deviation.
///
/// `None` when the mean is zero.
pub fn cluster_cv(scores: &[f64]) -> Result<Option<f64>, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mu = mean(scores);
    if mu == 0.0 {
        return Ok(None);
    }
    let var = scores.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / scores.len() as f64;
    Ok(Some(var.sqrt() / mu * 100.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub cluster_id: String,
    /// One per scored member, in member order.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub mad: f64,
    pub cv_percent: Option<f64>,
}

impl ClusterScore {
    pub fn new(cluster_id: impl Into<String>, scores: Vec<f64>) -> Result<Self, MetricsError> {
        let mad = cluster_mad(&scores)?;
        let cv_percent = cluster_cv(&scores)?;
        Ok(ClusterScore {
            cluster_id: cluster_id.into(),
            mean: mean(&scores),
            mad,
            cv_percent,
            scores,
        })
    }
}

/// Groups member scores by cluster. Clusters without any scored member are skipped.
pub fn cluster_scores(
    clusters: &[QuestionCluster],
    member_scores: &[MemberScore],
) -> Vec<ClusterScore> {
    let mut grouped: HashMap<&str, Vec<&MemberScore>> = HashMap::new();
    for s in member_scores {
        grouped.entry(s.cluster_id.as_str()).or_default().push(s);
    }
    clusters
        .iter()
        .filter_map(|c| {
            let scored = grouped.get(c.cluster_id.as_str())?;
            let scores: Vec<f64> = c
                .members
                .iter()
                .filter_map(|m| scored.iter().find(|s| s.level == m.level).map(|s| s.score))
                .collect();
            ClusterScore::new(c.cluster_id.clone(), scores).ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTypeAggregates {
    pub open_recall: Option<f64>,
    pub closed_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyAggregates {
    pub mean_mad_percent: Option<f64>,
    pub mean_cv_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub clusters_total: usize,
    pub clusters_scored: usize,
    pub clusters_cv_undefined: usize,
    pub members_missing: usize,
}

/// Recall / accuracy / CV / MAD summary for one model. All aggregates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model_id: String,
    pub answer_types: AnswerTypeAggregates,
    pub consistency: ConsistencyAggregates,
    pub counts: ReportCounts,
}

fn mean_opt(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| mean(values))
}

/// Folds per-cluster and per-member scores into a report.
///
/// Recall and accuracy average every scored member of the matching answer
/// type. MAD and CV average clusters with at least two scored members;
/// clusters with an undefined CV are left out of the CV mean and counted.
pub fn aggregate(
    model_id: &str,
    clusters_total: usize,
    cluster_scores: &[ClusterScore],
    member_scores: &[MemberScore],
    answer_types: &HashMap<String, AnswerType>,
    members_missing: usize,
) -> Result<RobustnessReport, MetricsError> {
    let mut per_cluster: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut open = Vec::new();
    let mut closed = Vec::new();
    for s in member_scores {
        let ty = answer_types.get(&s.cluster_id).ok_or_else(|| {
            MetricsError::Inconsistent(format!("no answer type for cluster `{}`", s.cluster_id))
        })?;
        per_cluster.entry(s.cluster_id.as_str()).or_default().push(s.score);
        match ty {
            AnswerType::Open => open.push(s.score),
            AnswerType::Closed => closed.push(s.score),
        }
    }

    let mut sorted: Vec<&ClusterScore> = cluster_scores.iter().collect();
    sorted.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));
    if sorted.windows(2).any(|w| w[0].cluster_id == w[1].cluster_id) {
        return Err(MetricsError::Inconsistent("duplicate cluster score".into()));
    }
    if sorted.len() != per_cluster.len() {
        return Err(MetricsError::Inconsistent(format!(
            "{} cluster scores but {} clusters with member scores",
            sorted.len(),
            per_cluster.len()
        )));
    }

    let mut mads = Vec::new();
    let mut cvs = Vec::new();
    let mut cv_undefined = 0;
    for cs in &sorted {
        let backing = per_cluster.get(cs.cluster_id.as_str()).ok_or_else(|| {
            MetricsError::Inconsistent(format!("cluster `{}` has no member scores", cs.cluster_id))
        })?;
        if backing.len() != cs.scores.len() {
            return Err(MetricsError::Inconsistent(format!(
                "cluster `{}` has {} scores but {} member scores",
                cs.cluster_id,
                cs.scores.len(),
                backing.len()
            )));
        }
        if cs.scores.len() < 2 {
            continue;
        }
        mads.push(cs.mad * 100.0);
        match cs.cv_percent {
            Some(cv) => cvs.push(cv),
            None => cv_undefined += 1,
        }
    }

    Ok(RobustnessReport {
        model_id: model_id.to_owned(),
        answer_types: AnswerTypeAggregates {
            open_recall: mean_opt(&open).map(|m| m * 100.0),
            closed_accuracy: mean_opt(&closed).map(|m| m * 100.0),
        },
        consistency: ConsistencyAggregates {
            mean_mad_percent: mean_opt(&mads),
            mean_cv_percent: mean_opt(&cvs),
        },
        counts: ReportCounts {
            clusters_total,
            clusters_scored: sorted.len(),
            clusters_cv_undefined: cv_undefined,
            members_missing,
        },
    })
}

/// Cluster scores and report for a scored prediction set.
pub fn evaluate(
    model_id: &str,
    clusters: &[QuestionCluster],
    outcome: &ScoringOutcome,
) -> Result<(Vec<ClusterScore>, RobustnessReport), MetricsError> {
    let per_cluster = cluster_scores(clusters, &outcome.scores);
    let types: HashMap<String, AnswerType> = clusters
        .iter()
        .map(|c| (c.cluster_id.clone(), c.answer_type))
        .collect();
    let report = aggregate(
        model_id,
        clusters.len(),
        &per_cluster,
        &outcome.scores,
        &types,
        outcome.missing.len(),
    )?;
    Ok((per_cluster, report))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.1}"))
}

/// Aligned text table with one row per report: Recall, Acc, CV(↓), MAD(↓).
pub fn format_table(reports: &[RobustnessReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.model_id.chars().count())
        .chain(std::iter::once(5))
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>9}  {:>7}",
        "model", "Recall", "Acc", "CV(↓)", "MAD(↓)", "clusters", "missing"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>9}  {:>7}",
            r.model_id,
            cell(r.answer_types.open_recall),
            cell(r.answer_types.closed_accuracy),
            cell(r.consistency.mean_cv_percent),
            cell(r.consistency.mean_mad_percent),
            format!("{}/{}", r.counts.clusters_scored, r.counts.clusters_total),
            r.counts.members_missing,
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Per-cluster `cluster_id,mean,mad,cv` rows; an undefined CV is an empty field.
pub fn plot_data_csv(cluster_scores: &[ClusterScore]) -> String {
    let mut out = String::from("cluster_id,mean,mad,cv\n");
    for cs in cluster_scores {
        let cv = cs.cv_percent.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", csv_field(&cs.cluster_id), cs.mean, cs.mad, cv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PerturbationLevel;
    use proptest::prelude::*;

    #[test]
    fn mad_examples() {
        assert_eq!(cluster_mad(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cluster_mad(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(cluster_mad(&[1.0, 1.0, 1.0, 0.0]).unwrap(), 0.375);
        assert_eq!(cluster_mad(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn cv_examples() {
        assert_eq!(cluster_cv(&[1.0; 4]).unwrap(), Some(0.0));
        assert_eq!(cluster_cv(&[1.0, 0.0, 1.0, 0.0]).unwrap(), Some(100.0));
        assert_eq!(cluster_cv(&[0.0; 4]).unwrap(), None);
        assert_eq!(cluster_cv(&[]), Err(MetricsError::Empty));
        // sigma = sqrt(3)/4, mu = 3/4
        let cv = cluster_cv(&[1.0, 1.0, 1.0, 0.0]).unwrap().unwrap();
        assert!((cv - 100.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    fn ms(cluster: &str, level: PerturbationLevel, score: f64) -> MemberScore {
        MemberScore {
            cluster_id: cluster.into(),
            level,
            score,
        }
    }

    #[test]
    fn mean_mad_of_two_clusters() {
        use PerturbationLevel::*;
        let members = vec![
            ms("a", Original, 1.0),
            ms("a", Word, 1.0),
            ms("b", Original, 1.0),
            ms("b", Word, 0.0),
        ];
        let clusters = vec![
            ClusterScore::new("a", vec![1.0, 1.0]).unwrap(),
            ClusterScore::new("b", vec![1.0, 0.0]).unwrap(),
        ];
        let types = HashMap::from([
            ("a".to_string(), AnswerType::Open),
            ("b".to_string(), AnswerType::Closed),
        ]);
        let r = aggregate("m", 2, &clusters, &members, &types, 0).unwrap();
        assert_eq!(r.consistency.mean_mad_percent, Some(25.0));
        assert_eq!(r.answer_types.open_recall, Some(100.0));
        assert_eq!(r.answer_types.closed_accuracy, Some(50.0));
        assert_eq!(r.consistency.mean_cv_percent, Some(50.0));
    }

    #[test]
    fn undefined_cv_is_excluded_and_counted() {
        use PerturbationLevel::*;
        let members = vec![
            ms("a", Original, 0.0),
            ms("a", Word, 0.0),
            ms("b", Original, 1.0),
            ms("b", Word, 0.0),
            ms("c", Original, 1.0),
        ];
        let clusters = vec![
            ClusterScore::new("a", vec![0.0, 0.0]).unwrap(),
            ClusterScore::new("b", vec![1.0, 0.0]).unwrap(),
            ClusterScore::new("c", vec![1.0]).unwrap(),
        ];
        let types: HashMap<_, _> = ["a", "b", "c"]
            .iter()
            .map(|c| (c.to_string(), AnswerType::Closed))
            .collect();
        let r = aggregate("m", 4, &clusters, &members, &types, 3).unwrap();
        assert_eq!(r.consistency.mean_cv_percent, Some(100.0));
        assert_eq!(r.consistency.mean_mad_percent, Some(25.0));
        assert_eq!(r.counts.clusters_cv_undefined, 1);
        assert_eq!(r.counts.clusters_scored, 3);
        assert_eq!(r.counts.members_missing, 3);
        assert_eq!(r.answer_types.closed_accuracy, Some(40.0));
        assert_eq!(r.answer_types.open_recall, None);
    }

    #[test]
    fn inconsistent_inputs_are_rejected() {
        let members = vec![ms("a", PerturbationLevel::Original, 1.0)];
        let types = HashMap::from([("a".to_string(), AnswerType::Open)]);
        let wrong = vec![ClusterScore::new("a", vec![1.0, 1.0]).unwrap()];
        assert!(matches!(
            aggregate("m", 1, &wrong, &members, &types, 0),
            Err(MetricsError::Inconsistent(_))
        ));
        assert!(matches!(
            aggregate("m", 1, &[], &members, &types, 0),
            Err(MetricsError::Inconsistent(_))
        ));
    }

    #[test]
    fn table_and_csv_layout() {
        let r = RobustnessReport {
            model_id: "vision base with ccl".into(),
            answer_types: AnswerTypeAggregates {
                open_recall: Some(52.5),
                closed_accuracy: Some(80.0),
            },
            consistency: ConsistencyAggregates {
                mean_mad_percent: Some(38.7),
                mean_cv_percent: Some(61.2),
            },
            counts: ReportCounts {
                clusters_total: 1,
                clusters_scored: 1,
                clusters_cv_undefined: 0,
                members_missing: 0,
            },
        };
        let t = format_table(&[r]);
        let row = t.lines().nth(1).unwrap();
        let cols: Vec<_> = row.split_whitespace().collect();
        assert_eq!(&cols[4..8], &["52.5", "80.0", "61.2", "38.7"]);
        assert!(t.lines().next().unwrap().contains("Recall"));

        let csv = plot_data_csv(&[
            ClusterScore::new("x,1", vec![0.0, 0.0]).unwrap(),
            ClusterScore::new("y", vec![1.0, 0.0]).unwrap(),
        ]);
        assert_eq!(csv, "cluster_id,mean,mad,cv\n\"x,1\",0,0,\ny,0.5,0.5,100\n");
    }

    proptest! {
        #[test]
        fn permutation_and_scale(mut scores in prop::collection::vec(0.0f64..1.0, 1..6),
                                 c in 0.01f64..10.0, rot in 0usize..6) {
            let mad = cluster_mad(&scores).unwrap();
            let cv = cluster_cv(&scores).unwrap();
            prop_assert!((0.0..=0.5).contains(&mad));
            let scaled: Vec<f64> = scores.iter().map(|x| x * c).collect();
            prop_assert!((cluster_mad(&scaled).unwrap() - c * mad).abs() < 1e-12);
            if let (Some(a), Some(b)) = (cv, cluster_cv(&scaled).unwrap()) {
                prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
            }
            let n = scores.len();
            scores.rotate_left(rot % n);
            scores.reverse();
            prop_assert!((cluster_mad(&scores).unwrap() - mad).abs() < 1e-12);
        }

        #[test]
        fn constant_cluster_has_zero_mad(v in prop::sample::select(vec![0.0, 1.0]), n in 1usize..5) {
            prop_assert_eq!(cluster_mad(&vec![v; n]).unwrap(), 0.0);
        }
    }
}
