use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vqa_robust::data;
use vqa_robust::kernel::gradcheck::{self, CheckedOp};
use vqa_robust::metrics::{self, RobustnessReport};
use vqa_robust::pipeline::{
    self, HttpTransport, Pipeline, PipelineConfig, PipelineError, TranscriptMode,
};
use vqa_robust::scoring;
use vqa_robust::toy::{self, ToySettings, TrainMode};

/// Exit codes: 0 success, 1 usage, 2 input/output or data, 3 endpoint,
/// 4 validation exhausted, 5 gradient check failed.
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ENDPOINT: u8 = 3;
const EXIT_EXHAUSTED: u8 = 4;
const EXIT_CHECK_FAILED: u8 = 5;

#[derive(Parser)]
#[command(name = "vqa-robust", version, about = "Robustness toolkit for medical VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build question clusters from items (agents, or rules with --offline).
    Perturb(PerturbArgs),
    /// Score predictions against clusters and write a robustness report.
    Score(ScoreArgs),
    /// Print saved reports as one table.
    Report(ReportArgs),
    /// Check every loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the toy model on the synthetic task.
    ToyTrain(ToyTrainArgs),
    /// Write per-cluster mean, MAD and CV as CSV.
    ExportPlotData(ScoreArgs),
}

#[derive(Args)]
struct PerturbArgs {
    /// Items file (JSON Lines).
    #[arg(long)]
    items: PathBuf,
    /// Agents configuration (TOML); not needed with --offline.
    #[arg(long, required_unless_present = "offline")]
    agents: Option<PathBuf>,
    /// Output directory for clusters.jsonl, pipeline.jsonl and transcripts.
    #[arg(long)]
    out: PathBuf,
    /// Word-level clusters from built-in rules; no endpoints.
    #[arg(long)]
    offline: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transcript directory (overrides the configuration).
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// live, record or replay (overrides the configuration).
    #[arg(long, value_parser = parse_mode)]
    transcript_mode: Option<TranscriptMode>,
    /// Items processed concurrently (overrides the configuration).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    concurrency: Option<u32>,
}

fn parse_mode(s: &str) -> Result<TranscriptMode, String> {
    s.parse().map_err(|e: PipelineError| e.to_string())
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    model_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report files written by `score` or `toy-train`.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ToyTrainArgs {
    #[arg(long, value_parser = ["sft", "consistency", "contrastive", "ccl", "all"])]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    /// `key = value` settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                e if e.is_endpoint() => EXIT_ENDPOINT,
                PipelineError::Unparseable { .. } => EXIT_EXHAUSTED,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Perturb(a) => perturb(a),
        Command::Score(a) => score(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => grad_check(a),
        Command::ToyTrain(a) => toy_train(a),
        Command::ExportPlotData(a) => export_plot_data(a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path.as_mut() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn perturb(a: PerturbArgs) -> Result<u8> {
    let items = data::load_items(&a.items)?;
    let summary = if a.offline {
        pipeline::run_offline(&items, &a.out, a.seed)?
    } else {
        let path = a.agents.as_deref().expect("clap requires --agents without --offline");
        let mut config = PipelineConfig::load(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let s = &mut config.settings;
        resolve(base, &mut s.transcripts);
        resolve(base, &mut s.templates_dir);
        resolve(base, &mut s.image_root);
        if s.image_root.is_none() {
            s.image_root = a.items.parent().map(Path::to_path_buf);
        }
        if let Some(t) = a.transcripts {
            s.transcripts = Some(t);
        }
        if let Some(m) = a.transcript_mode {
            s.transcript_mode = m;
        }
        if let Some(c) = a.concurrency {
            s.concurrency = c as usize;
        }
        let pipeline = Pipeline::new(config, Box::new(HttpTransport), &a.out)?;
        pipeline.run(&items, &a.out)?
    };
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    for (id, reason) in &summary.rejected {
        eprintln!("rejected: {id}: {reason}");
    }
    eprintln!(
        "{} items, {} clusters, {} rejected, {} resumed",
        summary.items,
        summary.clusters,
        summary.rejected.len(),
        summary.resumed
    );
    Ok(if summary.rejected.is_empty() { 0 } else { EXIT_EXHAUSTED })
}

fn scored(a: &ScoreArgs) -> Result<(Vec<metrics::ClusterScore>, RobustnessReport)> {
    let (clusters, warnings) = data::load_clusters(&a.clusters)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let preds = data::load_predictions(&a.predictions)?;
    let outcome = scoring::score_predictions(&clusters, &preds, &a.model_id)
        .with_context(|| format!("scoring {}", a.predictions.display()))?;
    Ok(metrics::evaluate(&a.model_id, &clusters, &outcome)?)
}

fn score(a: ScoreArgs) -> Result<u8> {
    let (_, report) = scored(&a)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_file(&a.out, &json)?;
    print!("{}", metrics::format_table(std::slice::from_ref(&report)));
    Ok(0)
}

fn export_plot_data(a: ScoreArgs) -> Result<u8> {
    let (cluster_scores, _) = scored(&a)?;
    write_file(&a.out, &metrics::plot_data_csv(&cluster_scores))?;
    Ok(0)
}

fn report(a: ReportArgs) -> Result<u8> {
    let reports = a
        .input
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RobustnessReport>(&text)
                .with_context(|| format!("parsing report {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    print!("{}", metrics::format_table(&reports));
    Ok(0)
}

fn grad_check(a: GradcheckArgs) -> Result<u8> {
    let mut ok = true;
    println!("{:<12} {:>7} {:>12}  status", "operation", "trials", "max_error");
    for (i, op) in CheckedOp::ALL.iter().enumerate() {
        let summary = gradcheck::run_trials(*op, a.trials, a.epsilon, a.seed.wrapping_add(i as u64))?;
        let status = if summary.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<12} {:>7} {:>12.3e}  {status}",
            op.name(),
            summary.trials,
            summary.max_error
        );
        ok &= summary.passed();
    }
    Ok(if ok { 0 } else { EXIT_CHECK_FAILED })
}

fn toy_train(a: ToyTrainArgs) -> Result<u8> {
    let mut settings = match &a.config {
        Some(p) => ToySettings::load(p)?,
        None => ToySettings::default(),
    };
    let flags: [(&str, Option<String>); 6] = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("steps", a.steps.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("temperature", a.temperature.map(|v| v.to_string())),
        ("dim", a.dim.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            settings.set(key, &v)?;
        }
    }
    let modes: Vec<TrainMode> = match a.mode.as_deref() {
        Some("all") => TrainMode::ALL.to_vec(),
        Some(m) => vec![m.parse()?],
        None => vec![settings.train.mode],
    };
    let seeds = if a.seeds.is_empty() {
        vec![settings.train.seed]
    } else {
        a.seeds.clone()
    };
    if modes.len() == 1 && seeds.len() == 1 {
        settings.train.mode = modes[0];
        settings.task.seed = seeds[0];
        settings.train.seed = seeds[0];
        let result = toy::run(&settings)?;
        write_run(&a.out, &result)?;
        print!("{}", metrics::format_table(std::slice::from_ref(&result.evaluation.report)));
        println!("accuracy {:.1}", result.evaluation.accuracy);
        return Ok(0);
    }
    let results = toy::run_grid(&settings, &modes, &seeds)?;
    let mut summary = String::from("mode,seed,accuracy,mean_mad,final_loss\n");
    for r in &results {
        write_run(&a.out.join(format!("{}-seed{}", r.mode, r.seed)), r)?;
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode,
            r.seed,
            r.evaluation.accuracy,
            r.mean_mad(),
            r.curve.last().unwrap_or(f64::NAN)
        ));
    }
    write_file(&a.out.join("grid.csv"), &summary)?;
    let reports: Vec<RobustnessReport> = results.iter().map(|r| r.evaluation.report.clone()).collect();
    print!("{}", metrics::format_table(&reports));
    Ok(0)
}

fn write_run(dir: &Path, r: &toy::RunResult) -> Result<()> {
    write_file(&dir.join("loss_curve.csv"), &r.curve.to_csv())?;
    let mut json = serde_json::to_string_pretty(&r.evaluation.report)?;
    json.push('\n');
    write_file(&dir.join("report.json"), &json)?;
    write_file(&dir.join("plot_data.csv"), &metrics::plot_data_csv(&r.evaluation.cluster_scores))?;
    let summary = serde_json::json!({
        "mode": r.mode.to_string(),
        "seed": r.seed,
        "accuracy": r.evaluation.accuracy,
        "mean_mad": r.mean_mad(),
        "initial_loss": r.curve.initial(),
        "final_loss": r.curve.last(),
    });
    write_file(&dir.join("summary.json"), &format!("{:#}\n", summary))?;
    Ok(())
}
