//! The four subcommands, callable in-process as well as from the binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use sha2::{Digest, Sha256};

use pixelfool::analytics::{
    best_scenario_per_class, read_episode_log, scenario_count_summary, write_json_pretty,
    write_metrics_csv, write_plot_data, BestScenarioReport, EpisodeLogWriter, EpisodeRecord,
    LogHeader, MetricsTable,
};
use pixelfool::classifier::{train_classifier, ClassifierModel, TrainReport};
use pixelfool::dataset::generate_corpus;
use pixelfool::env::ImagePool;
use pixelfool::oracle::Scenario;
use pixelfool::ppo::{train_attacker, PhaseReport};

use crate::config::RunConfig;

pub const CLASSIFIER_FILE: &str = "classifier.evnn";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_SCENARIOS_FILE: &str = "best_scenarios.json";
pub const PLOT_DIR: &str = "plots";

pub fn episode_log_name(scenario: Scenario) -> String {
    format!("episodes_{}.jsonl", scenario.name())
}

pub fn policy_name(scenario: Scenario) -> String {
    format!("policy_{}.evnn", scenario.name())
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes via a sibling temp file so readers never observe a half-written file.
fn replace_file(
    path: &Path,
    write: impl FnOnce(&Path) -> pixelfool::Result<()>,
) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Generates the corpus, trains the classifier, and writes the checkpoint
/// and training report into `out`.
pub fn cmd_train_classifier(cfg: &RunConfig, out: &Path) -> anyhow::Result<TrainReport> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let corpus = generate_corpus(&cfg.corpus)?;
    log::info!(
        "corpus: {} classes, {} train / {} test images",
        corpus.class_count,
        corpus.train.len(),
        corpus.test.len()
    );
    let (model, report) = train_classifier(&corpus, cfg.normalization, &cfg.classifier)?;
    replace_file(&out.join(CLASSIFIER_FILE), |p| model.save_to_path(p))?;
    write_json_pretty(&out.join(TRAIN_REPORT_FILE), &report)?;
    println!(
        "classifier: {} parameters, train accuracy {:.4}, test accuracy {:.4}",
        report.parameter_count, report.final_train_accuracy, report.final_test_accuracy
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub log_path: PathBuf,
    pub policy_path: PathBuf,
    pub episodes: usize,
    pub env_steps: u64,
    pub final_lsr: Option<f64>,
}

/// Trains an attacker against the checkpoint in `out` under `cfg.scenario`,
/// streaming episodes to the log and one progress JSON line per phase to
/// `progress`.
pub fn cmd_attack(
    cfg: &RunConfig,
    out: &Path,
    parallel: bool,
    progress: &mut dyn Write,
) -> anyhow::Result<AttackOutcome> {
    let scenario = cfg.scenario;
    let clf_path = out.join(CLASSIFIER_FILE);
    if !clf_path.is_file() {
        bail!(
            "classifier checkpoint {} not found; run train-classifier first",
            clf_path.display()
        );
    }
    let model = ClassifierModel::load_from_path(&clf_path)
        .with_context(|| format!("loading {}", clf_path.display()))?;
    let checksum = sha256_file(&clf_path)?;
    if model.class_count() != cfg.corpus.class_count {
        bail!(
            "classifier has {} classes but the corpus config has {}",
            model.class_count(),
            cfg.corpus.class_count
        );
    }
    // Attacks start from held-out images the classifier never trained on.
    let corpus = generate_corpus(&cfg.corpus)?;
    let pool = Arc::new(ImagePool::new(&corpus.test, corpus.class_count)?);

    let log_path = out.join(episode_log_name(scenario));
    let policy_path = out.join(policy_name(scenario));
    let header = LogHeader {
        scenario,
        class_count: model.class_count(),
        classifier_sha256: checksum,
    };
    let mut writer = EpisodeLogWriter::create(&log_path, &header)?;
    let checkpoint_every = cfg.checkpoint_every;
    let mut hook = |report: &PhaseReport<'_>| -> pixelfool::Result<()> {
        writer.append(report.records)?;
        serde_json::to_writer(&mut *progress, &report.progress)?;
        progress.write_all(b"\n")?;
        progress.flush()?;
        if checkpoint_every > 0 && (report.phase + 1).is_multiple_of(checkpoint_every) {
            let tmp = policy_path.with_extension("tmp");
            report.actor_critic.save_to_path(&tmp)?;
            fs::rename(&tmp, &policy_path)?;
        }
        Ok(())
    };
    log::info!(
        "attacking under {scenario} for {} env steps ({} envs, {})",
        cfg.ppo.total_env_steps,
        cfg.ppo.num_envs,
        if parallel { "parallel" } else { "serial" }
    );
    let run = train_attacker(
        Arc::new(model),
        pool,
        scenario,
        &cfg.defense,
        &cfg.ppo,
        parallel,
        Some(&mut hook),
    )?;
    replace_file(&policy_path, |p| run.actor_critic.save_to_path(p))?;
    let successes = run.records.iter().filter(|r| r.fooled).count();
    let final_lsr = (!run.records.is_empty()).then(|| successes as f64 / run.records.len() as f64);
    log::info!(
        "{} episodes, {} fooled, LSR {}",
        run.records.len(),
        successes,
        final_lsr.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(AttackOutcome {
        log_path,
        policy_path,
        episodes: run.records.len(),
        env_steps: run.env_steps,
        final_lsr,
    })
}

/// Episode logs named explicitly, or every `episodes_*.jsonl` in `dir`.
pub fn resolve_logs(explicit: &[PathBuf], dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !explicit.is_empty() {
        return Ok(explicit.to_vec());
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("episodes_") && n.ends_with(".jsonl"))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        bail!("no episodes_*.jsonl logs in {}", dir.display());
    }
    Ok(found)
}

/// Reads every log and checks they describe the same classification task.
fn load_logs(paths: &[PathBuf]) -> anyhow::Result<(usize, Vec<EpisodeRecord>)> {
    let mut class_count = None;
    let mut checksum: Option<String> = None;
    let mut records = Vec::new();
    for path in paths {
        let log = read_episode_log(path).with_context(|| format!("reading {}", path.display()))?;
        let header = log
            .header
            .with_context(|| format!("{} has no header line", path.display()))?;
        match class_count {
            None => class_count = Some(header.class_count),
            Some(k) if k != header.class_count => bail!(
                "inconsistent class counts: {} has {} classes, earlier logs have {k}",
                path.display(),
                header.class_count
            ),
            Some(_) => {}
        }
        match &checksum {
            None => checksum = Some(header.classifier_sha256.clone()),
            Some(c) if *c != header.classifier_sha256 => {
                log::warn!(
                    "{} was recorded against a different classifier",
                    path.display()
                )
            }
            Some(_) => {}
        }
        if let Some(r) = log.records.iter().find(|r| r.scenario != header.scenario) {
            bail!(
                "{} mixes scenarios: header {} but episode {} is {}",
                path.display(),
                header.scenario,
                r.episode_index,
                r.scenario
            );
        }
        records.extend(log.records);
    }
    let class_count = class_count.context("no logs given")?;
    Ok((class_count, records))
}

/// Per-class metrics, best-scenario table and plot data from episode logs.
pub fn cmd_analyze(
    logs: &[PathBuf],
    threshold: f64,
    out: &Path,
) -> anyhow::Result<BestScenarioReport> {
    let cfg = pixelfool::analytics::AnalysisConfig { threshold };
    cfg.validate()?;
    let (class_count, records) = load_logs(logs)?;
    fs::create_dir_all(out)?;
    let table = MetricsTable::from_records(&records, class_count)?;
    write_metrics_csv(&out.join(METRICS_FILE), &table)?;
    let per_class: BTreeMap<usize, _> = best_scenario_per_class(&table, &cfg)?;
    let summary = scenario_count_summary(&per_class);
    let report = BestScenarioReport {
        threshold,
        class_count,
        per_class,
        summary,
    };
    write_json_pretty(&out.join(BEST_SCENARIOS_FILE), &report)?;
    write_plots(&records, out)?;

    println!("best scenario per class (t = {threshold}):");
    for (class, best) in &report.per_class {
        println!("  class {class:>3}: {best}");
    }
    println!("{:<20} {:>6} {:>8}", "scenario", "count", "percent");
    for b in &report.summary {
        println!(
            "{:<20} {:>6} {:>7.1}%",
            b.bucket.name(),
            b.count,
            b.percentage
        );
    }
    Ok(report)
}

fn write_plots(records: &[EpisodeRecord], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let dir = out.join(PLOT_DIR);
    fs::create_dir_all(&dir)?;
    Ok(write_plot_data(&dir, records)?)
}

/// Running-LSR curves only.
pub fn cmd_plot_data(logs: &[PathBuf], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let (_, records) = load_logs(logs)?;
    fs::create_dir_all(out)?;
    let paths = write_plots(&records, out)?;
    println!(
        "wrote {} plot files to {}",
        paths.len(),
        out.join(PLOT_DIR).display()
    );
    Ok(paths)
}
