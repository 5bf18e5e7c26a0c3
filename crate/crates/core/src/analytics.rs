//! Attack metrics (lifetime success rate, average actions to fool), the
//! per-class best-scenario analysis, and the on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::Scenario;

/// Outcome of one attack episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_index: u64,
    pub class_label: usize,
    pub scenario: Scenario,
    pub fooled: bool,
    pub steps_used: usize,
    pub episode_return: f32,
    pub query_count_delta: u64,
    /// Total environment steps taken across all workers when the episode ended.
    pub wall_env_steps: u64,
}

/// Streaming lifetime success rate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningLsr {
    pub attempts: u64,
    pub successes: u64,
}

impl RunningLsr {
    pub fn push(&mut self, fooled: bool) -> f64 {
        self.attempts += 1;
        self.successes += u64::from(fooled);
        self.successes as f64 / self.attempts as f64
    }

    pub fn value(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.successes as f64 / self.attempts as f64)
    }
}

/// Streaming average actions to fool.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningAaf {
    successes: u64,
    steps: u64,
}

impl RunningAaf {
    pub fn push(&mut self, fooled: bool, steps_used: usize) {
        if fooled {
            self.successes += 1;
            self.steps += steps_used as u64;
        }
    }

    pub fn value(&self) -> Option<f64> {
        (self.successes > 0).then(|| self.steps as f64 / self.successes as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsrCurve {
    pub lsr: f64,
    /// Cumulative rate after each episode.
    pub curve: Vec<f64>,
}

/// `None` for an empty record set.
pub fn lifetime_success_rate(records: &[EpisodeRecord]) -> Option<LsrCurve> {
    let mut running = RunningLsr::default();
    let curve: Vec<f64> = records.iter().map(|r| running.push(r.fooled)).collect();
    Some(LsrCurve {
        lsr: running.value()?,
        curve,
    })
}

/// Mean steps over successful episodes; `None` when there are none.
pub fn average_actions_to_fool(records: &[EpisodeRecord]) -> Option<f64> {
    let mut aaf = RunningAaf::default();
    records
        .iter()
        .for_each(|r| aaf.push(r.fooled, r.steps_used));
    aaf.value()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: Scenario,
    pub class: usize,
    pub episodes: u64,
    pub successes: u64,
    pub lsr: Option<f64>,
    pub aaf: Option<f64>,
}

/// Metrics per (scenario, class), ordered by scenario then class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    /// Aggregates records into one row for every scenario that appears and
    /// every class in `0..class_count`.
    pub fn from_records(records: &[EpisodeRecord], class_count: usize) -> Result<Self> {
        let mut acc: BTreeMap<(Scenario, usize), (RunningLsr, RunningAaf)> = BTreeMap::new();
        for r in records {
            if r.class_label >= class_count {
                return Err(Error::Inconsistent(format!(
                    "episode {} has class {} but only {class_count} classes exist",
                    r.episode_index, r.class_label
                )));
            }
            let (lsr, aaf) = acc.entry((r.scenario, r.class_label)).or_default();
            lsr.push(r.fooled);
            aaf.push(r.fooled, r.steps_used);
        }
        let mut scenarios: Vec<Scenario> = records.iter().map(|r| r.scenario).collect();
        scenarios.sort();
        scenarios.dedup();
        let mut rows = Vec::with_capacity(scenarios.len() * class_count);
        for scenario in scenarios {
            for class in 0..class_count {
                let (lsr, aaf) = acc.get(&(scenario, class)).copied().unwrap_or_default();
                rows.push(MetricsRow {
                    scenario,
                    class,
                    episodes: lsr.attempts,
                    successes: lsr.successes,
                    lsr: lsr.value(),
                    aaf: aaf.value(),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn get(&self, scenario: Scenario, class: usize) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.class == class)
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut classes: Vec<usize> = self.rows.iter().map(|r| r.class).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { threshold: 0.01 }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "analysis.threshold must be a finite value >= 0, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BestScenario {
    Scenario(Scenario),
    NoClearBest,
}

impl BestScenario {
    pub fn name(self) -> &'static str {
        match self {
            BestScenario::Scenario(s) => s.name(),
            BestScenario::NoClearBest => "no-clear-best",
        }
    }
}

impl fmt::Display for BestScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for BestScenario {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for BestScenario {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        if name == "no-clear-best" {
            return Ok(BestScenario::NoClearBest);
        }
        name.parse()
            .map(BestScenario::Scenario)
            .map_err(serde::de::Error::custom)
    }
}

// Absorbs binary rounding so that a margin of exactly `t` counts.
const MARGIN_SLACK: f64 = 1e-12;

/// Picks the scenario whose LSR beats every other scenario by at least `t`.
///
/// With `t = 0` this is an argmax, ties going to the lowest scenario index.
pub fn pick_best(lsrs: &[(Scenario, f64)], threshold: f64) -> BestScenario {
    let mut ordered = lsrs.to_vec();
    ordered.sort_by_key(|(s, _)| s.index());
    ordered
        .iter()
        .find(|(s, v)| {
            ordered
                .iter()
                .filter(|(o, _)| o != s)
                .all(|(_, w)| v - w >= threshold - MARGIN_SLACK)
        })
        .map_or(BestScenario::NoClearBest, |(s, _)| {
            BestScenario::Scenario(*s)
        })
}

/// Best scenario for every class with LSRs under all four scenarios; classes
/// with missing data are skipped with a warning.
pub fn best_scenario_per_class(
    table: &MetricsTable,
    config: &AnalysisConfig,
) -> Result<BTreeMap<usize, BestScenario>> {
    config.validate()?;
    let mut out = BTreeMap::new();
    for class in table.classes() {
        let lsrs: Option<Vec<(Scenario, f64)>> = Scenario::ALL
            .iter()
            .map(|&s| table.get(s, class).and_then(|r| r.lsr).map(|v| (s, v)))
            .collect();
        match lsrs {
            Some(lsrs) => {
                out.insert(class, pick_best(&lsrs, config.threshold));
            }
            None => log::warn!("class {class}: not every scenario has episodes; skipped"),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryBucket {
    pub bucket: BestScenario,
    pub count: usize,
    pub percentage: f64,
}

/// Class counts per winning scenario plus the "no clear best" bucket; every
/// bucket is listed, empty ones with count 0.
pub fn scenario_count_summary(best: &BTreeMap<usize, BestScenario>) -> Vec<SummaryBucket> {
    let total = best.len();
    Scenario::ALL
        .iter()
        .map(|&s| BestScenario::Scenario(s))
        .chain([BestScenario::NoClearBest])
        .map(|bucket| {
            let count = best.values().filter(|b| **b == bucket).count();
            let percentage = if total == 0 {
                0.0
            } else {
                100.0 * count as f64 / total as f64
            };
            SummaryBucket {
                bucket,
                count,
                percentage,
            }
        })
        .collect()
}

/// Contents of `best_scenarios.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestScenarioReport {
    pub threshold: f64,
    pub class_count: usize,
    pub per_class: BTreeMap<usize, BestScenario>,
    pub summary: Vec<SummaryBucket>,
}

/// First line of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub scenario: Scenario,
    pub class_count: usize,
    /// Hex SHA-256 of the attacked classifier checkpoint.
    pub classifier_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: LogHeader,
}

/// Append-only JSON Lines episode log: a header line, then one record per line.
pub struct EpisodeLogWriter {
    out: BufWriter<File>,
}

impl EpisodeLogWriter {
    pub fn create(path: &Path, header: &LogHeader) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut out,
            &HeaderLine {
                header: header.clone(),
            },
        )?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, records: &[EpisodeRecord]) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut self.out, r)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: Option<LogHeader>,
    pub records: Vec<EpisodeRecord>,
}

/// Reads an episode log. A final line without its newline (an interrupted
/// write) is ignored when it does not parse.
pub fn read_episode_log(path: &Path) -> Result<EpisodeLog> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = None;
    let mut records = Vec::new();
    let mut line = String::new();
    let mut line_no = 0usize;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        line_no += 1;
        let complete = line.ends_with('\n');
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(text) {
                header = Some(h.header);
                continue;
            }
        }
        match serde_json::from_str::<EpisodeRecord>(text) {
            Ok(r) => records.push(r),
            Err(_) if !complete => break,
            Err(e) => {
                return Err(Error::Inconsistent(format!(
                    "{}: line {line_no} is not an episode record: {e}",
                    path.display()
                )))
            }
        }
    }
    Ok(EpisodeLog { header, records })
}

pub fn write_episode_log(path: &Path, header: &LogHeader, records: &[EpisodeRecord]) -> Result<()> {
    EpisodeLogWriter::create(path, header)?.append(records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 6] = ["scenario", "class", "episodes", "successes", "lsr", "aaf"];

/// Writes the metrics table; undefined values become empty cells.
pub fn write_metrics_csv(path: &Path, table: &MetricsTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.scenario.name().to_string(),
            r.class.to_string(),
            r.episodes.to_string(),
            r.successes.to_string(),
            fmt_opt(r.lsr),
            fmt_opt(r.aaf),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let bad = |m: String| Error::Inconsistent(format!("{}: {m}", path.display()));
    if rdr.headers()?.iter().ne(METRICS_HEADER) {
        return Err(bad("unexpected metrics header".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>> {
            match &rec[i] {
                "" => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|e| bad(format!("column {i}: {e}"))),
            }
        };
        let int = |i: usize| -> Result<u64> {
            rec[i].parse().map_err(|e| bad(format!("column {i}: {e}")))
        };
        rows.push(MetricsRow {
            scenario: rec[0].parse()?,
            class: int(1)? as usize,
            episodes: int(2)?,
            successes: int(3)?,
            lsr: num(4)?,
            aaf: num(5)?,
        });
    }
    Ok(MetricsTable { rows })
}

pub fn plot_file_name(scenario: Scenario, class: usize) -> String {
    format!("lsr_{}_class{class}.csv", scenario.name())
}

/// Writes one `episode_index,running_lsr` CSV per (scenario, class) present
/// in `records`, returning the paths in scenario/class order.
pub fn write_plot_data(dir: &Path, records: &[EpisodeRecord]) -> Result<Vec<PathBuf>> {
    let mut groups: BTreeMap<(Scenario, usize), Vec<&EpisodeRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.scenario, r.class_label))
            .or_default()
            .push(r);
    }
    let mut paths = Vec::with_capacity(groups.len());
    for ((scenario, class), group) in groups {
        let path = dir.join(plot_file_name(scenario, class));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["episode_index", "running_lsr"])?;
        let mut running = RunningLsr::default();
        for r in group {
            let v = running.push(r.fooled);
            w.write_record([r.episode_index.to_string(), v.to_string()])?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
