//! Run directories: every study writes its raw records here, and reports are
//! assembled from those records alone.
//!
//! ```text
//! <out>/campaign.json          campaign settings and seed
//! <out>/library/               policy library
//! <out>/build.json             pool members, learned flags, scratch runs
//! <out>/curves/*.csv           one learning curve per run
//! <out>/savings_runs.json      warm-start runs of the savings study
//! <out>/savings.json|csv       savings table
//! <out>/savings_curves.csv     median curves per strategy
//! <out>/correlation_pairs.json donor/member pairs with measures and runs
//! <out>/correlation.json       Spearman table
//! <out>/spearman.csv
//! <out>/sensitivity.json|csv
//! <out>/report.json|csv        assembled campaign report
//! <out>/manifest.json          files written, tool version
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rotorlab::transfer::Library;

use crate::campaign::{
    build_library, correlation_study, median_curves, sample_pool, savings_study, summarize_correlation,
    summarize_savings, summarize_sensitivity, BuildManifest, CampaignSpec, CorrelationReport, PairRecord, RunRecord,
    SavingsReport, SensitivityLevel, SensitivityRow, Strategy,
};
use crate::LabError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LabError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, LabError> {
    let bytes = fs::read(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignFile {
    pub seed: u64,
    pub spec: CampaignSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Records `files` (relative to `dir`) under `command`, merging with earlier entries.
pub fn update_manifest(dir: &Path, command: &str, seed: u64, files: &[&str]) -> Result<(), LabError> {
    let path = dir.join("manifest.json");
    let mut manifests: Vec<Manifest> = if path.exists() { read_json(&path)? } else { Vec::new() };
    manifests.retain(|m| m.command != command);
    manifests.push(Manifest {
        tool_version: TOOL_VERSION.to_string(),
        command: command.to_string(),
        seed,
        files: files.iter().map(|s| s.to_string()).collect(),
    });
    write_json(&path, &manifests)
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self, LabError> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn campaign(&self) -> Result<CampaignFile, LabError> {
        read_json(&self.path("campaign.json"))
    }

    pub fn build(&self) -> Result<BuildManifest, LabError> {
        read_json(&self.path("build.json"))
    }

    pub fn library(&self) -> Result<Library, LabError> {
        Ok(Library::open(&self.path("library"))?)
    }

    fn write_curves(&self, runs: &[RunRecord]) -> Result<(), LabError> {
        let dir = self.path("curves");
        fs::create_dir_all(&dir)?;
        for r in runs {
            let donor = r.donor_hash.as_deref().map(|d| format!("_{}", &d[..8])).unwrap_or_default();
            let name = format!("{}_{}{}_{:016x}.csv", &r.config_hash[..12], r.strategy.name(), donor, r.seed);
            r.write_curve_csv(fs::File::create(dir.join(name))?)?;
        }
        Ok(())
    }
}

/// Samples the pool and trains the library into `<out>/library`.
pub fn run_build(dir: &RunDir, spec: &CampaignSpec, seed: u64) -> Result<BuildManifest, LabError> {
    spec.validate()?;
    write_json(&dir.path("campaign.json"), &CampaignFile { seed, spec: spec.clone() })?;
    let pool = sample_pool(spec, seed)?;
    let mut library = dir.library()?;
    let build = build_library(&pool, spec, seed, &mut library)?;
    write_json(&dir.path("build.json"), &build)?;
    dir.write_curves(&build.scratch_runs)?;
    update_manifest(&dir.root, "build-library", seed, &["campaign.json", "library/index.json", "build.json", "curves/"])?;
    Ok(build)
}

pub fn run_savings(dir: &RunDir) -> Result<SavingsReport, LabError> {
    let CampaignFile { seed, spec } = dir.campaign()?;
    let build = dir.build()?;
    let library = dir.library()?;
    let (runs, report) = savings_study(&library, &build, &spec, seed)?;
    write_json(&dir.path("savings_runs.json"), &runs)?;
    dir.write_curves(&runs)?;
    write_savings(dir, &build, &runs, &report, &spec)?;
    update_manifest(
        &dir.root,
        "study-savings",
        seed,
        &["savings_runs.json", "savings.json", "savings.csv", "savings_curves.csv"],
    )?;
    Ok(report)
}

fn write_savings(
    dir: &RunDir,
    build: &BuildManifest,
    runs: &[RunRecord],
    report: &SavingsReport,
    spec: &CampaignSpec,
) -> Result<(), LabError> {
    write_json(&dir.path("savings.json"), report)?;
    let mut w = csv::Writer::from_path(dir.path("savings.csv"))?;
    w.write_record(["config_hash", "strategy", "mean_interactions_to_goal", "savings", "flagged"])?;
    for r in &report.rows {
        w.write_record([
            r.config_hash.clone(),
            r.strategy.name().to_string(),
            r.mean_interactions.map(|v| v.to_string()).unwrap_or_default(),
            r.savings.map(|v| v.to_string()).unwrap_or_default(),
            report.flagged.contains(&r.config_hash).to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.path("savings_curves.csv"))?;
    w.write_record(["strategy", "interactions", "median_reward", "mean_seed_std"])?;
    let step = spec.ppo.interactions_per_rollout();
    for (strategy, x, m, s) in median_curves(build, runs, step, spec.ppo.max_interactions) {
        w.write_record([strategy.name().to_string(), x.to_string(), m.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_correlation(dir: &RunDir) -> Result<CorrelationReport, LabError> {
    let CampaignFile { seed, spec } = dir.campaign()?;
    let build = dir.build()?;
    let library = dir.library()?;
    let (pairs, report) = correlation_study(&library, &build, &spec, seed)?;
    write_json(&dir.path("correlation_pairs.json"), &pairs)?;
    dir.write_curves(&pairs.iter().map(|p| p.run.clone()).collect::<Vec<_>>())?;
    write_correlation(dir, &report)?;
    update_manifest(
        &dir.root,
        "study-correlation",
        seed,
        &["correlation_pairs.json", "correlation.json", "spearman.csv"],
    )?;
    Ok(report)
}

fn write_correlation(dir: &RunDir, report: &CorrelationReport) -> Result<(), LabError> {
    write_json(&dir.path("correlation.json"), report)?;
    let mut w = csv::Writer::from_path(dir.path("spearman.csv"))?;
    w.write_record(["measure", "goal_fraction", "goal", "rho", "p_value", "n", "degenerate"])?;
    for r in &report.rows {
        w.write_record([
            r.measure.name().to_string(),
            r.goal_fraction.to_string(),
            r.goal.to_string(),
            r.result.rho.to_string(),
            r.result.p_value.to_string(),
            r.result.n.to_string(),
            r.result.degenerate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sensitivity(dir: &RunDir, rows: &[SensitivityRow], seed: u64) -> Result<Vec<SensitivityLevel>, LabError> {
    write_json(&dir.path("sensitivity.json"), &rows)?;
    let mut w = csv::Writer::from_path(dir.path("sensitivity.csv"))?;
    w.write_record(["level", "seed", "noise_std", "mean_position_error", "steady_state_error", "crashes"])?;
    for r in rows {
        w.write_record([
            r.level.to_string(),
            r.seed.to_string(),
            r.noise_std.to_string(),
            r.mean_position_error.to_string(),
            r.steady_state_error.to_string(),
            r.crashes.to_string(),
        ])?;
    }
    w.flush()?;
    update_manifest(&dir.root, "study-sensitivity", seed, &["sensitivity.json", "sensitivity.csv"])?;
    Ok(summarize_sensitivity(rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyLine {
    pub strategy: Strategy,
    pub median_savings: Option<f64>,
    pub configs_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub tool_version: String,
    pub seed: u64,
    pub training_seeds: Vec<u64>,
    pub pool_size: usize,
    pub library_size: usize,
    pub discarded: Vec<String>,
    pub savings: Option<SavingsReport>,
    pub correlation: Option<CorrelationReport>,
    pub sensitivity: Option<Vec<SensitivityLevel>>,
}

/// Rebuilds every table from the stored run records.
pub fn assemble_report(dir: &RunDir) -> Result<CampaignReport, LabError> {
    let CampaignFile { seed, spec } = dir.campaign()?;
    let build = dir.build()?;
    let savings = match dir.path("savings_runs.json") {
        p if p.exists() => {
            let runs: Vec<RunRecord> = read_json(&p)?;
            Some(summarize_savings(&build, &runs, spec.savings_goal_fraction)?)
        }
        _ => None,
    };
    let correlation = match dir.path("correlation_pairs.json") {
        p if p.exists() => {
            let pairs: Vec<PairRecord> = read_json(&p)?;
            Some(summarize_correlation(&build, &pairs, &spec, seed)?)
        }
        _ => None,
    };
    let sensitivity = match dir.path("sensitivity.json") {
        p if p.exists() => Some(summarize_sensitivity(&read_json::<Vec<SensitivityRow>>(&p)?)),
        _ => None,
    };
    Ok(CampaignReport {
        tool_version: TOOL_VERSION.to_string(),
        seed,
        training_seeds: spec.seeds.clone(),
        pool_size: build.members.len(),
        library_size: build.library_hashes().len(),
        discarded: build.members.iter().filter(|m| !m.learned).map(|m| m.config_hash.clone()).collect(),
        savings,
        correlation,
        sensitivity,
    })
}

/// Assembles the report and checks it against the tables each study stored.
pub fn audit(dir: &RunDir) -> Result<CampaignReport, LabError> {
    let report = assemble_report(dir)?;
    let mismatch = |what: &str| LabError::Validation(format!("{what} does not match its stored records"));
    if let Some(s) = &report.savings {
        if read_json::<SavingsReport>(&dir.path("savings.json"))? != *s {
            return Err(mismatch("savings.json"));
        }
    }
    if let Some(c) = &report.correlation {
        if read_json::<CorrelationReport>(&dir.path("correlation.json"))? != *c {
            return Err(mismatch("correlation.json"));
        }
    }
    let library = dir.library()?;
    if library.len() != report.library_size {
        return Err(mismatch("library index"));
    }
    Ok(report)
}

pub fn write_report(dir: &RunDir) -> Result<CampaignReport, LabError> {
    let report = audit(dir)?;
    write_json(&dir.path("report.json"), &report)?;
    let mut w = csv::Writer::from_path(dir.path("report.csv"))?;
    w.write_record(["section", "key", "value"])?;
    w.write_record(["library", "pool_size", &report.pool_size.to_string()])?;
    w.write_record(["library", "library_size", &report.library_size.to_string()])?;
    if let Some(s) = &report.savings {
        w.write_record(["savings", "goal", &s.goal.to_string()])?;
        for line in &s.summary {
            let v = line.median_savings.map(|v| v.to_string()).unwrap_or_default();
            w.write_record(["savings", line.strategy.name(), &v])?;
        }
        w.write_record(["savings", "flagged", &s.flagged.len().to_string()])?;
    }
    if let Some(c) = &report.correlation {
        w.write_record(["correlation", "study_goal_fraction", &c.study_goal_fraction.to_string()])?;
        for m in &c.summary {
            let rho = c.abs_rho_at(m.measure, c.study_goal_fraction).map(|v| v.to_string()).unwrap_or_default();
            w.write_record(["correlation", m.measure.name(), &rho])?;
        }
    }
    if let Some(levels) = &report.sensitivity {
        for l in levels {
            w.write_record(["sensitivity", &l.level.to_string(), &l.mean_error.to_string()])?;
        }
    }
    w.flush()?;
    update_manifest(&dir.root, "report", report.seed, &["report.json", "report.csv"])?;
    Ok(report)
}
