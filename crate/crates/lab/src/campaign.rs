//! Library-building campaigns and the studies run on top of a built library.
//!
//! Every study returns its raw run records next to the tables computed from them;
//! the tables are pure functions of the records, so a report can be rebuilt and
//! audited from what is stored on disk.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rotorlab::airframe::{compute_wrench_box, AirframeConfig};
use rotorlab::alloc::{generate_dataset, train_allocation_net, AllocMode, AllocTrainOptions, AllocationNet, QpOptions};
use rotorlab::rl::{
    evaluate_detailed, evaluate_policy, train, CurvePoint, Environment, EvalOptions, InteractionMeter, PolicyPair,
    PpoConfig, TerminationReason, TrainingCurve,
};
use rotorlab::sim::{Fidelity, InitBounds, RewardMode, SimParams};
use rotorlab::transfer::{
    jump_start, measure_mc, measure_mr, measure_mwd, EntryMeta, Library, LibraryEntry, MeasureId, SelectionParams,
    WassersteinForm,
};

use crate::sampling::{sample_config, sample_neighbors, SamplingSpec};
use crate::stats::{median, spearman, std_dev, SpearmanResult};
use crate::LabError;

/// Settings for donor scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    pub mr_envs: usize,
    pub mr_steps: usize,
    pub mwd_samples: usize,
    pub mwd_form: WassersteinForm,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self { mr_envs: 16, mr_steps: 128, mwd_samples: 256, mwd_form: WassersteinForm::AsPrinted }
    }
}

impl SelectionSettings {
    pub fn params(&self, measure: MeasureId, seed: u64) -> SelectionParams {
        SelectionParams {
            measure,
            mr_envs: self.mr_envs,
            mr_steps: self.mr_steps,
            mwd_samples: self.mwd_samples,
            mwd_form: self.mwd_form,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignSpec {
    pub sampling: SamplingSpec,
    pub bases: usize,
    pub neighbors_per_base: usize,
    /// Training seeds per configuration.
    pub seeds: Vec<u64>,
    pub ppo: PpoConfig,
    pub alloc_samples: usize,
    pub alloc_mode: AllocMode,
    pub alloc_training: AllocTrainOptions,
    pub sim: SimParams,
    pub reward_mode: RewardMode,
    pub init: InitBounds,
    /// Deterministic evaluation used to decide whether a scratch run learned.
    pub eval_envs: usize,
    pub eval_steps: usize,
    /// A run has learned if no evaluation episode crashes and the steady-state position
    /// error stays below this, m.
    pub learned_max_error: f64,
    pub selection: SelectionSettings,
    /// Goal rewards as fractions of the median scratch final reward.
    pub goal_fractions: Vec<f64>,
    pub savings_goal_fraction: f64,
    /// Random donors per configuration in the correlation study.
    pub donors_per_config: usize,
    pub permutations: usize,
    /// Concurrent training jobs; 0 uses every available core.
    pub max_jobs: usize,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        Self {
            sampling: SamplingSpec::default(),
            bases: 8,
            neighbors_per_base: 2,
            seeds: vec![0, 1],
            ppo: PpoConfig { max_interactions: 1_500_000, ..PpoConfig::default() },
            alloc_samples: 20_000,
            alloc_mode: AllocMode::Unconstrained,
            alloc_training: AllocTrainOptions::default(),
            sim: SimParams { fidelity: Fidelity::Low, ..SimParams::default() },
            reward_mode: RewardMode::PositionOnly,
            init: InitBounds::default(),
            eval_envs: 32,
            eval_steps: 300,
            learned_max_error: 0.5,
            selection: SelectionSettings::default(),
            goal_fractions: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            savings_goal_fraction: 0.8,
            donors_per_config: 2,
            permutations: crate::stats::DEFAULT_PERMUTATIONS,
            max_jobs: 0,
        }
    }
}

impl CampaignSpec {
    pub fn validate(&self) -> Result<(), LabError> {
        self.sampling.validate()?;
        self.ppo.validate()?;
        self.sim.validate().map_err(|e| LabError::Validation(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(LabError::Validation("at least one training seed is required".into()));
        }
        if self.alloc_samples == 0 || self.eval_envs == 0 || self.eval_steps == 0 {
            return Err(LabError::Validation("alloc_samples, eval_envs and eval_steps must be positive".into()));
        }
        if self.selection.mr_envs * self.selection.mr_steps == 0 || self.selection.mwd_samples == 0 {
            return Err(LabError::Validation("selection sample sizes must be positive".into()));
        }
        if self.goal_fractions.iter().chain([&self.savings_goal_fraction]).any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(LabError::Validation("goal fractions must be positive".into()));
        }
        Ok(())
    }

    /// Seed shared by every m_r / m_wd evaluation in a campaign, so that all donors
    /// are scored on the same initial states and samples.
    pub fn selection_seed(&self, campaign_seed: u64) -> u64 {
        derive_seed(campaign_seed, "selection", 0)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent, stable sub-seed for the job named by `tag` and `index`.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let tag_hash = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    splitmix(base ^ splitmix(tag_hash ^ splitmix(index)))
}

fn hash_index(hash: &str) -> u64 {
    u64::from_str_radix(&hash[..16.min(hash.len())], 16).unwrap_or(0)
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs `f` over `items` on up to `max_jobs` threads. Results keep input order.
pub fn parallel_map<T, R, F>(items: &[T], max_jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let jobs = if max_jobs == 0 { available } else { max_jobs }.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result slots").into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolMember {
    pub config: AirframeConfig,
    /// Index of the base airframe this member was derived from.
    pub family: String,
    pub is_base: bool,
}

/// `bases` random airframes, each followed by its neighbors.
pub fn sample_pool(spec: &CampaignSpec, seed: u64) -> Result<Vec<PoolMember>, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pool", 0));
    let mut pool = Vec::with_capacity(spec.bases * (1 + spec.neighbors_per_base));
    for b in 0..spec.bases {
        let family = format!("b{b:02}");
        let base = sample_config(&spec.sampling, &mut rng)?;
        let neighbors = sample_neighbors(&base, spec.neighbors_per_base, &spec.sampling, &mut rng)?;
        pool.push(PoolMember { config: base, family: family.clone(), is_base: true });
        pool.extend(neighbors.into_iter().map(|config| PoolMember { config, family: family.clone(), is_base: false }));
    }
    Ok(pool)
}

/// Trains the configuration-specific allocation network.
pub fn train_alloc_for(config: &AirframeConfig, spec: &CampaignSpec, seed: u64) -> Result<AllocationNet, LabError> {
    let wrench_box = compute_wrench_box(config)?;
    let data = generate_dataset(config, &wrench_box, spec.alloc_samples, spec.alloc_mode, seed, QpOptions::default())?;
    let (net, _) = train_allocation_net(config, &data, &spec.alloc_training, seed.wrapping_add(1))?;
    Ok(net)
}

pub fn environment_for(config: &AirframeConfig, alloc: AllocationNet, spec: &CampaignSpec) -> Result<Environment, LabError> {
    Ok(Environment::new(config, alloc, spec.sim.clone(), spec.reward_mode, spec.init)?)
}

pub fn entry_environment(entry: &LibraryEntry, spec: &CampaignSpec) -> Result<Environment, LabError> {
    environment_for(&entry.airframe, entry.alloc.clone(), spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Scratch,
    RandomDonor,
    /// m_r selection over base airframes only.
    SparseLibrary,
    /// m_r selection over the whole library.
    FullLibrary,
    /// A fixed donor, used by the correlation study.
    Donor,
}

impl Strategy {
    pub const SAVINGS: [Strategy; 4] =
        [Strategy::Scratch, Strategy::RandomDonor, Strategy::SparseLibrary, Strategy::FullLibrary];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Scratch => "scratch",
            Strategy::RandomDonor => "random_donor",
            Strategy::SparseLibrary => "sparse_library",
            Strategy::FullLibrary => "full_library",
            Strategy::Donor => "donor",
        }
    }
}

/// One training run, with everything needed to recompute the numbers derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub donor_hash: Option<String>,
    pub selection_cost: u64,
    pub curve: Vec<CurvePoint>,
    pub goal_window: usize,
    pub terminated: TerminationReason,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    fn new(
        config_hash: &str,
        strategy: Strategy,
        seed: u64,
        donor: Option<&str>,
        selection_cost: u64,
        curve: &TrainingCurve,
        goal_window: usize,
    ) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            strategy,
            seed,
            donor_hash: donor.map(str::to_string),
            selection_cost,
            curve: curve.points.clone(),
            goal_window,
            terminated: curve.terminated_reason,
            wall_clock_seconds: curve.wall_clock_seconds,
        }
    }

    pub fn training_curve(&self) -> TrainingCurve {
        TrainingCurve {
            points: self.curve.clone(),
            seed: self.seed,
            wall_clock_seconds: self.wall_clock_seconds,
            terminated_reason: self.terminated,
            updates: self.curve.len().saturating_sub(1),
        }
    }

    pub fn interactions_to_goal(&self, goal: f64) -> Option<u64> {
        self.training_curve().interactions_to_goal(goal, self.goal_window)
    }

    /// Moving average of the rollout reward at the end of the run.
    pub fn final_reward(&self) -> Option<f64> {
        let c = self.training_curve();
        (!c.points.is_empty()).then(|| c.moving_average(c.points.len() - 1, self.goal_window))
    }

    pub fn write_curve_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        self.training_curve().write_csv(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub config_hash: String,
    pub family: String,
    pub is_base: bool,
    pub learned: bool,
    /// Per seed: steady-state position error of the deterministic evaluation.
    pub eval_errors: Vec<f64>,
    pub eval_crashes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub seed: u64,
    pub members: Vec<MemberRecord>,
    pub scratch_runs: Vec<RunRecord>,
}

impl BuildManifest {
    pub fn library_hashes(&self) -> Vec<&str> {
        self.members.iter().filter(|m| m.learned).map(|m| m.config_hash.as_str()).collect()
    }

    pub fn scratch_runs_for<'a>(&'a self, hash: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.scratch_runs.iter().filter(move |r| r.config_hash == hash)
    }

    /// Median over every scratch run of a library member of its final reward.
    pub fn median_scratch_final(&self) -> Option<f64> {
        let hashes = self.library_hashes();
        let finals: Vec<f64> = self
            .scratch_runs
            .iter()
            .filter(|r| hashes.contains(&r.config_hash.as_str()))
            .filter_map(RunRecord::final_reward)
            .collect();
        median(&finals)
    }

    pub fn is_base(&self, hash: &str) -> bool {
        self.members.iter().any(|m| m.config_hash == hash && m.is_base)
    }
}

struct MemberOutcome {
    record: MemberRecord,
    runs: Vec<RunRecord>,
    entry: Option<LibraryEntry>,
}

fn build_member(member: &PoolMember, index: usize, spec: &CampaignSpec, seed: u64) -> Result<MemberOutcome, LabError> {
    let hash = member.config.config_hash();
    let alloc = train_alloc_for(&member.config, spec, derive_seed(seed, "alloc", index as u64))?;
    let env = environment_for(&member.config, alloc.clone(), spec)?;
    let eval = EvalOptions {
        n_envs: spec.eval_envs,
        steps: spec.eval_steps,
        seed: derive_seed(seed, "learn-eval", 0),
        allocation_noise_std: 0.0,
    };
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    let mut crashes = Vec::new();
    let mut best: Option<(f64, PolicyPair, u64, u64)> = None;
    for &s in &spec.seeds {
        let run_seed = derive_seed(seed, "scratch", hash_index(&hash) ^ s);
        let mut meter = InteractionMeter::new();
        let (policy, curve) = train(&env, &spec.ppo, None, run_seed, &mut meter)?;
        let report = evaluate_detailed(&policy, &env, &eval, &mut InteractionMeter::new())?;
        let record = RunRecord::new(&hash, Strategy::Scratch, run_seed, None, 0, &curve, spec.ppo.goal_window);
        let final_reward = record.final_reward().unwrap_or(f64::NEG_INFINITY);
        info!(
            "{} {} seed {s}: final {final_reward:.1}, steady-state error {:.3} m, {} crashes, {:.0} s",
            member.family,
            &hash[..8],
            report.steady_state_position_error,
            report.crashes,
            curve.wall_clock_seconds
        );
        let learned = report.crashes == 0 && report.steady_state_position_error <= spec.learned_max_error;
        if learned && best.as_ref().is_none_or(|b| final_reward > b.0) {
            best = Some((final_reward, policy, run_seed, meter.count()));
        }
        errors.push(report.steady_state_position_error);
        crashes.push(report.crashes);
        runs.push(record);
    }
    let learned = best.is_some();
    let entry = match best {
        Some((final_reward, policy, run_seed, interactions)) => {
            let eval_seed = spec.selection_seed(seed);
            let eval_reward = evaluate_policy(
                &policy,
                &env,
                spec.selection.mr_envs,
                spec.selection.mr_steps,
                eval_seed,
                &mut InteractionMeter::new(),
            )?;
            Some(LibraryEntry {
                wrench_box: env.wrench_box.clone(),
                airframe: member.config.clone(),
                alloc,
                policy,
                meta: EntryMeta {
                    hash: hash.clone(),
                    family: member.family.clone(),
                    final_reward,
                    interactions,
                    seed: run_seed,
                    fidelity: spec.sim.fidelity,
                    reward_mode: spec.reward_mode,
                    eval_reward: Some(eval_reward),
                    eval_seed: Some(eval_seed),
                    created_unix: now_unix(),
                },
            })
        }
        None => None,
    };
    let record = MemberRecord {
        config_hash: hash,
        family: member.family.clone(),
        is_base: member.is_base,
        learned,
        eval_errors: errors,
        eval_crashes: crashes,
    };
    Ok(MemberOutcome { record, runs, entry })
}

/// Trains every pool member from scratch under each seed and stores the best learned
/// policy per member. Members that learn under no seed are recorded and left out.
pub fn build_library(
    pool: &[PoolMember],
    spec: &CampaignSpec,
    seed: u64,
    library: &mut Library,
) -> Result<BuildManifest, LabError> {
    spec.validate()?;
    let outcomes = parallel_map(pool, spec.max_jobs, |i, m| build_member(m, i, spec, seed));
    let mut manifest = BuildManifest { seed, members: Vec::new(), scratch_runs: Vec::new() };
    for (member, outcome) in pool.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                if let Some(entry) = o.entry {
                    library.add(entry)?;
                }
                manifest.members.push(o.record);
                manifest.scratch_runs.extend(o.runs);
            }
            Err(e) => {
                log::warn!("{} failed: {e}", member.family);
                manifest.members.push(MemberRecord {
                    config_hash: member.config.config_hash(),
                    family: member.family.clone(),
                    is_base: member.is_base,
                    learned: false,
                    eval_errors: Vec::new(),
                    eval_crashes: Vec::new(),
                });
            }
        }
    }
    Ok(manifest)
}

/// Library without `exclude`, optionally restricted to base airframes.
fn sub_library(library: &Library, build: &BuildManifest, exclude: &str, bases_only: bool) -> Result<Library, LabError> {
    let mut sub = Library::in_memory();
    for e in library.entries() {
        if e.hash() != exclude && (!bases_only || build.is_base(e.hash())) {
            sub.add(e.clone())?;
        }
    }
    Ok(sub)
}

fn goal_config(spec: &CampaignSpec, goal: f64) -> PpoConfig {
    PpoConfig { goal_reward: Some(goal), ..spec.ppo.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub config_hash: String,
    pub strategy: Strategy,
    /// Per training seed, in seed order.
    pub interactions_to_goal: Vec<Option<u64>>,
    pub mean_interactions: Option<f64>,
    pub savings: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub median_savings: Option<f64>,
    pub median_interactions: Option<f64>,
    pub configs_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub goal: f64,
    pub goal_fraction: f64,
    pub median_scratch_final: f64,
    pub rows: Vec<SavingsRow>,
    pub summary: Vec<StrategySummary>,
    /// Configurations where some strategy missed the goal; excluded from the medians.
    pub flagged: Vec<String>,
}

impl SavingsReport {
    pub fn median_savings(&self, strategy: Strategy) -> Option<f64> {
        self.summary.iter().find(|s| s.strategy == strategy).and_then(|s| s.median_savings)
    }
}

/// Savings table from stored runs. Scratch runs come from the library build.
pub fn summarize_savings(
    build: &BuildManifest,
    runs: &[RunRecord],
    goal_fraction: f64,
) -> Result<SavingsReport, LabError> {
    let median_final = build.median_scratch_final().ok_or(LabError::InsufficientData(0))?;
    let goal = goal_fraction * median_final;
    let mut rows = Vec::new();
    let mut flagged = Vec::new();
    for hash in build.library_hashes() {
        let mut per_strategy = BTreeMap::new();
        for strategy in Strategy::SAVINGS {
            let mut matching: Vec<&RunRecord> = if strategy == Strategy::Scratch {
                build.scratch_runs_for(hash).collect()
            } else {
                runs.iter().filter(|r| r.config_hash == hash && r.strategy == strategy).collect()
            };
            matching.sort_by_key(|r| r.seed);
            let itg: Vec<Option<u64>> = matching.iter().map(|r| r.interactions_to_goal(goal)).collect();
            let mean = (!itg.is_empty() && itg.iter().all(Option::is_some))
                .then(|| itg.iter().map(|v| v.unwrap() as f64).sum::<f64>() / itg.len() as f64);
            per_strategy.insert(strategy, (itg, mean));
        }
        let scratch = per_strategy[&Strategy::Scratch].1;
        if per_strategy.values().any(|(_, m)| m.is_none()) {
            flagged.push(hash.to_string());
        }
        for (strategy, (itg, mean)) in per_strategy {
            let savings = match (mean, scratch) {
                (Some(m), Some(s)) => Some(1.0 - m / s),
                _ => None,
            };
            rows.push(SavingsRow {
                config_hash: hash.to_string(),
                strategy,
                interactions_to_goal: itg,
                mean_interactions: mean,
                savings,
            });
        }
    }
    let summary = Strategy::SAVINGS
        .iter()
        .map(|&strategy| {
            let used: Vec<&SavingsRow> =
                rows.iter().filter(|r| r.strategy == strategy && !flagged.contains(&r.config_hash)).collect();
            let savings: Vec<f64> = used.iter().filter_map(|r| r.savings).collect();
            let interactions: Vec<f64> = used.iter().filter_map(|r| r.mean_interactions).collect();
            StrategySummary {
                strategy,
                median_savings: median(&savings),
                median_interactions: median(&interactions),
                configs_used: used.len(),
            }
        })
        .collect();
    Ok(SavingsReport { goal, goal_fraction, median_scratch_final: median_final, rows, summary, flagged })
}

/// Retrains every library member under each warm-start strategy, leaving the member
/// itself out of the library it may draw from.
pub fn savings_study(
    library: &Library,
    build: &BuildManifest,
    spec: &CampaignSpec,
    seed: u64,
) -> Result<(Vec<RunRecord>, SavingsReport), LabError> {
    let median_final = build.median_scratch_final().ok_or(LabError::InsufficientData(0))?;
    let goal = spec.savings_goal_fraction * median_final;
    let ppo = goal_config(spec, goal);
    let selection_seed = spec.selection_seed(seed);
    let mut jobs = Vec::new();
    for (i, entry) in library.entries().iter().enumerate() {
        for &s in &spec.seeds {
            for strategy in [Strategy::RandomDonor, Strategy::SparseLibrary, Strategy::FullLibrary] {
                jobs.push((i, entry, s, strategy));
            }
        }
    }
    let results = parallel_map(&jobs, spec.max_jobs, |_, &(i, entry, s, strategy)| -> Result<RunRecord, LabError> {
        let env = entry_environment(entry, spec)?;
        let hash = entry.hash();
        let run_seed = derive_seed(seed, "savings", hash_index(hash) ^ s);
        let record = match strategy {
            Strategy::RandomDonor => {
                let pool = sub_library(library, build, hash, false)?;
                if pool.is_empty() {
                    return Err(LabError::Transfer(rotorlab::transfer::TransferError::EmptyLibrary));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-donor", (i as u64) << 8 | s));
                let donor = &pool.entries()[rng.random_range(0..pool.len())];
                let (_, curve) = train(&env, &ppo, Some(donor.policy.clone()), run_seed, &mut InteractionMeter::new())?;
                RunRecord::new(hash, strategy, run_seed, Some(donor.hash()), 0, &curve, ppo.goal_window)
            }
            _ => {
                let pool = sub_library(library, build, hash, strategy == Strategy::SparseLibrary)?;
                let params = spec.selection.params(MeasureId::Mr, selection_seed);
                let (_, curve, prov) = jump_start(&env, &pool, &params, &ppo, run_seed)?;
                RunRecord::new(hash, strategy, run_seed, Some(&prov.donor_hash), prov.selection_cost, &curve, ppo.goal_window)
            }
        };
        info!(
            "savings {} {} seed {s}: goal at {:?}",
            &hash[..8],
            strategy.name(),
            record.interactions_to_goal(goal)
        );
        Ok(record)
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = summarize_savings(build, &runs, spec.savings_goal_fraction)?;
    Ok((runs, report))
}

/// Median over configurations of the seed-averaged reward at each interaction count,
/// holding each curve at its last value, and the mean over configurations of the
/// per-configuration standard deviation across seeds.
pub fn median_curves(
    build: &BuildManifest,
    runs: &[RunRecord],
    step: u64,
    horizon: u64,
) -> Vec<(Strategy, u64, f64, f64)> {
    let value_at = |r: &RunRecord, x: u64| r.curve.iter().take_while(|p| p.interactions <= x).last().map(|p| p.reward);
    let mut out = Vec::new();
    for strategy in Strategy::SAVINGS {
        let mut x = step;
        while x <= horizon {
            let mut means = Vec::new();
            let mut stds = Vec::new();
            for hash in build.library_hashes() {
                let matching: Vec<&RunRecord> = if strategy == Strategy::Scratch {
                    build.scratch_runs_for(hash).collect()
                } else {
                    runs.iter().filter(|r| r.config_hash == hash && r.strategy == strategy).collect()
                };
                let vals: Vec<f64> = matching.iter().filter_map(|r| value_at(r, x)).collect();
                if !vals.is_empty() {
                    means.push(vals.iter().sum::<f64>() / vals.len() as f64);
                    stds.push(std_dev(&vals));
                }
            }
            if let Some(m) = median(&means) {
                out.push((strategy, x, m, stds.iter().sum::<f64>() / stds.len() as f64));
            }
            x += step;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub config_hash: String,
    pub donor_hash: String,
    pub mc: Option<f64>,
    pub mwd: f64,
    pub mr: f64,
    pub run: RunRecord,
}

impl PairRecord {
    pub fn measure(&self, m: MeasureId) -> Option<f64> {
        match m {
            MeasureId::Mc => self.mc,
            MeasureId::Mwd => Some(self.mwd),
            MeasureId::Mr => Some(self.mr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub measure: MeasureId,
    pub goal_fraction: f64,
    pub goal: f64,
    pub result: SpearmanResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub measure: MeasureId,
    /// Highest goal fraction with p ≤ 0.01, if any.
    pub reported_goal_fraction: Option<f64>,
    pub reported_abs_rho: Option<f64>,
    pub reported_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub median_scratch_final: f64,
    /// Interactions charged for a run that never reached a goal.
    pub censor_value: u64,
    pub rows: Vec<CorrelationRow>,
    pub summary: Vec<MeasureSummary>,
    /// The goal the measures are compared at: the highest one where m_r reaches
    /// p ≤ 0.01, or the one with the smallest m_r p-value if none does.
    pub study_goal_fraction: f64,
}

impl CorrelationReport {
    pub fn abs_rho_at(&self, measure: MeasureId, goal_fraction: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.measure == measure && r.goal_fraction == goal_fraction)
            .map(|r| r.result.rho.abs())
    }
}

/// Interactions saved against the seed-averaged scratch runs; misses count as `censor`.
pub fn interactions_saved(build: &BuildManifest, pair: &PairRecord, goal: f64, censor: u64) -> f64 {
    let scratch: Vec<f64> = build
        .scratch_runs_for(&pair.config_hash)
        .map(|r| r.interactions_to_goal(goal).unwrap_or(censor) as f64)
        .collect();
    let scratch = scratch.iter().sum::<f64>() / scratch.len().max(1) as f64;
    scratch - pair.run.interactions_to_goal(goal).unwrap_or(censor) as f64
}

pub fn summarize_correlation(
    build: &BuildManifest,
    pairs: &[PairRecord],
    spec: &CampaignSpec,
    seed: u64,
) -> Result<CorrelationReport, LabError> {
    let median_final = build.median_scratch_final().ok_or(LabError::InsufficientData(0))?;
    let censor = spec.ppo.max_interactions;
    let mut rows = Vec::new();
    for measure in MeasureId::ALL {
        for (gi, &fraction) in spec.goal_fractions.iter().enumerate() {
            let goal = fraction * median_final;
            let (x, y): (Vec<f64>, Vec<f64>) = pairs
                .iter()
                .filter_map(|p| p.measure(measure).map(|m| (m, interactions_saved(build, p, goal, censor))))
                .unzip();
            let result = spearman(&x, &y, spec.permutations, derive_seed(seed, measure.name(), gi as u64))?;
            rows.push(CorrelationRow { measure, goal_fraction: fraction, goal, result });
        }
    }
    let summary = MeasureId::ALL
        .iter()
        .map(|&measure| {
            let best = rows
                .iter()
                .filter(|r| r.measure == measure && r.result.p_value <= 0.01)
                .max_by(|a, b| a.goal_fraction.total_cmp(&b.goal_fraction));
            MeasureSummary {
                measure,
                reported_goal_fraction: best.map(|r| r.goal_fraction),
                reported_abs_rho: best.map(|r| r.result.rho.abs()),
                reported_p: best.map(|r| r.result.p_value),
            }
        })
        .collect::<Vec<_>>();
    let mr_rows: Vec<&CorrelationRow> = rows.iter().filter(|r| r.measure == MeasureId::Mr).collect();
    let study_goal_fraction = summary
        .iter()
        .find(|s| s.measure == MeasureId::Mr)
        .and_then(|s| s.reported_goal_fraction)
        .or_else(|| {
            mr_rows.iter().min_by(|a, b| a.result.p_value.total_cmp(&b.result.p_value)).map(|r| r.goal_fraction)
        })
        .ok_or(LabError::InsufficientData(0))?;
    Ok(CorrelationReport { median_scratch_final: median_final, censor_value: censor, rows, summary, study_goal_fraction })
}

/// Retrains every library member from randomly drawn donors and records each
/// similarity measure between member and donor next to the resulting run.
pub fn correlation_study(
    library: &Library,
    build: &BuildManifest,
    spec: &CampaignSpec,
    seed: u64,
) -> Result<(Vec<PairRecord>, CorrelationReport), LabError> {
    let median_final = build.median_scratch_final().ok_or(LabError::InsufficientData(0))?;
    let top_fraction = spec.goal_fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ppo = goal_config(spec, top_fraction * median_final);
    let selection_seed = spec.selection_seed(seed);
    let entries = library.entries();
    let mut jobs = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let mut others: Vec<usize> = (0..entries.len()).filter(|&j| j != i).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corr-donors", i as u64));
        for k in 0..spec.donors_per_config.min(others.len()) {
            let j = others.swap_remove(rng.random_range(0..others.len()));
            jobs.push((entry, &entries[j], k as u64));
        }
    }
    let results = parallel_map(&jobs, spec.max_jobs, |_, &(entry, donor, k)| -> Result<PairRecord, LabError> {
        let env = entry_environment(entry, spec)?;
        let hash = entry.hash();
        let sel = spec.selection;
        let mc = measure_mc(&entry.airframe, &donor.airframe).ok().map(|s| s.value);
        let mwd = measure_mwd(&entry.airframe, &donor.airframe, sel.mwd_samples, selection_seed, sel.mwd_form).value;
        let mr = measure_mr(&env, &donor.policy, sel.mr_envs, sel.mr_steps, selection_seed, &mut InteractionMeter::new())?
            .value;
        let run_seed = derive_seed(seed, "corr-run", hash_index(hash) ^ k);
        let (_, curve) = train(&env, &ppo, Some(donor.policy.clone()), run_seed, &mut InteractionMeter::new())?;
        let run = RunRecord::new(hash, Strategy::Donor, run_seed, Some(donor.hash()), 0, &curve, ppo.goal_window);
        info!("pair {} <- {}: m_r {mr:.1}, final {:?}", &hash[..8], &donor.hash()[..8], run.final_reward());
        Ok(PairRecord { config_hash: hash.to_string(), donor_hash: donor.hash().to_string(), mc, mwd, mr, run })
    });
    let pairs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = summarize_correlation(build, &pairs, spec, seed)?;
    Ok((pairs, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    /// Target mean absolute allocation error, normalized to the thrust range.
    pub level: f64,
    pub seed: u64,
    pub noise_std: f64,
    pub mean_position_error: f64,
    pub steady_state_error: f64,
    pub crashes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityLevel {
    pub level: f64,
    pub mean_error: f64,
    pub std_error: f64,
}

pub const SENSITIVITY_LEVELS: [f64; 4] = [0.0, 1e-3, 1e-2, 5e-2];

/// Closed-loop tracking error of a frozen policy with zero-mean Gaussian noise on the
/// normalized allocation output. The noise std `e·√(π/2)` gives mean absolute error `e`.
pub fn sensitivity_study(
    policy: &PolicyPair,
    env: &Environment,
    levels: &[f64],
    seeds: &[u64],
    n_envs: usize,
    steps: usize,
) -> Result<Vec<SensitivityRow>, LabError> {
    let mut rows = Vec::new();
    for &level in levels {
        let noise_std = level * std::f64::consts::FRAC_PI_2.sqrt();
        for &seed in seeds {
            let opts = EvalOptions { n_envs, steps, seed, allocation_noise_std: noise_std };
            let r = evaluate_detailed(policy, env, &opts, &mut InteractionMeter::new())?;
            rows.push(SensitivityRow {
                level,
                seed,
                noise_std,
                mean_position_error: r.mean_position_error,
                steady_state_error: r.steady_state_position_error,
                crashes: r.crashes,
            });
        }
    }
    Ok(rows)
}

pub fn summarize_sensitivity(rows: &[SensitivityRow]) -> Vec<SensitivityLevel> {
    let mut levels: Vec<f64> = rows.iter().map(|r| r.level).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
        .into_iter()
        .map(|level| {
            let errs: Vec<f64> = rows.iter().filter(|r| r.level == level).map(|r| r.mean_position_error).collect();
            SensitivityLevel { level, mean_error: errs.iter().sum::<f64>() / errs.len() as f64, std_error: std_dev(&errs) }
        })
        .collect()
}

/// True if no level's mean error drops below its predecessor's by more than the
/// largest across-seed standard deviation.
pub fn is_monotone_within_noise(levels: &[SensitivityLevel]) -> bool {
    let band = levels.iter().map(|l| l.std_error).fold(0.0, f64::max);
    levels.windows(2).all(|w| w[1].mean_error + band >= w[0].mean_error)
}

/// Settings for the allocation sensitivity study and for training its reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivitySpec {
    /// Airframe JSON; the standard quad with 0.2 m arms if absent.
    pub airframe: Option<std::path::PathBuf>,
    /// Frozen policy; trained from scratch if absent.
    pub policy: Option<std::path::PathBuf>,
    /// Allocation network; trained if absent.
    pub alloc: Option<std::path::PathBuf>,
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub eval_envs: usize,
    pub eval_steps: usize,
    pub ppo: PpoConfig,
    pub alloc_samples: usize,
    pub alloc_training: AllocTrainOptions,
    pub sim: SimParams,
    pub init: InitBounds,
}

impl Default for SensitivitySpec {
    fn default() -> Self {
        Self {
            airframe: None,
            policy: None,
            alloc: None,
            levels: SENSITIVITY_LEVELS.to_vec(),
            seeds: vec![11, 12, 13],
            eval_envs: 32,
            eval_steps: 300,
            ppo: PpoConfig { max_interactions: 4_000_000, ..PpoConfig::default() },
            alloc_samples: 20_000,
            alloc_training: AllocTrainOptions::default(),
            sim: SimParams { fidelity: Fidelity::Low, ..SimParams::default() },
            init: InitBounds::default(),
        }
    }
}

/// Trains an allocation net and a scratch policy on `config` in the low-fidelity,
/// position-only regime.
pub fn train_reference(
    config: &AirframeConfig,
    spec: &SensitivitySpec,
    seed: u64,
) -> Result<(Environment, PolicyPair, TrainingCurve), LabError> {
    let campaign = CampaignSpec {
        alloc_samples: spec.alloc_samples,
        alloc_training: spec.alloc_training,
        sim: spec.sim.clone(),
        init: spec.init,
        ..CampaignSpec::default()
    };
    let alloc = train_alloc_for(config, &campaign, derive_seed(seed, "alloc", 0))?;
    let env = environment_for(config, alloc, &campaign)?;
    let (policy, curve) = train(&env, &spec.ppo, None, derive_seed(seed, "reference", 0), &mut InteractionMeter::new())?;
    Ok((env, policy, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "pool", 0), derive_seed(7, "pool", 0));
        assert_ne!(derive_seed(7, "pool", 0), derive_seed(7, "pool", 1));
        assert_ne!(derive_seed(7, "pool", 0), derive_seed(7, "scratch", 0));
        assert_ne!(derive_seed(7, "pool", 0), derive_seed(8, "pool", 0));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..50).collect();
        assert_eq!(parallel_map(&items, 4, |_, x| x * x), items.iter().map(|x| x * x).collect::<Vec<_>>());
        assert_eq!(parallel_map(&items, 1, |i, _| i), (0..50).collect::<Vec<_>>());
    }

    fn run(hash: &str, strategy: Strategy, seed: u64, rewards: &[f64]) -> RunRecord {
        RunRecord {
            config_hash: hash.into(),
            strategy,
            seed,
            donor_hash: None,
            selection_cost: 0,
            curve: rewards
                .iter()
                .enumerate()
                .map(|(i, &r)| CurvePoint { interactions: 100 * (i as u64 + 1), reward: r })
                .collect(),
            goal_window: 1,
            terminated: TerminationReason::BudgetExhausted,
            wall_clock_seconds: 0.0,
        }
    }

    #[test]
    fn scratch_savings_is_zero_and_warm_runs_save() {
        let build = BuildManifest {
            seed: 0,
            members: vec![MemberRecord {
                config_hash: "aa".into(),
                family: "b00".into(),
                is_base: true,
                learned: true,
                eval_errors: vec![],
                eval_crashes: vec![],
            }],
            scratch_runs: vec![run("aa", Strategy::Scratch, 0, &[1.0, 2.0, 5.0, 10.0])],
        };
        let runs = vec![
            run("aa", Strategy::RandomDonor, 0, &[9.0]),
            run("aa", Strategy::SparseLibrary, 0, &[1.0, 9.0]),
            run("aa", Strategy::FullLibrary, 0, &[8.0]),
        ];
        let report = summarize_savings(&build, &runs, 0.8).unwrap();
        assert_eq!(report.goal, 8.0);
        assert_eq!(report.median_savings(Strategy::Scratch), Some(0.0));
        assert_eq!(report.median_savings(Strategy::RandomDonor), Some(0.75));
        assert_eq!(report.median_savings(Strategy::SparseLibrary), Some(0.5));
        assert!(report.flagged.is_empty());
    }

    #[test]
    fn monotone_check_tolerates_noise() {
        let lv = |level, mean_error, std_error| SensitivityLevel { level, mean_error, std_error };
        assert!(is_monotone_within_noise(&[lv(0.0, 1.0, 0.1), lv(1e-3, 0.95, 0.1), lv(1e-2, 1.3, 0.1)]));
        assert!(!is_monotone_within_noise(&[lv(0.0, 1.0, 0.01), lv(1e-3, 0.5, 0.01)]));
    }
}
