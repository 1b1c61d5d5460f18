//! Command-line interface. Exit codes: 0 success, 2 invalid input, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use rotorlab::airframe::{compute_wrench_box, AirframeConfig, PhysicalParams};
use rotorlab::alloc::{
    evaluate_allocation_error, generate_dataset, train_allocation_net, AllocMode, AllocTrainOptions, AllocationNet,
    QpOptions,
};
use rotorlab::rl::{evaluate_detailed, train, EvalOptions, InteractionMeter, PolicyPair, PpoConfig};
use rotorlab::transfer::{jump_start, score_library, write_score_table, Library, MeasureId};

use crate::campaign::{
    derive_seed, environment_for, is_monotone_within_noise, sensitivity_study, train_reference, CampaignSpec,
    SensitivitySpec,
};
use crate::report::{
    run_build, run_correlation, run_savings, update_manifest, write_json, write_report, write_sensitivity, RunDir,
};
use crate::sampling::{sample_config, sample_neighbors, SamplingSpec};
use crate::LabError;

#[derive(Debug, Parser)]
#[command(name = "rotorlab", version, about = "Multirotor allocation, control and policy-transfer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Master seed; every random choice of the command derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AirframeInput {
    /// Airframe JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Allocation network of this airframe; one is trained when absent.
    #[arg(long)]
    pub alloc: Option<PathBuf>,
    /// Campaign JSON whose simulation, reward and training settings apply.
    #[arg(long)]
    pub campaign: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample random feasible airframes (config: sampling settings JSON).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Neighbors drawn around each sample.
        #[arg(long, default_value_t = 0)]
        neighbors: usize,
    },
    /// Train an allocation network for one airframe (config: airframe JSON).
    TrainAlloc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "unconstrained")]
        mode: String,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        /// Fresh samples used for the accuracy report.
        #[arg(long, default_value_t = 100_000)]
        eval_samples: usize,
        /// Training options JSON.
        #[arg(long)]
        training: Option<PathBuf>,
    },
    /// Train a policy from scratch (config: airframe JSON).
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: AirframeInput,
        #[arg(long)]
        max_interactions: Option<u64>,
    },
    /// Sample a pool and train the policy library (config: campaign JSON, optional).
    BuildLibrary {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score every library entry against a new airframe (config: airframe JSON).
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: AirframeInput,
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value = "m_r")]
        measure: String,
    },
    /// Initialize from the best library donor and train (config: airframe JSON).
    JumpStart {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: AirframeInput,
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value = "m_r")]
        measure: String,
        /// Stop once the rollout reward reaches this.
        #[arg(long)]
        goal: Option<f64>,
    },
    /// Similarity/transfer correlation study over a built library in --out.
    StudyCorrelation {
        #[command(flatten)]
        common: Common,
        /// Must match the campaign stored in --out when given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Savings study over a built library in --out.
    StudySavings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Tracking error under injected allocation error (config: sensitivity JSON, optional).
    StudySensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Assemble and audit the campaign report in --out.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_input<T: DeserializeOwned>(path: &Path) -> Result<T, LabError> {
    let text = fs::read_to_string(path)
        .map_err(|e| LabError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LabError::Validation(format!("{}: {e}", path.display())))
}

fn read_airframe(path: &Path) -> Result<AirframeConfig, LabError> {
    let text = fs::read_to_string(path)
        .map_err(|e| LabError::Validation(format!("cannot read {}: {e}", path.display())))?;
    AirframeConfig::from_json(&text).map_err(|e| LabError::Validation(format!("{}: {e}", path.display())))
}

fn parse_measure(s: &str) -> Result<MeasureId, LabError> {
    MeasureId::parse(s).ok_or_else(|| LabError::Validation(format!("unknown measure {s:?}, expected m_c, m_wd or m_r")))
}

fn campaign_spec(path: Option<&Path>) -> Result<CampaignSpec, LabError> {
    let spec = match path {
        Some(p) => read_input(p)?,
        None => CampaignSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

/// The stored campaign must agree with an explicitly passed one.
fn check_campaign(dir: &RunDir, config: Option<&Path>, seed: u64) -> Result<(), LabError> {
    let stored = dir.campaign().map_err(|e| LabError::Validation(format!("no campaign in output directory: {e}")))?;
    if let Some(p) = config {
        if read_input::<CampaignSpec>(p)? != stored.spec {
            return Err(LabError::Validation("--config differs from the campaign stored in --out".into()));
        }
    }
    if seed != 0 && seed != stored.seed {
        return Err(LabError::Validation(format!("--seed {seed} differs from the stored campaign seed {}", stored.seed)));
    }
    Ok(())
}

fn prepare(input: &AirframeInput, seed: u64) -> Result<(AirframeConfig, AllocationNet, CampaignSpec), LabError> {
    let config = read_airframe(&input.config)?;
    let spec = campaign_spec(input.campaign.as_deref())?;
    let alloc = match &input.alloc {
        Some(p) => AllocationNet::load(p)?,
        None => crate::campaign::train_alloc_for(&config, &spec, derive_seed(seed, "alloc", 0))?,
    };
    Ok((config, alloc, spec))
}

pub fn run(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Sample { common, config, count, neighbors } => {
            let spec: SamplingSpec = read_input(&config)?;
            spec.validate()?;
            let dir = RunDir::new(&common.out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let mut files = Vec::new();
            for i in 0..count {
                let base = sample_config(&spec, &mut rng)?;
                let name = format!("config_{i:03}.json");
                fs::write(dir.path(&name), base.to_json())?;
                files.push(name);
                for (k, n) in sample_neighbors(&base, neighbors, &spec, &mut rng)?.iter().enumerate() {
                    let name = format!("config_{i:03}_n{k}.json");
                    fs::write(dir.path(&name), n.to_json())?;
                    files.push(name);
                }
            }
            let refs: Vec<&str> = files.iter().map(String::as_str).collect();
            update_manifest(&dir.root, "sample", common.seed, &refs)
        }
        Command::TrainAlloc { common, config, mode, samples, eval_samples, training } => {
            let airframe = read_airframe(&config)?;
            let mode = match mode.as_str() {
                "unconstrained" => AllocMode::Unconstrained,
                "constrained" => AllocMode::Constrained,
                other => return Err(LabError::Validation(format!("unknown allocation mode {other:?}"))),
            };
            let options: AllocTrainOptions = match training {
                Some(p) => read_input(&p)?,
                None => AllocTrainOptions::default(),
            };
            let dir = RunDir::new(&common.out)?;
            let wrench_box = compute_wrench_box(&airframe)?;
            let data = generate_dataset(&airframe, &wrench_box, samples, mode, common.seed, QpOptions::default())?;
            let (net, log) = train_allocation_net(&airframe, &data, &options, common.seed.wrapping_add(1))?;
            let report = evaluate_allocation_error(
                &net,
                &airframe,
                &wrench_box,
                eval_samples,
                derive_seed(common.seed, "alloc-eval", 0),
                QpOptions::default(),
            )?;
            net.save(&dir.path("alloc.bin"))?;
            write_json(&dir.path("wrench_box.json"), &wrench_box)?;
            write_json(&dir.path("training_log.json"), &log)?;
            write_json(&dir.path("alloc_error.json"), &report)?;
            println!("mean |e| {:.3e}, max |e| {:.3e}", report.mean_abs, report.max_abs);
            update_manifest(
                &dir.root,
                "train-alloc",
                common.seed,
                &["alloc.bin", "wrench_box.json", "training_log.json", "alloc_error.json"],
            )
        }
        Command::TrainPolicy { common, input, max_interactions } => {
            let (config, alloc, spec) = prepare(&input, common.seed)?;
            let dir = RunDir::new(&common.out)?;
            let env = environment_for(&config, alloc.clone(), &spec)?;
            let ppo = PpoConfig { max_interactions: max_interactions.unwrap_or(spec.ppo.max_interactions), ..spec.ppo };
            let (policy, curve) = train(&env, &ppo, None, common.seed, &mut InteractionMeter::new())?;
            let eval = EvalOptions {
                n_envs: spec.eval_envs,
                steps: spec.eval_steps,
                seed: derive_seed(common.seed, "learn-eval", 0),
                allocation_noise_std: 0.0,
            };
            let report = evaluate_detailed(&policy, &env, &eval, &mut InteractionMeter::new())?;
            policy.save(&dir.path("policy.bin"))?;
            alloc.save(&dir.path("alloc.bin"))?;
            curve.write_csv(fs::File::create(dir.path("curve.csv"))?)?;
            write_json(&dir.path("eval.json"), &report)?;
            println!(
                "final reward {:.2}, steady-state error {:.3} m, {} crashes",
                curve.final_reward().unwrap_or(f64::NAN),
                report.steady_state_position_error,
                report.crashes
            );
            update_manifest(&dir.root, "train-policy", common.seed, &["policy.bin", "alloc.bin", "curve.csv", "eval.json"])
        }
        Command::BuildLibrary { common, config } => {
            let spec = campaign_spec(config.as_deref())?;
            let dir = RunDir::new(&common.out)?;
            let build = run_build(&dir, &spec, common.seed)?;
            println!("library: {} of {} airframes learned", build.library_hashes().len(), build.members.len());
            Ok(())
        }
        Command::Score { common, input, library, measure } => {
            let measure = parse_measure(&measure)?;
            let (config, alloc, spec) = prepare(&input, common.seed)?;
            let library = Library::open(&library)?;
            let env = environment_for(&config, alloc, &spec)?;
            let dir = RunDir::new(&common.out)?;
            let params = spec.selection.params(measure, spec.selection_seed(common.seed));
            let table = score_library(&env, &library, &params, &mut InteractionMeter::new())?;
            write_score_table(&table, fs::File::create(dir.path("score-table.csv"))?)?;
            update_manifest(&dir.root, "score", common.seed, &["score-table.csv"])
        }
        Command::JumpStart { common, input, library, measure, goal } => {
            let measure = parse_measure(&measure)?;
            let (config, alloc, spec) = prepare(&input, common.seed)?;
            let library = Library::open(&library)?;
            let env = environment_for(&config, alloc, &spec)?;
            let dir = RunDir::new(&common.out)?;
            let params = spec.selection.params(measure, spec.selection_seed(common.seed));
            let ppo = PpoConfig { goal_reward: goal.or(spec.ppo.goal_reward), ..spec.ppo };
            let (policy, curve, provenance) = jump_start(&env, &library, &params, &ppo, common.seed)?;
            policy.save(&dir.path("policy.bin"))?;
            curve.write_csv(fs::File::create(dir.path("curve.csv"))?)?;
            write_score_table(&provenance.table, fs::File::create(dir.path("score-table.csv"))?)?;
            write_json(&dir.path("provenance.json"), &provenance)?;
            println!(
                "donor {}, selection cost {}, total interactions {}",
                provenance.donor_hash, provenance.selection_cost, provenance.total_interactions
            );
            update_manifest(
                &dir.root,
                "jump-start",
                common.seed,
                &["policy.bin", "curve.csv", "score-table.csv", "provenance.json"],
            )
        }
        Command::StudyCorrelation { common, config } => {
            let dir = RunDir::new(&common.out)?;
            check_campaign(&dir, config.as_deref(), common.seed)?;
            let report = run_correlation(&dir)?;
            for m in &report.summary {
                let rho = report.abs_rho_at(m.measure, report.study_goal_fraction).unwrap_or(f64::NAN);
                println!("{}: |rho| {rho:.3} at goal fraction {}", m.measure.name(), report.study_goal_fraction);
            }
            Ok(())
        }
        Command::StudySavings { common, config } => {
            let dir = RunDir::new(&common.out)?;
            check_campaign(&dir, config.as_deref(), common.seed)?;
            let report = run_savings(&dir)?;
            for s in &report.summary {
                println!("{}: median savings {:?} over {} airframes", s.strategy.name(), s.median_savings, s.configs_used);
            }
            Ok(())
        }
        Command::StudySensitivity { common, config } => {
            let spec: SensitivitySpec = match config {
                Some(p) => read_input(&p)?,
                None => SensitivitySpec::default(),
            };
            let dir = RunDir::new(&common.out)?;
            let airframe = match &spec.airframe {
                Some(p) => read_airframe(p)?,
                None => AirframeConfig::standard(4, 0.2, PhysicalParams::default())?,
            };
            let (env, policy) = match (&spec.policy, &spec.alloc) {
                (Some(p), Some(a)) => {
                    let campaign = CampaignSpec { sim: spec.sim.clone(), init: spec.init, ..CampaignSpec::default() };
                    (environment_for(&airframe, AllocationNet::load(a)?, &campaign)?, PolicyPair::load(p)?)
                }
                (None, None) => {
                    let (env, policy, curve) = train_reference(&airframe, &spec, common.seed)?;
                    policy.save(&dir.path("policy.bin"))?;
                    env.alloc.save(&dir.path("alloc.bin"))?;
                    curve.write_csv(fs::File::create(dir.path("curve.csv"))?)?;
                    (env, policy)
                }
                _ => return Err(LabError::Validation("policy and alloc must be given together".into())),
            };
            let rows = sensitivity_study(&policy, &env, &spec.levels, &spec.seeds, spec.eval_envs, spec.eval_steps)?;
            let levels = write_sensitivity(&dir, &rows, common.seed)?;
            for l in &levels {
                println!("level {:.0e}: mean position error {:.4} ± {:.4} m", l.level, l.mean_error, l.std_error);
            }
            println!("monotone within noise: {}", is_monotone_within_noise(&levels));
            Ok(())
        }
        Command::Report { common, config } => {
            let dir = RunDir::new(&common.out)?;
            check_campaign(&dir, config.as_deref(), common.seed)?;
            let report = write_report(&dir)?;
            println!("report: {} library entries, written to {}", report.library_size, dir.path("report.json").display());
            Ok(())
        }
    }
}
