//! The `venteval` command line: one subcommand per pipeline stage, a flat
//! key=value config file with flag overrides, and a manifest written next
//! to every artifact so any run can be reproduced byte for byte.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{read_json, write_json, Manifest, RunConfig};
use crate::error::{Result, VentError};
use crate::ingest::csvio::{
    read_raw_cohort, read_records, read_transitions, write_raw_cohort, write_records,
    write_transitions, TRANSITIONS_CSV,
};
use crate::ingest::{build_transitions, preprocess_cohort};
use crate::mdp::{bins_table, ActionTriple, RewardParams, N_ACTIONS};
use crate::nwe::{fit_nwe, select_bandwidths, BandwidthGrid, BandwidthSet, NweModel};
use crate::ope::fqe::{fqe_estimate, FqeConfig, FqeDataset, StatePolicy};
use crate::ope::pswis::{logged_dataset, pswis_estimate};
use crate::ope::{
    compute_clinical_metrics, matching_ope, BootstrapConfig, ClinicalMetrics, OpeEstimate,
};
use crate::policies::bc::{train_bc, BcConfig};
use crate::policies::conservative_q::{train_conservative_q, CqConfig, CqPenaltyMode};
use crate::policies::cqi::{export_tree_dot, export_tree_text, train_cqi, CqiConfig};
use crate::policies::PolicyModel;
use crate::propensity::{fit_logistic, roc_auc, LogisticModel, DEFAULT_L2};
use crate::rng::derive_seed_str;
use crate::schema::FeatureGroups;
use crate::simulator::{
    batch_simulate, read_trajectories, write_sim_diagnostics, write_trajectories, SimStart,
};
use crate::synthetic::{sample_cohort, true_policy_value, HorizonDist, SyntheticEnv};

#[derive(Debug, Parser)]
#[command(
    name = "venteval",
    version,
    about = "Offline evaluation pipeline for mechanical-ventilation control policies"
)]
pub struct Cli {
    /// Key=value configuration file; explicit flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every randomized stage of the invoked command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory receiving artifacts and the manifest.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    /// Behavior cloning (random forest).
    Bc,
    /// Conservative Q-iteration (decision tree).
    Cqi,
    /// Conservative fitted Q (linear, CQL penalty).
    Cq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Per-step weighted importance sampling.
    Wis,
    /// Fitted Q evaluation.
    Fqe,
    /// Matching: simulate counterfactual twins through the fitted
    /// transition model.
    Matching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TreeFormat {
    /// Indented if/else listing.
    Text,
    /// Graphviz dot source.
    Graph,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean a raw cohort: truncate, exclude, winsorize, fill, impute.
    Preprocess {
        /// Directory with the raw static.csv and steps.csv.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Fit the logistic propensity model on the cleaned cohort.
    FitPropensity {
        /// Directory with the cleaned cohort.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Build MDP transitions from the cleaned cohort.
    Transitions {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Fitted propensity model (propensity.json).
        #[arg(long, value_name = "FILE")]
        propensity: PathBuf,
    },
    /// Fit the kernel transition model at fixed bandwidths.
    FitTransition {
        #[arg(long, value_name = "FILE")]
        transitions: PathBuf,
        /// Bandwidth JSON (defaults to the config's bandwidth entries).
        #[arg(long, value_name = "FILE")]
        bandwidths: Option<PathBuf>,
    },
    /// Cross-validate bandwidths over the hyperparameter grid.
    SelectBandwidths {
        #[arg(long, value_name = "FILE")]
        transitions: PathBuf,
        /// Search a 4-point subgrid instead of the full 2916-point grid.
        #[arg(long)]
        quick: bool,
    },
    /// Train a policy on the transition file.
    Train {
        #[arg(long, value_enum)]
        algo: Algo,
        #[arg(long, value_name = "FILE")]
        transitions: PathBuf,
        /// Cloned behavior policy; switches the cq penalty to the
        /// behavior-expectation form.
        #[arg(long, value_name = "FILE")]
        behavior: Option<PathBuf>,
    },
    /// Roll counterfactual trajectories from each episode's first state.
    Simulate {
        #[arg(long, value_name = "FILE")]
        policy: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Fitted transition model (nwe.json).
        #[arg(long, value_name = "FILE")]
        nwe: PathBuf,
        #[arg(long, value_name = "FILE")]
        propensity: PathBuf,
        /// Simulate only the first N episodes.
        #[arg(long, value_name = "N")]
        n: Option<usize>,
    },
    /// Estimate a policy's value from logged data.
    Evaluate {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, value_name = "FILE")]
        policy: PathBuf,
        /// Transition file (wis and fqe).
        #[arg(long, value_name = "FILE")]
        transitions: Option<PathBuf>,
        /// Cloned behavior policy (wis).
        #[arg(long, value_name = "FILE")]
        behavior: Option<PathBuf>,
        /// Cleaned cohort directory (matching).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Fitted transition model (matching).
        #[arg(long, value_name = "FILE")]
        nwe: Option<PathBuf>,
        /// Fitted propensity model (matching).
        #[arg(long, value_name = "FILE")]
        propensity: Option<PathBuf>,
    },
    /// Clinical summary statistics of simulated trajectories.
    Metrics {
        #[arg(long, value_name = "FILE")]
        trajectories: PathBuf,
    },
    /// Print a trained decision-tree policy.
    ExportTree {
        #[arg(long, value_name = "FILE")]
        policy: PathBuf,
        #[arg(long, value_enum)]
        format: TreeFormat,
    },
    /// Synthetic-environment utilities.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Print the action discretization table.
    Bins,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Sample a raw cohort from the synthetic environment.
    Generate {
        /// Number of episodes (defaults to the config's n_episodes).
        #[arg(long, value_name = "N")]
        n: Option<usize>,
    },
    /// Monte-Carlo ground-truth value of a policy in the environment.
    Oracle {
        #[arg(long, value_name = "FILE")]
        policy: PathBuf,
        /// Rollout count (defaults to the config's n_rollouts).
        #[arg(long, value_name = "N")]
        rollouts: Option<usize>,
        /// Propensity model supplying the z feature during rollouts.
        #[arg(long, value_name = "FILE")]
        propensity: Option<PathBuf>,
    },
}

/// Honor VENTEVAL_THREADS when set; 0 or unset means one worker per
/// logical CPU. Thread count never changes results, only wall time.
fn init_thread_pool() -> Result<()> {
    if let Ok(raw) = std::env::var("VENTEVAL_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .map_err(|_| VentError::invalid(format!("VENTEVAL_THREADS: bad value `{raw}`")))?;
        if n > 0 {
            // A second init in the same process (tests) is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_thread_pool()?;
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        config.out_dir = Some(out.clone());
    }

    match cli.command {
        Command::Preprocess { data } => cmd_preprocess(&config, data),
        Command::FitPropensity { data } => cmd_fit_propensity(&config, data),
        Command::Transitions { data, propensity } => {
            cmd_transitions(&config, data, &propensity)
        }
        Command::FitTransition { transitions, bandwidths } => {
            cmd_fit_transition(&config, &transitions, bandwidths)
        }
        Command::SelectBandwidths { transitions, quick } => {
            cmd_select_bandwidths(&config, &transitions, quick)
        }
        Command::Train { algo, transitions, behavior } => {
            cmd_train(&config, algo, &transitions, behavior)
        }
        Command::Simulate { policy, data, nwe, propensity, n } => {
            cmd_simulate(&config, &policy, data, &nwe, &propensity, n)
        }
        Command::Evaluate { method, policy, transitions, behavior, data, nwe, propensity } => {
            cmd_evaluate(&config, method, &policy, transitions, behavior, data, nwe, propensity)
        }
        Command::Metrics { trajectories } => cmd_metrics(&config, &trajectories),
        Command::ExportTree { policy, format } => cmd_export_tree(&config, &policy, format),
        Command::Synth { command } => match command {
            SynthCommand::Generate { n } => cmd_synth_generate(&config, n),
            SynthCommand::Oracle { policy, rollouts, propensity } => {
                cmd_synth_oracle(&config, &policy, rollouts, propensity)
            }
        },
        Command::Bins => {
            print!("{}", bins_table());
            Ok(())
        }
    }
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config
        .out_dir
        .clone()
        .ok_or_else(|| VentError::invalid("an output directory is required (--out)"))?;
    std::fs::create_dir_all(&dir).map_err(|e| VentError::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn need_seed(config: &RunConfig) -> Result<u64> {
    config
        .seed
        .ok_or_else(|| VentError::invalid("this command is randomized; set --seed"))
}

fn data_dir(config: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| config.data_dir.clone())
        .ok_or_else(|| VentError::invalid("a data directory is required (--data)"))
}

fn reward_params(config: &RunConfig) -> Result<RewardParams> {
    let mut params = RewardParams::new(config.alpha, config.beta);
    params.gamma = config.gamma;
    params.validate()?;
    Ok(params)
}

fn bootstrap_config(config: &RunConfig, seed: u64) -> BootstrapConfig {
    BootstrapConfig {
        n_resamples: config.n_resamples,
        level: config.level,
        seed: derive_seed_str(seed, "bootstrap"),
    }
}

fn load_policy(path: &Path) -> Result<PolicyModel> {
    PolicyModel::load(path)
}

fn cmd_preprocess(config: &RunConfig, data: Option<PathBuf>) -> Result<()> {
    let data = data_dir(config, data)?;
    let out = out_dir(config)?;
    if out == data {
        return Err(VentError::invalid(
            "preprocess output directory must differ from the data directory",
        ));
    }
    let raw = read_raw_cohort(&data)?;
    let (records, limits, report) = preprocess_cohort(&raw, config.knn_k)?;
    write_records(&out, &records)?;
    let limits_path = out.join("winsor_limits.json");
    let report_path = out.join("preprocess_report.json");
    write_json(&limits_path, &limits)?;
    write_json(&report_path, &report)?;
    log::info!("kept {} of {} episodes", report.n_kept, report.n_input);

    let mut manifest = Manifest::new("preprocess", config);
    manifest.add_input_dir(&data)?;
    manifest.add_output_dir(&out)?;
    manifest.add_output(&limits_path)?;
    manifest.add_output(&report_path)?;
    manifest.write(&out)?;
    Ok(())
}

fn cmd_fit_propensity(config: &RunConfig, data: Option<PathBuf>) -> Result<()> {
    let data = data_dir(config, data)?;
    let out = out_dir(config)?;
    let records = read_records(&data)?;
    let rows: Vec<_> = records
        .iter()
        .map(|r| (r.type_features(), r.statics.mortality_90d))
        .collect();
    let model = fit_logistic(&rows, DEFAULT_L2)?;
    let scores: Vec<f64> = rows
        .iter()
        .map(|(x, _)| model.predict(x))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = rows.iter().map(|(_, y)| *y).collect();
    let auc = roc_auc(&scores, &labels)?;

    let model_path = out.join("propensity.json");
    let report_path = out.join("propensity_report.json");
    write_json(&model_path, &model)?;
    write_json(
        &report_path,
        &serde_json::json!({
            "n_episodes": rows.len(),
            "n_deaths": labels.iter().filter(|&&y| y).count(),
            "auc": auc,
            "n_iters": model.meta.n_iters,
            "final_loss": model.meta.final_loss,
        }),
    )?;
    log::info!("propensity fit on {} episodes, AUC {auc:.3}", rows.len());

    let mut manifest = Manifest::new("fit-propensity", config);
    manifest.add_input_dir(&data)?;
    manifest.add_output(&model_path)?;
    manifest.add_output(&report_path)?;
    manifest.write(&out)?;
    Ok(())
}

fn cmd_transitions(config: &RunConfig, data: Option<PathBuf>, propensity: &Path) -> Result<()> {
    let data = data_dir(config, data)?;
    let out = out_dir(config)?;
    let records = read_records(&data)?;
    let model: LogisticModel = read_json(propensity)?;
    let params = reward_params(config)?;
    let transitions = build_transitions(&records, &params, &model)?;
    let path = out.join(TRANSITIONS_CSV);
    write_transitions(&path, &transitions)?;
    log::info!("wrote {} transitions", transitions.len());

    let mut manifest = Manifest::new("transitions", config);
    manifest.add_input_dir(&data)?;
    manifest.add_input(propensity)?;
    manifest.add_output(&path)?;
    manifest.write(&out)?;
    Ok(())
}

fn cmd_fit_transition(
    config: &RunConfig,
    transitions: &Path,
    bandwidths: Option<PathBuf>,
) -> Result<()> {
    let out = out_dir(config)?;
    let data = read_transitions(transitions)?;
    let bw: BandwidthSet = match &bandwidths {
        Some(path) => read_json(path)?,
        None => config.bandwidths,
    };
    let model = fit_nwe(&data, bw, FeatureGroups::default())?;
    let path = out.join("nwe.json");
    write_json(&path, &model)?;
    log::info!("transition model fit on {} samples", model.n_samples());

    let mut manifest = Manifest::new("fit-transition", config);
    manifest.add_input(transitions)?;
    if let Some(path) = &bandwidths {
        manifest.add_input(path)?;
    }
    manifest.add_output(&path)?;
    manifest.write(&out)?;
    Ok(())
}

/// The reduced search used by `--quick`: reference-scale state bandwidths
/// with a 2x2 sweep over the z bandwidth and the fallback threshold.
fn quick_grid() -> BandwidthGrid {
    BandwidthGrid {
        h_s_hemo: vec![3.036],
        h_s_resp: vec![2.8],
        h_s_blood: vec![2.532],
        h_s_misc: vec![2.032],
        h_a: vec![1.0],
        h_z: vec![1.0, 1.5],
        lambda: vec![1e-2, 1e-3],
    }
}

fn cmd_select_bandwidths(config: &RunConfig, transitions: &Path, quick: bool) -> Result<()> {
    let seed = need_seed(config)?;
    let out = out_dir(config)?;
    let data = read_transitions(transitions)?;
    let grid = if quick { quick_grid() } else { BandwidthGrid::default() };
    let report = select_bandwidths(&data, &grid, config.folds, seed)?;
    let selected_path = out.join("bandwidths.json");
    let report_path = out.join("cv_report.json");
    write_json(&selected_path, &report.selected)?;
    write_json(&report_path, &report)?;
    log::info!(
        "selected bandwidths over {} grid points ({} folds)",
        report.scores.len(),
        report.k_folds
    );

    let mut manifest = Manifest::new("select-bandwidths", config);
    manifest.add_input(transitions)?;
    manifest.add_output(&selected_path)?;
    manifest.add_output(&report_path)?;
    manifest.write(&out)?;
    Ok(())
}

fn cmd_train(
    config: &RunConfig,
    algo: Algo,
    transitions: &Path,
    behavior: Option<PathBuf>,
) -> Result<()> {
    let seed = need_seed(config)?;
    let out = config.model_dir.clone().unwrap_or(out_dir(config)?);
    std::fs::create_dir_all(&out).map_err(|e| VentError::io(out.display().to_string(), e))?;
    let data = read_transitions(transitions)?;

    let (name, model, report) = match algo {
        Algo::Bc => {
            let bc = train_bc(&data, BcConfig { seed, ..BcConfig::default() })?;
            let report = serde_json::json!({
                "algo": "bc",
                "n_transitions": data.len(),
                "n_classes": bc.n_classes(),
            });
            ("bc", PolicyModel::Bc(bc), report)
        }
        Algo::Cqi => {
            let tree = train_cqi(
                &data,
                CqiConfig {
                    max_depth: config.max_depth,
                    alpha_lr: config.alpha_lr,
                    gamma: config.gamma,
                    seed,
                    ..CqiConfig::default()
                },
            )?;
            let report = serde_json::json!({
                "algo": "cqi",
                "n_transitions": data.len(),
                "n_leaves": tree.n_leaves(),
                "depth": tree.depth(),
            });
            ("cqi", PolicyModel::Cqi(tree), report)
        }
        Algo::Cq => {
            let cloned;
            let (bc, penalty) = match &behavior {
                Some(path) => {
                    cloned = load_policy(path)?;
                    match &cloned {
                        PolicyModel::Bc(bc) => (Some(bc), CqPenaltyMode::BehaviorExpectation),
                        other => {
                            return Err(VentError::invalid(format!(
                                "--behavior must be a bc policy, got {}",
                                other.kind()
                            )))
                        }
                    }
                }
                None => (None, CqPenaltyMode::DataAction),
            };
            let (q, train_report) = train_conservative_q(
                &data,
                CqConfig {
                    alpha_cql: config.alpha_cql,
                    gamma: config.gamma,
                    epochs: config.epochs,
                    penalty,
                    seed,
                    ..CqConfig::default()
                },
                bc,
            )?;
            let report = serde_json::json!({
                "algo": "cq",
                "n_transitions": data.len(),
                "optimizer": train_report,
            });
            ("cq", PolicyModel::ConservativeQ(q), report)
        }
    };

    let policy_path = out.join(format!("{name}.json"));
    let report_path = out.join(format!("train_report_{name}.json"));
    model.save(&policy_path)?;
    write_json(&report_path, &report)?;
    log::info!("trained {name} on {} transitions", data.len());

    let mut manifest = Manifest::new(&format!("train-{name}"), config);
    manifest.add_input(transitions)?;
    if let Some(path) = &behavior {
        manifest.add_input(path)?;
    }
    manifest.add_output(&policy_path)?;
    manifest.add_output(&report_path)?;
    manifest.write(&out)?;
    Ok(())
}

fn sim_starts(data: &Path, n: Option<usize>) -> Result<Vec<SimStart>> {
    let records = read_records(data)?;
    let mut starts: Vec<SimStart> = records
        .iter()
        .filter(|r| r.len() >= 2)
        .map(SimStart::from_record)
        .collect();
    if let Some(n) = n {
        starts.truncate(n);
    }
    if starts.is_empty() {
        return Err(VentError::data("no episodes with at least 2 steps to simulate"));
    }
    Ok(starts)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    config: &RunConfig,
    policy: &Path,
    data: Option<PathBuf>,
    nwe: &Path,
    propensity: &Path,
    n: Option<usize>,
) -> Result<()> {
    let seed = need_seed(config)?;
    let data = data_dir(config, data)?;
    let out = out_dir(config)?;
    let model = load_policy(policy)?;
    let transition_model: NweModel = read_json(nwe)?;
    let propensity_model: LogisticModel = read_json(propensity)?;
    let params = reward_params(config)?;
    let starts = sim_starts(&data, n)?;

    let report = batch_simulate(
        model.as_policy(),
        &starts,
        &transition_model,
        &propensity_model,
        &params,
        seed,
    )?;
    for failure in &report.failures {
        log::warn!("episode {} failed: {}", failure.episode_id, failure.message);
    }

    let traj_path = out.join("trajectories.csv");
    let diag_path = out.join("sim_diagnostics.json");
    let report_path = out.join("sim_report.json");
    write_trajectories(&traj_path, &report.trajectories)?;
    write_sim_diagnostics(&diag_path, &report.trajectories)?;
    write_json(
        &report_path,
        &serde_json::json!({
            "n_requested": starts.len(),
            "n_simulated": report.trajectories.len(),
            "failures": report.failures,
        }),
    )?;
    log::info!("simulated {} of {} episodes", report.trajectories.len(), starts.len());

    let mut manifest = Manifest::new("simulate", config);
    manifest.add_input(policy)?;
    manifest.add_input(nwe)?;
    manifest.add_input(propensity)?;
    manifest.add_input_dir(&data)?;
    manifest.add_output(&traj_path)?;
    manifest.add_output(&diag_path)?;
    manifest.add_output(&report_path)?;
    manifest.write(&out)?;
    Ok(())
}

#[derive(Debug, serde::Serialize)]
struct EvaluationReport {
    policy: String,
    estimate: OpeEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    clinical: Option<ClinicalMetrics>,
}

/// Insert or replace this (policy, method) row in plot_values.csv, kept
/// sorted so reruns and cross-method merges are byte-stable.
fn upsert_plot_values(path: &Path, report: &EvaluationReport) -> Result<()> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    if path.exists() {
        let mut reader = csv::Reader::from_path(path).map_err(|e| VentError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        for record in reader.records() {
            let record = record.map_err(|e| VentError::Csv {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            rows.push(record.iter().map(|s| s.to_string()).collect());
        }
    }
    let e = &report.estimate;
    let new_row = vec![
        report.policy.clone(),
        e.method.clone(),
        e.point.to_string(),
        e.ci_low.to_string(),
        e.ci_high.to_string(),
        e.level.to_string(),
        e.n_episodes.to_string(),
    ];
    rows.retain(|r| !(r[0] == new_row[0] && r[1] == new_row[1]));
    rows.push(new_row);
    rows.sort();

    let mut writer = csv::Writer::from_path(path).map_err(|e| VentError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    writer
        .write_record(["policy", "method", "point", "ci_low", "ci_high", "level", "n_episodes"])
        .map_err(|e| VentError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    for row in &rows {
        writer.write_record(row).map_err(|e| VentError::Csv {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| VentError::io(path.display().to_string(), e))?;
    Ok(())
}

fn require<T>(value: Option<T>, flag: &str, method: &str) -> Result<T> {
    value.ok_or_else(|| VentError::invalid(format!("evaluate --method {method} needs {flag}")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    config: &RunConfig,
    method: Method,
    policy: &Path,
    transitions: Option<PathBuf>,
    behavior: Option<PathBuf>,
    data: Option<PathBuf>,
    nwe: Option<PathBuf>,
    propensity: Option<PathBuf>,
) -> Result<()> {
    let seed = need_seed(config)?;
    let out = out_dir(config)?;
    let model = load_policy(policy)?;
    let params = reward_params(config)?;
    let bootstrap = bootstrap_config(config, seed);
    let policy_name = policy
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "policy".into());

    let mut manifest_inputs: Vec<PathBuf> = vec![policy.to_path_buf()];
    let mut data_input: Option<PathBuf> = None;

    let (method_name, estimate, clinical) = match method {
        Method::Wis => {
            let transitions = require(transitions, "--transitions", "wis")?;
            let behavior = require(behavior, "--behavior", "wis")?;
            let logged = read_transitions(&transitions)?;
            let behavior_model = load_policy(&behavior)?;
            let bc = match &behavior_model {
                PolicyModel::Bc(bc) => bc,
                other => {
                    return Err(VentError::invalid(format!(
                        "--behavior must be a bc policy, got {}",
                        other.kind()
                    )))
                }
            };
            let dataset = logged_dataset(&logged, bc)?;
            let estimate = pswis_estimate(&dataset, model.as_policy(), params.gamma, &bootstrap)?;
            manifest_inputs.push(transitions);
            manifest_inputs.push(behavior);
            ("wis", estimate, None)
        }
        Method::Fqe => {
            let transitions = require(transitions, "--transitions", "fqe")?;
            let logged = read_transitions(&transitions)?;
            let dataset = FqeDataset::from_transitions(&logged);
            let cfg = FqeConfig { gamma: params.gamma, ..FqeConfig::default() };
            let estimate =
                fqe_estimate(&dataset, &StatePolicy(model.as_policy()), &cfg, &bootstrap)?;
            manifest_inputs.push(transitions);
            ("fqe", estimate, None)
        }
        Method::Matching => {
            let data = data_dir(config, data)?;
            let nwe = require(nwe, "--nwe", "matching")?;
            let propensity = require(propensity, "--propensity", "matching")?;
            let transition_model: NweModel = read_json(&nwe)?;
            let propensity_model: LogisticModel = read_json(&propensity)?;
            let starts = sim_starts(&data, None)?;
            let (estimate, clinical) = matching_ope(
                model.as_policy(),
                &starts,
                &transition_model,
                &propensity_model,
                &params,
                derive_seed_str(seed, "simulate"),
                &bootstrap,
            )?;
            manifest_inputs.push(nwe);
            manifest_inputs.push(propensity);
            data_input = Some(data);
            ("matching", estimate, Some(clinical))
        }
    };

    let report = EvaluationReport { policy: policy_name, estimate, clinical };
    let report_path = out.join(format!("evaluation_{method_name}.json"));
    let plot_path = out.join("plot_values.csv");
    write_json(&report_path, &report)?;
    upsert_plot_values(&plot_path, &report)?;
    log::info!(
        "{method_name}: {:.4} [{:.4}, {:.4}]",
        report.estimate.point,
        report.estimate.ci_low,
        report.estimate.ci_high
    );
    println!(
        "{} {method_name} value {:.4} ({:.0}% CI [{:.4}, {:.4}], n={})",
        report.policy,
        report.estimate.point,
        100.0 * report.estimate.level,
        report.estimate.ci_low,
        report.estimate.ci_high,
        report.estimate.n_episodes
    );

    let mut manifest = Manifest::new(&format!("evaluate-{method_name}"), config);
    for path in &manifest_inputs {
        manifest.add_input(path)?;
    }
    if let Some(dir) = &data_input {
        manifest.add_input_dir(dir)?;
    }
    manifest.add_output(&report_path)?;
    manifest.add_output(&plot_path)?;
    manifest.write(&out)?;
    Ok(())
}

fn write_action_distribution(path: &Path, counts: &[usize]) -> Result<()> {
    let csv_err =
        |m: String| VentError::Csv { path: path.display().to_string(), message: m };
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    writer
        .write_record(["vt_bin", "peep_bin", "fio2_bin", "count"])
        .map_err(|e| csv_err(e.to_string()))?;
    for (idx, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let a = ActionTriple::from_index(idx)?;
        writer
            .write_record([
                a.vt_bin.to_string(),
                a.peep_bin.to_string(),
                a.fio2_bin.to_string(),
                count.to_string(),
            ])
            .map_err(|e| csv_err(e.to_string()))?;
    }
    writer.flush().map_err(|e| VentError::io(path.display().to_string(), e))?;
    Ok(())
}

fn cmd_metrics(config: &RunConfig, trajectories: &Path) -> Result<()> {
    let out = out_dir(config)?;
    let trajs = read_trajectories(trajectories)?;
    let metrics = compute_clinical_metrics(&trajs)?;

    let mut counts = vec![0usize; N_ACTIONS];
    for traj in &trajs {
        for a in &traj.actions {
            counts[a.index()] += 1;
        }
    }

    let metrics_path = out.join("metrics.json");
    let dist_path = out.join("action_distribution.csv");
    write_json(&metrics_path, &metrics)?;
    write_action_distribution(&dist_path, &counts)?;
    println!(
        "episodes {}: terminal SpO2 >= 95% in {:.1}%, aggressive Vt {:.1}% / FiO2 {:.1}% of steps",
        trajs.len(),
        metrics.pct_terminal_spo2_above_95,
        metrics.pct_steps_vt_aggressive,
        metrics.pct_steps_fio2_aggressive
    );

    let mut manifest = Manifest::new("metrics", config);
    manifest.add_input(trajectories)?;
    manifest.add_output(&metrics_path)?;
    manifest.add_output(&dist_path)?;
    manifest.write(&out)?;
    Ok(())
}

fn cmd_export_tree(config: &RunConfig, policy: &Path, format: TreeFormat) -> Result<()> {
    let model = load_policy(policy)?;
    let tree = match &model {
        PolicyModel::Cqi(tree) => tree,
        other => {
            return Err(VentError::invalid(format!(
                "export-tree needs a cqi policy, got {}",
                other.kind()
            )))
        }
    };
    let (text, file_name) = match format {
        TreeFormat::Text => (export_tree_text(tree), "tree.txt"),
        TreeFormat::Graph => (export_tree_dot(tree), "tree.dot"),
    };
    print!("{text}");
    if config.out_dir.is_some() {
        let out = out_dir(config)?;
        let path = out.join(file_name);
        std::fs::write(&path, &text)
            .map_err(|e| VentError::io(path.display().to_string(), e))?;
        let mut manifest = Manifest::new("export-tree", config);
        manifest.add_input(policy)?;
        manifest.add_output(&path)?;
        manifest.write(&out)?;
    }
    Ok(())
}

fn synth_env(config: &RunConfig, seed: u64) -> Result<SyntheticEnv> {
    let env = SyntheticEnv {
        seed,
        p_severe: config.p_severe,
        noise_scale: config.noise_scale,
        horizons: HorizonDist { min: config.horizon_min, max: config.horizon_max },
    };
    env.validate()?;
    Ok(env)
}

fn cmd_synth_generate(config: &RunConfig, n: Option<usize>) -> Result<()> {
    let seed = need_seed(config)?;
    let out = out_dir(config)?;
    let env = synth_env(config, seed)?;
    let n = n.unwrap_or(config.n_episodes);
    let cohort = sample_cohort(&env, n, env.horizons)?;
    write_raw_cohort(&out, &cohort)?;
    log::info!("generated {} synthetic episodes", cohort.len());

    let mut manifest = Manifest::new("synth-generate", config);
    manifest.add_output_dir(&out)?;
    manifest.write(&out)?;
    Ok(())
}

fn cmd_synth_oracle(
    config: &RunConfig,
    policy: &Path,
    rollouts: Option<usize>,
    propensity: Option<PathBuf>,
) -> Result<()> {
    let seed = need_seed(config)?;
    let env = synth_env(config, seed)?;
    let model = load_policy(policy)?;
    let propensity_model: Option<LogisticModel> =
        propensity.as_ref().map(|p| read_json(p)).transpose()?;
    let params = reward_params(config)?;
    let n_rollouts = rollouts.unwrap_or(config.n_rollouts);
    let oracle = true_policy_value(
        &env,
        model.as_policy(),
        propensity_model.as_ref(),
        &params,
        n_rollouts,
        derive_seed_str(seed, "oracle"),
    )?;
    println!(
        "oracle value {:.6} (se {:.6}, {} rollouts)",
        oracle.value, oracle.se, oracle.n_rollouts
    );

    if config.out_dir.is_some() {
        let out = out_dir(config)?;
        let path = out.join("oracle.json");
        write_json(&path, &oracle)?;
        let mut manifest = Manifest::new("synth-oracle", config);
        manifest.add_input(policy)?;
        if let Some(p) = &propensity {
            manifest.add_input(p)?;
        }
        manifest.add_output(&path)?;
        manifest.write(&out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn subcommands_parse() {
        let cli = Cli::try_parse_from([
            "venteval",
            "train",
            "--algo",
            "cqi",
            "--transitions",
            "t.csv",
            "--seed",
            "7",
            "--out",
            "runs",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(7));
        match cli.command {
            Command::Train { algo, .. } => assert_eq!(algo, Algo::Cqi),
            other => panic!("parsed {other:?}"),
        }

        let cli = Cli::try_parse_from([
            "venteval", "evaluate", "--method", "matching", "--policy", "p.json",
        ])
        .unwrap();
        match cli.command {
            Command::Evaluate { method, .. } => assert_eq!(method, Method::Matching),
            other => panic!("parsed {other:?}"),
        }

        assert!(Cli::try_parse_from(["venteval", "train", "--algo", "nope"]).is_err());
        assert!(Cli::try_parse_from(["venteval", "no-such-command"]).is_err());
    }

    #[test]
    fn seed_is_required_for_randomized_commands() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunConfig::default()
        };
        let err = cmd_synth_generate(&config, Some(3)).unwrap_err();
        assert!(err.to_string().contains("--seed"), "got: {err}");
    }

    #[test]
    fn missing_method_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("m")).unwrap();
        // A syntactically valid policy file so evaluation reaches the
        // input checks.
        let bc = {
            use crate::ingest::Transition;
            use crate::mdp::StateVector;
            use crate::schema::STATE_DIM;
            let transitions: Vec<Transition> = (0..6)
                .map(|i| Transition {
                    episode_id: format!("e{i}"),
                    t: 0,
                    s: StateVector([i as f64; STATE_DIM]),
                    a: ActionTriple::new(1, 1, 1).unwrap(),
                    r: 0.0,
                    s_next: StateVector([i as f64; STATE_DIM]),
                    terminal: true,
                })
                .collect();
            train_bc(&transitions, BcConfig { n_trees: 2, ..BcConfig::default() }).unwrap()
        };
        let policy_path = dir.path().join("m").join("bc.json");
        PolicyModel::Bc(bc).save(&policy_path).unwrap();

        let config = RunConfig {
            out_dir: Some(dir.path().to_path_buf()),
            seed: Some(1),
            ..RunConfig::default()
        };
        let err = cmd_evaluate(
            &config,
            Method::Wis,
            &policy_path,
            None,
            None,
            None,
            None,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("--transitions"), "got: {err}");
    }
}
