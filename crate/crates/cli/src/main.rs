//! Single entrypoint for the simulator: generate or load data, partition it
//! into client shards, run the federation, evaluate, compare arms, and turn
//! round logs into plot-ready CSV.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad input or usage. Errors
//! print one machine-readable JSON line on stderr.

use clap::{Parser, Subcommand};
use flsim_core::config::{sha256_file, sha256_hex, ExperimentConfig, RunManifest};
use flsim_core::data::{load_jsonl, save_jsonl, DatasetManifest};
use flsim_core::error::{Error, ErrorKind};
use flsim_core::eval::{evaluate, run_comparison, split_holdout};
use flsim_core::federation::{
    account_communication, run_federation_rounds, FedEnv, RoundLog,
};
use flsim_core::lora::{init_adapters, load_adapters, save_adapters};
use flsim_core::model::BaseModel;
use flsim_core::partition::{heterogeneity_report, partition, ClientShard, ShardIndexFile};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "flsim",
    version,
    about = "Desk-scale federated instruction tuning simulator"
)]
struct Cli {
    /// Experiment config JSON; omitted = built-in default experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override federation.rounds from the config.
    #[arg(long, global = true)]
    rounds: Option<u32>,

    /// Override federation.learning_rate from the config.
    #[arg(long, global = true)]
    learning_rate: Option<f64>,

    /// Shift every run seed (partition, selection, training, inits, holdout).
    #[arg(long, global = true)]
    seed_offset: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the config's dataset as JSONL (plus a manifest next to it).
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into client shards and write the shard index JSON.
    Partition {
        /// Dataset JSONL (defaults to the config's source when omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Partition scheme: 1 = unbalanced classes, 2 = unbalanced classes
        /// and volumes (overrides the config).
        #[arg(long)]
        scheme: Option<String>,
        /// Also write a per-client heterogeneity CSV here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Run the federation; writes round logs, adapters and a run manifest.
    /// Re-running with the same output directory resumes after the last
    /// completed round.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        shards: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many rounds in this invocation (resume later).
        #[arg(long)]
        stop_after: Option<u32>,
        /// Worker threads for client training (FLSIM_THREADS; 1 = sequential
        /// reference mode).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a model (base + optional adapters) on the config's holdout.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every arm (federated, centralized, local-only) and emit the
    /// comparison table plus all evaluation reports.
    Compare {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Turn round logs into plot-ready CSV series.
    Report {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            let kind = match err.kind() {
                ErrorKind::BadInput => "bad_input",
                ErrorKind::Internal => "internal",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.to_string(), "kind": kind })
            );
            std::process::exit(match err.kind() {
                ErrorKind::BadInput => 2,
                ErrorKind::Internal => 1,
            });
        }
    }
}

fn threads_from(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("FLSIM_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(rounds) = cli.rounds {
        config.federation.rounds = rounds;
    }
    if let Some(lr) = cli.learning_rate {
        config.federation.learning_rate = lr;
    }
    if let Some(offset) = cli.seed_offset {
        config = config.with_seed_offset(offset);
    }
    config.validate()?;
    Ok(config)
}

fn load_dataset(
    config: &ExperimentConfig,
    data: &Option<PathBuf>,
) -> Result<DatasetManifest, Error> {
    match data {
        Some(path) => load_jsonl(path),
        None => config.build_dataset(),
    }
}

/// Holdout split plus shards carrying dataset-level record indices.
fn split_and_partition(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
) -> Result<(Vec<usize>, Vec<ClientShard>), Error> {
    let (holdout, train) =
        split_holdout(manifest, config.data.holdout_fraction, config.data.holdout_seed);
    let train_manifest = manifest.subset(&train);
    let shards = partition(&train_manifest, &config.partition)?;
    let remapped = shards
        .into_iter()
        .map(|mut s| {
            s.record_indices = s.record_indices.iter().map(|&i| train[i]).collect();
            s
        })
        .collect();
    Ok((holdout, remapped))
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Generate { out } => cmd_generate(&config, out),
        Command::Partition {
            data,
            out,
            scheme,
            stats,
        } => cmd_partition(&config, data, out, scheme.as_deref(), stats),
        Command::Train {
            data,
            shards,
            out,
            stop_after,
            threads,
        } => cmd_train(&config, data, shards, out, *stop_after, threads_from(*threads)),
        Command::Evaluate { data, adapters, out } => cmd_evaluate(&config, data, adapters, out),
        Command::Compare { out, threads } => cmd_compare(&config, out, threads_from(*threads)),
        Command::Report { logs, out } => cmd_report(logs, out),
    }
}

fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let manifest = config.build_dataset()?;
    save_jsonl(&manifest, out)?;
    let mut run_manifest = RunManifest::new(config.clone());
    run_manifest.dataset_sha256 = Some(sha256_file(out)?);
    run_manifest.save(&out.with_extension("manifest.json"))?;
    println!(
        "wrote {} records in {} categories to {}",
        manifest.len(),
        manifest.category_set.len(),
        out.display()
    );
    Ok(())
}

fn cmd_partition(
    config: &ExperimentConfig,
    data: &Option<PathBuf>,
    out: &Path,
    scheme: Option<&str>,
    stats: &Option<PathBuf>,
) -> Result<(), Error> {
    let mut config = config.clone();
    match scheme {
        Some("1") => {
            config.partition.scheme = flsim_core::partition::PartitionScheme::UnbalancedClasses
        }
        Some("2") => {
            config.partition.scheme =
                flsim_core::partition::PartitionScheme::UnbalancedClassesAndVolumes
        }
        Some(other) => {
            return Err(Error::Input(format!(
                "unknown scheme {other:?}; expected \"1\" or \"2\""
            )))
        }
        None => {}
    }
    let manifest = load_dataset(&config, data)?;
    let (holdout, shards) = split_and_partition(&config, &manifest)?;
    let dataset_sha = match data {
        Some(path) => sha256_file(path)?,
        None => sha256_hex(serde_json::to_string(&manifest.records)?.as_bytes()),
    };
    let index = ShardIndexFile::from_shards(&config.partition, dataset_sha, holdout, &shards);
    index.save(out)?;
    if let Some(stats_path) = stats {
        let report = heterogeneity_report(&shards, &manifest);
        std::fs::write(stats_path, report.to_csv())?;
    }
    println!(
        "wrote {} shards covering {} records to {}",
        index.shards.len(),
        index.shards.iter().map(|s| s.record_indices.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn append_round_log(path: &Path, log: &RoundLog) -> Result<(), Error> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    serde_json::to_writer(&mut file, log)?;
    file.write_all(b"\n")?;
    Ok(())
}

fn read_round_logs(path: &Path) -> Result<Vec<RoundLog>, Error> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn cmd_train(
    config: &ExperimentConfig,
    data: &Option<PathBuf>,
    shards_path: &Option<PathBuf>,
    out: &Path,
    stop_after: Option<u32>,
    threads: usize,
) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let manifest = load_dataset(config, data)?;
    let shards: Vec<ClientShard> = match shards_path {
        Some(path) => ShardIndexFile::load(path)?.to_shards(&manifest)?,
        None => split_and_partition(config, &manifest)?.1,
    };

    let manifest_path = out.join("run_manifest.json");
    let logs_path = out.join("rounds.jsonl");
    let state_path = out.join("state.fladp");
    let final_path = out.join("adapters_final.fladp");

    let mut run_manifest = RunManifest::new(config.clone());
    if let Some(path) = data {
        run_manifest.dataset_sha256 = Some(sha256_file(path)?);
    }
    if let Some(path) = shards_path {
        run_manifest.shards_sha256 = Some(sha256_file(path)?);
    }

    // Resume if a matching run already lives in the output directory.
    let mut completed: u32 = 0;
    if manifest_path.exists() {
        let existing = RunManifest::load(&manifest_path)?;
        if existing.config != run_manifest.config {
            return Err(Error::Input(format!(
                "{} holds a different run; refusing to mix configs",
                out.display()
            )));
        }
        completed = read_round_logs(&logs_path)?.len() as u32;
    } else {
        run_manifest.save(&manifest_path)?;
    }

    let base = BaseModel::init(config.model.clone(), config.seeds.model_init)?;
    let global = if completed > 0 {
        load_adapters(&state_path)?
    } else {
        init_adapters(&base, config.federation.lora_rank, config.seeds.adapter_init)?
    };

    if completed >= config.federation.rounds {
        println!("run already complete at round {completed}");
        if !final_path.exists() {
            save_adapters(&global, &final_path)?;
        }
        return Ok(());
    }

    let mut fed = config.federation.clone();
    let target_rounds = match stop_after {
        Some(n) => (completed + n).min(fed.rounds),
        None => fed.rounds,
    };
    fed.rounds = target_rounds;

    let env = FedEnv::prepare(&base, &manifest, &shards)?;
    let run = run_federation_rounds(&env, &fed, global, completed, threads, |log, adapters| {
        append_round_log(&logs_path, log)?;
        save_adapters(adapters, &state_path)?;
        Ok(())
    })?;

    if target_rounds == config.federation.rounds {
        save_adapters(&run.adapters, &final_path)?;
        let logs = read_round_logs(&logs_path)?;
        let pc = flsim_core::lora::trainable_param_count(
            &config.model,
            config.federation.lora_rank,
        );
        let comm = account_communication(
            &logs,
            &run.adapters,
            pc.base_params,
            config.federation.clients_per_round,
        )?;
        std::fs::write(
            out.join("communication.json"),
            serde_json::to_string_pretty(&comm)?,
        )?;
        println!(
            "completed {} rounds; final adapters at {}",
            config.federation.rounds,
            final_path.display()
        );
    } else {
        println!(
            "stopped after round {target_rounds} of {}; rerun to resume",
            config.federation.rounds
        );
    }
    Ok(())
}

fn cmd_evaluate(
    config: &ExperimentConfig,
    data: &Option<PathBuf>,
    adapters_path: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<(), Error> {
    let manifest = load_dataset(config, data)?;
    let adapters = match adapters_path {
        Some(path) => Some(load_adapters(path)?),
        None => None,
    };
    let (holdout, _) =
        split_holdout(&manifest, config.data.holdout_fraction, config.data.holdout_seed);
    if holdout.is_empty() {
        return Err(Error::Config("holdout is empty; raise holdout_fraction".into()));
    }
    let base = BaseModel::init(config.model.clone(), config.seeds.model_init)?;
    let tag = if adapters.is_some() { "adapted" } else { "base" };
    let report = evaluate(&base, adapters.as_ref(), &manifest, &holdout, tag)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_compare(config: &ExperimentConfig, out: &Path, threads: usize) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let output = run_comparison(config, threads)?;

    std::fs::write(out.join("comparison.csv"), output.table.to_csv())?;
    std::fs::write(
        out.join("comparison.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "table": output.table,
            "reports": output.reports,
            "local_arm_clients": output.local_arm_clients,
        }))?,
    )?;
    let logs_path = out.join("rounds.jsonl");
    if logs_path.exists() {
        std::fs::remove_file(&logs_path)?;
    }
    for log in &output.federated_logs {
        append_round_log(&logs_path, log)?;
    }
    save_adapters(&output.federated_adapters, &out.join("adapters_federated.fladp"))?;
    if !output.samples.is_empty() {
        std::fs::write(
            out.join("samples.json"),
            serde_json::to_string_pretty(&output.samples)?,
        )?;
    }
    let mut run_manifest = RunManifest::new(config.clone());
    run_manifest.arm_schedules = output.arm_schedules;
    run_manifest.save(&out.join("run_manifest.json"))?;

    for row in &output.table.rows {
        println!(
            "{:<12} baseline {:.4}  federated {:.4}  relative {:.4}",
            row.tag, row.baseline_loss, row.federated_loss, row.relative_score
        );
    }
    Ok(())
}

fn cmd_report(logs_path: &Path, out: &Path) -> Result<(), Error> {
    let logs = read_round_logs(logs_path)?;
    if logs.is_empty() {
        return Err(Error::Input(format!(
            "no round logs found at {}",
            logs_path.display()
        )));
    }
    std::fs::create_dir_all(out)?;

    let mut rounds_csv = String::from(
        "round,mean_client_loss,aggregate_update_l2,ab_product_gap,uplink_bytes,downlink_bytes,cumulative_uplink_bytes,cumulative_downlink_bytes,wall_secs\n",
    );
    let mut cum_up = 0u64;
    let mut cum_down = 0u64;
    for log in &logs {
        let losses: Vec<f64> = log.clients.iter().filter_map(|c| c.mean_loss).collect();
        let mean_loss = if losses.is_empty() {
            String::new()
        } else {
            (losses.iter().sum::<f64>() / losses.len() as f64).to_string()
        };
        cum_up += log.uplink_bytes;
        cum_down += log.downlink_bytes;
        rounds_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            log.round,
            mean_loss,
            log.aggregate_update_l2,
            log.ab_product_gap,
            log.uplink_bytes,
            log.downlink_bytes,
            cum_up,
            cum_down,
            log.wall_secs
        ));
    }
    std::fs::write(out.join("rounds.csv"), rounds_csv)?;

    let mut counts: std::collections::BTreeMap<u64, usize> = std::collections::BTreeMap::new();
    for log in &logs {
        for &c in &log.selected {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let mut participation_csv = String::from("client_id,times_selected\n");
    for (client, count) in &counts {
        participation_csv.push_str(&format!("{client},{count}\n"));
    }
    std::fs::write(out.join("participation.csv"), participation_csv)?;
    println!(
        "wrote {} round rows and {} participating clients to {}",
        logs.len(),
        counts.len(),
        out.display()
    );
    Ok(())
}
