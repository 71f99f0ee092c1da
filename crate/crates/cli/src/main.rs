use clap::Parser;
use collafuse::data::{dump_dataset, split_code, Dataset};
use collafuse::metrics::inversion_attack;
use collafuse::nodes::infer_collaborative;
use collafuse_cli::args::{Cli, Command};
use collafuse_cli::error::{CliError, Result};
use collafuse_cli::fsio::write_atomic;
use collafuse_cli::sweep::{self, eval_seed, Phase};
use serde_json::json;

fn trained(cfg: &collafuse_cli::ExperimentConfig, cut: usize, seed: u64) -> Result<collafuse::nodes::Session> {
    match sweep::open_trained(cfg, cut, seed)? {
        Some((s, _)) => Ok(s),
        None => Err(CliError::Missing(format!(
            "no trained cell for cut {cut}, seed {seed} under {}; run `train` first",
            cfg.run_dir().display()
        ))),
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Train { cell, config } => {
            let cfg = config.resolve()?;
            let (_, side, trained) = sweep::train_cell(&cfg, cell.cut, cell.seed)?;
            let last = side.traces.last();
            Ok(json!({
                "cut": cell.cut,
                "seed": cell.seed,
                "trained": trained,
                "config_hash": side.config_hash,
                "client_steps": side.client_steps,
                "server_steps": side.server_steps,
                "bytes_up": side.channel.bytes_up,
                "final_server_losses": last.map(|r| r.server_losses.len()),
                "dir": sweep::cell_dir(&cfg.run_dir(), cell.cut, cell.seed),
            }))
        }
        Command::Infer { cell, client, count, labels, sample_seed, output, config } => {
            let cfg = config.resolve()?;
            let mut session = trained(&cfg, cell.cut, cell.seed)?;
            let data = session
                .clients
                .get(client)
                .ok_or_else(|| CliError::Config(format!("no client {client}")))?
                .data()
                .clone();
            let n_labels = data.num_joint_labels() as u32;
            let labels = labels.unwrap_or_else(|| (0..count as u32).map(|i| i % n_labels).collect());
            if let Some(l) = labels.iter().find(|&&l| l >= n_labels) {
                return Err(CliError::Config(format!("label {l} outside [0, {n_labels})")));
            }
            let x = infer_collaborative(&mut session, client, Some(labels.clone()), count, Some(sample_seed))?;
            let attrs = labels.iter().map(|&l| split_code(l, &data.cardinality)).collect();
            let out = Dataset::new(data.kind, x.map(|v| v.clamp(-1.0, 1.0)), attrs, data.cardinality.clone())?;
            write_atomic(&output, &dump_dataset(&out))?;
            Ok(json!({ "samples": count, "client": client, "output": output, "stats": session.channel_stats() }))
        }
        Command::Sweep { config } => {
            let cfg = config.resolve()?;
            let doc = sweep::run_sweep(&cfg)?;
            Ok(json!({ "run_dir": cfg.run_dir(), "cells": doc.cells.len(), "config_hash": doc.config_hash }))
        }
        Command::Probe { cell, config } => {
            let cfg = config.resolve()?;
            let mut session = trained(&cfg, cell.cut, cell.seed)?;
            let (fd, probe) = sweep::probe_cell(&cfg, &mut session, cell.cut, cell.seed)?;
            Ok(json!({ "cut": cell.cut, "seed": cell.seed, "fd_server": fd, "probe": probe, "probe_f1_mean": probe.mean_f1() }))
        }
        Command::Invert { cell, attacker, victim, config } => {
            let cfg = config.resolve()?;
            let mut session = trained(&cfg, cell.cut, cell.seed)?;
            let seed = eval_seed(cell.seed, cell.cut, Phase::Inversion);
            let r = inversion_attack(&mut session, attacker, victim, cfg.eval.inversion_samples, seed)?;
            Ok(serde_json::to_value(r).expect("serializes"))
        }
        Command::Export { config } => {
            let cfg = config.resolve()?;
            let doc = sweep::export(&cfg)?;
            Ok(json!({ "run_dir": cfg.run_dir(), "cells": doc.cells.len(), "config_hash": doc.config_hash }))
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::Config(e.to_string().trim().to_string());
            eprintln!("{}", err.report());
            std::process::exit(err.exit_code());
        }
    };
    match run(cli) {
        Ok(v) => println!("{v}"),
        Err(e) => {
            eprintln!("{}", e.report());
            std::process::exit(e.exit_code());
        }
    }
}
