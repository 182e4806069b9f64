//! Command-line surface.
//!
//! Exit codes: 0 success, 1 malformed arguments, 2 configuration or file
//! errors, 3 runtime failure (non-finite loss). All error text goes to
//! stderr; reports and CSVs go to stdout.

use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgMatches, Command};

use crate::attack::AttackConfig;
use crate::checkpoint::{checkpoint_load, checkpoint_save};
use crate::config::RunConfig;
use crate::data::{mnist_test, mnist_train, Dataset};
use crate::error::{CertError, Result};
use crate::eval::{evaluate, ibp_verified_error, verify_csv, verify_records};
use crate::train::{train, write_metrics_csv, Mode};

fn command() -> Command {
    Command::new("certitrain")
        .about("Certified-robust training: joint adversarial + interval-bound descent")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("train")
                .about("Train a model from a run configuration")
                .arg(
                    Arg::new("config")
                        .long("config")
                        .required(true)
                        .value_parser(value_parser!(PathBuf))
                        .help("run configuration JSON"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_parser(value_parser!(PathBuf))
                        .help("write the final checkpoint here"),
                )
                .arg(
                    Arg::new("log")
                        .long("log")
                        .value_parser(value_parser!(PathBuf))
                        .help("write the per-step metrics CSV here"),
                ),
        )
        .subcommand(
            Command::new("eval")
                .about("Standard, PGD, and certified error of a checkpoint")
                .arg(
                    Arg::new("model")
                        .long("model")
                        .required(true)
                        .value_parser(value_parser!(PathBuf))
                        .help("checkpoint JSON"),
                )
                .arg(
                    Arg::new("data")
                        .long("data")
                        .required(true)
                        .value_parser(value_parser!(PathBuf))
                        .help("IDX data directory (t10k pair preferred, train pair otherwise)"),
                )
                .arg(
                    Arg::new("eps")
                        .long("eps")
                        .required(true)
                        .value_parser(value_parser!(f64))
                        .help("evaluation radius"),
                )
                .arg(
                    Arg::new("pgd-steps")
                        .long("pgd-steps")
                        .value_parser(value_parser!(usize))
                        .default_value("200"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(value_parser!(u64))
                        .default_value("0"),
                ),
        )
        .subcommand(
            Command::new("verify")
                .about("Per-example certification sweep, CSV on stdout")
                .arg(
                    Arg::new("model")
                        .long("model")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("data")
                        .long("data")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("eps")
                        .long("eps")
                        .required(true)
                        .value_parser(value_parser!(f64)),
                ),
        )
        .subcommand(
            Command::new("compare-baseline")
                .about("Train joint and fixed-weight modes with identical seeds, compare verified error")
                .arg(
                    Arg::new("config")
                        .long("config")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                ),
        )
}

/// Evaluation split of an IDX directory: the t10k pair when present,
/// otherwise the train pair.
fn dataset_from_dir(dir: &Path) -> Result<Dataset> {
    if dir.join("t10k-images-idx3-ubyte").is_file() {
        mnist_test(dir)
    } else {
        mnist_train(dir, None)
    }
}

fn run_train(m: &ArgMatches) -> Result<()> {
    let cfg = RunConfig::load(m.get_one::<PathBuf>("config").unwrap())?;
    let (train_data, _) = cfg.load_data()?;
    let tc = cfg.train_config(train_data.len())?;
    let net = cfg.build_net()?;
    let result = train(net, &tc, &train_data)?;
    println!(
        "trained {} steps ({} mode, {} warm-up)",
        result.records.len(),
        tc.mode.as_str(),
        tc.t_nat + tc.t_adv
    );
    if let Some(last) = result.records.last() {
        println!(
            "final step: loss_adv {:.6} loss_ibp {:.6} fosc {:.3e}",
            last.loss_adv, last.loss_ibp, last.fosc
        );
    }
    if let Some(out) = m.get_one::<PathBuf>("out") {
        checkpoint_save(&result.net, Some(&result.moments), out)?;
        println!("checkpoint: {}", out.display());
    }
    if let Some(log) = m.get_one::<PathBuf>("log") {
        write_metrics_csv(&result.records, log)?;
        println!("metrics: {}", log.display());
    }
    Ok(())
}

fn run_eval(m: &ArgMatches) -> Result<()> {
    let model_path = m.get_one::<PathBuf>("model").unwrap();
    let (net, _) = checkpoint_load(model_path)?;
    let data = dataset_from_dir(m.get_one::<PathBuf>("data").unwrap())?;
    let eps = *m.get_one::<f64>("eps").unwrap();
    let mut attack = AttackConfig::new(eps);
    attack.pgd_steps = *m.get_one::<usize>("pgd-steps").unwrap();
    attack.validate()?;
    let seed = *m.get_one::<u64>("seed").unwrap();
    let model_id = model_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| model_path.display().to_string());
    let report = evaluate(&net, &data, eps, &attack, seed, &model_id)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_verify(m: &ArgMatches) -> Result<()> {
    let (net, _) = checkpoint_load(m.get_one::<PathBuf>("model").unwrap())?;
    let data = dataset_from_dir(m.get_one::<PathBuf>("data").unwrap())?;
    let eps = *m.get_one::<f64>("eps").unwrap();
    let records = verify_records(&net, &data, eps)?;
    print!("{}", verify_csv(&records));
    Ok(())
}

fn run_compare(m: &ArgMatches) -> Result<()> {
    let cfg = RunConfig::load(m.get_one::<PathBuf>("config").unwrap())?;
    let (train_data, eval_data) = cfg.load_data()?;
    let mut tc = cfg.train_config(train_data.len())?;
    let net0 = cfg.build_net()?;
    let e = cfg.eval_resolved();

    tc.mode = Mode::Joint;
    let joint = train(net0.clone(), &tc, &train_data)?;
    tc.mode = Mode::Baseline;
    let baseline = train(net0, &tc, &train_data)?;

    let joint_v = ibp_verified_error(&joint.net, &eval_data, e.eps)?;
    let base_v = ibp_verified_error(&baseline.net, &eval_data, e.eps)?;
    let reduction: Option<f64> = if base_v > 0.0 {
        Some((base_v - joint_v) / base_v)
    } else {
        None
    };
    let out = serde_json::json!({
        "joint_verified_error": joint_v,
        "baseline_verified_error": base_v,
        "relative_reduction": reduction,
        "eps": e.eps,
        "n_examples": eval_data.len(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn cli_main(args: &[String]) -> i32 {
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match matches.subcommand() {
        Some(("train", m)) => run_train(m),
        Some(("eval", m)) => run_eval(m),
        Some(("verify", m)) => run_verify(m),
        Some(("compare-baseline", m)) => run_compare(m),
        _ => unreachable!("subcommand_required"),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CertError::NonFinite { .. } => 3,
                _ => 2,
            }
        }
    }
}
