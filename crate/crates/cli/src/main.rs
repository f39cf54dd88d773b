use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use qtemper::experiment::{
    emit_figures, run_pretrain, run_qat, run_sharpness, run_sweep, ExperimentConfig, RunOutcome, SweepAxis,
};
use qtemper::{Error, Result};
use serde_json::json;

/// Config keys become `--key value` flags on every run subcommand.
fn with_config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value file applied before any overrides"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override one config key (repeatable)"),
        );
    ExperimentConfig::KEYS.iter().fold(cmd, |cmd, (key, doc)| {
        let arg = Arg::new(*key)
            .long(*key)
            .value_name("VALUE")
            .help(*doc)
            .help_heading("Config keys");
        let dashed = key.replace('_', "-");
        cmd.arg(if dashed != *key { arg.alias(dashed) } else { arg })
    })
}

fn cli() -> Command {
    Command::new("qtemper")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Quantization-aware training with noise tempering")
        .subcommand_required(true)
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .global(true)
                .action(ArgAction::SetTrue)
                .help("log warnings only"),
        )
        .subcommand(with_config_args(Command::new("pretrain").about("Train a full-precision model")))
        .subcommand(with_config_args(
            Command::new("qat").about("Quantization-aware training from `fp_checkpoint`"),
        ))
        .subcommand(with_config_args(
            Command::new("sweep")
                .about("QAT over seeds and one axis (c or bits), pretraining each seed once")
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .value_parser(["c", "bits"])
                        .default_value("c"),
                )
                .arg(
                    Arg::new("values")
                        .long("values")
                        .value_name("LIST")
                        .required(true)
                        .help("comma-separated axis values"),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .default_value("0")
                        .help("comma-separated run seeds"),
                )
                .arg(
                    Arg::new("parallel")
                        .long("parallel")
                        .action(ArgAction::SetTrue)
                        .help("run independent jobs on all cores"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("sharpness")
                .about("Sharpness of a saved checkpoint at every `sharpness_rho`")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf)),
                ),
        ))
        .subcommand(
            Command::new("figures")
                .about("Noise-to-error curves and max-weight traces from finished runs")
                .arg(
                    Arg::new("runs")
                        .long("runs")
                        .value_name("DIR")
                        .num_args(1..)
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf)),
                ),
        )
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    for (key, _) in ExperimentConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad {what} value `{p}`"))))
        .collect()
}

fn run_json(o: &RunOutcome) -> serde_json::Value {
    json!({ "dir": o.dir, "manifest": o.manifest })
}

fn dispatch(m: &ArgMatches) -> Result<(serde_json::Value, bool)> {
    match m.subcommand() {
        Some(("pretrain", m)) => Ok((run_json(&run_pretrain(&load_config(m)?)?), true)),
        Some(("qat", m)) => Ok((run_json(&run_qat(&load_config(m)?)?), true)),
        Some(("sweep", m)) => {
            let cfg = load_config(m)?;
            let values = m.get_one::<String>("values").expect("required");
            let axis = match m.get_one::<String>("axis").map(String::as_str) {
                Some("bits") => SweepAxis::Bits(list(values, "bits")?),
                _ => SweepAxis::NoiseScale(list(values, "c")?),
            };
            let seeds: Vec<u64> = list(m.get_one::<String>("seeds").expect("defaulted"), "seed")?;
            let s = run_sweep(&cfg, &axis, &seeds, m.get_flag("parallel"))?;
            let runs: Vec<_> = s
                .entries
                .iter()
                .map(|e| match &e.outcome {
                    Ok(o) => json!({ "seed": e.seed, "value": e.value, "top1": o.manifest.final_top1, "dir": o.dir }),
                    Err(msg) => json!({ "seed": e.seed, "value": e.value, "error": msg }),
                })
                .collect();
            let ok = s.failures() == 0;
            Ok((json!({ "dir": s.dir, "failures": s.failures(), "runs": runs }), ok))
        }
        Some(("sharpness", m)) => {
            let cfg = load_config(m)?;
            let values = run_sharpness(&cfg, m.get_one::<PathBuf>("checkpoint").expect("required"))?;
            let values: Vec<_> = values.iter().map(|(r, s)| json!({ "rho": r, "sharpness": s })).collect();
            Ok((json!({ "sharpness": values }), true))
        }
        Some(("figures", m)) => {
            let runs: Vec<PathBuf> = m.get_many::<PathBuf>("runs").expect("required").cloned().collect();
            let files = emit_figures(&runs, m.get_one::<PathBuf>("out").expect("required"))?;
            Ok((json!({ "files": files }), true))
        }
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let level = if matches.get_flag("quiet") { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&matches) {
        Ok((out, ok)) => {
            println!("{out}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_set_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "bits = 3\nc = 0.1\nwidth = 4\n").unwrap();
        let m = cli()
            .try_get_matches_from([
                "qtemper",
                "qat",
                "--config",
                file.to_str().unwrap(),
                "--set",
                "c=0.3",
                "--set",
                "width=6",
                "--width",
                "8",
                "--weight-decay",
                "0",
            ])
            .unwrap();
        let cfg = load_config(m.subcommand_matches("qat").unwrap()).unwrap();
        assert_eq!((cfg.bits, cfg.c, cfg.width, cfg.weight_decay), (3, 0.3, 8, 0.0));
    }

    #[test]
    fn bad_set_is_a_config_error() {
        let m = cli().try_get_matches_from(["qtemper", "pretrain", "--set", "nonsense"]).unwrap();
        let e = load_config(m.subcommand_matches("pretrain").unwrap()).unwrap_err();
        assert_eq!(e.kind(), "config");
        let m = cli().try_get_matches_from(["qtemper", "pretrain", "--set", "noice=1"]).unwrap();
        assert!(load_config(m.subcommand_matches("pretrain").unwrap()).is_err());
    }
}
