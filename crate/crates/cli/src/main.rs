use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgMatches, Command};

use lte_cli::commands::{self, EvalMethod, LteStage};
use lte_cli::RunConfig;
use lte_core::LteError;

fn cli() -> Command {
    let mut root = Command::new("lte")
        .about("Train, sparsify and evaluate byte-level transformers with learned expert routing")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("key = value run configuration"),
        );
    for key in RunConfig::KEYS {
        root = root.arg(
            Arg::new(*key)
                .long(*key)
                .global(true)
                .value_name("VALUE")
                .help_heading("Config overrides"),
        );
    }
    let ckpt = || {
        Arg::new("checkpoint")
            .long("checkpoint")
            .required(true)
            .value_name("DIR")
            .value_parser(value_parser!(PathBuf))
    };
    let out = |help: &'static str| {
        Arg::new("out")
            .long("out")
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help(help)
    };
    root.subcommand(
        Command::new("gen-corpus")
            .about("Write a deterministic synthetic text corpus")
            .arg(out("output file").required(true))
            .arg(
                Arg::new("bytes")
                    .long("bytes")
                    .default_value("1000000")
                    .value_parser(value_parser!(usize)),
            ),
    )
    .subcommand(
        Command::new("train-base")
            .about("Train the dense model")
            .arg(out("checkpoint dir (default <out_dir>/base)")),
    )
    .subcommand(
        Command::new("moefy")
            .about("Group FFN neurons into experts and attach routers")
            .arg(ckpt())
            .arg(out("checkpoint dir (default <out_dir>/moefied)")),
    )
    .subcommand(
        Command::new("train-lte")
            .about("Stage 1 (soft routing, auxiliary losses) or stage 2 (frozen routers)")
            .arg(ckpt())
            .arg(
                Arg::new("stage")
                    .long("stage")
                    .required(true)
                    .value_parser(["1", "2"]),
            )
            .arg(out("checkpoint dir (default <out_dir>/stage<N>)")),
    )
    .subcommand(
        Command::new("train-topk")
            .about("Train the noisy top-k softmax routing baseline")
            .arg(ckpt())
            .arg(out("checkpoint dir (default <out_dir>/topk)")),
    )
    .subcommand(
        Command::new("eval")
            .about("Validation perplexity, sparsity and FLOPs; appends to the results ledger")
            .arg(ckpt())
            .arg(
                Arg::new("method")
                    .long("method")
                    .required(true)
                    .value_parser(EvalMethod::ALL.map(EvalMethod::name)),
            )
            .arg(
                Arg::new("ledger")
                    .long("ledger")
                    .value_name("FILE")
                    .value_parser(value_parser!(PathBuf))
                    .help("default <out_dir>/results.jsonl"),
            ),
    )
    .subcommand(
        Command::new("bench")
            .about("Dense vs sparse FFN latency table")
            .arg(out("table file")),
    )
    .subcommand(
        Command::new("report")
            .about("Sparsity report and SVG figures for a trained checkpoint")
            .arg(ckpt())
            .arg(out("report dir (default <out_dir>/report)")),
    )
    .subcommand(
        Command::new("pipeline")
            .about("train-base, moefy, stage 1, stage 2, eval and report in one go"),
    )
}

/// Defaults, then the config file, then flags.
fn resolve_config(m: &ArgMatches) -> lte_core::Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for key in RunConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn out_or(m: &ArgMatches, cfg: &RunConfig, default: &str) -> PathBuf {
    m.get_one::<PathBuf>("out")
        .cloned()
        .unwrap_or_else(|| cfg.out_dir.join(default))
}

fn checkpoint(m: &ArgMatches) -> &Path {
    m.get_one::<PathBuf>("checkpoint").expect("required")
}

fn run(matches: &ArgMatches) -> lte_core::Result<()> {
    let threads = commands::init_threads()?;
    let (name, m) = matches.subcommand().expect("subcommand required");
    let cfg = resolve_config(m)?;
    log::info!("{name} with {threads} threads");
    match name {
        "gen-corpus" => {
            let path = m.get_one::<PathBuf>("out").expect("required");
            let hash = commands::gen_corpus(
                path,
                *m.get_one::<usize>("bytes").expect("default"),
                cfg.seed,
            )?;
            println!("{} sha256={hash}", path.display());
        }
        "train-base" => {
            let out = out_or(m, &cfg, "base");
            let log = commands::train_base(&cfg, &out)?;
            println!(
                "{} steps={} final_loss={:.6}",
                out.display(),
                log.len(),
                log.last().map_or(f64::NAN, |r| r.l_task)
            );
        }
        "moefy" => {
            let out = out_or(m, &cfg, "moefied");
            commands::moefy(&cfg, checkpoint(m), &out)?;
            println!("{}", out.display());
        }
        "train-lte" => {
            let s = m.get_one::<String>("stage").expect("required");
            let stage = LteStage::parse(s).expect("validated by clap");
            let out = out_or(m, &cfg, &format!("stage{s}"));
            let log = commands::train_lte(&cfg, checkpoint(m), &out, stage)?;
            if let Some(r) = log.last() {
                println!(
                    "{} steps={} task={:.6} eff={:.6} sep={:.6} sparsity={:.4}",
                    out.display(),
                    log.len(),
                    r.l_task,
                    r.l_eff,
                    r.l_sep,
                    r.sparsity
                );
            }
        }
        "train-topk" => {
            let out = out_or(m, &cfg, "topk");
            let log = commands::train_topk(&cfg, checkpoint(m), &out)?;
            println!(
                "{} steps={} final_loss={:.6}",
                out.display(),
                log.len(),
                log.last().map_or(f64::NAN, |r| r.l_task)
            );
        }
        "eval" => {
            let method = EvalMethod::parse(m.get_one::<String>("method").expect("required"))
                .expect("validated by clap");
            let rec = commands::eval(&cfg, checkpoint(m), method)?;
            let ledger = m
                .get_one::<PathBuf>("ledger")
                .cloned()
                .unwrap_or_else(|| cfg.out_dir.join(commands::LEDGER_FILE));
            let hash = commands::append_ledger(&ledger, &rec)?;
            println!("{}", serde_json::to_string(&rec)?);
            log::info!("record {hash} appended to {}", ledger.display());
        }
        "bench" => {
            let rep = commands::bench(&cfg, m.get_one::<PathBuf>("out").map(PathBuf::as_path))?;
            print!("{}", rep.to_table());
        }
        "report" => {
            let out = out_or(m, &cfg, "report");
            let rep = commands::report(&cfg, checkpoint(m), &out)?;
            println!(
                "{} overall_sparsity={:.6}",
                out.display(),
                rep.overall_sparsity
            );
        }
        "pipeline" => {
            let o = commands::pipeline(&cfg)?;
            for r in &o.records {
                println!(
                    "{} {} {} ppl={:.4} sparsity={:.4}",
                    r.stage, r.method, r.setting, r.perplexity, r.mean_sparsity
                );
            }
        }
        other => unreachable!("unhandled subcommand {other}"),
    }
    Ok(())
}

fn exit_code(e: &LteError) -> u8 {
    match e {
        LteError::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
