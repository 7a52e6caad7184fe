use clap::{Parser, Subcommand};
use pregeneric::cli::{self, ExperimentConfig};
use pregeneric::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(
    name = "pregeneric",
    version,
    about = "Structure audits, flows, kinetic and particle experiments"
)]
struct Cli {
    /// Worker threads (also PREGENERIC_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config or a built-in.
    Run {
        #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
        config: Option<PathBuf>,
        #[arg(long)]
        builtin: Option<String>,
        /// Output directory (also PREGENERIC_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tol_scale: Option<f64>,
    },
    /// List the built-in catalog.
    List {
        #[arg(long)]
        json: bool,
        /// Write each entry's default config as NAME.toml into DIR.
        #[arg(long, value_name = "DIR")]
        write_configs: Option<PathBuf>,
    },
    /// Compare two report.json files of the same experiment kind.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Print the JSON schema of the config format.
    Schema,
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(cli::exit_code_for(err) as u8)
}

fn init_threads(flag: Option<usize>) -> Result<(), Error> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(cli::ENV_THREADS) {
            Ok(s) => Some(s.trim().parse().map_err(|_| Error::Config {
                path: cli::ENV_THREADS.into(),
                message: format!("not a thread count: `{s}`"),
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    Ok(())
}

fn run(
    config: Option<&Path>,
    builtin: Option<&str>,
    out: Option<&Path>,
    seed: Option<u64>,
    tol_scale: Option<f64>,
) -> Result<i32, Error> {
    let mut cfg: ExperimentConfig = match (config, builtin) {
        (Some(p), _) => cli::load_config(p)?,
        (None, Some(name)) => cli::default_config(name).ok_or_else(|| Error::Config {
            path: "builtin".into(),
            message: format!("unknown built-in `{name}`; see `list`"),
        })?,
        (None, None) => unreachable!("clap requires one source"),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    if let Some(s) = tol_scale {
        cfg.tol_scale = s;
    }
    cfg.validate()?;
    let dir = cli::resolve_output(out, &cfg);
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let (report, outcome) = cli::run_experiment(&cfg)?;
    let metadata = serde_json::json!({
        "started_unix": started,
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
        "output": dir.display().to_string(),
    });
    cli::write_outputs(&dir, &report, &outcome, &metadata)?;
    for c in &report.checks {
        println!("{c}");
    }
    let s = &report.summary;
    println!(
        "{}: {} passed, {} failed, {} n/a, {} tainted -> {}",
        report.bundle,
        s.passed,
        s.failed,
        s.not_applicable,
        s.tainted,
        dir.display()
    );
    Ok(report.exit_code())
}

fn list(json: bool, write_configs: Option<&Path>) -> Result<i32, Error> {
    let rows = cli::catalog_rows();
    if let Some(dir) = write_configs {
        std::fs::create_dir_all(dir)?;
        for (name, ..) in &rows {
            let cfg = cli::default_config(name).expect("catalog entry");
            std::fs::write(dir.join(format!("{name}.toml")), cfg.to_toml()?)?;
        }
    }
    if json {
        let v: Vec<_> = rows
            .iter()
            .map(|(n, k, d)| serde_json::json!({ "name": n, "kind": k, "description": d }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        for (n, k, d) in &rows {
            let kind = serde_json::to_value(k)?;
            println!("{n:<30} {:<16} {d}", kind.as_str().unwrap_or_default());
        }
    }
    Ok(0)
}

fn compare(a: &Path, b: &Path, json: bool) -> Result<i32, Error> {
    let c = cli::compare(&cli::load_report(a)?, &cli::load_report(b)?)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&c)?);
    } else if c.is_empty() {
        println!("reports agree");
    } else {
        print!("{}", c.to_table());
    }
    Ok(0)
}

fn main() -> ExitCode {
    let args = Cli::parse();
    if let Err(e) = init_threads(args.threads) {
        return fail(&e);
    }
    let result = match &args.command {
        Command::Run {
            config,
            builtin,
            out,
            seed,
            tol_scale,
        } => run(config.as_deref(), builtin.as_deref(), out.as_deref(), *seed, *tol_scale),
        Command::List { json, write_configs } => list(*json, write_configs.as_deref()),
        Command::Compare { a, b, json } => compare(a, b, *json),
        Command::Schema => {
            println!("{}", cli::config_schema());
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => fail(&e),
    }
}
