use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use coefavg::config::load_with_overrides;
use coefavg::runner::run;

/// Run one coefficient-averaging experiment from a JSON config.
///
/// Exit status: 0 when the verdict is pass, 1 when it is fail, 2 on usage,
/// config or model errors.
#[derive(Debug, Parser)]
#[command(name = "coefavg", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set solver.theta=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; replaces `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Replaces `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(args: Args) -> Result<bool, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read {}: {e}", args.config.display()))?;
    let mut overrides = args.overrides;
    if let Some(seed) = args.seed {
        overrides.push(format!("experiment.seed={seed}"));
    }
    let cfg = load_with_overrides(&text, &overrides)?;
    let out = args.out.unwrap_or_else(|| cfg.output_dir.clone());

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            return Err("--workers must be at least 1".into());
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build()?;
    let outcome = pool.install(|| run(&cfg, &out))?;
    print!("{}", outcome.text);
    Ok(outcome.pass())
}
