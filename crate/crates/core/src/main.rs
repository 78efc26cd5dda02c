use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fald::config::{parse_config, ExperimentConfig};
use fald::engine::write_trajectories;
use fald::error::{Error, Result};
use fald::experiment::{self, Built};
use fald::svg::{LineChart, Series};
use fald::theory::write_bound_curve;

#[derive(Parser)]
#[command(name = "fald", version, about = "Federated averaging Langevin dynamics toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured federation and write it as CSV.
    GenData(Args),
    /// Run the configured experiment once (sweep ignored) and dump trajectories.
    Run(Args),
    /// Run one curve per sweep value.
    Sweep(Args),
    /// Evaluate the convergence bound over the horizon.
    Bounds(Args),
    /// Privacy accounting report and optional budget search.
    Privacy(Args),
    /// Step-size and local-step planner.
    Plan(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Configuration file (key = value lines).
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn load(args: &Args) -> Result<(ExperimentConfig, PathBuf)> {
    let text = fs::read_to_string(&args.config)?;
    let cfg = parse_config(&text)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_data(args: &Args) -> Result<()> {
    let (cfg, out) = load(args)?;
    let Built { model, .. } = experiment::build_model(&cfg, cfg.alpha)?;
    let mut buf = Vec::new();
    model.as_energy().dataset().write_csv(&mut buf)?;
    write(&out.join("data.csv"), &String::from_utf8_lossy(&buf))
}

fn run(args: &Args, single: bool) -> Result<()> {
    let (cfg, out) = load(args)?;
    if !single {
        let curves = experiment::run_curves(&cfg, false)?;
        for p in experiment::write_curve_artifacts(&out, "sweep", &cfg, &curves)? {
            println!("wrote {}", p.display());
        }
        return Ok(());
    }
    let built = experiment::build_model(&cfg, cfg.alpha)?;
    let spec = experiment::curve_specs(&cfg, built.model.as_energy(), true)?.remove(0);
    let (curve, rep) = experiment::run_curve(&cfg, &spec, &built)?;
    if let Some(rep) = rep {
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &rep.trajectories)?;
        write(&out.join("trajectories.csv"), &String::from_utf8_lossy(&buf))?;
    }
    for p in experiment::write_curve_artifacts(&out, "run", &cfg, &[curve])? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn bounds(args: &Args) -> Result<()> {
    let (cfg, out) = load(args)?;
    let built = experiment::build_model(&cfg, cfg.alpha)?;
    let inputs = experiment::bound_inputs(&cfg, built.model.as_energy())?;
    let kind = experiment::bound_kind(&cfg);
    let ks = experiment::bound_grid(cfg.horizon, cfg.bound_points);
    let mut buf = Vec::new();
    write_bound_curve(&mut buf, &inputs, kind, &ks)?;
    let text = String::from_utf8_lossy(&buf).into_owned();
    write(&out.join("bounds.csv"), &text)?;

    let mut chart = LineChart::new(&format!("{} bound", kind.name()), "iteration", "W2 bound", true);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        points.push((rec[0].parse().unwrap_or(f64::NAN), rec[1].parse().unwrap_or(f64::NAN)));
    }
    chart.series.push(Series {
        name: kind.name().to_string(),
        points,
    });
    write(&out.join("bounds.svg"), &chart.render())
}

fn privacy(args: &Args) -> Result<()> {
    let (cfg, out) = load(args)?;
    let built = experiment::build_model(&cfg, cfg.alpha)?;
    let model = built.model.as_energy();
    match experiment::privacy_report(&cfg, model) {
        Ok(text) => {
            print!("{text}");
            write(&out.join("privacy.txt"), &text)
        }
        Err(e @ Error::InadmissibleStep { eta_max, .. }) => {
            println!("eta_max={eta_max:.17e}");
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn plan(args: &Args) -> Result<()> {
    let (cfg, out) = load(args)?;
    let built = experiment::build_model(&cfg, cfg.alpha)?;
    let text = experiment::plan_report(&cfg, built.model.as_energy())?;
    print!("{text}");
    write(&out.join("plan.txt"), &text)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FALD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("FALD_THREADS must be a count, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a, true),
        Command::Sweep(a) => run(a, false),
        Command::Bounds(a) => bounds(a),
        Command::Privacy(a) => privacy(a),
        Command::Plan(a) => plan(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
