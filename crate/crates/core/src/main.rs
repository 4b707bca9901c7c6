use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gasket_ids::gasket::{GasketMesh, DEFAULT_MESH_CAP};
use gasket_ids::lab::{emit, run_into, ExperimentConfig, ResultTable};
use gasket_ids::potentials::{check_w1, check_w2, check_w3, ProfileSpec};

#[derive(Parser)]
#[command(name = "gasket-ids", version, about = "IDS experiments on the Sierpinski gasket")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a profile spec (TOML or JSON) and run the W1/W2/W3 checks.
    CheckProfile {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 2)]
        n: u32,
    },
    /// Print mesh counts, or the full mesh as JSON.
    Mesh {
        #[arg(long = "M")]
        level: u32,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        emit_json: bool,
    },
}

fn run(config: PathBuf, threads: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&config)?;
    cfg.apply_env_seed()?;
    cfg.validate()?;
    let dir = out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .context("building the worker pool")?;
    let mut table = ResultTable::new(&cfg);
    let outcome = pool.install(|| run_into(&cfg, &mut table));
    // partial results are flushed even when a stage fails
    let written = emit(&table, &dir)?;
    outcome?;
    for path in written {
        eprintln!("wrote {}", path.display());
    }
    if let Some(summary) = table.table("summary") {
        print!("{}", summary.to_csv());
    }
    Ok(())
}

fn check_profile(path: PathBuf, n: u32) -> Result<()> {
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let spec: ProfileSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    spec.validate()?;
    let w1 = check_w1(&spec, &GasketMesh::build(1, n)?);
    let w2 = check_w2(&spec, 8, &GasketMesh::build(2, n)?)?;
    let w3 = check_w3(&spec, &[1, 2], n, 2)?;
    let report = serde_json::json!({
        "w1_max_violation": w1,
        "w2": {
            "terms": w2.terms,
            "partial_sums": w2.partial_sums,
            "decay_ratio": w2.decay_ratio,
            "convergent_trend": w2.convergent_trend,
        },
        "w3": {
            "holds": w3.holds,
            "pairs_checked": w3.pairs_checked,
            "witnesses": w3.witnesses.iter().take(5).map(|w| serde_json::json!({
                "x": [w.x.i, w.x.j, w.x.n],
                "y": [w.y.i, w.y.j, w.y.n],
                "M": w.level,
                "lhs": w.lhs,
                "rhs": w.rhs,
            })).collect::<Vec<_>>(),
        },
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !w3.holds {
        bail!("(W3) fails for this profile");
    }
    Ok(())
}

fn mesh(level: u32, n: u32, emit_json: bool) -> Result<()> {
    let mesh = GasketMesh::build_with_cap(level, n, DEFAULT_MESH_CAP)?;
    if emit_json {
        println!("{}", serde_json::to_string(&mesh.export())?);
    } else {
        println!(
            "M={level} n={n} vertices={} cells={} mass={}",
            mesh.vertex_count(),
            mesh.cell_count(),
            mesh.total_mass_exact()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, threads, out } => run(config, threads, out),
        Command::CheckProfile { spec, n } => check_profile(spec, n),
        Command::Mesh { level, n, emit_json } => mesh(level, n, emit_json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
