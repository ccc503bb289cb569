use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vista::atlas::{
    run_pipeline, stage_export, stage_fidelity, stage_layout, stage_map, stage_render, stage_select, PipelineConfig,
};
use vista::layout::read_embedding_csv;
use vista::metric::EuclideanPoints;
use vista::neighbors::gain_curve;
use vista::synthetic::{clustered_corpus, SyntheticSpec};
use vista::VistaError;

#[derive(Parser)]
#[command(name = "vista", version, about = "Semantic maps of sparse activation data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write the atlas bundle to the configured output.
    Run(ConfigArgs),
    /// Select the top-activating slice from a corpus (`--in` is the corpus file).
    Select(StageArgs),
    /// Distances, kNN graph, 2D layout and its fidelity curve.
    Layout(StageArgs),
    /// Density, clusters, connections, tiles and the render plan.
    Map(StageArgs),
    /// Render the panorama.
    Render(StageArgs),
    /// Write the atlas bundle (`--out` is the bundle directory).
    Export(StageArgs),
    /// Mutual-kNN gain curve between two embedding CSVs, matched by id.
    Gain(GainArgs),
    /// Write a labeled synthetic corpus as JSONL.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the layout and panorama seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GainArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Comma-separated neighborhood fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.09")]
    k: Vec<f64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 200)]
    per_cluster: usize,
}

enum Failure {
    Validation(VistaError),
    Stage(VistaError),
}

impl From<VistaError> for Failure {
    fn from(e: VistaError) -> Self {
        if e.is_stage_failure() {
            Failure::Stage(e)
        } else {
            Failure::Validation(e)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::load(&args.config).map_err(Failure::Validation)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate().map_err(Failure::Validation)?;
    Ok(cfg)
}

/// Copies intermediates from `input` that `out` lacks, so stages can be
/// chained through separate directories.
fn carry_forward(input: &Path, out: &Path) -> Result<(), VistaError> {
    if !input.is_dir() || input == out {
        return Ok(());
    }
    let io = |ctx: String| {
        move |e| VistaError::Io {
            context: ctx,
            source: e,
        }
    };
    for entry in fs::read_dir(input).map_err(io(format!("listing {}", input.display())))? {
        let entry = entry.map_err(io(format!("listing {}", input.display())))?;
        let target = out.join(entry.file_name());
        if entry.path().is_file() && !target.exists() {
            fs::copy(entry.path(), &target).map_err(io(format!("copying to {}", target.display())))?;
        }
    }
    Ok(())
}

fn stage(name: &'static str, args: &StageArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.cfg)?;
    let (input, out) = (args.input.as_path(), args.out.as_path());
    let result = match name {
        "select" => stage_select(&cfg, input, out).map(drop),
        "layout" => stage_layout(&cfg, input, out)
            .and_then(|_| stage_fidelity(&cfg, out, out))
            .map(drop),
        "map" => stage_map(&cfg, input, out).map(drop),
        "render" => stage_render(&cfg, input, out).map(drop),
        "export" => stage_export(&cfg, input, out).map(|p| log::info!("bundle written to {}", p.display())),
        _ => unreachable!("unknown stage {name}"),
    };
    let result = result.and_then(|_| {
        if name == "export" {
            Ok(())
        } else {
            carry_forward(input, out)
        }
    });
    result.map_err(|e| {
        Failure::Stage(VistaError::Stage {
            stage: name,
            source: Box::new(e),
        })
    })
}

fn gain(args: &GainArgs) -> Result<(), Failure> {
    let (ids_a, a) = read_embedding_csv(&args.a)?;
    let (ids_b, b) = read_embedding_csv(&args.b)?;
    let index: HashMap<&str, usize> = ids_b.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if ids_a.len() != ids_b.len() || index.len() != ids_b.len() {
        return Err(Failure::Validation(VistaError::SizeMismatch(format!(
            "{} ids in {} against {} distinct ids in {}",
            ids_a.len(),
            args.a.display(),
            index.len(),
            args.b.display()
        ))));
    }
    let b_aligned = ids_a
        .iter()
        .map(|id| {
            index.get(id.as_str()).map(|&i| b[i]).ok_or_else(|| {
                Failure::Validation(VistaError::SizeMismatch(format!(
                    "id {id:?} missing from {}",
                    args.b.display()
                )))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let curve = gain_curve(&EuclideanPoints(&a), &EuclideanPoints(&b_aligned), &args.k)?;
    match &args.out {
        Some(path) => curve.save_csv(path)?,
        None => {
            let _ = std::io::stdout().write_all(curve.to_csv().as_bytes());
        }
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        clusters: args.clusters,
        per_cluster: args.per_cluster,
        seed: args.seed,
        ..Default::default()
    };
    let data = clustered_corpus(&spec)?;
    data.corpus.save(&args.out)?;
    log::info!(
        "wrote {} items (dim {}, latent {})",
        data.corpus.len(),
        spec.dim,
        spec.latent()
    );
    Ok(())
}

fn execute(cmd: &Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(args) => {
            let cfg = load_config(args)?;
            let report = run_pipeline(&cfg)?;
            for (name, took) in &report.timings {
                log::info!("{name}: {took:.2?}");
            }
            println!("{}", report.bundle.display());
            Ok(())
        }
        Command::Select(a) => stage("select", a),
        Command::Layout(a) => stage("layout", a),
        Command::Map(a) => stage("map", a),
        Command::Render(a) => stage("render", a),
        Command::Export(a) => stage("export", a),
        Command::Gain(a) => gain(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
