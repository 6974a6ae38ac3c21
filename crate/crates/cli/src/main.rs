use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tabforge::config::RunConfig;
use tabforge::container::{
    latents_from_container, latents_to_container, sha256_hex, Container, DiffusionArtifact, TrainingStats, VaeArtifact,
};
use tabforge::diffusion::{train_diffusion, write_step_log};
use tabforge::imputer::impute;
use tabforge::metrics::{evaluate, DEFAULT_BUCKETS};
use tabforge::sampler::{generate, SamplerMode};
use tabforge::table::{apply_preprocess, fit_preprocess, Table, TableSchema};
use tabforge::tokenizer::ColumnLayout;
use tabforge::vae::{train_vae, write_epoch_log};
use tabforge::Error;

const VAE_FILE: &str = "vae.tsyn";
const LATENT_FILE: &str = "latents.tsyn";
const DIFFUSION_FILE: &str = "diffusion.tsyn";
const USAGE_EXIT: u8 = 64;

/// Latent-diffusion synthesis and imputation for mixed-type tables.
#[derive(Parser)]
#[command(name = "tabforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit preprocessing and the VAE; writes vae.tsyn, latents.tsyn and vae_log.csv.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent diffusion model from a model directory holding vae.tsyn and latents.tsyn.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        /// Model directory; diffusion.tsyn and diffusion_log.csv are written next to the VAE.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw synthetic rows; also writes `<out>.manifest.json`.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
        /// Reverse steps N.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        mode: Option<SamplerMode>,
        /// Must match the schema stored in the models when given.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Fill empty cells, and every cell of --mask-cols, of a CSV.
    Impute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated column names to impute in every row.
        #[arg(long, value_delimiter = ',')]
        mask_cols: Vec<String>,
        /// Also impute the schema's target column (prediction as imputation).
        #[arg(long)]
        mask_target: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        mode: Option<SamplerMode>,
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Fidelity report of a synthetic CSV against a real one (JSON, or CSV when --out ends in .csv).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Real table.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        synth: PathBuf,
        /// Held-out real table for the MLE score.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn pick(flag: Option<PathBuf>, configured: Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    match flag.or(configured) {
        Some(p) => Ok(p),
        None => Err(Error::Config(format!("no {what} path given by flag or config")).into()),
    }
}

fn load_schema(path: &Path) -> anyhow::Result<TableSchema> {
    TableSchema::from_json_file(path).with_context(|| format!("reading schema {}", path.display()))
}

fn load_table(path: &Path, schema: &TableSchema) -> anyhow::Result<Table> {
    Table::load_csv(path, schema).with_context(|| format!("reading {}", path.display()))
}

fn check_schema(flag: Option<PathBuf>, stored: &TableSchema) -> anyhow::Result<()> {
    if let Some(p) = flag {
        if &load_schema(&p)? != stored {
            return Err(Error::Schema(format!("{} differs from the schema stored in the model", p.display())).into());
        }
    }
    Ok(())
}

struct Models {
    vae: VaeArtifact,
    vae_sha256: String,
    diffusion: DiffusionArtifact,
    diffusion_sha256: String,
}

fn load_models(dir: &Path) -> anyhow::Result<Models> {
    let vae_path = dir.join(VAE_FILE);
    let (vae, vae_bytes) = VaeArtifact::load(&vae_path).with_context(|| format!("loading {}", vae_path.display()))?;
    let diff_path = dir.join(DIFFUSION_FILE);
    let (diffusion, diff_bytes) =
        DiffusionArtifact::load(&diff_path).with_context(|| format!("loading {}", diff_path.display()))?;
    let vae_sha256 = sha256_hex(&vae_bytes);
    if diffusion.vae_sha256 != vae_sha256 {
        return Err(Error::Compatibility(format!(
            "{} was trained on a different VAE ({} vs {})",
            diff_path.display(),
            diffusion.vae_sha256,
            vae_sha256
        ))
        .into());
    }
    Ok(Models {
        vae,
        vae_sha256,
        diffusion,
        diffusion_sha256: sha256_hex(&diff_bytes),
    })
}

fn train_vae_cmd(
    common: Common,
    schema: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let cfg = load_config(&common)?;
    let schema = load_schema(&pick(schema, cfg.paths.schema.clone(), "schema")?)?;
    let table = load_table(&pick(data, cfg.paths.data.clone(), "data")?, &schema)?;
    let out = pick(out, cfg.paths.out.clone(), "output directory")?;
    std::fs::create_dir_all(&out).map_err(Error::from)?;

    let state = fit_preprocess(&table)?;
    let encoded = apply_preprocess(&table, &state)?;
    let layout = ColumnLayout::from_state(&state)?;
    log::info!("training VAE on {} rows, {} tokens", table.n_rows(), layout.n_tokens());
    let run = train_vae(&encoded, &layout, &cfg.vae, cfg.seed)?;
    let last = run.log.last().copied();
    let artifact = VaeArtifact {
        model: run.model,
        state,
        config: cfg.vae.clone(),
        stats: TrainingStats {
            seed: cfg.seed,
            iterations: run.log.len(),
            final_loss: last.map_or(f64::NAN, |l| l.recon + l.beta * l.kl),
            final_beta: last.map(|l| l.beta),
        },
    };
    let bytes = artifact.save(out.join(VAE_FILE))?;
    latents_to_container(&run.latents, &sha256_hex(&bytes))?.save(out.join(LATENT_FILE))?;
    let log_file = std::fs::File::create(out.join("vae_log.csv")).map_err(Error::from)?;
    write_epoch_log(&run.log, log_file)?;
    Ok(())
}

fn train_diffusion_cmd(common: Common, out: Option<PathBuf>, steps: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = steps {
        cfg.diffusion.steps = s;
    }
    let dir = pick(out, cfg.paths.out.clone(), "model directory")?;
    let vae_bytes = std::fs::read(dir.join(VAE_FILE))
        .map_err(Error::from)
        .with_context(|| format!("reading {}", dir.join(VAE_FILE).display()))?;
    VaeArtifact::from_container(&Container::decode(&vae_bytes)?)?;
    let vae_sha256 = sha256_hex(&vae_bytes);
    let (latent_file, _) = Container::load(dir.join(LATENT_FILE))?;
    let (latents, latent_vae) = latents_from_container(&latent_file)?;
    if latent_vae != vae_sha256 {
        return Err(Error::Compatibility("latents.tsyn does not belong to vae.tsyn".into()).into());
    }
    log::info!(
        "training diffusion on {} latents of width {}",
        latents.rows(),
        latents.cols()
    );
    let run = train_diffusion(&latents, &cfg.diffusion, cfg.seed)?;
    let artifact = DiffusionArtifact {
        model: run.model,
        config: cfg.diffusion.clone(),
        vae_sha256,
        stats: TrainingStats {
            seed: cfg.seed,
            iterations: run.log.len(),
            final_loss: run.log.last().map_or(f64::NAN, |s| s.loss),
            final_beta: None,
        },
    };
    artifact.save(dir.join(DIFFUSION_FILE))?;
    let log_file = std::fs::File::create(dir.join("diffusion_log.csv")).map_err(Error::from)?;
    write_step_log(&run.log, log_file)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    rows: usize,
    steps: usize,
    mode: SamplerMode,
    rho: f64,
    vae_sha256: &'a str,
    diffusion_sha256: &'a str,
    version: &'a str,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn sample_cmd(
    common: Common,
    models: Option<PathBuf>,
    rows: usize,
    out: PathBuf,
    steps: Option<usize>,
    mode: Option<SamplerMode>,
    schema: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(&common)?;
    cfg.sampler.steps = steps.unwrap_or(cfg.sampler.steps);
    cfg.sampler.mode = mode.unwrap_or(cfg.sampler.mode);
    let m = load_models(&pick(models, cfg.paths.out.clone(), "model directory")?)?;
    check_schema(schema, &m.vae.state.schema)?;
    let table = generate(
        &m.vae.model,
        &m.diffusion.model,
        &m.vae.state,
        rows,
        &cfg.sampler,
        cfg.seed,
    )?;
    table.save_csv(&out)?;
    let manifest = Manifest {
        seed: cfg.seed,
        rows,
        steps: cfg.sampler.steps,
        mode: cfg.sampler.mode,
        rho: cfg.sampler.rho,
        vae_sha256: &m.vae_sha256,
        diffusion_sha256: &m.diffusion_sha256,
        version: env!("CARGO_PKG_VERSION"),
    };
    std::fs::write(manifest_path(&out), serde_json::to_string_pretty(&manifest)? + "\n").map_err(Error::from)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn impute_cmd(
    common: Common,
    models: Option<PathBuf>,
    data: Option<PathBuf>,
    out: PathBuf,
    mask_cols: Vec<String>,
    mask_target: bool,
    steps: Option<usize>,
    mode: Option<SamplerMode>,
    schema: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(&common)?;
    cfg.imputer.steps = steps.unwrap_or(cfg.imputer.steps);
    cfg.imputer.mode = mode.unwrap_or(cfg.imputer.mode);
    let m = load_models(&pick(models, cfg.paths.out.clone(), "model directory")?)?;
    let stored = &m.vae.state.schema;
    check_schema(schema, stored)?;
    let table = load_table(&pick(data, cfg.paths.data.clone(), "data")?, stored)?;
    let mut positions = mask_cols
        .iter()
        .map(|name| {
            stored
                .column(name)
                .map(|(p, _)| p)
                .ok_or_else(|| Error::Input(format!("--mask-cols names unknown column {name:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if mask_target {
        let (p, _) = stored
            .target()
            .ok_or_else(|| Error::Input("--mask-target given but the schema declares no target".into()))?;
        positions.push(p);
    }
    let filled = impute(
        &m.vae.model,
        &m.diffusion.model,
        &m.vae.state,
        &table,
        &positions,
        &cfg.imputer,
        cfg.seed,
    )?;
    filled.save_csv(&out)?;
    Ok(())
}

fn eval_cmd(
    common: Common,
    schema: Option<PathBuf>,
    data: Option<PathBuf>,
    synth: PathBuf,
    test: Option<PathBuf>,
    out: PathBuf,
) -> anyhow::Result<()> {
    let cfg = load_config(&common)?;
    let schema = load_schema(&pick(schema, cfg.paths.schema.clone(), "schema")?)?;
    let real = load_table(&pick(data, cfg.paths.data.clone(), "data")?, &schema)?;
    let synth = load_table(&synth, &schema)?;
    let test = test
        .or(cfg.paths.test.clone())
        .map(|p| load_table(&p, &schema))
        .transpose()?;
    let report = evaluate(&real, &synth, test.as_ref(), DEFAULT_BUCKETS)?;
    if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        report.write_csv(std::fs::File::create(&out).map_err(Error::from)?)?;
    } else {
        std::fs::write(&out, report.to_json() + "\n").map_err(Error::from)?;
    }
    println!(
        "column-wise density error {:.3}%  pair-wise correlation error {:.3}%",
        report.density.error_pct, report.pairs.error_pct
    );
    Ok(())
}

/// Process exit status for a library error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Config(_) => 2,
        Error::Schema(_) | Error::Compatibility(_) => 3,
        Error::Version { .. } => 4,
        Error::Integrity(_) => 5,
        Error::Io(_) => 6,
        Error::Parse { .. } | Error::Input(_) | Error::Fit(_) | Error::Dimension(_) | Error::Domain(_) => 7,
        Error::Numeric(_) | Error::UndefinedCorrelation(_) => 8,
        Error::State(_) => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("TABFORGE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("TABFORGE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::TrainVae {
            common,
            schema,
            data,
            out,
        } => train_vae_cmd(common, schema, data, out),
        Command::TrainDiffusion { common, out, steps } => train_diffusion_cmd(common, out, steps),
        Command::Sample {
            common,
            models,
            rows,
            out,
            steps,
            mode,
            schema,
        } => sample_cmd(common, models, rows, out, steps, mode, schema),
        Command::Impute {
            common,
            models,
            data,
            out,
            mask_cols,
            mask_target,
            steps,
            mode,
            schema,
        } => impute_cmd(common, models, data, out, mask_cols, mask_target, steps, mode, schema),
        Command::Eval {
            common,
            schema,
            data,
            synth,
            test,
            out,
        } => eval_cmd(common, schema, data, synth, test, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let codes = [
            exit_code(&Error::Config("x".into()).into()),
            exit_code(&Error::Schema("x".into()).into()),
            exit_code(&Error::Version { found: 2, expected: 1 }.into()),
            exit_code(&Error::Integrity("x".into()).into()),
            exit_code(&Error::Io(std::io::Error::other("x")).into()),
            exit_code(
                &Error::Parse {
                    line: 1,
                    message: "x".into(),
                }
                .into(),
            ),
            exit_code(&Error::Numeric("x".into()).into()),
        ];
        let mut uniq = codes.to_vec();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), codes.len());
        assert!(!codes.contains(&0) && !codes.contains(&1));
        let wrapped = anyhow::Error::from(Error::Integrity("x".into())).context("loading");
        assert_eq!(exit_code(&wrapped), 5);
    }

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(
            manifest_path(Path::new("/a/b/out.csv")),
            PathBuf::from("/a/b/out.csv.manifest.json")
        );
    }
}
