//! `piffuse`: dataset synthesis, training, evaluation, fusion, audits,
//! ablations and benchmarks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

use piffuse::ablation::{beta_variants, coupling_variants, fam_variants, loss_variants, run_sweep, AblationTable};
use piffuse::audit::{run_suites, Suite};
use piffuse::data::{read_cube, write_cube, DatasetManifest};
use piffuse::metrics::{sam, MetricsReport};
use piffuse::model::{load_checkpoint, parameter_count, pifnet_forward, PifNet};
use piffuse::nn::bicubic_upsample;
use piffuse::train::{bicubic_quality, curve_csv, evaluate_model, train, ExperimentConfig};
use piffuse::{DType, Float, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Parser)]
#[command(name = "piffuse", version, about = "Hyperspectral / multispectral image fusion")]
struct Cli {
    /// Experiment config (JSON); overrides --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Spatial ratio between the two inputs.
    #[arg(long, global = true, value_parser = parse_scale)]
    scale: Option<usize>,
    /// Weight of the residual prior.
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic scene cubes, a held-out sample triple and the dataset manifest.
    Synth,
    /// Train and write the loss curve, checkpoint and metrics.
    Train {
        /// Cap on optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on the held-out patches.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fuse an LR-HSI and an HR-MSI cube into an HR-HSI estimate and a SAM map.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Low-resolution hyperspectral cube (HSC1).
        #[arg(long)]
        x: PathBuf,
        /// High-resolution multispectral cube (HSC1).
        #[arg(long)]
        y: PathBuf,
        /// Ground truth for the SAM map; the bicubic upsample of x is used otherwise.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run the self-verification suites.
    Audit {
        /// Restrict to these suites (repeatable).
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Beta, block and loss-term sweeps over several seeds.
    Ablate {
        #[arg(long, value_enum, default_value_t = Sweep::All)]
        sweep: Sweep,
        /// Comma-separated seeds.
        #[arg(long, default_value = "7,8,9")]
        seeds: String,
        /// Cap on optimizer steps per run.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Parameter count and inference time per image.
    Bench {
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Beta,
    Coupling,
    Fam,
    Loss,
    All,
}

fn parse_scale(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (2 | 4 | 8)) => Ok(v),
        _ => Err(format!("{s} is not one of 2, 4, 8")),
    }
}

/// Validation failures exit with 1, failing audits with 2.
struct AuditFailed;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(AuditFailed)) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PIFFUSE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("PIFFUSE_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<std::result::Result<(), AuditFailed>> {
    match &cli.command {
        Command::Synth => synth(cli)?,
        Command::Train { steps } => {
            let mut cfg = experiment(cli)?;
            if steps.is_some() {
                cfg.max_steps = *steps;
            }
            match cfg.model.dtype {
                DType::F32 => train_cmd::<f32>(&cfg)?,
                DType::F64 => train_cmd::<f64>(&cfg)?,
            }
        }
        Command::Eval { checkpoint } => match checkpoint_dtype(checkpoint)? {
            DType::F32 => eval_cmd::<f32>(cli, checkpoint)?,
            DType::F64 => eval_cmd::<f64>(cli, checkpoint)?,
        },
        Command::Fuse { checkpoint, x, y, reference } => match checkpoint_dtype(checkpoint)? {
            DType::F32 => fuse_cmd::<f32>(cli, checkpoint, x, y, reference.as_deref())?,
            DType::F64 => fuse_cmd::<f64>(cli, checkpoint, x, y, reference.as_deref())?,
        },
        Command::Audit { suites, json } => return audit_cmd(suites, *json),
        Command::Ablate { sweep, seeds, steps } => ablate_cmd(cli, *sweep, seeds, *steps)?,
        Command::Bench { repeats } => bench_cmd(cli, *repeats)?,
    }
    Ok(Ok(()))
}

/// Experiment from `--config` or the profile, with flag overrides applied.
fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let seed = cli.seed.unwrap_or(7);
    let scale = cli.scale.unwrap_or(4);
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => match cli.profile {
            Profile::Desk => ExperimentConfig::desk(seed, scale),
            Profile::Paper => ExperimentConfig::paper(DatasetManifest::desk(seed, scale), seed)?,
        },
    };
    if cli.config.is_some() {
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(s) = cli.scale {
            if cfg.model.scale != s {
                cfg.model.scale = s;
                let mut m = cfg.manifest()?;
                m.patches.scale = s;
                cfg.manifest_path = None;
                cfg.dataset = Some(m);
            }
        }
    }
    if let Some(b) = cli.beta {
        cfg.model.beta = b;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("piffuse-out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn synth(cli: &Cli) -> Result<()> {
    let dir = out_dir(cli)?;
    let mut manifest = experiment(cli)?.manifest()?;
    for spec in &mut manifest.scenes {
        if spec.path.is_none() {
            let cube = DatasetManifest::load_scene(spec)?;
            let name = format!("scene_{}.hsc", spec.seed);
            write_cube(dir.join(&name), &cube.data)?;
            spec.path = Some(dir.join(&name).to_string_lossy().into_owned());
        }
    }
    let (train_set, test_set) = manifest.build()?;
    if let Some(first) = test_set.first() {
        // A held-out triple for trying `fuse`.
        write_cube(dir.join("sample_x.hsc"), &first.x)?;
        write_cube(dir.join("sample_y.hsc"), &first.y)?;
        write_cube(dir.join("sample_z.hsc"), &first.z)?;
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    println!(
        "wrote {} ({} scenes, {} train / {} test patches)",
        path.display(),
        manifest.scenes.len(),
        train_set.len(),
        test_set.len()
    );
    Ok(())
}

fn train_cmd<T: Float>(cfg: &ExperimentConfig) -> Result<()> {
    let start = Instant::now();
    let out = train::<T>(cfg)?;
    let r = &out.report;
    println!(
        "trained {} steps in {:.1} s: train loss {:.5} -> {:.5}",
        out.curve.len(),
        start.elapsed().as_secs_f64(),
        out.initial_train_loss,
        out.final_train_loss
    );
    println!(
        "held-out PSNR {:.4} dB (bicubic {:.4}), SSIM {:.4}, SAM {:.4}, ERGAS {:.4}, {} params",
        r.psnr, out.bicubic.psnr, r.ssim, r.sam, r.ergas, r.params
    );
    if cfg.out_dir.is_none() {
        print!("{}", curve_csv(&out.curve));
    }
    Ok(())
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    // Decoding as f64 accepts either stored precision; the config names the one trained.
    let (model, _) = load_checkpoint::<f64>(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model.cfg.dtype)
}

fn eval_cmd<T: Float>(cli: &Cli, checkpoint: &Path) -> Result<()> {
    let (model, ps) = load_checkpoint::<T>(checkpoint)?;
    let mut cfg = experiment(cli)?;
    cfg.model = model.cfg.clone();
    let manifest = cfg.manifest()?;
    if manifest.patches.scale != model.cfg.scale {
        bail!("checkpoint scale {} does not match the dataset scale {}", model.cfg.scale, manifest.patches.scale);
    }
    let (_, test) = manifest.build()?;
    let test: Vec<_> = test.iter().map(|s| s.cast::<T>()).collect();
    let (q, ms) = evaluate_model(&model, &ps, &test)?;
    let report = MetricsReport {
        dataset: manifest.name.clone(),
        scale: model.cfg.scale,
        psnr: q.psnr,
        ssim: q.ssim,
        sam: q.sam,
        ergas: q.ergas,
        params: parameter_count(&model, &ps),
        ms_per_image: ms,
    };
    let bic = bicubic_quality(&test)?;
    println!("{}", report.to_json()?);
    println!("bicubic baseline PSNR {:.4} dB", bic.psnr);
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval.json"), report.to_json()?)?;
    }
    Ok(())
}

fn fuse_cmd<T: Float>(cli: &Cli, checkpoint: &Path, x: &Path, y: &Path, reference: Option<&Path>) -> Result<()> {
    let (model, ps) = load_checkpoint::<T>(checkpoint)?;
    let xt: Tensor<T> = read_cube(x)?.to_tensor();
    let yt: Tensor<T> = read_cube(y)?.to_tensor();
    let (z_hat, _, _) = pifnet_forward(&xt, &yt, &model, &ps)?;
    let against = match reference {
        Some(r) => read_cube(r)?.to_tensor::<T>(),
        None => bicubic_upsample(&xt, model.cfg.scale)?,
    };
    let (mean_sam, map) = sam(&against, &z_hat)?;
    let dir = out_dir(cli)?;
    write_cube(dir.join("fused.hsc"), &z_hat)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    write_cube(dir.join("sam_map.hsc"), &map.reshape(&[h, w, 1])?)?;
    println!(
        "fused {:?} -> {}; mean SAM {:.4} deg against {}",
        z_hat.shape(),
        dir.join("fused.hsc").display(),
        mean_sam,
        if reference.is_some() { "the reference" } else { "bicubic(x)" }
    );
    Ok(())
}

fn audit_cmd(names: &[String], json: bool) -> Result<std::result::Result<(), AuditFailed>> {
    let suites: Vec<Suite> = if names.is_empty() {
        Suite::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| Suite::parse(n).with_context(|| format!("unknown suite {n}")))
            .collect::<Result<_>>()?
    };
    let report = run_suites(&suites);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render());
    }
    Ok(if report.passed() { Ok(()) } else { Err(AuditFailed) })
}

fn ablate_cmd(cli: &Cli, sweep: Sweep, seeds: &str, steps: Option<usize>) -> Result<()> {
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<_>>()?;
    let base_cli = experiment(cli)?;
    let base = |seed: u64| {
        let mut c = base_cli.clone();
        c.seed = seed;
        if let Some(d) = c.dataset.as_mut() {
            for s in &mut d.scenes {
                s.seed = seed;
            }
        }
        if let Some(n) = steps {
            c.max_steps = Some(n);
        }
        c
    };
    let sweeps = match sweep {
        Sweep::Beta => vec![("Impact of beta", beta_variants())],
        Sweep::Coupling => vec![("Invertible blocks", coupling_variants())],
        Sweep::Fam => vec![("FAM-LoRA blocks", fam_variants())],
        Sweep::Loss => vec![("Loss components", loss_variants())],
        Sweep::All => vec![
            ("Impact of beta", beta_variants()),
            ("Invertible blocks", coupling_variants()),
            ("FAM-LoRA blocks", fam_variants()),
            ("Loss components", loss_variants()),
        ],
    };
    let dir = out_dir(cli)?;
    for (title, variants) in sweeps {
        let table: AblationTable = run_sweep(title, &variants, &seeds, base)?;
        println!("{}", table.to_markdown());
        let stem = title.to_lowercase().replace(' ', "_");
        std::fs::write(dir.join(format!("{stem}.md")), table.to_markdown())?;
        std::fs::write(dir.join(format!("{stem}.csv")), table.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(())
}

fn bench_cmd(cli: &Cli, repeats: usize) -> Result<()> {
    let cfg = experiment(cli)?;
    let manifest = cfg.manifest()?;
    let patch = manifest.patches.patch;
    let m = &cfg.model;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamStore::<f32>::new();
    let model = PifNet::new(m.clone(), &mut ps, &mut rng)?;
    let x = Tensor::<f32>::rand_uniform(&[patch / m.scale, patch / m.scale, m.hsi_bands], 0.0, 1.0, &mut rng);
    let y = Tensor::<f32>::rand_uniform(&[patch, patch, m.msi_bands], 0.0, 1.0, &mut rng);
    pifnet_forward(&x, &y, &model, &ps)?;
    let start = Instant::now();
    for _ in 0..repeats.max(1) {
        pifnet_forward(&x, &y, &model, &ps)?;
    }
    let ms = start.elapsed().as_secs_f64() * 1e3 / repeats.max(1) as f64;
    let params = parameter_count(&model, &ps);
    println!("profile: D = {}, L = {}, {} -> {} bands, x{}", m.d, m.l, m.msi_bands, m.hsi_bands, m.scale);
    println!("parameters: {params}");
    println!("ms_per_image: {ms:.3} ({patch}x{patch} output, {} threads)", rayon::current_num_threads());
    Ok(())
}
