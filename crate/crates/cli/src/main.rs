use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hvdetr::attention::bench::{bench_grid, write_csv as write_bench_csv, BenchSettings};
use hvdetr::attention::export::write_csv as write_attention_csv;
use hvdetr::attention::{flops_global, flops_hv, AttentionKind};
use hvdetr::gradsuite::{run_suite, SUITES};
use hvdetr::model::{checkpoint, Model};
use hvdetr::query::export::write_csv as write_refs_csv;
use hvdetr::run::{decoder_attention_rows, evaluate, reference_points, train, RunConfig, AP_IOU};
use hvdetr::synthdata::{configure_threads, generate_scene, write_jsonl};
use hvdetr::Error;

#[derive(Parser)]
#[command(name = "hvdetr", version, about = "Train, evaluate and inspect a small box-query detection transformer")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Dot-path override, e.g. `--set model.d=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for scene generation and evaluation [env: HVDK_THREADS].
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint to read; defaults to the run's output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SceneArg {
    /// Scene index in the dataset (train indices first, then eval).
    #[arg(long)]
    scene: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes the checkpoint and the per-step loss log.
    Train,
    /// Detections on the held-out split as JSON lines, plus AP@0.5.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Evaluate on the training split instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Wall-clock and analytic cost of the encoder attention kernels.
    BenchAttn {
        /// Cells as HxWxD, comma separated.
        #[arg(long, default_value = "32x32x64,64x64x64,64x96x64")]
        grid: String,
        /// Kernels to time, comma separated.
        #[arg(long, default_value = "global,hv,cc")]
        kinds: String,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        /// Time the kernels in f64 instead of f32.
        #[arg(long)]
        f64: bool,
    },
    /// Analytic FLOPs of global and HV attention for one map size.
    Flops { h: u64, w: u64, d: u64 },
    /// Finite-difference gradient suites; exits 1 if any fails.
    Gradcheck {
        /// Run only these suites.
        #[arg(long)]
        suite: Vec<String>,
        /// Perturb one analytic gradient per suite (negative control).
        #[arg(long)]
        corrupt: bool,
        /// Offending parameters listed per failed suite.
        #[arg(long, default_value_t = 3)]
        worst: usize,
    },
    /// First-decoder-layer cross-attention maps of one scene.
    DumpAttn {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[command(flatten)]
        scene: SceneArg,
    },
    /// Reference points chosen for one scene, with objectness.
    DumpRefs {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[command(flatten)]
        scene: SceneArg,
    },
}

/// Exit 1: the inputs or a check are invalid. Exit 2: the run itself failed.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Dim(_) | Error::Domain(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn thread_count(flag: Option<usize>) -> Result<usize, Failure> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("HVDK_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Validation(format!("HVDK_THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_model(cfg: &RunConfig, ckpt: &CheckpointArg) -> Result<Model, Failure> {
    let path = ckpt.checkpoint.clone().unwrap_or_else(|| cfg.output.checkpoint());
    let model = checkpoint::load(&path).map_err(|e| match e {
        Error::Io(io) => Failure::Runtime(format!("{}: {io}", path.display())),
        other => Failure::from(other),
    })?;
    checkpoint::ensure_compatible(&cfg.model, model.config())?;
    Ok(model)
}

fn scene_index(cfg: &RunConfig, scene: &SceneArg) -> Result<usize, Failure> {
    let i = scene.scene.unwrap_or(cfg.data.train_scenes);
    if i >= cfg.data.scene_count() {
        return Err(Failure::Validation(format!("scene {i} is outside the {} scenes of the dataset", cfg.data.scene_count())));
    }
    Ok(i)
}

fn parse_grid(s: &str) -> Result<Vec<(usize, usize, usize)>, Failure> {
    let cells: Result<Vec<_>, Failure> = s
        .split(',')
        .map(|cell| {
            let p: Vec<usize> = cell.trim().split('x').map(|v| v.parse()).collect::<Result<_, _>>().map_err(|_| Failure::Validation(format!("grid cell {cell:?} is not HxWxD")))?;
            match p[..] {
                [h, w, d] if h > 0 && w > 0 && d > 0 => Ok((h, w, d)),
                _ => Err(Failure::Validation(format!("grid cell {cell:?} is not HxWxD with positive extents"))),
            }
        })
        .collect();
    let cells = cells?;
    if cells.is_empty() {
        return Err(Failure::Validation("empty grid".into()));
    }
    Ok(cells)
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    cfg.output.ensure_writable()?;
    let mut log = create(&cfg.output.loss_log())?;
    println!("config sha256 {}", cfg.hash()?);
    let out = train(cfg, Some(&mut log), |e, m| println!("epoch {:>3}  mean loss {m:.4}", e + 1))?;
    checkpoint::save(&cfg.output.checkpoint(), &out.model)?;
    println!("steps {}", out.steps.len());
    println!("checkpoint {}", cfg.output.checkpoint().display());
    println!("loss log {}", cfg.output.loss_log().display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ckpt: &CheckpointArg, train_split: bool) -> Outcome {
    let model = load_model(cfg, ckpt)?;
    cfg.output.ensure_writable()?;
    let indices = if train_split { cfg.data.train_indices() } else { cfg.data.eval_indices() };
    let ev = evaluate(&model, &cfg.data, indices)?;
    let mut out = create(&cfg.output.detections())?;
    write_jsonl(&mut out, &ev.detections)?;
    println!("scenes {}", ev.detections.len());
    println!("AP@{AP_IOU} {:.4}", ev.ap);
    println!("detections {}", cfg.output.detections().display());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, grid: &str, kinds: &str, settings: BenchSettings, wide: bool) -> Outcome {
    let cells = parse_grid(grid)?;
    let kinds: Vec<AttentionKind> = kinds.split(',').map(|k| k.trim().parse()).collect::<Result<_, _>>()?;
    let rows = if wide { bench_grid::<f64>(&kinds, &cells, &settings)? } else { bench_grid::<f32>(&kinds, &cells, &settings)? };
    cfg.output.ensure_writable()?;
    write_bench_csv(create(&cfg.output.bench())?, &rows)?;
    write_bench_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}

fn cmd_flops(h: u64, w: u64, d: u64) -> Outcome {
    let (g, v) = (flops_global(h, w, d), flops_hv(h, w, d));
    println!("H={h} W={w} d={d}");
    println!("global {g}");
    println!("hv     {v}");
    println!("ratio  {:.4}", g as f64 / v as f64);
    Ok(())
}

fn cmd_gradcheck(suites: &[String], corrupt: bool, worst: usize) -> Outcome {
    let names: Vec<String> = if suites.is_empty() { SUITES.iter().map(|s| s.to_string()).collect() } else { suites.to_vec() };
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:<30} {:>12} {:>8} {:>8} {:>8}  result", "suite", "max_rel_err", "tol", "checked", "skipped")?;
    for name in &names {
        let r = run_suite(name, corrupt)?;
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(stdout, "{:<30} {:>12.3e} {:>8.0e} {:>8} {:>8}  {verdict}", name, r.max_rel_error, r.tol, r.checked(), r.skipped())?;
        if !r.passed() {
            for p in r.worst(worst).into_iter().filter(|p| p.max_rel_error > r.tol) {
                writeln!(stdout, "    {} element {}: {:.3e}", p.name, p.worst_index, p.max_rel_error)?;
            }
            failed.push(name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_dump_attn(cfg: &RunConfig, ckpt: &CheckpointArg, scene: &SceneArg) -> Outcome {
    let model = load_model(cfg, ckpt)?;
    let i = scene_index(cfg, scene)?;
    let rows = decoder_attention_rows(&model, &generate_scene(&cfg.data, i).image)?;
    cfg.output.ensure_writable()?;
    write_attention_csv(create(&cfg.output.attention())?, &rows)?;
    println!("scene {i}: {} rows", rows.len());
    println!("attention {}", cfg.output.attention().display());
    Ok(())
}

fn cmd_dump_refs(cfg: &RunConfig, ckpt: &CheckpointArg, scene: &SceneArg) -> Outcome {
    let model = load_model(cfg, ckpt)?;
    let i = scene_index(cfg, scene)?;
    let refs = reference_points(&model, &generate_scene(&cfg.data, i).image)?;
    cfg.output.ensure_writable()?;
    write_refs_csv(create(&cfg.output.references())?, &refs)?;
    println!("scene {i}: {} reference points", refs.len());
    println!("references {}", cfg.output.references().display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    configure_threads(thread_count(cli.threads)?);
    if let Command::Flops { h, w, d } = cli.command {
        return cmd_flops(h, w, d);
    }
    if let Command::Gradcheck { suite, corrupt, worst } = &cli.command {
        return cmd_gradcheck(suite, *corrupt, *worst);
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides).map_err(|e| match e {
        Error::Io(io) => Failure::Validation(format!("config: {io}")),
        other => Failure::from(other),
    })?;
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval { ckpt, train_split } => cmd_eval(&cfg, ckpt, *train_split),
        Command::BenchAttn { grid, kinds, reps, warmup, heads, f64 } => {
            let settings = BenchSettings { warmup: *warmup, reps: *reps, heads: *heads, seed: cfg.seed };
            cmd_bench(&cfg, grid, kinds, settings, *f64)
        }
        Command::DumpAttn { ckpt, scene } => cmd_dump_attn(&cfg, ckpt, scene),
        Command::DumpRefs { ckpt, scene } => cmd_dump_refs(&cfg, ckpt, scene),
        Command::Flops { .. } | Command::Gradcheck { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
