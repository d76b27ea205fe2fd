//! `mmforge`: synthesize data, train, evaluate and analyze the detector.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use mmforge_core::checkpoint::Checkpoint;
use mmforge_core::config::GlobalConfig;
use mmforge_core::data::{synth_generate, DatasetManifest, Split};
use mmforge_core::eval::{
    activation_maps, evaluate, export_embeddings, load_split, parse_attacks, prepare_window, render_table,
    robustness_eval, sample_per_subset, write_embeddings_csv, EmbeddingKind,
};
use mmforge_core::mm::probe::write_probe_csv;
use mmforge_core::train::{Stage, Trainer};
use mmforge_core::uml::{write_map_csv, write_map_png, MapMode};
use mmforge_core::{Error, ExecMode};

#[derive(Parser)]
#[command(name = "mmforge", version, about = "Diffusion-generated video detector")]
struct Cli {
    /// Configuration file (TOML). Falls back to $MMFORGE_CONFIG, then defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the invoked command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location (directory, or file for dump-config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired real/fake dataset.
    Synth {
        #[arg(long)]
        real: Option<usize>,
        #[arg(long)]
        fake: Option<usize>,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        flicker_period: Option<f64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        tag: Option<String>,
    },
    /// Run one training stage and write a checkpoint directory.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, default_value = "data/manifest.jsonl")]
        manifest: PathBuf,
        /// Checkpoint to continue (same stage) or to start stage 2 from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score a split and print per-subset AUC.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/manifest.jsonl")]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Comma-separated attacks (blur, jpeg, resize, rotate, mixed, all, none).
        #[arg(long)]
        attacks: Option<String>,
    },
    /// Layer probes, activation maps or embedding exports.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        #[arg(long, default_value = "data/manifest.jsonl")]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Clips per activation-map export.
        #[arg(long, default_value_t = 4)]
        clips: usize,
        #[arg(long, default_value = "multimodal")]
        embedding: String,
    },
    /// Print the effective configuration.
    DumpConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzeMode {
    Probe,
    Actmap,
    Embed,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(
                    Error::Config(_)
                        | Error::ConfigMismatch { .. }
                        | Error::UnsupportedAttack(_)
                        | Error::InvalidAttack(_)
                )
            )
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg))
}

struct Ctx {
    config: Option<GlobalConfig>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mode: ExecMode,
}

impl Ctx {
    fn config(&self) -> GlobalConfig {
        self.config.clone().unwrap_or_default()
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let config = match GlobalConfig::source(cli.config.as_deref()) {
        Some(path) => Some(GlobalConfig::load(&path)?),
        None => None,
    };
    let ctx = Ctx {
        config,
        seed: cli.seed,
        out: cli.out,
        mode: if cli.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::default()
        },
    };
    match cli.command {
        Command::Synth {
            real,
            fake,
            strength,
            flicker_period,
            frames,
            side,
            tag,
        } => {
            let mut cfg = ctx.config().data;
            cfg.num_real = real.unwrap_or(cfg.num_real);
            cfg.num_fake = fake.unwrap_or(cfg.num_fake);
            cfg.artifact_strength = strength.unwrap_or(cfg.artifact_strength);
            cfg.flicker_period = flicker_period.unwrap_or(cfg.flicker_period);
            cfg.frames = frames.unwrap_or(cfg.frames);
            cfg.side = side.unwrap_or(cfg.side);
            cfg.generator_tag = tag.unwrap_or(cfg.generator_tag);
            cfg.seed = ctx.seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            let out = ctx.out_or("data");
            let manifest = synth_generate(&cfg, &out, ctx.mode)?;
            println!(
                "manifest: {}",
                out.join(mmforge_core::data::manifest::MANIFEST_FILE).display()
            );
            for split in [Split::Train, Split::Val, Split::Test] {
                println!("{split}: {}", manifest.count(split));
            }
            Ok(())
        }
        Command::Train {
            stage,
            manifest,
            resume,
            max_steps,
        } => cmd_train(&ctx, Stage::try_from(stage)?, &manifest, resume.as_deref(), max_steps),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            attacks,
        } => cmd_eval(&ctx, &checkpoint, &manifest, split.into(), attacks.as_deref()),
        Command::Analyze {
            checkpoint,
            mode,
            manifest,
            split,
            clips,
            embedding,
        } => cmd_analyze(&ctx, &checkpoint, mode, &manifest, split.into(), clips, &embedding),
        Command::DumpConfig => {
            let mut cfg = ctx.config();
            if let Some(seed) = ctx.seed {
                cfg.train.seed = seed;
            }
            let text = cfg.to_toml();
            match &ctx.out {
                Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    if !path.is_file() {
        return Err(usage(format!("manifest not found: {}", path.display())));
    }
    Ok(DatasetManifest::read(path)?)
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.join(mmforge_core::checkpoint::META_FILE).is_file() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    Ok(Checkpoint::load(path, None)?)
}

fn cmd_train(ctx: &Ctx, stage: Stage, manifest: &Path, resume: Option<&Path>, max_steps: Option<usize>) -> CmdResult {
    let manifest = read_manifest(manifest)?;
    let init = match resume {
        Some(path) => {
            if !path.join(mmforge_core::checkpoint::META_FILE).is_file() {
                return Err(usage(format!("checkpoint not found: {}", path.display())));
            }
            let expected = ctx.config.as_ref().map(GlobalConfig::model);
            Some(Checkpoint::load(path, expected.as_ref())?)
        }
        None => None,
    };
    // without an explicit config, a resumed run keeps the checkpoint's own
    let mut cfg = match (&ctx.config, &init) {
        (Some(c), _) => c.clone(),
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => GlobalConfig::default(),
    };
    if let Some(seed) = ctx.seed {
        cfg.train.seed = seed;
    }
    if let Some(n) = max_steps {
        match stage {
            Stage::Instruction => cfg.train.stage1.max_steps = n,
            Stage::EndToEnd => cfg.train.stage2.max_steps = n,
        }
    }
    let mut trainer = match init {
        Some(ck) => Trainer::resume(ck, cfg, stage, &manifest, ctx.mode)?,
        None => Trainer::new(cfg, stage, &manifest, ctx.mode)?,
    };
    let out = ctx.out_or(match stage {
        Stage::Instruction => "checkpoints/stage1",
        Stage::EndToEnd => "checkpoints/stage2",
    });
    let t = &trainer.checkpoint.config.train;
    match stage {
        Stage::Instruction => println!(
            "stage 1: lr={} batch_size={} max_steps={} train={} seed={}",
            t.stage1.lr,
            t.stage1.batch_size,
            t.stage1.max_steps,
            trainer.train.len(),
            t.seed
        ),
        Stage::EndToEnd => println!(
            "stage 2: lr={} batch_size={} lambda={} max_steps={} eval_every={} patience={} train={} val={} seed={}",
            t.stage2.lr,
            t.stage2.batch_size,
            t.stage2.lambda,
            t.stage2.max_steps,
            t.stage2.eval_every,
            t.stage2.patience,
            trainer.train.len(),
            trainer.val.len(),
            t.seed
        ),
    }
    let every = trainer.checkpoint.config.train.stage2.eval_every;
    trainer.run(|r| {
        if r.val_auc.is_some() || r.step % every == 0 {
            let val = r.val_auc.map_or_else(String::new, |a| format!(" val_auc={a:.4}"));
            println!(
                "step {} l_ce={:.6} l_cont={:.6} total={:.6}{val}",
                r.step, r.l_ce, r.l_cont, r.total
            );
        }
    })?;
    trainer.save(&out)?;
    let state = &trainer.checkpoint.state;
    if stage == Stage::EndToEnd {
        let auc = trainer.validation_auc()?;
        println!("final validation AUC: {auc:.4}");
        if state.early_stop.stopped {
            println!(
                "early stop at step {} (best {:.4} at step {})",
                state.step,
                state.early_stop.best_auc.unwrap_or(auc),
                state.early_stop.best_step
            );
        }
    }
    println!("checkpoint: {} (step {})", out.display(), state.step);
    Ok(())
}

fn cmd_eval(ctx: &Ctx, checkpoint: &Path, manifest: &Path, split: Split, attacks: Option<&str>) -> CmdResult {
    let ck = open_checkpoint(checkpoint)?;
    let manifest = read_manifest(manifest)?;
    let mut eval_cfg = ctx
        .config
        .as_ref()
        .map_or_else(|| ck.config.eval.clone(), |c| c.eval.clone());
    if let Some(seed) = ctx.seed {
        eval_cfg.window_seed = seed;
    }
    let specs = match attacks {
        Some(list) => parse_attacks(list, &eval_cfg.attacks)?,
        None => Vec::new(),
    };
    let report = if specs.is_empty() {
        evaluate(&manifest, split, &ck.detector, &ck.store, &eval_cfg, ctx.mode)?
    } else {
        let a = &eval_cfg.attacks;
        println!(
            "attacks: blur sigma={} jpeg quality={} resize factor={} rotate degrees={} mixed seed={}",
            a.blur_sigma, a.jpeg_quality, a.resize_factor, a.rotate_degrees, a.mixed_seed
        );
        robustness_eval(&manifest, split, &ck.detector, &ck.store, &eval_cfg, &specs, ctx.mode)?
    };
    print!("{}", render_table(&[("mmforge", &report)]));
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(dir) = &ctx.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&report).context("serializing report")?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn cmd_analyze(
    ctx: &Ctx,
    checkpoint: &Path,
    mode: AnalyzeMode,
    manifest: &Path,
    split: Split,
    n_clips: usize,
    embedding: &str,
) -> CmdResult {
    let ck = open_checkpoint(checkpoint)?;
    let manifest = read_manifest(manifest)?;
    let eval_cfg = ctx
        .config
        .as_ref()
        .map_or_else(|| ck.config.eval.clone(), |c| c.eval.clone());
    let seed = ctx.seed.unwrap_or(eval_cfg.window_seed);
    let out = ctx.out_or("analysis");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let model = &ck.detector;
    let (n, side) = (model.cfg.st.n_frames, model.cfg.st.input_side);
    let clips = load_split(&manifest, split, ctx.mode)?;
    match mode {
        AnalyzeMode::Probe => {
            let (mut real, mut fake) = (Vec::new(), Vec::new());
            for c in &clips {
                let w = prepare_window(c, n, side, seed, &mmforge_core::data::AttackSpec::None)?;
                let key = mmforge_core::data::select_key_frame(&w).clone();
                if c.label.is_fake() {
                    fake.push(key);
                } else {
                    real.push(key);
                }
            }
            if real.is_empty() || fake.is_empty() {
                return Err(usage(format!(
                    "split `{split}` needs both real and fake videos to probe"
                )));
            }
            let accs = model.mm.probe_all_layers(&ck.store, &real, &fake, ctx.mode)?;
            let path = out.join("probe.csv");
            write_probe_csv(&path, &accs)?;
            for (l, a) in accs.iter().enumerate() {
                println!("layer {}: {a:.4}", l + 1);
            }
            println!("probe: {}", path.display());
        }
        AnalyzeMode::Actmap => {
            for c in clips.iter().take(n_clips) {
                let w = prepare_window(c, n, side, seed, &mmforge_core::data::AttackSpec::None)?;
                let (cos, l2) = activation_maps(model, &ck.store, &w)?;
                let stem = c.source_id.replace(['/', '\\'], "_");
                for (map, mode) in [(&cos, MapMode::Cosine), (&l2, MapMode::L2norm)] {
                    let base = out.join(format!("{stem}_{}", mode.as_str()));
                    write_map_csv(&base.with_extension("csv"), map)?;
                    write_map_png(&base.with_extension("png"), map, mode, 16)?;
                }
                println!("{stem}: label={} cosine and l2norm maps written", c.label.as_u8());
            }
            println!("activation maps: {}", out.display());
        }
        AnalyzeMode::Embed => {
            let kind: EmbeddingKind = embedding.parse()?;
            let picked = sample_per_subset(&clips, eval_cfg.sample_per_subset, seed);
            let rows = export_embeddings(model, &ck.store, &picked, kind, seed, ctx.mode)?;
            let path = out.join(format!("embeddings_{embedding}.csv"));
            write_embeddings_csv(&path, &rows)?;
            println!("{} embeddings: {}", rows.len(), path.display());
        }
    }
    Ok(())
}
