//! `nightseg`: data generation, LAB translation, training, evaluation,
//! gradient checking and the ablation sweep.

mod datadir;
mod manifest;
mod plot;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nightseg::ablation::{run_ablation, Progress};
use nightseg::checkpoint;
use nightseg::dataset::build_world;
use nightseg::eval::{predict, score, EvalScore};
use nightseg::gradcheck::{grad_check, DEFAULT_COORDS, DEFAULT_TOLERANCE};
use nightseg::image::{aggregate_stats, lab_moment_match, rgb_to_lab, Image};
use nightseg::io::{read_rgb_png, write_rgb_png};
use nightseg::synth::lab_stats;
use nightseg::trainer::{
    evaluate_night_model, initial_state, train, TrainConfig, TrainOptions, Variant,
};
use serde::Serialize;

use manifest::{RunEntry, RunManifest};

#[derive(Parser)]
#[command(name = "nightseg", version, about = "Day-to-night segmentation adaptation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the four-domain dataset (S_d, T_d, T_n, eval) as PNGs.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `world.data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Match the LAB mean and std of every image in SRC to the pooled
    /// statistics of TGT.
    Translate {
        src: PathBuf,
        tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both networks; resumes when `--checkpoint` is given.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Steps between periodic checkpoints; 0 keeps only the final one.
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
    },
    /// Score the night model of a checkpoint on a generated eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every variant for every seed; write the report and plots.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated variant ids; all ten by default.
        #[arg(long, value_delimiter = ',')]
        variant: Option<Vec<String>>,
    },
}

/// A check ran and did not pass.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let verification = e.downcast_ref::<VerificationFailed>().is_some()
                || matches!(e.downcast_ref::<nightseg::Error>(), Some(nightseg::Error::NonFinite { .. }));
            ExitCode::from(if verification { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Translate { src, tgt, out } => cmd_translate(&src, &tgt, &out),
        Command::Train {
            config,
            out,
            seed,
            variant,
            checkpoint,
            checkpoint_every,
        } => cmd_train(config.as_deref(), &out, seed, variant.as_deref(), checkpoint.as_deref(), checkpoint_every),
        Command::Eval { checkpoint, dataset, out } => cmd_eval(&checkpoint, &dataset, out.as_deref()),
        Command::Gradcheck { config, out, seed } => cmd_gradcheck(config.as_deref(), out.as_deref(), seed),
        Command::Ablate { config, out, seeds, variant } => cmd_ablate(config.as_deref(), &out, seeds, variant),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
    };
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.world.data_seed = s;
    }
    let mut run = RunManifest::begin("generate", &cfg, vec![cfg.world.data_seed], out)?;
    let world = build_world(&cfg.world)?;
    let m = datadir::write_dataset(&world, &cfg.world, out)?;
    for d in &m.domains {
        run.output(d.dir.clone());
        println!("{:<5} {:>5} images{}", d.tag, d.count, if d.labels { " + labels" } else { "" });
    }
    run.output(datadir::DATASET_MANIFEST);
    run.finish()
}

#[derive(Serialize)]
struct TranslateStats {
    count: usize,
    source: nightseg::image::ChannelStats,
    target: nightseg::image::ChannelStats,
    /// Pooled LAB statistics of the matched images before gamut clamping.
    matched_pre_clamp: nightseg::image::ChannelStats,
    /// Pooled LAB statistics of the written (clamped) images.
    output: nightseg::image::ChannelStats,
    clamp_fraction: f64,
}

/// PNGs directly in `dir`, or in `dir/images` for a generated split.
fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let direct = datadir::list_pngs(dir)?;
    if direct.is_empty() && dir.join("images").is_dir() {
        return datadir::list_pngs(&dir.join("images"));
    }
    Ok(direct)
}

fn cmd_translate(src: &Path, tgt: &Path, out: &Path) -> Result<()> {
    let src_paths = images_in(src)?;
    let tgt_paths = images_in(tgt)?;
    if src_paths.is_empty() || tgt_paths.is_empty() {
        bail!("source and target directories must both contain PNG images");
    }
    let mut run = RunManifest::begin("translate", &TrainConfig::default(), Vec::new(), out)?;
    let targets = tgt_paths.iter().map(read_rgb_png).collect::<nightseg::Result<Vec<_>>>()?;
    let target = lab_stats(&targets)?;
    let sources = src_paths.iter().map(read_rgb_png).collect::<nightseg::Result<Vec<_>>>()?;
    let mut matched = Vec::with_capacity(sources.len());
    let mut outputs = Vec::with_capacity(sources.len());
    let (mut clamped, mut total) = (0usize, 0usize);
    for (p, img) in src_paths.iter().zip(&sources) {
        let m = lab_moment_match(img, &target)?;
        let name = p.file_name().expect("listed file has a name");
        write_rgb_png(&m.image, out.join(name))?;
        run.output(name.to_string_lossy().into_owned());
        clamped += m.clamped;
        total += m.image.pixels().len();
        outputs.push(rgb_to_lab(&m.image)?);
        matched.push(m.lab);
    }
    let stats = TranslateStats {
        count: sources.len(),
        source: lab_stats(&sources)?,
        target,
        matched_pre_clamp: aggregate_stats(&matched),
        output: aggregate_stats(&outputs),
        clamp_fraction: clamped as f64 / total.max(1) as f64,
    };
    write_json(&out.join("stats.json"), &stats)?;
    run.output("stats.json");
    println!("translated {} images, clamp fraction {:.4}", stats.count, stats.clamp_fraction);
    run.finish()
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Option<String>,
    seed: u64,
    iters: usize,
    score: EvalScore,
}

fn cmd_train(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    variant: Option<&str>,
    resume: Option<&Path>,
    checkpoint_every: usize,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(v) = variant {
        cfg = cfg.with_variant(Variant::parse(v)?);
    }
    let world = build_world(&cfg.world)?;
    let mut state = match resume {
        Some(dir) => {
            let s = checkpoint::load(dir).with_context(|| format!("cannot load checkpoint {}", dir.display()))?;
            if s.models.m_n.config != cfg.net_config() {
                bail!("checkpoint network does not match the config");
            }
            if seed.is_some_and(|x| x != s.seed) {
                bail!("--seed differs from the checkpoint seed {}", s.seed);
            }
            s
        }
        None => {
            let seed = seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
            initial_state(&cfg, &world.pool, seed)?
        }
    };
    let mut run = RunManifest::begin("train", &cfg, vec![state.seed], out)?;
    let metrics_path = out.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)?;
    let mut metrics = BufWriter::new(file);
    let ckpt_dir = out.join("checkpoints");
    let result = train(
        &cfg,
        &world.pool,
        &mut state,
        TrainOptions {
            eval: Some(&world.eval),
            metrics: Some(&mut metrics),
            checkpoint_dir: Some(ckpt_dir.clone()),
            checkpoint_every,
            until: None,
        },
    );
    metrics.flush()?;
    run.output("metrics.jsonl");
    if ckpt_dir.is_dir() {
        run.output("checkpoints");
    }
    result?;
    checkpoint::save(&out.join("final"), &state)?;
    run.output("final");
    let summary = TrainSummary {
        variant: variant.map(str::to_string),
        seed: state.seed,
        iters: state.iter,
        score: evaluate_night_model(&state.models.m_n, &world.eval)?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    run.output("summary.json");
    println!("iterations {}  night mIoU {:.2}%", state.iter, 100.0 * summary.score.miou);
    run.finish()
}

fn print_score(s: &EvalScore) {
    for (c, iou) in s.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c:>2}  IoU {:6.2}%", 100.0 * v),
            None => println!("class {c:>2}  absent"),
        }
    }
    println!("mIoU {:.2}%", 100.0 * s.miou);
}

fn cmd_eval(ckpt: &Path, dataset: &Path, out: Option<&Path>) -> Result<()> {
    if !ckpt.join(checkpoint::MANIFEST_FILE).is_file() {
        bail!("no checkpoint at {}", ckpt.display());
    }
    let m = datadir::read_manifest(dataset)?;
    let state = checkpoint::load(ckpt)?;
    let net = &state.models.m_n;
    if net.config.num_classes != m.num_classes as usize {
        bail!(
            "checkpoint predicts {} classes, dataset has {}",
            net.config.num_classes,
            m.num_classes
        );
    }
    let (images, labels) = datadir::read_labelled(dataset, "eval", &m)?;
    let preds = images
        .iter()
        .map(|img: &Image| predict(&net.forward(img)?.0, m.ignore_index))
        .collect::<nightseg::Result<Vec<_>>>()?;
    let s = score(preds.iter().zip(&labels), m.num_classes as usize)?;
    print_score(&s);
    if let Some(dir) = out {
        let mut run = RunManifest::begin("eval", &TrainConfig::default(), vec![state.seed], dir)?;
        write_json(&dir.join("eval.json"), &s)?;
        run.output("eval.json");
        run.finish()?;
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let mut run = out
        .map(|dir| RunManifest::begin("gradcheck", &cfg, cfg.seeds.clone(), dir))
        .transpose()?;
    let report = grad_check(&cfg, DEFAULT_COORDS, DEFAULT_TOLERANCE)?;
    print!("{}", report.to_text());
    if let (Some(run), Some(dir)) = (run.as_mut(), out) {
        write_json(&dir.join("gradcheck.json"), &report)?;
        run.output("gradcheck.json");
    }
    if let Some(run) = run {
        run.finish()?;
    }
    if !report.passed {
        return Err(VerificationFailed(format!("gradient check failed at tolerance {:e}", report.tolerance)).into());
    }
    Ok(())
}

fn cmd_ablate(config: Option<&Path>, out: &Path, seeds: Option<Vec<u64>>, variants: Option<Vec<String>>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seeds {
        if s.is_empty() {
            bail!("--seeds needs at least one seed");
        }
        cfg.seeds = s;
    }
    let variants: Vec<Variant> = match variants {
        Some(names) => names.iter().map(|n| Variant::parse(n)).collect::<nightseg::Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let mut run = RunManifest::begin("ablate", &cfg, cfg.seeds.clone(), out)?;
    let runs_dir = out.join("runs");
    let plots_dir = out.join("plots");
    fs::create_dir_all(&runs_dir)?;
    fs::create_dir_all(&plots_dir)?;
    let mut write_err = None;
    let outcome = run_ablation(&cfg, &variants, &cfg.seeds, |p| match p {
        Progress::Pretrained { seed, wall_s } => eprintln!("seed {seed}: pretrained in {wall_s:.1}s"),
        Progress::RunDone(r) => {
            eprintln!(
                "seed {}  {:<18} mIoU {:6.2}%  ({:.0}s)",
                r.seed,
                r.variant.label(),
                100.0 * r.miou,
                r.wall_s
            );
            let path = runs_dir.join(format!("{}_seed{}.jsonl", r.variant.id(), r.seed));
            if let Err(e) = write_history(&path, &r.history) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    for r in &outcome.runs {
        let rel = format!("runs/{}_seed{}.jsonl", r.variant.id(), r.seed);
        run.output(rel.clone());
        run.runs.push(RunEntry {
            variant: r.variant.label().to_string(),
            seed: r.seed,
            metrics: rel,
            final_miou: r.miou,
        });
    }
    write_json(&out.join("report.json"), &outcome.report)?;
    fs::write(out.join("report.txt"), outcome.report.to_text())?;
    run.output("report.json");
    run.output("report.txt");
    if let Some(first) = outcome.runs.first() {
        plot::loss_components(
            &plots_dir.join("loss_components.png"),
            &format!("loss components, {} seed {}", first.variant.label(), first.seed),
            &first.history,
        )?;
        run.output("plots/loss_components.png");
    }
    plot::miou_per_variant(&plots_dir.join("miou.png"), &outcome.runs, &variants)?;
    run.output("plots/miou.png");
    print!("{}", outcome.report.to_text());
    println!("{} runs in {:.1} min", outcome.runs.len(), outcome.total_s / 60.0);
    run.finish()
}

fn write_history(path: &Path, history: &[nightseg::trainer::MetricRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
