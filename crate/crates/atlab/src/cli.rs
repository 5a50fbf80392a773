//! Command-line interface: data generation, training, evaluation,
//! ablation, inference, and attention-dump export.
//!
//! [`run`] takes the argument list (without the binary name) and returns
//! the process exit code: 0 on success, 1 on usage errors, 2 on runtime
//! errors. Every subcommand is deterministic given its flags and the
//! files they reference.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use crate::alignment::AttentionMatrix;
use crate::config::fmt_f64;
use crate::error::{Error, Result};
use crate::model::ForwardOptions;
use crate::synthdata::{make_dataset, read_split, write_split, Dataset, Split};
use crate::tensor::rng;
use crate::trainer::{
    ablate, ablation_csv, arm_median_r, evaluate, max_frames_for, threads_from_env, train_on, Checkpoint,
    EvalReport, RunConfig, ARMS, STOP_THRESHOLD,
};

/// Seed stream label for CLI-side inference and attention dumps, fixed so
/// outputs depend only on the checkpoint and flags.
const CLI_SEED: u64 = 0xC1A0;

#[derive(Parser)]
#[command(name = "atlab", about = "Acoustic-model alignment laboratory", no_binary_name = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset splits described by a config file.
    GenData {
        /// Config file with a [task] section.
        #[arg(long)]
        config: PathBuf,
        /// Directory for train.bin / valid.bin / test.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint, metrics log, and config.
    Train {
        /// Config file with [task] / [model] / [train] sections.
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (checkpoint, JSONL log); overrides config paths.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a stored dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
        /// tf = teacher-forced, ar = autoregressive.
        #[arg(long, value_enum, default_value_t = ModeArg::Ar)]
        mode: ModeArg,
        /// Attention window during autoregressive decoding.
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        window: Toggle,
    },
    /// Train and evaluate the five ablation arms over a seed list.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list, e.g. 0,1,2.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Directory for per-arm logs, checkpoints, and ablation.csv
        /// (CSV goes to stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a token sequence autoregressively and write the frames.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated token ids, e.g. 3,1,4.
        #[arg(long, value_delimiter = ',', required = true)]
        tokens: Vec<usize>,
        #[arg(long)]
        speaker: usize,
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        window: Toggle,
        /// Output CSV: one line per frame, full-precision values.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-layer, per-head attention matrices for one sample.
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        /// Validation-split sample index (dataset regenerated from the
        /// checkpoint's task config).
        #[arg(long)]
        sample: usize,
        #[arg(long, value_enum, default_value_t = DumpFormat::Csv)]
        format: DumpFormat,
        /// Output directory, one file per (layer, head).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl SplitArg {
    fn to_split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Teacher-forced.
    Tf,
    /// Autoregressive.
    Ar,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn is_on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DumpFormat {
    Csv,
    Pgm,
}

/// Parse and dispatch one command line (no binary name), returning the
/// process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, seed, out } => train_cmd(&config, seed, out.as_deref()),
        Command::Eval { ckpt, data, split, mode, window } => {
            eval_cmd(&ckpt, &data, split.to_split(), matches!(mode, ModeArg::Tf), window.is_on())
        }
        Command::Ablate { config, seeds, out } => ablate_cmd(&config, &seeds, out.as_deref()),
        Command::Infer { ckpt, tokens, speaker, window, out } => {
            infer_cmd(&ckpt, &tokens, speaker, window.is_on(), &out)
        }
        Command::DumpAttention { ckpt, sample, format, out } => dump_attention(&ckpt, sample, format, &out),
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let run = RunConfig::load(config)?;
    let dataset = make_dataset(&run.task)?;
    fs::create_dir_all(out)?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        let path = out.join(format!("{}.bin", split.name()));
        write_split(&path, &dataset.config, dataset.split(split))?;
        println!("wrote {} samples to {}", dataset.split(split).len(), path.display());
    }
    Ok(())
}

fn train_cmd(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(seed) = seed {
        run.train.seed = seed;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        run.train.ckpt_path = dir.join("ckpt.bin").to_string_lossy().into_owned();
        run.train.log_path = dir.join("train.jsonl").to_string_lossy().into_owned();
    }
    let dataset = make_dataset(&run.task)?;
    let trained = train_on(&dataset, &run)?;
    let last = trained.metrics.last().expect("at least one step");
    println!(
        "trained {} steps: mel_loss {}, stop_loss {}, dc_loss {}, r_valid {}",
        last.step,
        fmt_f64(last.mel_loss),
        fmt_f64(last.stop_loss),
        fmt_f64(last.dc_loss),
        last.r_valid.map(fmt_f64).unwrap_or_else(|| "-".into()),
    );
    if !run.train.ckpt_path.is_empty() {
        println!("checkpoint: {}", run.train.ckpt_path);
    }
    if !run.train.log_path.is_empty() {
        println!("metrics: {}", run.train.log_path);
    }
    Ok(())
}

fn eval_cmd(ckpt_path: &Path, data: &Path, split: Split, teacher_forced: bool, window: bool) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let dataset = load_dataset_dir(data, split)?;
    if dataset.config != ckpt.task {
        return Err(Error::Parameter(
            "dataset task config does not match the checkpoint's task".into(),
        ));
    }
    let report = evaluate(&ckpt, &dataset, split, teacher_forced, window, None)?;
    println!("{}", report_json(&report, split, teacher_forced, window));
    Ok(())
}

/// Load the split files gen-data wrote; only the requested split is
/// required to exist.
fn load_dataset_dir(dir: &Path, required: Split) -> Result<Dataset> {
    let mut config = None;
    let mut splits: [Vec<_>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, split) in [Split::Train, Split::Valid, Split::Test].into_iter().enumerate() {
        let path = dir.join(format!("{}.bin", split.name()));
        if !path.exists() {
            if split == required {
                return Err(Error::Parameter(format!("missing split file {}", path.display())));
            }
            continue;
        }
        let (cfg, samples) = read_split(&path)?;
        if let Some(existing) = &config {
            if *existing != cfg {
                return Err(Error::Format("split files disagree on the task config".into()));
            }
        }
        config = Some(cfg);
        splits[i] = samples;
    }
    let [train, valid, test] = splits;
    let config = config.ok_or_else(|| Error::Parameter(format!("no split files in {}", dir.display())))?;
    Ok(Dataset { config, train, valid, test })
}

fn report_json(report: &EvalReport, split: Split, teacher_forced: bool, window: bool) -> String {
    let per_sample: Vec<String> = report.per_sample_r.iter().map(|&r| fmt_f64(r)).collect();
    let sims: Vec<String> =
        report.position_similarity.iter().map(|(name, v)| format!("\"{name}\":{}", fmt_f64(*v))).collect();
    format!(
        "{{\"split\":\"{}\",\"mode\":\"{}\",\"window\":{},\"mean_r\":{},\"mel_loss\":{},\"stop_accuracy\":{},\"per_sample_r\":[{}],\"position_similarity\":{{{}}}}}",
        split.name(),
        if teacher_forced { "tf" } else { "ar" },
        window,
        fmt_f64(report.mean_r),
        fmt_f64(report.mel_loss),
        fmt_f64(report.stop_accuracy),
        per_sample.join(","),
        sims.join(",")
    )
}

fn ablate_cmd(config: &Path, seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let rows = ablate(&run, seeds, out, threads_from_env())?;
    let csv = ablation_csv(&rows);
    match out {
        Some(dir) => {
            let path = dir.join("ablation.csv");
            fs::write(&path, &csv)?;
            println!("wrote {}", path.display());
            for (name, _, _) in ARMS {
                println!("median r [{name}]: {}", fmt_f64(arm_median_r(&rows, name)?));
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn infer_cmd(ckpt_path: &Path, tokens: &[usize], speaker: usize, window: bool, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let max_frames = max_frames_for(&ckpt.task);
    let decoded = ckpt.model.infer_autoregressive(
        tokens,
        speaker,
        window,
        max_frames,
        STOP_THRESHOLD,
        rng::derive(CLI_SEED, &[0]),
    )?;

    let file = fs::File::create(out)?;
    let mut w = BufWriter::new(file);
    for s in 0..decoded.s_len {
        let row: Vec<String> =
            decoded.mel[s * decoded.frame_dim..(s + 1) * decoded.frame_dim].iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    match decoded.stopped_at {
        Some(s) => println!("generated {s} frames (stop gate fired)"),
        None => println!("generated {} frames (frame budget reached)", decoded.s_len),
    }
    println!("frames: {}", out.display());
    Ok(())
}

fn dump_attention(ckpt_path: &Path, sample_idx: usize, format: DumpFormat, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let dataset = make_dataset(&ckpt.task)?;
    let samples = dataset.split(Split::Valid);
    let sample = samples.get(sample_idx).ok_or_else(|| {
        Error::Parameter(format!(
            "sample {sample_idx} out of range: validation split has {} samples",
            samples.len()
        ))
    })?;

    let mut tape = crate::tensor::Tape::new();
    let opts = ForwardOptions { train: false, seed: rng::derive(CLI_SEED, &[1, sample_idx as u64]) };
    let out_tf = ckpt.model.forward_teacher_forced(
        &mut tape,
        &sample.phonemes,
        &sample.frames,
        sample.speaker,
        opts,
    )?;
    let matrices = ckpt.model.attention_matrices(&tape, &out_tf.attns)?;

    fs::create_dir_all(out)?;
    let heads = ckpt.model.config().num_heads;
    for (i, matrix) in matrices.iter().enumerate() {
        let (layer, head) = (i / heads, i % heads);
        let (ext, body) = match format {
            DumpFormat::Csv => ("csv", attention_csv(matrix)),
            DumpFormat::Pgm => ("pgm", attention_pgm(matrix)),
        };
        let path = out.join(format!("attn_l{layer}_h{head}.{ext}"));
        fs::write(&path, body)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Full-precision CSV: header then one "s,t,weight" row per cell.
pub fn attention_csv(matrix: &AttentionMatrix) -> String {
    let mut out = String::from("s,t,weight\n");
    for s in 0..matrix.s_len() {
        for t in 0..matrix.t_len() {
            out.push_str(&format!("{s},{t},{}\n", fmt_f64(matrix.at(s, t))));
        }
    }
    out
}

/// P2 PGM heatmap: T columns by S rows (row s top-to-bottom), weights
/// scaled linearly so the matrix maximum maps to 255.
pub fn attention_pgm(matrix: &AttentionMatrix) -> String {
    let max = matrix.data().iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", matrix.t_len(), matrix.s_len());
    for s in 0..matrix.s_len() {
        let row: Vec<String> = (0..matrix.t_len())
            .map(|t| {
                let w = if max > 0.0 { matrix.at(s, t) / max } else { 0.0 };
                ((w * 255.0).round() as u32).min(255).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
