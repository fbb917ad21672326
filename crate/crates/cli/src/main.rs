use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use mood_reader::container::Container;
use mood_reader::pipeline::experiment::{pretrain_encoder, prepare_all, split_dataset};
use mood_reader::pipeline::train::attention_snapshot;
use mood_reader::pipeline::{
    ablation_table, evaluate, load_data, run_ablation, run_experiment, seed62_layout, write_synth_corpus,
    ExperimentConfig, MoodReader, SplitBy, PRESETS,
};

#[derive(Parser)]
#[command(name = "mood-reader", version, about = "Multimodal EEG emotion recognition experiments")]
struct Cli {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Named ablation arm, e.g. STIB+Eye+MLF.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Seeded repetitions for the accuracy spread.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    #[arg(long, global = true, value_parser = ["subject", "trial", "sample"])]
    split_by: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess the dataset and write DE features.
    Features,
    /// Masked signal-modeling pretraining of the raw-EEG encoder.
    Pretrain,
    /// Train the configured arm and evaluate it on the test split.
    Train,
    /// Evaluate a saved model on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and compare ablation arms on one split.
    Ablate {
        /// Comma-separated arm names; all six when omitted.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
    },
    /// Export the spatial attention map of a saved model.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the synthetic corpus to disk as a manifest plus CSV files.
    Synth,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Features => features(&cfg, &cli.out),
        Command::Pretrain => pretrain(&cfg, &cli.out),
        Command::Train => train(&cfg, &cli.out),
        Command::Eval { checkpoint } => eval(&cfg, checkpoint, &cli.out),
        Command::Ablate { arms } => ablate(&cfg, arms, &cli.out),
        Command::Viz { checkpoint } => viz(&cfg, checkpoint, &cli.out),
        Command::Synth => {
            let path = write_synth_corpus(&cfg.data.synth, &cfg.preprocess, cfg.seed, &cli.out)?;
            println!("manifest written to {}", path.display());
            Ok(())
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.preset {
        cfg.model.preset = Some(p.clone());
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = cli.repeats {
        cfg.train.repeats = r;
    }
    if let Some(s) = &cli.split_by {
        cfg.train.split_by = match s.as_str() {
            "trial" => SplitBy::Trial,
            "sample" => SplitBy::Sample,
            _ => SplitBy::Subject,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    print!("{text}");
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct FeatureSummary {
    samples: usize,
    classes: Vec<String>,
    windows: usize,
    bands: usize,
    channels: usize,
    eye_dim: Option<usize>,
    per_class: Vec<usize>,
}

fn features(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg, false)?;
    let shape = ds.shape()?;
    let mut w = csv::Writer::from_path(out.join("features.csv"))?;
    let mut header = vec!["subject".to_string(), "trial".into(), "label".into()];
    let bands: Vec<String> = cfg.preprocess.de.bands.iter().map(|b| b.name.clone()).collect();
    for n in 0..shape.windows {
        for b in &bands {
            for ch in &ds.channel_names {
                header.push(format!("w{n}_{b}_{ch}"));
            }
        }
    }
    w.write_record(&header)?;
    for s in &ds.samples {
        let mut row = vec![s.subject.to_string(), s.trial.to_string(), s.label.to_string()];
        row.extend(s.de.values().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    let mut per_class = vec![0; ds.classes()];
    for s in &ds.samples {
        per_class[s.label] += 1;
    }
    let summary = FeatureSummary {
        samples: ds.samples.len(),
        classes: ds.class_names.clone(),
        windows: shape.windows,
        bands: shape.bands,
        channels: shape.channels,
        eye_dim: ds.eye_dim,
        per_class,
    };
    write_json(&out.join("features.json"), &summary)?;
    println!(
        "{} samples of {}x{}x{} DE features written to {}",
        summary.samples,
        shape.windows,
        shape.bands,
        shape.channels,
        out.join("features.csv").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    losses: Vec<f64>,
}

fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg, true)?;
    let sp = split_dataset(cfg, &ds)?;
    let (p, losses) = pretrain_encoder(&cfg.mbsm, &ds, &sp.train, cfg.seed)?;
    let path = out.join("encoder.ckpt");
    p.checkpoint()?.save(&path)?;
    let summary = PretrainSummary {
        steps: losses.len(),
        initial_loss: losses.first().copied().unwrap_or(0.0),
        final_loss: losses.last().copied().unwrap_or(0.0),
        losses,
    };
    write_json(&out.join("pretrain.json"), &summary)?;
    println!(
        "masked reconstruction loss {:.4} -> {:.4} over {} steps; encoder saved to {}",
        summary.initial_loss,
        summary.final_loss,
        summary.steps,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    arm: &'a str,
    modules: &'a [String],
    train_size: usize,
    test_size: usize,
    train_accuracy: f64,
    test: &'a mood_reader::pipeline::Metrics,
    note: &'static str,
}

const STD_NOTE: &str = "accuracy_std is the sample standard deviation across seeded repetitions, not across subjects";

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (run, sp) = run_experiment(cfg)?;
    run.model.to_container()?.save(&out.join("model.ckpt"))?;
    let summary = TrainSummary {
        arm: &run.arm,
        modules: &run.modules,
        train_size: sp.train.len(),
        test_size: sp.test.len(),
        train_accuracy: run.train_accuracy,
        test: &run.metrics,
        note: STD_NOTE,
    };
    write_json(&out.join("metrics.json"), &summary)?;
    write_json(&out.join("history.json"), &run.reports)?;
    if let Some(first) = run.reports.first() {
        for snap in &first.snapshots {
            snap.export(&out.join("attention"), &snap.tag)?;
        }
    }
    let text = format!(
        "arm {}\ntrain {} / test {} samples, train accuracy {:.2}%\n{}",
        run.arm,
        sp.train.len(),
        sp.test.len(),
        100.0 * run.train_accuracy,
        run.metrics.table()
    );
    write_text(&out.join("metrics.txt"), &text)
}

fn load_model(path: &Path) -> Result<MoodReader> {
    Ok(MoodReader::from_container(&Container::load(path)?)?)
}

/// Data for a saved model: the encoder arm needs raw spans.
fn data_for(cfg: &ExperimentConfig, model: &MoodReader) -> Result<mood_reader::pipeline::Dataset> {
    Ok(load_data(cfg, model.spec.ablation.encoder)?)
}

fn eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let ds = data_for(cfg, &model)?;
    let sp = split_dataset(cfg, &ds)?;
    let m = evaluate(&model, &ds, &sp.test)?;
    write_json(&out.join("eval.json"), &m)?;
    write_text(&out.join("eval.txt"), &format!("arm {}\n{}", model.spec.ablation, m.table()))
}

fn ablate(cfg: &ExperimentConfig, arms: &[String], out: &Path) -> Result<()> {
    let arms: Vec<String> = if arms.is_empty() { PRESETS.iter().map(|s| s.to_string()).collect() } else { arms.to_vec() };
    let (rows, sp) = run_ablation(cfg, &arms)?;
    for r in &rows {
        if r.audit != r.arm {
            bail!("construction audit failed for {}", r.arm);
        }
    }
    #[derive(Serialize)]
    struct Table<'a> {
        train_size: usize,
        test_size: usize,
        rows: &'a [mood_reader::pipeline::AblationRow],
        note: &'static str,
    }
    write_json(&out.join("ablation.json"), &Table { train_size: sp.train.len(), test_size: sp.test.len(), rows: &rows, note: STD_NOTE })?;
    write_text(&out.join("ablation.txt"), &ablation_table(&rows))
}

fn viz(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let ds = data_for(cfg, &model)?;
    let sp = split_dataset(cfg, &ds)?;
    let idx = if sp.test.is_empty() { &sp.train } else { &sp.test };
    let inputs = prepare_all(&model, &ds, idx)?;
    let map = attention_snapshot(&model, &inputs, &seed62_layout(), "final", cfg.train.epochs)?;
    let files = map.export(&out.join("attention"), "checkpoint")?;
    let mut ranked: Vec<_> = map.channels.iter().collect();
    ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.name.cmp(&b.name)));
    println!("top channels:");
    for c in ranked.iter().take(8) {
        println!("  {:<4} {:.4}", c.name, c.weight);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
