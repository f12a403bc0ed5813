use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wmoe_core::checkpoint::Checkpoint;
use wmoe_core::experiment::{ablate, check_samples, fit, write_ablation_csv};
use wmoe_core::metrics::{evaluate, write_metrics_csv, MetricsReport};
use wmoe_core::pgm::{quantize8, write_gray8};
use wmoe_core::synth::{read_dataset, write_dataset, zero_shot_split, DatasetSpec, ImageSample};
use wmoe_core::train::write_loss_log;
use wmoe_core::{Error, RunConfig};

const CHECKPOINT_FILE: &str = "checkpoint.wmoe";
const LOSS_FILE: &str = "loss.csv";
const METRICS_FILE: &str = "metrics.csv";
const ABLATION_FILE: &str = "ablation.csv";

#[derive(Parser)]
#[command(
    name = "wmoe",
    version,
    about = "Zero-shot anomaly detection on synthetic textures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a family spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        /// Samples per family.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes the checkpoint and the loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's data directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each anomaly map and a side-by-side image as graymaps.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Train and evaluate the five module-ablation rows.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated families to train on.
        #[arg(long, value_delimiter = ',', required = true)]
        train_families: Vec<String>,
        /// Comma-separated families to evaluate on.
        #[arg(long, value_delimiter = ',', required = true)]
        eval_families: Vec<String>,
        /// Number of seeds, counting up from the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Diverged { .. } => 3,
        Error::Contract(_) | Error::Dimension { .. } => 1,
        _ => 2,
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("WMOE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("WMOE_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(command: Command) -> wmoe_core::Result<()> {
    match command {
        Command::GenData {
            spec,
            n,
            seed,
            out,
            force,
        } => gen_data(&spec, n, seed, &out, force),
        Command::Train { config, data, out } => train(&config, data, out),
        Command::Eval {
            checkpoint,
            data,
            out,
            dump_maps,
        } => eval(&checkpoint, &data, &out, dump_maps),
        Command::Ablate {
            config,
            data,
            out,
            train_families,
            eval_families,
            seeds,
        } => run_ablation(&config, data, out, &train_families, &eval_families, seeds),
    }
}

fn gen_data(spec: &Path, n: usize, seed: u64, out: &Path, force: bool) -> wmoe_core::Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let text =
        std::fs::read_to_string(spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    let spec = DatasetSpec::from_json(&text)?;
    if !force && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(Error::Config(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let samples = spec.generate(n, seed)?;
    write_dataset(&samples, out)?;
    let mut counts: BTreeMap<(&str, u8), usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry((s.family.as_str(), s.label)).or_default() += 1;
    }
    for ((family, label), count) in counts {
        println!("{family} label={label}: {count}");
    }
    Ok(())
}

fn load_config(
    path: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> wmoe_core::Result<(RunConfig, PathBuf, PathBuf)> {
    let config = RunConfig::load(path)?;
    let data = data
        .or_else(|| config.data.clone())
        .ok_or_else(|| Error::Config("no data directory (pass --data or set \"data\")".into()))?;
    let out = out
        .or_else(|| config.out.clone())
        .ok_or_else(|| Error::Config("no output directory (pass --out or set \"out\")".into()))?;
    Ok((config, data, out))
}

fn load_data(dir: &Path) -> wmoe_core::Result<Vec<ImageSample>> {
    if !dir.is_dir() {
        return Err(Error::Input(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let samples = read_dataset(dir)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} holds no samples", dir.display())));
    }
    Ok(samples)
}

fn train(config: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> wmoe_core::Result<()> {
    let (config, data, out) = load_config(config, data, out)?;
    let samples = load_data(&data)?;
    std::fs::create_dir_all(&out)?;
    let (model, log) = fit(config, &samples, |row| {
        if row.step == 0 && row.epoch > 0 {
            println!("epoch {} loss {:.6}", row.epoch, row.report.total());
        }
    })?;
    if let Some(last) = log.last() {
        println!("final loss {:.6}", last.report.total());
    }
    write_loss_log(out.join(LOSS_FILE), &log)?;
    Checkpoint::from_model(&model).save(out.join(CHECKPOINT_FILE))?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: &Path, dump_maps: bool) -> wmoe_core::Result<()> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let samples = load_data(data)?;
    check_samples(model.config(), &samples)?;
    std::fs::create_dir_all(out)?;

    let mut rows = Vec::new();
    let (all, scores) = evaluate(&model, &samples)?;
    let mut families: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        families.entry(&s.family).or_default().push(i);
    }
    if families.len() > 1 {
        for (family, idx) in &families {
            let raw: Vec<f64> = idx.iter().map(|&i| scores[i].raw).collect();
            let labels: Vec<bool> = idx.iter().map(|&i| samples[i].label == 1).collect();
            let maps: Vec<_> = idx.iter().map(|&i| scores[i].map.clone()).collect();
            let masks: Vec<_> = idx.iter().map(|&i| samples[i].mask.clone()).collect();
            let report = MetricsReport::compute(&raw, &labels, &maps, &masks, model.config().seed)?;
            rows.push(("eval".to_string(), family.to_string(), report));
        }
    }
    rows.push(("eval".to_string(), "all".to_string(), all));
    write_metrics_csv(out.join(METRICS_FILE), &rows)?;
    for (name, value) in all.values() {
        match value {
            Some(v) => println!("{name} {v:.4}"),
            None => println!("{name} NA"),
        }
    }

    if dump_maps {
        let dir = out.join("maps");
        std::fs::create_dir_all(&dir)?;
        for (s, score) in samples.iter().zip(&scores) {
            let (h, w) = (s.pixels.shape()[0], s.pixels.shape()[1]);
            let heat: Vec<u8> = score.map.data().iter().map(|&v| quantize8(v)).collect();
            write_gray8(dir.join(format!("{}.pgm", s.id)), h, w, heat.clone())?;
            let mut pair = Vec::with_capacity(2 * h * w);
            for (img_row, heat_row) in s.pixels.data().chunks(w).zip(heat.chunks(w)) {
                pair.extend(img_row.iter().map(|&v| quantize8(v)));
                pair.extend_from_slice(heat_row);
            }
            write_gray8(dir.join(format!("{}_pair.pgm", s.id)), h, 2 * w, pair)?;
        }
    }
    Ok(())
}

fn run_ablation(
    config: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    train_families: &[String],
    eval_families: &[String],
    seeds: u64,
) -> wmoe_core::Result<()> {
    let (config, data, out) = load_config(config, data, out)?;
    let samples = load_data(&data)?;
    let tr: Vec<&str> = train_families.iter().map(String::as_str).collect();
    let ev: Vec<&str> = eval_families.iter().map(String::as_str).collect();
    let (train_set, eval_set) = zero_shot_split(samples, &tr, &ev)?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Input(
            "a split holds no samples; check the family names".into(),
        ));
    }
    std::fs::create_dir_all(&out)?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| config.seed + i).collect();
    let rows = ablate(&config, &train_set, &eval_set, &seed_list, |name, seed, r| {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
        println!(
            "seed {seed} {name:<12} I-AUC {} P-AUC {}",
            fmt(r.image_auroc),
            fmt(r.pixel_auroc)
        );
    })?;
    for r in &rows {
        println!(
            "{:<12} I-AUC {:.4} P-AUC {:.4}",
            r.name,
            r.mean_image_auroc(),
            r.mean_pixel_auroc()
        );
    }
    write_ablation_csv(out.join(ABLATION_FILE), &rows)
}
