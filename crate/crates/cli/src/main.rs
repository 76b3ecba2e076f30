//! Command-line front end: dataset generation and splitting, training,
//! checkpoint evaluation, the ablation matrix, and chart emission. Every
//! run-producing command writes a `run.json` from which the invocation can
//! be reconstructed: the fully resolved configuration, the seed, and a
//! content hash of the dataset manifest it trained against.

mod plot;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::Utc;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use psmt_core::ablate::{
    builtin_ablation_arms, builtin_arm, perturbation_arms, run_ablation, write_ablation_csv,
    AblationArm,
};
use psmt_core::checkpoint::{load_checkpoint, restore_checkpoint};
use psmt_core::config::RunConfig;
use psmt_core::data::{
    generate_synthetic, index_dataset, index_from_manifest, load_batch, split_partition, LoadMode,
    SplitManifest, SyntheticSpec, SYNTHETIC_CLASSES,
};
use psmt_core::eval::evaluate;
use psmt_core::trainer::run_training;
use psmt_core::LabelMask;

#[derive(Parser)]
#[command(
    name = "psmt",
    version,
    about = "semi-supervised segmentation training with perturbed and strict mean teachers"
)]
struct Cli {
    /// Training configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override; the PSMT_SEED environment variable wins over both
    /// this flag and the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root under which the per-run timestamped output directory is created.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic shape-segmentation dataset.
    Generate {
        /// Number of images.
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        min_shapes: usize,
        #[arg(long, default_value_t = 3)]
        max_shapes: usize,
        /// Additive Gaussian pixel noise.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Directory the dataset is written into.
        #[arg(long)]
        dest: PathBuf,
    },
    /// Partition a labelled dataset into labelled and unlabelled subsets.
    Split {
        /// Dataset root produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Labelled fraction, for example 1/8.
        #[arg(long, default_value = "1/8")]
        ratio: String,
        /// Number of classes in the masks.
        #[arg(long, default_value_t = SYNTHETIC_CLASSES)]
        classes: usize,
        /// Manifest path; defaults to <data>/splits/split_1_<den>.json.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train from a configuration file.
    Train {
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root to score against.
        #[arg(long)]
        data: PathBuf,
        /// Optional split manifest; only its labelled items are scored.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Sliding-window inference as HxW:SHxSW, e.g. 64x64:32x32.
        #[arg(long)]
        sliding: Option<String>,
    },
    /// Train a matrix of configuration arms across seeds.
    Ablate {
        /// "table", "perturbation", or comma-separated arm names.
        #[arg(long, default_value = "table")]
        arms: String,
        /// Comma-separated seeds, one run per arm per seed.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Render charts from one or more metrics logs.
    Plot {
        /// Paths to metrics.jsonl files.
        inputs: Vec<PathBuf>,
    },
}

// ── shared plumbing ──────────────────────────────────────────────────────────

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("PSMT_SEED") {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .with_context(|| format!("PSMT_SEED must be an unsigned integer, got '{v}'"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Create `<root>/<tag>-<utc timestamp>`, suffixing a counter on collision.
fn make_run_dir(root: &Path, tag: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = Utc::now().format("%Y%m%d-%H%M%S");
    for k in 0..10_000u32 {
        let name = if k == 0 {
            format!("{tag}-{stamp}")
        } else {
            format!("{tag}-{stamp}-{k}")
        };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    bail!("could not find a free run directory under {}", root.display());
}

fn write_run_record(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    manifest_sha256: Option<&str>,
    config: Option<&RunConfig>,
    args: serde_json::Value,
) -> Result<PathBuf> {
    let record = serde_json::json!({
        "command": command,
        "seed": seed,
        "manifest_sha256": manifest_sha256,
        "config": config,
        "args": args,
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn out_root(cli: &Cli, fallback: &Path) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| fallback.to_path_buf())
}

fn parse_ratio(s: &str) -> Result<usize> {
    let text = s.trim();
    let den: usize = match text.split_once('/') {
        Some((num, den)) => {
            if num.trim() != "1" {
                bail!("ratio must be of the form 1/N, got '{s}'");
            }
            den.trim().parse().with_context(|| format!("bad ratio '{s}'"))?
        }
        None => text.parse().with_context(|| format!("bad ratio '{s}'"))?,
    };
    if den == 0 {
        bail!("ratio denominator must be positive");
    }
    Ok(den)
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .with_context(|| format!("expected HxW, got '{s}'"))?;
    Ok((
        a.trim().parse().with_context(|| format!("bad size '{s}'"))?,
        b.trim().parse().with_context(|| format!("bad size '{s}'"))?,
    ))
}

fn parse_sliding(s: &str) -> Result<((usize, usize), (usize, usize))> {
    let (win, stride) = s
        .split_once(':')
        .context("sliding spec is HxW:SHxSW, e.g. 64x64:32x32")?;
    Ok((parse_pair(win)?, parse_pair(stride)?))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .with_context(|| format!("bad seed '{}'", t.trim()))
        })
        .collect()
}

fn parse_arms(s: &str) -> Result<Vec<AblationArm>> {
    match s.trim() {
        "table" => Ok(builtin_ablation_arms()),
        "perturbation" => Ok(perturbation_arms()),
        list => list
            .split(',')
            .map(|n| {
                let n = n.trim();
                builtin_arm(n).ok_or_else(|| anyhow!("unknown ablation arm '{n}'"))
            })
            .collect(),
    }
}

/// Load the config named by --config and fold in the seed overrides:
/// file < --seed < PSMT_SEED.
fn resolved_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .context("this command needs --config <file>")?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    Ok(cfg)
}

// ── subcommands ──────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    cli: &Cli,
    n: usize,
    height: usize,
    width: usize,
    min_shapes: usize,
    max_shapes: usize,
    noise: f64,
    dest: &Path,
) -> Result<()> {
    let seed = env_seed()?.or(cli.seed).unwrap_or(7);
    let spec = SyntheticSpec {
        height,
        width,
        min_shapes,
        max_shapes,
        noise,
        seed,
    };
    let index = generate_synthetic(&spec, n, dest)?;
    write_run_record(
        dest,
        "generate",
        Some(seed),
        None,
        None,
        serde_json::json!({
            "n": n, "height": height, "width": width,
            "min_shapes": min_shapes, "max_shapes": max_shapes,
            "noise": noise, "dest": dest,
        }),
    )?;
    println!(
        "dataset {} images {} classes {}",
        dest.display(),
        index.labelled.len(),
        index.num_classes
    );
    Ok(())
}

fn cmd_split(
    cli: &Cli,
    data: &Path,
    ratio: &str,
    classes: usize,
    dest: Option<&Path>,
) -> Result<()> {
    let denominator = parse_ratio(ratio)?;
    let seed = env_seed()?.or(cli.seed).unwrap_or(7);
    let index = index_dataset(data, classes)?;
    let (_, manifest) = split_partition(&index, denominator, seed)?;
    let default_dest = data
        .join("splits")
        .join(format!("split_1_{denominator}.json"));
    let dest = dest.unwrap_or(&default_dest);
    manifest.save(dest)?;
    let hash = sha256_file(dest)?;
    let record = dest.with_extension("run.json");
    let rec = serde_json::json!({
        "command": "split",
        "seed": seed,
        "manifest_sha256": hash,
        "args": { "data": data, "ratio": format!("1/{denominator}"), "classes": classes, "dest": dest },
    });
    std::fs::write(&record, serde_json::to_string_pretty(&rec)?)
        .with_context(|| format!("writing {}", record.display()))?;
    println!(
        "manifest {} sha256 {} labelled {} unlabelled {}",
        dest.display(),
        hash,
        manifest.labelled.len(),
        manifest.unlabelled.len()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, resume: Option<&Path>) -> Result<()> {
    let mut cfg = resolved_config(cli)?;
    let root = out_root(cli, &cfg.io.out_dir);
    let run_dir = make_run_dir(&root, "train")?;
    cfg.io.out_dir = run_dir.clone();
    let manifest_hash = sha256_file(&cfg.data.split)?;
    write_run_record(
        &run_dir,
        "train",
        Some(cfg.seed),
        Some(&manifest_hash),
        Some(&cfg),
        serde_json::json!({ "resume": resume }),
    )?;
    let out = run_training::<f32>(&cfg, resume)?;
    let miou = out
        .final_eval
        .as_ref()
        .map(|r| format!("{:.6}", r.miou))
        .unwrap_or_else(|| "-".to_string());
    println!(
        "run {} iters {} final_miou {} metrics {}",
        run_dir.display(),
        out.state.iter,
        miou,
        out.metrics_path.display()
    );
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    ckpt: &Path,
    data: &Path,
    split: Option<&Path>,
    sliding: Option<&str>,
) -> Result<()> {
    let file = load_checkpoint(ckpt)?;
    let restored = restore_checkpoint::<f32>(&file, 0.99)?;
    let pair = restored.pair;
    let num_classes = pair.t1.arch.num_classes;
    let (index, manifest_hash) = match split {
        Some(mp) => {
            let manifest = SplitManifest::load(mp)?;
            (index_from_manifest(data, &manifest)?, Some(sha256_file(mp)?))
        }
        None => (index_dataset(data, num_classes)?, None),
    };
    if index.labelled.is_empty() {
        bail!("nothing to score: no labelled items under {}", data.display());
    }
    let ids: Vec<usize> = (0..index.labelled.len()).collect();
    let items: Vec<(psmt_core::Tensor<f32>, LabelMask)> =
        load_batch::<f32>(&index, &ids, LoadMode::Labelled)?
            .into_iter()
            .map(|(img, mask)| (img, mask.expect("labelled items carry masks")))
            .collect();
    let window = sliding.map(parse_sliding).transpose()?;
    let report = evaluate(&pair, &items, window)?;

    let run_dir = make_run_dir(&out_root(cli, Path::new("runs")), "eval")?;
    let mut csv = String::from("class,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => csv.push_str(&format!("{c},{v:.6}\n")),
            None => csv.push_str(&format!("{c},absent\n")),
        }
    }
    let table = run_dir.join("per_class_iou.csv");
    std::fs::write(&table, csv).with_context(|| format!("writing {}", table.display()))?;
    write_run_record(
        &run_dir,
        "eval",
        Some(restored.seed),
        manifest_hash.as_deref(),
        None,
        serde_json::json!({ "ckpt": ckpt, "data": data, "split": split, "sliding": sliding }),
    )?;
    println!(
        "miou {:.6} pixel_accuracy {:.6} images {} table {}",
        report.miou,
        report.pixel_accuracy,
        report.images,
        table.display()
    );
    Ok(())
}

fn cmd_ablate(cli: &Cli, arms: &str, seeds: &str) -> Result<()> {
    let base = resolved_config(cli)?;
    let arm_list = parse_arms(arms)?;
    let seed_list = parse_seeds(seeds)?;
    let root = out_root(cli, &base.io.out_dir);
    let run_dir = make_run_dir(&root, "ablate")?;
    let manifest_hash = sha256_file(&base.data.split)?;
    let arm_names: Vec<&str> = arm_list.iter().map(|a| a.name.as_str()).collect();
    write_run_record(
        &run_dir,
        "ablate",
        None,
        Some(&manifest_hash),
        Some(&base),
        serde_json::json!({ "arms": arm_names, "seeds": seed_list }),
    )?;
    let results = run_ablation::<f32>(&base, &arm_list, &seed_list, &run_dir)?;
    let table = run_dir.join("ablation.csv");
    write_ablation_csv(&results, &table)?;
    for r in &results {
        match &r.error {
            Some(e) => eprintln!("arm {} failed: {e}", r.name),
            None => println!("arm {} mean_miou {:.6} std {:.6}", r.name, r.mean, r.std),
        }
    }
    println!("table {}", table.display());
    if results.iter().all(|r| r.error.is_some()) {
        bail!("every arm failed; see {}", table.display());
    }
    Ok(())
}

fn cmd_plot(cli: &Cli, inputs: &[PathBuf]) -> Result<()> {
    let run_dir = make_run_dir(&out_root(cli, Path::new("runs")), "plot")?;
    let written = plot::cmd_plot(inputs, &run_dir)?;
    write_run_record(
        &run_dir,
        "plot",
        None,
        None,
        None,
        serde_json::json!({ "inputs": inputs }),
    )?;
    for p in &written {
        println!("chart {}", p.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Generate {
            n,
            height,
            width,
            min_shapes,
            max_shapes,
            noise,
            dest,
        } => cmd_generate(cli, *n, *height, *width, *min_shapes, *max_shapes, *noise, dest),
        Cmd::Split {
            data,
            ratio,
            classes,
            dest,
        } => cmd_split(cli, data, ratio, *classes, dest.as_deref()),
        Cmd::Train { resume } => cmd_train(cli, resume.as_deref()),
        Cmd::Eval {
            ckpt,
            data,
            split,
            sliding,
        } => cmd_eval(cli, ckpt, data, split.as_deref(), sliding.as_deref()),
        Cmd::Ablate { arms, seeds } => cmd_ablate(cli, arms, seeds),
        Cmd::Plot { inputs } => cmd_plot(cli, inputs),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_accepts_both_spellings() {
        assert_eq!(parse_ratio("1/8").unwrap(), 8);
        assert_eq!(parse_ratio("16").unwrap(), 16);
        assert!(parse_ratio("2/8").is_err());
        assert!(parse_ratio("0").is_err());
        assert!(parse_ratio("abc").is_err());
    }

    #[test]
    fn sliding_spec_parses() {
        assert_eq!(parse_sliding("64x64:32x32").unwrap(), ((64, 64), (32, 32)));
        assert_eq!(parse_sliding("32x48:16x24").unwrap(), ((32, 48), (16, 24)));
        assert!(parse_sliding("64x64").is_err());
        assert!(parse_sliding("64:32").is_err());
    }

    #[test]
    fn arm_presets_expand() {
        assert_eq!(parse_arms("table").unwrap().len(), 4);
        assert_eq!(parse_arms("perturbation").unwrap().len(), 4);
        let named = parse_arms("full, supervised").unwrap();
        assert_eq!(named[0].name, "full");
        assert_eq!(named[1].name, "supervised");
        assert!(parse_arms("bogus").is_err());
    }

    #[test]
    fn seed_lists_parse() {
        assert_eq!(parse_seeds("1,2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("1,x").is_err());
    }
}
