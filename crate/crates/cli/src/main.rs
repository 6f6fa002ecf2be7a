use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use swinforensics::colorspace::ColorSpace;
use swinforensics::dataset::{read_manifest, scan_directory, split, synth_corpus, write_manifest, PreparedSet, SynthOptions};
use swinforensics::harness::{
    check_completeness, configure_threads, embed_features, emit_plots, render_report, run_combined, run_cross,
    run_intra, run_tsne, write_report_md, ExperimentSpec, RunResult,
};
use swinforensics::metrics::write_report;
use swinforensics::swin::SwinModel;
use swinforensics::training::{evaluate, train, Checkpoints};
use swinforensics::tsne::{read_features_csv, write_features_csv, write_layout_csv};
use swinforensics::{Error, Result};

#[derive(Parser)]
#[command(name = "swinforensics", version, about = "CGI vs photograph classification with a Swin Transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (TOML); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to one color space.
    #[arg(long, global = true, value_parser = ["rgb", "ycbcr", "hsv"])]
    colorspace: Option<String>,
    /// Output directory (or file, for `scan`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Scan `<root>/{cgi,real}` into a manifest CSV and a scan report.
    Scan {
        root: PathBuf,
        #[arg(long, default_value = "corpus")]
        source: String,
    },
    /// Write a procedural two-class corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        palette_swap: bool,
        #[arg(long)]
        shared_texture: bool,
    },
    /// Train one model on a manifest (split internally unless --val is given).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Evaluate a weight file on a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Per-corpus train/test runs for every color space.
    RunIntra,
    /// Pooled-corpora run with a per-class cap.
    RunCombined,
    /// Train on one corpus, test on the others.
    RunCross,
    /// Extract pre-head features for a stratified subsample.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 2000)]
        cap: usize,
    },
    /// Run t-SNE on a feature CSV.
    Tsne {
        #[arg(long)]
        features: PathBuf,
    },
    /// Render SVG plots for a run subdirectory.
    Plot { dir: PathBuf },
    /// Summarize a run directory into report.md and check completeness.
    Report { dir: PathBuf },
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec.set_seed(seed);
    }
    if let Some(cs) = &common.colorspace {
        spec.colorspaces = vec![cs.parse()?];
    }
    if let Some(out) = &common.out {
        spec.out_dir = out.clone();
    }
    spec.deterministic |= common.deterministic;
    Ok(spec)
}

fn single_space(spec: &ExperimentSpec) -> ColorSpace {
    spec.colorspaces.first().copied().unwrap_or(ColorSpace::Rgb)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn print_results(results: &[RunResult]) {
    for r in results {
        let auc = r.row.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:<32} acc {:.4} prec {:.4} rec {:.4} f1 {:.4} auc {auc} (n={})",
            r.row.tag, r.row.accuracy, r.row.precision, r.row.recall, r.row.f1, r.row.samples
        );
    }
}

fn execute(cli: Cli) -> Result<()> {
    let spec = load_spec(&cli.common)?;
    configure_threads(spec.deterministic);
    match cli.command {
        Command::Scan { root, source } => {
            let (records, report) = scan_directory(&root, &source)?;
            let dest = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("manifest.csv"));
            if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_manifest(&records, &dest)?;
            fs::write(dest.with_extension("scan.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            println!(
                "{} cgi, {} real, {} unreadable -> {}",
                report.accepted[0],
                report.accepted[1],
                report.corrupt_count(),
                dest.display()
            );
            for (path, why) in &report.corrupt {
                println!("unreadable: {} ({why})", path.display());
            }
        }
        Command::SynthCorpus { per_class, size, palette_swap, shared_texture } => {
            let dir = cli
                .common
                .out
                .clone()
                .ok_or_else(|| Error::Spec("synth-corpus needs --out".into()))?;
            let opts = SynthOptions { per_class, seed: spec.seed, size, palette_swap, shared_texture };
            let records = synth_corpus(&dir, "synthetic", &opts)?;
            write_manifest(&records, dir.join("manifest.csv"))?;
            println!("wrote {} images to {}", records.len(), dir.display());
        }
        Command::Train { manifest, val } => {
            let dir = out_dir(&cli.common, "train_out")?;
            let records = read_manifest(&manifest)?;
            let (tr, va) = match val {
                Some(v) => (records, read_manifest(&v)?),
                None => split(&records, &spec.split)?,
            };
            write_manifest(&tr, dir.join("manifest_train.csv"))?;
            write_manifest(&va, dir.join("manifest_val.csv"))?;
            let space = single_space(&spec);
            let size = spec.model.image_size;
            let (train_set, val_set) = (PreparedSet::prepare(&tr, space, size), PreparedSet::prepare(&va, space, size));
            let mut model = SwinModel::new(spec.model.clone(), spec.seed)?;
            let history = train(&mut model, &train_set, &val_set, &spec.train, Checkpoints { dir: Some(&dir) })?;
            history.save_csv(dir.join("history.csv"))?;
            let report = evaluate(&model, &val_set)?.report()?;
            write_report(&report, dir.join("metrics.json"), dir.join("roc.csv"))?;
            emit_plots(&dir)?;
            println!("{}", report.to_json()?);
        }
        Command::Eval { model, manifest } => {
            let dir = out_dir(&cli.common, "eval_out")?;
            let model = SwinModel::load(&model)?;
            let records = read_manifest(&manifest)?;
            let set = PreparedSet::prepare(&records, single_space(&spec), model.config().image_size);
            let report = evaluate(&model, &set)?.report()?;
            write_report(&report, dir.join("metrics.json"), dir.join("roc.csv"))?;
            println!("{}", report.to_json()?);
        }
        Command::RunIntra => finish_run(run_intra(&spec)?, &spec)?,
        Command::RunCombined => finish_run(run_combined(&spec)?, &spec)?,
        Command::RunCross => finish_run(run_cross(&spec)?, &spec)?,
        Command::Embed { model, manifest, cap } => {
            let dir = out_dir(&cli.common, "embed_out")?;
            let model = SwinModel::load(&model)?;
            let records = read_manifest(&manifest)?;
            let (paths, set) = embed_features(&model, &records, single_space(&spec), cap, spec.seed)?;
            write_features_csv(&paths, &set, dir.join("features.csv"))?;
            println!("{} feature vectors of length {}", set.vectors.len(), model.config().feature_dim());
        }
        Command::Tsne { features } => {
            let dir = out_dir(&cli.common, "tsne_out")?;
            let (_, set) = read_features_csv(&features)?;
            let mut config = spec.embed.clone().unwrap_or_default().tsne;
            config.seed = spec.seed;
            let (layout, used) = run_tsne(&set, &config)?;
            write_layout_csv(&layout, dir.join("tsne.csv"))?;
            fs::write(dir.join("tsne_config.json"), serde_json::to_string_pretty(&used)? + "\n")?;
            let (pts, labels, _) = swinforensics::tsne::read_layout_csv(dir.join("tsne.csv"))?;
            let title = format!("t-SNE (perplexity {}, {} iterations, seed {})", used.perplexity, used.iterations, used.seed);
            fs::write(dir.join("tsne.svg"), swinforensics::harness::scatter(&title, &pts, &labels))?;
            if let Some((it, cost)) = layout.cost_trace.last() {
                println!("final KL {cost:.5} after {it} iterations");
            }
        }
        Command::Plot { dir } => {
            for p in emit_plots(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::Report { dir } => report(&dir)?,
    }
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    write_report_md(dir)?;
    print!("{}", render_report(dir)?);
    let missing = check_completeness(dir)?;
    if missing.is_empty() {
        println!("\nrun directory complete");
        Ok(())
    } else {
        for m in &missing {
            println!("missing: {}", m.display());
        }
        Err(Error::MissingFile(missing[0].clone()))
    }
}

fn finish_run(results: Vec<RunResult>, spec: &ExperimentSpec) -> Result<()> {
    print_results(&results);
    write_report_md(spec.run_dir())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
