use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arpatch::config::{ModeKey, PipelineConfig};
use arpatch::eval::Metric;
use arpatch::pipeline;
use arpatch::store::FeatureStore;
use arpatch::synth::{generate_corpus, SynthSpec};
use arpatch::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "arpatch", version, about = "Aspect-ratio-aware vehicle re-identification toolkit")]
struct Cli {
    /// TOML config file. Command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan a corpus, cluster aspect ratios and write the resize plan.
    Analyze {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write flipped and patch-mixed copies of every image.
    Augment {
        /// Input image directory (defaults to the configured corpus).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mix_prob: Option<f64>,
        #[arg(long)]
        flip_prob: Option<f64>,
    },
    /// Encode a corpus with the model for one resize-plan entry.
    Encode {
        #[command(flatten)]
        corpus: CorpusArg,
        /// plan.json written by `analyze`.
        #[arg(long)]
        plan: PathBuf,
        /// Plan entry index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse per-model feature stores into one.
    Fuse {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, num_args = 1.., required = true)]
        stores: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a gallery for each query and report mAP and CMC.
    Evaluate {
        /// Query store. With only `--store`, `query/` and `gallery/` ids are split.
        #[arg(long, requires = "gallery", conflicts_with = "store")]
        query: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long, required_unless_present = "query")]
        store: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time encoding across patch-grid settings; writes CSV.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check loss gradients against finite differences.
    VerifyLosses {
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Run analyze, augment, encode, fuse and evaluate end to end.
    Pipeline {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mix_prob: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic vehicle corpus.
    Synth {
        #[arg(long, default_value_t = 10)]
        vehicles: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct CorpusArg {
    /// Image root (defaults to the configured corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_enum)]
    junk_filter: Option<Switch>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Sum,
    Concat,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Switch {
    On,
    Off,
}

impl From<ModeArg> for ModeKey {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sum => ModeKey::Sum,
            ModeArg::Concat => ModeKey::Concat,
        }
    }
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

fn apply_corpus(cfg: &mut PipelineConfig, corpus: &CorpusArg) -> Result<(), Error> {
    if let Some(c) = &corpus.corpus {
        if !c.exists() {
            return Err(Error::MissingPath(c.clone()));
        }
        cfg.corpus = c.clone();
        cfg.manifest = None;
    }
    if !cfg.corpus.exists() {
        return Err(Error::MissingPath(cfg.corpus.clone()));
    }
    Ok(())
}

fn apply_eval(cfg: &mut PipelineConfig, eval: &EvalArgs) {
    if let Some(m) = eval.metric {
        cfg.metric = m.into();
    }
    if let Some(j) = eval.junk_filter {
        cfg.junk_filter = matches!(j, Switch::On);
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }

    match cli.command {
        Command::Analyze { corpus, k, out } => {
            apply_corpus(&mut cfg, &corpus)?;
            if let Some(k) = k {
                cfg.k = k;
            }
            cfg.validate()?;
            let analysis = pipeline::analyze(&cfg)?;
            pipeline::write_analysis(&analysis, &out)?;
            for w in &analysis.scan.warnings {
                eprintln!("warning: skipped {}: {}", w.path.display(), w.message);
            }
            for e in &analysis.plan.entries {
                println!("ar {:.4} -> {}x{}", e.aspect_ratio, e.target_height, e.target_width);
            }
        }
        Command::Augment {
            input,
            out,
            mix_prob,
            flip_prob,
        } => {
            if let Some(p) = mix_prob {
                cfg.mix_prob = p;
            }
            if let Some(p) = flip_prob {
                cfg.flip_prob = p;
            }
            cfg.validate()?;
            let input = input.unwrap_or_else(|| cfg.corpus.clone());
            if !input.exists() {
                return Err(Error::MissingPath(input));
            }
            let records = pipeline::augment(&cfg, &input, &out)?;
            println!("augmented {} images into {}", records.len(), out.display());
        }
        Command::Encode {
            corpus,
            plan,
            index,
            out,
        } => {
            apply_corpus(&mut cfg, &corpus)?;
            cfg.validate()?;
            let plan = pipeline::load_plan(&plan)?;
            let scan = pipeline::scan(&cfg, &cfg.corpus)?;
            let store = pipeline::encode(&cfg, &plan, index, &scan.records)?;
            store.save(&out)?;
            println!("encoded {} images, dim {}", store.len(), store.dim);
        }
        Command::Fuse {
            corpus,
            stores,
            mode,
            out,
        } => {
            apply_corpus(&mut cfg, &corpus)?;
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            cfg.validate()?;
            let loaded = stores
                .iter()
                .map(|p| FeatureStore::load(p))
                .collect::<Result<Vec<_>, _>>()?;
            let scan = pipeline::scan(&cfg, &cfg.corpus)?;
            let fused = pipeline::fuse_stores(&cfg, &loaded, &scan.records)?;
            fused.save(&out)?;
            println!("fused {} images, dim {}", fused.len(), fused.dim);
        }
        Command::Evaluate {
            query,
            gallery,
            store,
            eval,
            out,
        } => {
            apply_eval(&mut cfg, &eval);
            cfg.validate()?;
            let (q, g) = match (query, gallery, store) {
                (Some(q), Some(g), _) => (FeatureStore::load(&q)?, FeatureStore::load(&g)?),
                (_, _, Some(s)) => pipeline::split_query_gallery(&FeatureStore::load(&s)?)?,
                _ => return Err(Error::InvalidArgument("give --store or --query with --gallery".into())),
            };
            let report = pipeline::evaluate_stores(&cfg, &q, &g)?;
            if let Some(out) = out {
                pipeline::write_metrics(&out, &report)?;
            }
            println!("{}", report.summary());
        }
        Command::Bench { out } => {
            cfg.validate()?;
            let rows = pipeline::bench(&cfg, &cfg.bench_grid)?;
            let csv = pipeline::bench_csv(&rows);
            match out {
                Some(path) => write_text(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::VerifyLosses { instances } => {
            let report = pipeline::verify_losses(cfg.seed, instances)?;
            println!("{}", format_loss_report(&report));
            if report.triplet_max_rel_error >= 1e-4 || report.id_max_rel_error >= 1e-4 {
                return Err(Error::NonFinite("gradient check above 1e-4".into()));
            }
        }
        Command::Pipeline {
            corpus,
            k,
            mix_prob,
            mode,
            eval,
            out,
        } => {
            apply_corpus(&mut cfg, &corpus)?;
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(p) = mix_prob {
                cfg.mix_prob = p;
            }
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            apply_eval(&mut cfg, &eval);
            cfg.validate()?;
            let summary = pipeline::run_pipeline(&cfg, &out)?;
            println!("{} images, {} models", summary.images, summary.stores.len());
            println!("{}", summary.metrics.summary());
        }
        Command::Synth { vehicles, out } => {
            let n = generate_corpus(
                &out,
                &SynthSpec {
                    vehicles,
                    seed: cfg.seed,
                },
            )?;
            println!("wrote {n} images to {}", out.display());
        }
    }
    Ok(())
}

fn format_loss_report(report: &pipeline::LossReport) -> String {
    format!(
        "instances {}\ntriplet max rel error {:.3e}\nid max rel error {:.3e}\ntriplet at d(a,p)=d(a,n): {:.12}\nid at uniform logits ({} classes): {:.12}",
        report.instances,
        report.triplet_max_rel_error,
        report.id_max_rel_error,
        report.triplet_at_symmetric_point,
        report.classes,
        report.id_at_uniform_logits
    )
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("ARPATCH_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("ARPATCH_THREADS={value} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e}");
        return ExitCode::from(if e.is_input_error() { 2 } else { 1 });
    }
    ExitCode::SUCCESS
}
