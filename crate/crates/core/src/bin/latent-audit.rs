use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_audit::pca::EncodeScope;
use latent_audit::pipeline::{self, RunConfig, RunDir};
use latent_audit::report::{self, AppState, InspectionBundle, ServeOptions, UserState};
use latent_audit::synth::{self, Factor, FactorRange, FactorSpec};

/// Audit an image corpus by sorting it along principal components of autoencoder latents.
#[derive(Parser)]
#[command(name = "latent-audit", version)]
struct Cli {
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splits, initialization, batch order and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a corpus directory and write the dataset manifest.
    Scan {
        /// Corpus root.
        #[arg(long = "in")]
        input: PathBuf,
        /// Run directory (overrides --run).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the autoencoder on the manifest's training split.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode the corpus with the final checkpoint.
    Encode {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
    },
    /// Fit PCA on the latents and write per-component reports.
    Pca,
    /// Render extreme-sample montages.
    Report {
        /// 1-based component number; all components when omitted.
        #[arg(long)]
        component: Option<usize>,
        /// Samples shown at each extreme.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Serve the inspection API.
    Serve(ServeArgs),
    /// Write the exclusion list built from curator flags.
    Export {
        /// Destination; defaults to exclusions.json in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also mark the listed samples excluded in the manifest.
        #[arg(long)]
        apply: bool,
    },
    /// Generate a synthetic corpus with known factors.
    Synth(SynthArgs),
    /// Spearman correlation of synthetic factors with the leading components.
    Score {
        /// Ground-truth CSV written by `synth`.
        #[arg(long)]
        truth: PathBuf,
        /// Components searched per factor.
        #[arg(long, default_value_t = 16)]
        first_k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    All,
    TrainOnly,
}

impl From<Scope> for EncodeScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::All => EncodeScope::All,
            Scope::TrainOnly => EncodeScope::TrainOnly,
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: SocketAddr,
    /// Static files served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Samples per extreme in component responses.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images and truth.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// HEIGHTxWIDTH.
    #[arg(long, default_value = "32x32", value_parser = parse_size)]
    size: (usize, usize),
    /// NAME=MIN:MAX, repeatable. Names: x_position, y_position, radius, brightness, noise_sigma, vertical_cutoff.
    #[arg(long = "factor", value_parser = parse_factor)]
    factors: Vec<FactorRange>,
    /// Images written as near-black RGB files.
    #[arg(long, default_value_t = 0)]
    near_black_rgb: usize,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HEIGHTxWIDTH")?;
    let h = h.parse().map_err(|_| format!("bad height {h}"))?;
    let w = w.parse().map_err(|_| format!("bad width {w}"))?;
    Ok((h, w))
}

fn parse_factor(s: &str) -> Result<FactorRange, String> {
    let (name, range) = s.split_once('=').ok_or("expected NAME=MIN:MAX")?;
    let factor: Factor = name.parse().map_err(|e: latent_audit::Error| e.to_string())?;
    let (min, max) = range.split_once(':').ok_or("expected NAME=MIN:MAX")?;
    let min = min.parse().map_err(|_| format!("bad minimum {min}"))?;
    let max = max.parse().map_err(|_| format!("bad maximum {max}"))?;
    Ok(FactorRange { factor, min, max })
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_seed(cli.seed))
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let run = RunDir::new(&cli.run);
    match cli.command {
        Command::Scan { input, out } => {
            let run = out.map(RunDir::new).unwrap_or(run);
            let (manifest, scan) = pipeline::scan(&input, &run, &cfg)?;
            println!(
                "scanned {} records ({} samples): {} unreadable, {} multi-channel, {} near-black, {} excluded",
                manifest.records.len(),
                manifest.samples().len(),
                scan.unreadable.len(),
                scan.multi_channel.len(),
                scan.near_black.len(),
                manifest.count_flag(latent_audit::data::Flag::Excluded),
            );
            println!("wrote {}", run.manifest().display());
        }
        Command::Train { resume } => {
            let log = pipeline::train(&run, &cfg, resume.as_deref())?;
            if let Some(last) = log.last() {
                println!(
                    "epoch {}: train_loss={:.6} val_loss={:.6}",
                    last.epoch, last.train_loss, last.val_loss
                );
            }
            println!("wrote {}", run.final_checkpoint().display());
        }
        Command::Encode { scope } => {
            let latents = pipeline::encode(&run, scope.into())?;
            println!("encoded {} samples into {} dimensions", latents.rows(), latents.dim);
            println!("wrote {}", run.latents().display());
        }
        Command::Pca => {
            let (model, _) = pipeline::fit(&run, &cfg)?;
            let summary = pipeline::load_pca_summary(&run)?;
            println!("fitted {} components on {} samples", model.k(), summary.fitted_samples);
            println!("wrote {}", run.pca().display());
        }
        Command::Report { component, top } => {
            let top = top.unwrap_or(cfg.report.top);
            let k = run.load_pca()?.k();
            let picks: Vec<usize> = match component {
                Some(0) => anyhow::bail!(latent_audit::Error::Config("components are numbered from 1".into())),
                Some(c) => vec![c - 1],
                None => (0..k).collect(),
            };
            for c in picks {
                let (path, r) = pipeline::report(&run, c, top)?;
                if r.degenerate {
                    println!("component {} is degenerate", c + 1);
                }
                for w in &r.warnings {
                    log::warn!("component {}: {w}", c + 1);
                }
                println!("wrote {}", path.display());
            }
        }
        Command::Serve(args) => {
            let top = args.top.unwrap_or(cfg.report.top);
            let options = ServeOptions {
                addr: args.addr,
                static_dir: args.static_dir,
            };
            let bundle = InspectionBundle::load(&run, top)?;
            let state = Arc::new(AppState::new(bundle, options.static_dir)?);
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .context("starting async runtime")?;
            rt.block_on(report::serve(state, options.addr))?;
        }
        Command::Export { out, apply } => {
            let bundle = InspectionBundle::load(&run, cfg.report.top)?;
            let user = UserState::load(&run)?;
            let out = out.unwrap_or_else(|| run.exclusions());
            let list = report::export_exclusion_list(&bundle, &user, &out)?;
            println!("wrote {} exclusions to {}", list.sample_ids.len(), out.display());
            if apply {
                let mut manifest = bundle.manifest.clone();
                for id in list.apply(&mut manifest) {
                    log::warn!("exclusion list names unknown sample {id}");
                }
                manifest.save(&run.manifest())?;
                println!("marked excluded in {}", run.manifest().display());
            }
        }
        Command::Synth(args) => {
            let spec = FactorSpec {
                image_size: args.size,
                factors: args.factors,
                count: args.count,
                seed: cli.seed.unwrap_or(0),
                near_black_rgb: args.near_black_rgb,
            };
            let generated = synth::generate(&spec, &args.out)?;
            println!(
                "wrote {} images and {}",
                generated.image_paths.len(),
                generated.truth_path.display()
            );
        }
        Command::Score { truth, first_k } => {
            let truth = synth::TruthTable::load(&truth)?;
            let model = run.load_pca()?;
            let projection = latent_audit::pca::transform(&model, &run.load_latents()?)?;
            let scores = synth::score_factor_recovery(&projection, &truth, first_k)?;
            print_json(&scores)?;
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn report_error(e: &anyhow::Error) {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<latent_audit::Error>())
        .map_or("internal", |le| le.kind());
    let message = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
    eprintln!("error kind={kind} message={}", one_line(&message));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}
