mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{set_synth_key, RunConfig};
use semcenter::data::{
    synth_dataset, synthetic_vocab, write_captions, write_features, write_labels, write_vocab, Manifest,
};
use semcenter::eval::{assignment_purity, evaluate_retrieval, report_csv, report_table};
use semcenter::model::{kmeans_init, load_checkpoint, save_checkpoint, Checkpoint};
use semcenter::training::{train, GradCase};
use semcenter::{CenterBank, Dataset, NegativeMode, Split, SyntheticData, SyntheticSpec};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Joint image-text embedding training and retrieval evaluation.
#[derive(Parser)]
#[command(name = "semcenter", version)]
struct Cli {
    /// key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the three training phases and evaluate on the validation split
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest in both retrieval directions
    Eval(EvalArgs),
    /// Compare analytic gradients against central differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset with planted concepts
    Synth(SynthArgs),
    /// Cluster a checkpoint's per-subset centers into a quantized bank
    KmeansInit(KmeansArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Override a config key, e.g. --set n_quant=100 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    ks: Vec<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Phase objective to check; all three when omitted
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    phase: Option<u8>,
    /// Negative sampling: random or hardest; both when omitted
    #[arg(long)]
    sampling: Option<NegativeMode>,
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Coordinates sampled per tensor
    #[arg(long, default_value_t = 32)]
    coords: usize,
    /// Perturb the analytic gradient before checking
    #[arg(long, hide = true)]
    corrupt_grad: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n_concepts: Option<usize>,
    #[arg(long)]
    subsets_per_concept: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    tokens_per_caption: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Hold out this many subsets per concept into a test split
    #[arg(long)]
    test_per_concept: Option<usize>,
}

#[derive(Args)]
struct KmeansArgs {
    /// Phase-1 checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    max_iters: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match cli.command {
        Command::Train(a) => cmd_train(cfg, &a),
        Command::Eval(a) => cmd_eval(&cfg, cli.out.is_some(), &a),
        Command::Gradcheck(a) => cmd_gradcheck(cfg.train.seed, &a),
        Command::Synth(a) => cmd_synth(cfg, cli.seed, &a),
        Command::KmeansInit(a) => cmd_kmeans(&cfg, &a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_train(mut cfg: RunConfig, args: &TrainArgs) -> Result<ExitCode> {
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    let data = cfg.load_data()?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join("config.txt"), &cfg.train.to_kv())?;

    eprintln!(
        "training on {} subsets (K={}, D_img={}), output in {}",
        data.train.len(),
        data.train.k(),
        data.train.feat_dim(),
        cfg.out.display()
    );
    let (state, log) = train(&data.train, &cfg.train, Some(&cfg.out))?;
    eprintln!("finished phase {} after {} steps ({} logged batches)", state.phase, state.step, log.rows());

    if let Some(val) = &data.val {
        let (ann, search) = evaluate_retrieval(&state.params, val, &[1, 5, 10])?;
        print!("{}", report_table(&ann, &search));
        write_text(&cfg.out.join("report.csv"), &report_csv(&[&ann, &search]))?;
        if let (Some(labels), true) = (&data.val_concepts, state.bank.quantized) {
            println!("assignment purity: {:.3}", assignment_purity(&state.params, val, labels)?);
        }
    } else {
        eprintln!("no validation split configured; skipping evaluation");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cfg: &RunConfig, write_report: bool, args: &EvalArgs) -> Result<ExitCode> {
    if args.ks.is_empty() || args.ks.contains(&0) {
        bail!("--ks must be a list of positive integers");
    }
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let dataset = Manifest::load(&args.manifest)
        .and_then(|m| m.load_dataset())
        .with_context(|| format!("loading {}", args.manifest.display()))?;
    let dims = ckpt.params.dims();
    if dims.feat_dim != dataset.feat_dim() {
        bail!(
            "feature dimension mismatch: checkpoint {} expects {}, manifest {} has {}",
            args.ckpt.display(),
            dims.feat_dim,
            args.manifest.display(),
            dataset.feat_dim()
        );
    }
    if dataset.vocab_size() > dims.vocab_size {
        bail!(
            "vocabulary mismatch: checkpoint {} has {} tokens, manifest {} has {}",
            args.ckpt.display(),
            dims.vocab_size,
            args.manifest.display(),
            dataset.vocab_size()
        );
    }
    let (ann, search) = evaluate_retrieval(&ckpt.params, &dataset, &args.ks)?;
    print!("{}", report_table(&ann, &search));
    if write_report {
        create_dir(&cfg.out)?;
        write_text(&cfg.out.join("report.csv"), &report_csv(&[&ann, &search]))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, args: &GradcheckArgs) -> Result<ExitCode> {
    let phases = args.phase.map_or(vec![1, 2, 3], |p| vec![p]);
    let modes = args
        .sampling
        .map_or(vec![NegativeMode::Random, NegativeMode::HardestInBatch], |m| vec![m]);
    let mut ok = true;
    println!("{:<6}{:<9}{:<10}{:>12}{:>9}{:>7}", "phase", "sampling", "tensor", "max rel err", "checked", "kinks");
    for &phase in &phases {
        for &mode in &modes {
            let case = GradCase::random(seed, phase, mode)?;
            let mut grads = case.gradients()?;
            if args.corrupt_grad {
                for v in grads.params.w_img.as_mut_slice() {
                    *v = *v * 1.05 + 1e-3;
                }
            }
            let report = case.check_against(&grads, args.h, args.tol, args.coords, seed)?;
            for t in &report.tensors {
                println!(
                    "{:<6}{:<9}{:<10}{:>12.2e}{:>9}{:>7}",
                    phase,
                    mode.to_string(),
                    t.name,
                    t.max_rel_error,
                    t.checked,
                    t.kinks
                );
            }
            ok &= report.passed();
        }
    }
    if ok {
        println!("gradcheck passed (tol {:e})", args.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAILED (tol {:e})", args.tol);
        Ok(ExitCode::from(2))
    }
}

fn synth_spec(cfg: &RunConfig, seed: Option<u64>, args: &SynthArgs) -> Result<(SyntheticSpec, usize)> {
    let (mut spec, mut test_per_concept) = match &cfg.data {
        config::DataSource::Synthetic { spec, test_per_concept } => (spec.clone(), *test_per_concept),
        config::DataSource::Manifests { .. } => bail!("config describes manifest data, not a synthetic spec"),
    };
    let flags = [
        ("synth_n_concepts", args.n_concepts.map(|v| v.to_string())),
        ("synth_subsets_per_concept", args.subsets_per_concept.map(|v| v.to_string())),
        ("synth_feat_dim", args.feat_dim.map(|v| v.to_string())),
        ("synth_vocab_size", args.vocab_size.map(|v| v.to_string())),
        ("synth_tokens_per_caption", args.tokens_per_caption.map(|v| v.to_string())),
        ("synth_k", args.k.map(|v| v.to_string())),
        ("synth_noise_sigma", args.noise_sigma.map(|v| v.to_string())),
        ("synth_seed", seed.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            set_synth_key(&mut spec, key, &v)?;
        }
    }
    if let Some(t) = args.test_per_concept {
        test_per_concept = t;
    }
    spec.validate()?;
    Ok((spec, test_per_concept))
}

fn write_split(dir: &Path, data: &SyntheticData, vocab: &[String]) -> Result<()> {
    create_dir(dir)?;
    let ds: &Dataset = &data.dataset;
    write_features(dir.join("features.jef"), &ds.feature_matrix())?;
    write_captions(dir.join("captions.tsv"), &ds.caption_list())?;
    write_vocab(dir.join("vocab.txt"), vocab)?;
    write_labels(dir.join("labels.txt"), &data.concept_labels)?;
    Manifest {
        features: "features.jef".into(),
        captions: "captions.tsv".into(),
        vocab: "vocab.txt".into(),
        k: ds.k(),
        split: ds.split(),
    }
    .write(dir.join("manifest.txt"))?;
    Ok(())
}

fn cmd_synth(cfg: RunConfig, seed: Option<u64>, args: &SynthArgs) -> Result<ExitCode> {
    let (spec, test_per_concept) = synth_spec(&cfg, seed, args)?;
    let data = synth_dataset(&spec)?;
    let vocab = synthetic_vocab(&spec);
    if test_per_concept == 0 {
        write_split(&cfg.out, &data, &vocab)?;
        println!("wrote {} subsets to {}", data.dataset.len(), cfg.out.display());
    } else {
        let (train, test) = data.split_holdout(test_per_concept)?;
        for (name, part) in [(Split::Train, &train), (Split::Test, &test)] {
            let dir = cfg.out.join(name.to_string());
            write_split(&dir, part, &vocab)?;
            println!("wrote {} {} subsets to {}", part.dataset.len(), name, dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_kmeans(cfg: &RunConfig, args: &KmeansArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    if ckpt.bank.quantized {
        bail!("checkpoint {} already holds a quantized bank", args.ckpt.display());
    }
    let n_q = ckpt.params.dims().n_quant;
    let max_iters = args.max_iters.unwrap_or(cfg.train.plan.kmeans_max_iters);
    let result = kmeans_init(&ckpt.bank.centers, n_q, cfg.train.seed, max_iters)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("kmeans.ckpt");
    save_checkpoint(
        &path,
        &Checkpoint {
            params: ckpt.params,
            bank: CenterBank::quantized(result.bank.centers.clone()),
            margins: ckpt.margins,
        },
    )?;
    println!(
        "k-means: {} centers from {} points, {} iterations, objective {:.6}",
        n_q,
        ckpt.bank.len(),
        result.iterations,
        result.objective()
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}
