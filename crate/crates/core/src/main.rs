use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use xview::checkpoint::{write_archive, DType};
use xview::data::{load_pairs, synth_generate, Dataset, SynthConfig};
use xview::diagnostics::{kernel_grad_checks, micro_model_config, objective_grad_check};
use xview::experiment::{ablation_table, evaluate_trainer, run_ablation_suite, AblationRow, ExperimentData};
use xview::model::{LossOptions, ModelConfig};
use xview::nn::Tensor;
use xview::retrieval::RetrievalConfig;
use xview::trainer::{prepare_items, StepReport, TrainConfig, Trainer};
use xview::Error;

#[derive(Parser)]
#[command(name = "xview", version, about = "Video-to-shop product retrieval toolkit")]
struct Cli {
    /// Worker threads (0 = all available cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic clip/shop-image dataset.
    SynthGen(SynthArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate the component ablation rows.
    Ablate(AblateArgs),
    /// Dump decoder cross-attention for one pair.
    ExportAttn(ExportArgs),
    /// Finite-difference check of every kernel and the full objective.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Total pairs, test pairs included.
    #[arg(long, default_value_t = 700)]
    pairs: usize,
    #[arg(long, default_value_t = 100)]
    test_pairs: usize,
    /// Gallery images with no clip.
    #[arg(long, default_value_t = 200)]
    gallery_extra: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// TOML or JSON synthesis config; flags above are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// TOML or JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the library defaults.
    #[arg(long, default_value_t = false, conflicts_with = "config")]
    desk: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rates for fine-tuning a pretrained encoder.
    #[arg(long, default_value_t = false)]
    pretrained_rates: bool,
}

impl TrainFlags {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None if self.desk => TrainConfig::desk(),
            None => TrainConfig::default(),
        };
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.pretrained_rates {
            cfg = cfg.with_pretrained_rates();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Disable the pairwise matching decoder loss (also disables reconstruction).
    #[arg(long, default_value_t = false)]
    no_pmd: bool,
    #[arg(long, default_value_t = false)]
    no_pfr: bool,
    /// Train on clips cropped to the product boxes.
    #[arg(long, default_value_t = false)]
    box_input: bool,
    /// Resume from a checkpoint written by `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save an intermediate checkpoint every N steps (0 = never).
    #[arg(long, default_value_t = 0)]
    save_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RetrievalFlags {
    #[arg(long, default_value_t = 16)]
    shortlist: usize,
    /// Rank by global similarity only.
    #[arg(long, default_value_t = false)]
    no_rerank: bool,
    /// Add text similarity to the rerank score.
    #[arg(long, default_value_t = false)]
    text: bool,
}

impl RetrievalFlags {
    fn config(&self) -> RetrievalConfig {
        RetrievalConfig {
            shortlist: self.shortlist,
            rerank: !self.no_rerank,
            text: self.text,
            ..RetrievalConfig::default()
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    retrieval: RetrievalFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "a,b,c,d,e,f")]
    rows: Vec<AblationRow>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 16)]
    shortlist: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reduce {
    Mean,
    Max,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    pair: u64,
    /// How attention heads are combined.
    #[arg(long, value_enum, default_value = "mean")]
    reduce: Reduce,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// TOML or JSON file with a `model` table; defaults to the micro model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let validation = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(
                    Error::Config(_)
                        | Error::DegenerateBatch(_)
                        | Error::InfeasibleLayout(_)
                        | Error::DuplicateId(_)
                        | Error::EmptyGallery
                        | Error::MissingGroundTruth(_)
                )
            )
        });
        if validation {
            Failure::Validation(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    match run(cli.cmd) {
        Ok(code) => code,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode, Failure> {
    match cmd {
        Command::SynthGen(a) => synth(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Ablate(a) => ablate(a)?,
        Command::ExportAttn(a) => export_attn(a)?,
        Command::GradCheck(a) => return Ok(grad_check(a)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(Error::from)?
            } else {
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            }
        }
        None => SynthConfig {
            pairs: a.pairs,
            test_pairs: a.test_pairs,
            gallery_extra: a.gallery_extra,
            image_size: a.image_size,
            frames: a.frames,
            ..SynthConfig::default()
        },
    };
    cfg.validate()?;
    let s = synth_generate(&cfg, a.seed, &a.out)?;
    println!(
        "wrote {} train / {} test pairs and {} gallery images to {}",
        s.train_pairs,
        s.test_pairs,
        s.gallery_size,
        a.out.display()
    );
    Ok(())
}

fn open_data(path: &Path, cfg: &TrainConfig) -> anyhow::Result<ExperimentData> {
    let ds = Dataset::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    Ok(ExperimentData::load(&ds, cfg.model.encoder.frames)?)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::load(p)?,
        None => {
            let mut cfg = a.flags.resolve()?;
            cfg.loss.toggles.pmd &= !a.no_pmd;
            cfg.loss.toggles.pfr &= !a.no_pfr && cfg.loss.toggles.pmd;
            cfg.box_input |= a.box_input;
            cfg.validate()?;
            Trainer::new(cfg)?
        }
    };
    let cfg = trainer.cfg.clone();
    let ds = Dataset::open(&a.data).with_context(|| format!("opening dataset {}", a.data.display()))?;
    let pairs = load_pairs(&ds, &ds.split(xview::data::Split::Train), cfg.model.encoder.frames)?;
    let (items, fallbacks) = prepare_items(&pairs, &cfg)?;
    if fallbacks > 0 {
        log::warn!("{fallbacks} box crops fell back to full frames");
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), toml::to_string(&cfg).context("encoding config")?)?;
    let log_path = a.out.join("loss.csv");
    let mut log = if a.resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{}", StepReport::CSV_HEADER)?;
        f
    };
    let every = if a.save_every == 0 { cfg.steps } else { a.save_every };
    while trainer.step < cfg.steps {
        let until = (trainer.step / every + 1) * every;
        let until = until.min(cfg.steps);
        trainer.train_until(&items, until, Some(&mut log), Some(&a.out))?;
        if until < cfg.steps {
            trainer.save(&a.out.join(format!("step{until}.bin")))?;
        }
        log::info!("step {until}/{}", cfg.steps);
    }
    let hash = trainer.save(&a.out.join("model.bin"))?;
    println!("{hash}");
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let trainer = Trainer::load(&a.ckpt)?;
    let data = open_data(&a.data, &trainer.cfg)?;
    let report = evaluate_trainer(&trainer, &data, &a.retrieval.config())?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.csv"), report.to_csv())?;
    fs::write(a.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    for (k, v) in &report.rank_k {
        println!("R{k} {v:.4}");
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = a.flags.resolve()?;
    if a.seeds.is_empty() || a.rows.is_empty() {
        bail!(Error::Config("ablation needs at least one row and one seed".into()));
    }
    let data = open_data(&a.data, &base)?;
    let retrieval = RetrievalConfig {
        shortlist: a.shortlist,
        ..RetrievalConfig::default()
    };
    let results = run_ablation_suite(&data, &base, &a.rows, &a.seeds, &retrieval)?;
    fs::create_dir_all(&a.out)?;
    let table = ablation_table(&results);
    fs::write(a.out.join("ablation.csv"), &table)?;
    fs::write(a.out.join("ablation.json"), serde_json::to_vec_pretty(&results)?)?;
    print!("{table}");
    Ok(())
}

/// Binary PGM of `values` scaled so the frame's range spans 0–255.
fn write_pgm(path: &Path, side: usize, values: &[f64]) -> anyhow::Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| ((v - lo) / span * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

fn export_attn(a: ExportArgs) -> anyhow::Result<()> {
    let trainer = Trainer::load(&a.ckpt)?;
    let enc = &trainer.cfg.model.encoder;
    let ds = Dataset::open(&a.data)?;
    let record = ds
        .pairs
        .iter()
        .find(|p| p.pair_id == a.pair)
        .cloned()
        .ok_or_else(|| Error::Config(format!("pair {} not in manifest", a.pair)))?;
    let pair = load_pairs(&ds, &[record], enc.frames)?.remove(0);
    let (img, _) = trainer.model.encode_image(&trainer.store, &pair.image)?;
    let (clip, _) = trainer.model.encode_clip(&trainer.store, &pair.frames)?;
    let res = trainer.model.match_pair(&trainer.store, &img, &clip)?;
    let (h, n, m) = (res.attn.shape()[0], res.attn.shape()[1], res.attn.shape()[2]);
    let attn = res.attn.data();
    let reduced: Vec<f64> = (0..n * m)
        .map(|k| {
            let heads = (0..h).map(|head| attn[head * n * m + k]);
            match a.reduce {
                Reduce::Mean => heads.sum::<f64>() / h as f64,
                Reduce::Max => heads.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let map = Tensor::new(&[n, m], reduced)?;
    fs::create_dir_all(&a.out)?;
    let meta = serde_json::json!({"pair_id": a.pair, "product_id": pair.record.product_id, "logit": res.logit});
    write_archive(&a.out.join("attn.bin"), &[("attn".into(), &map)], DType::F32, meta)?;
    let side = enc.image_size / enc.patch_size;
    let per_frame = side * side;
    for f in 0..enc.frames {
        let heat: Vec<f64> = (0..per_frame)
            .map(|p| (0..n).map(|i| map.data()[i * m + f * per_frame + p]).sum::<f64>() / n as f64)
            .collect();
        write_pgm(&a.out.join(format!("frame_{f:03}.pgm")), side, &heat)?;
    }
    println!("wrote {n}x{m} attention map for pair {}", a.pair);
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<ExitCode> {
    #[derive(serde::Deserialize, Default)]
    struct File {
        #[serde(default)]
        model: Option<ModelConfig>,
        #[serde(default)]
        loss: Option<LossOptions>,
    }
    let file: File = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(Error::from)?
            } else {
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            }
        }
        None => File::default(),
    };
    let model = file.model.unwrap_or_else(micro_model_config);
    let loss = file.loss.unwrap_or_default();
    let mut ok = true;
    for k in kernel_grad_checks(a.seed)? {
        let pass = k.report.max_rel_error < 1e-6;
        ok &= pass;
        println!("kernel {:<10} max_rel_error {:.3e} {}", k.name, k.report.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    let check = objective_grad_check(&model, &loss, a.seed)?;
    let pass = check.report.max_rel_error < a.tolerance;
    ok &= pass;
    println!(
        "objective max_rel_error {:.3e} over {} parameters in {:.1}s {}",
        check.report.max_rel_error,
        check.report.entries,
        check.elapsed.as_secs_f64(),
        if pass { "ok" } else { "FAIL" }
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
