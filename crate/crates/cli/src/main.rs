//! `aspdc`: corpus synthesis, training, inference and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 IO error,
//! 3 numeric-check failure (non-finite values, failed gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aspdc_core::checkpoint::{load_deblur, load_reblur, Checkpoint};
use aspdc_core::config::RunConfig;
use aspdc_core::deblur::{DeblurNet, DEBLUR_ALIGN};
use aspdc_core::gradcheck::{run_suite, GradCheck};
use aspdc_core::image::write_gray_png;
use aspdc_core::metrics::{MetricReport, MetricRow};
use aspdc_core::reblur::REBLUR_ALIGN;
use aspdc_core::synth::{make_corpus, Corpus, MotionKind};
use aspdc_core::train::{self, RunDir};
use aspdc_core::{Error, Image};

#[derive(Parser)]
#[command(
    name = "aspdc",
    version,
    about = "Deformable-convolution motion deblurring"
)]
struct Cli {
    /// Run configuration ([net], [train], [synth] sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic blurred/sharp corpus.
    Synth(SynthArgs),
    /// Train the deblurring network.
    TrainDeblur(TrainArgs),
    /// Train the reblurring network.
    TrainReblur(TrainArgs),
    /// Fine-tune a deblurring checkpoint with the consistency loss.
    Finetune(FinetuneArgs),
    /// Deblur PNG images.
    Deblur(DeblurArgs),
    /// Reblur a sharp-like image given its blurred counterpart.
    Reblur(ReblurArgs),
    /// Compare predictions against references and write a CSV report.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write the attention maps of the last ASPDC module as PNGs.
    DumpAttn(DumpAttnArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    max_motion: Option<f32>,
    /// shake, objects or mixture.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation corpus; defaults to the training corpus.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run directory for config snapshot, metrics.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    deblur: PathBuf,
    #[arg(long)]
    reblur: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Update the reblurring network as well.
    #[arg(long)]
    train_reblur: bool,
}

#[derive(Args)]
struct DeblurArgs {
    /// Checkpoint path, or `zeroinit` for a freshly initialized network.
    #[arg(long)]
    ckpt: String,
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output file for one input, output directory for several.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReblurArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    sharp: PathBuf,
    #[arg(long)]
    blurred: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted image or directory of PNGs.
    #[arg(long)]
    pred: PathBuf,
    /// Reference image or directory, matched by sorted file name.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct DumpAttnArgs {
    #[arg(long)]
    ckpt: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Check(_) => 3,
            Failure::Core(e) if e.is_io() => 2,
            Failure::Core(Error::Checkpoint(_)) => 2,
            Failure::Core(Error::NonFinite { .. }) => 3,
            Failure::Core(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Check(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("aspdc: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::TrainDeblur(a) => train_deblur(cfg, a),
        Command::TrainReblur(a) => train_reblur(cfg, a),
        Command::Finetune(a) => finetune(cfg, a),
        Command::Deblur(a) => deblur(&cfg, a),
        Command::Reblur(a) => reblur(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DumpAttn(a) => dump_attn(&cfg, a),
    }
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Outcome {
    let s = &mut cfg.synth;
    s.seed = a.seed.unwrap_or(s.seed);
    s.count = a.count.unwrap_or(s.count);
    s.size = a.size.unwrap_or(s.size);
    s.max_motion = a.max_motion.unwrap_or(s.max_motion);
    s.gamma = a.gamma.unwrap_or(s.gamma);
    s.noise_sigma = a.noise.unwrap_or(s.noise_sigma);
    if let Some(k) = a.kind {
        MotionKind::parse(&k).map_err(|e| Failure::Usage(e.to_string()))?;
        s.kind = k;
    }
    let sc = cfg.synth()?;
    make_corpus(&a.out, &sc)?;
    let corpus = Corpus::load(&a.out)?;
    println!(
        "wrote {} pairs to {} (mean blurred PSNR {:.3} dB)",
        corpus.len(),
        a.out.display(),
        corpus.blurred_psnr()?
    );
    Ok(())
}

fn corpora(data: &Path, val: Option<&Path>) -> Result<(Corpus, Corpus), Failure> {
    let train = Corpus::load(data)?;
    if train.is_empty() {
        return Err(Failure::Usage(format!("{}: empty corpus", data.display())));
    }
    let val = match val {
        Some(v) => Corpus::load(v)?,
        None => train.clone(),
    };
    Ok((train, val))
}

fn apply_overrides(cfg: &mut RunConfig, steps: Option<usize>, seed: Option<u64>) {
    if let Some(s) = steps {
        cfg.train.steps = s;
        cfg.train.finetune_steps = s;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
}

fn print_report(report: &train::TrainReport, run: &RunDir) {
    if let (Some(first), Some(last)) = (report.rows.first(), report.rows.last()) {
        println!(
            "{} steps over {} epochs; validation PSNR {:.3} -> {:.3} dB, SSIM {:.4} -> {:.4}",
            report.losses.len(),
            report.epochs,
            first.psnr,
            last.psnr,
            first.ssim,
            last.ssim
        );
    }
    if report.hit_floor {
        println!("stopped: learning rate reached its floor");
    }
    println!("run directory: {}", run.path.display());
}

fn train_deblur(mut cfg: RunConfig, a: TrainArgs) -> Outcome {
    apply_overrides(&mut cfg, a.steps, a.seed);
    cfg.validate()?;
    let (corpus, val) = corpora(&a.data, a.val.as_deref())?;
    let (net, mut store) = DeblurNet::init::<f32>(&cfg.deblur()?, cfg.train.seed)?;
    let run = RunDir::create(&a.out, &cfg.to_text())?;
    let report = train::train_deblur(&net, &mut store, &corpus, &val, &cfg.pretrain(), Some(&run))?;
    print_report(&report, &run);
    Ok(())
}

fn train_reblur(mut cfg: RunConfig, a: TrainArgs) -> Outcome {
    apply_overrides(&mut cfg, a.steps, a.seed);
    cfg.validate()?;
    let (corpus, val) = corpora(&a.data, a.val.as_deref())?;
    let (net, mut store) =
        aspdc_core::reblur::ReblurNet::init::<f32>(&cfg.reblur(), cfg.train.seed)?;
    let run = RunDir::create(&a.out, &cfg.to_text())?;
    let report = train::train_reblur(&net, &mut store, &corpus, &val, &cfg.pretrain(), Some(&run))?;
    print_report(&report, &run);
    let baseline = train::copy_sharp_mse(&val)?;
    let achieved = train::eval_reblur(&net, &store, &val)?.mse;
    let deviation = train::anti_collapse_deviation(&net, &store, &val)?;
    println!("reblur MSE {achieved:.6} vs copy-sharp baseline {baseline:.6}");
    println!(
        "anti-collapse deviation {deviation:.4} (floor {})",
        cfg.train.collapse_floor
    );
    if deviation <= cfg.train.collapse_floor {
        return Err(Failure::Check(format!(
            "reblurring network collapsed: deviation {deviation:.4} <= floor {}",
            cfg.train.collapse_floor
        )));
    }
    Ok(())
}

fn finetune(mut cfg: RunConfig, a: FinetuneArgs) -> Outcome {
    apply_overrides(&mut cfg, a.steps, None);
    if let Some(l) = a.lambda {
        cfg.train.lambda = l;
    }
    if a.train_reblur {
        cfg.train.freeze_reblur = false;
    }
    cfg.validate()?;
    let (corpus, val) = corpora(&a.data, a.val.as_deref())?;
    let (dnet, mut dstore) = load_deblur(&Checkpoint::load(&a.deblur)?)?;
    let (rnet, mut rstore) = load_reblur(&Checkpoint::load(&a.reblur)?)?;
    let before = train::consistency_mse(&dnet, &dstore, &rnet, &rstore, &corpus)?;
    let run = RunDir::create(&a.out, &cfg.to_text())?;
    let report = train::finetune_consistency(
        &dnet,
        &mut dstore,
        &rnet,
        &mut rstore,
        &corpus,
        &val,
        &cfg.consistency(),
        &cfg.finetune(),
        Some(&run),
    )?;
    let after = train::consistency_mse(&dnet, &dstore, &rnet, &rstore, &corpus)?;
    print_report(&report.train, &run);
    println!(
        "lambda {}: reblur-consistency MSE {before:.6} -> {after:.6}",
        cfg.train.lambda
    );
    Ok(())
}

fn deblur_model(
    cfg: &RunConfig,
    ckpt: &str,
) -> Result<(DeblurNet, aspdc_core::ParamStore), Failure> {
    if ckpt == "zeroinit" {
        Ok(DeblurNet::init::<f32>(&cfg.deblur()?, cfg.train.seed)?)
    } else {
        Ok(load_deblur(&Checkpoint::load(ckpt)?)?)
    }
}

/// Deblur one image of any size: mirror-pad to the alignment, run, crop.
fn deblur_image(
    net: &DeblurNet,
    store: &aspdc_core::ParamStore,
    img: &Image,
) -> Result<(Image, Option<aspdc_core::Tensor>), Failure> {
    let padded = img.reflect_pad(DEBLUR_ALIGN);
    let (out, attn) = net.infer(store, &padded.to_tensor())?;
    let out = Image::from_tensor(&out, 0)?.crop(0, 0, img.height(), img.width())?;
    Ok((out, attn))
}

fn deblur(cfg: &RunConfig, a: DeblurArgs) -> Outcome {
    let (net, store) = deblur_model(cfg, &a.ckpt)?;
    let many = a.inputs.len() > 1;
    if many {
        std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
    }
    for input in &a.inputs {
        let img = Image::read_png(input)?;
        let (out, _) = deblur_image(&net, &store, &img)?;
        let dest = if many {
            a.out.join(input.file_name().unwrap_or_default())
        } else {
            a.out.clone()
        };
        out.write_png(&dest)?;
        println!("{} -> {}", input.display(), dest.display());
    }
    Ok(())
}

fn reblur(a: ReblurArgs) -> Outcome {
    let (net, store) = load_reblur(&Checkpoint::load(&a.ckpt)?)?;
    let sharp = Image::read_png(&a.sharp)?;
    let blurred = Image::read_png(&a.blurred)?;
    sharp.check_same_dims(&blurred, "reblur")?;
    let (s, b) = (
        sharp.reflect_pad(REBLUR_ALIGN),
        blurred.reflect_pad(REBLUR_ALIGN),
    );
    let out = net.infer(&store, &s.to_tensor(), &b.to_tensor())?;
    Image::from_tensor(&out, 0)?
        .crop(0, 0, sharp.height(), sharp.width())?
        .write_png(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn png_list(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn eval(a: EvalArgs) -> Outcome {
    let (pred, refs) = (png_list(&a.pred)?, png_list(&a.reference)?);
    if pred.len() != refs.len() || pred.is_empty() {
        return Err(Failure::Usage(format!(
            "{} predictions vs {} references",
            pred.len(),
            refs.len()
        )));
    }
    let mut report = MetricReport::default();
    for (p, r) in pred.iter().zip(&refs) {
        let name = p
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        report.push(MetricRow::measure(
            name,
            &Image::read_png(p)?,
            &Image::read_png(r)?,
        )?);
    }
    match a.out {
        Some(path) => {
            report.write_csv(&path)?;
            let m = report.aggregate();
            println!(
                "{} images: PSNR {} SSIM {:.4} diff mean {:.3} var {:.3}",
                report.rows.len(),
                m.psnr,
                m.ssim,
                m.diff_mean,
                m.diff_var
            );
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let reports = run_suite(&GradCheck::default(), &seeds, |r| println!("{r}"))?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", reports.len(), failed);
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn dump_attn(cfg: &RunConfig, a: DumpAttnArgs) -> Outcome {
    let (net, store) = deblur_model(cfg, &a.ckpt)?;
    let img = Image::read_png(&a.input)?;
    let (_, attn) = deblur_image(&net, &store, &img)?;
    let attn =
        attn.ok_or_else(|| Failure::Usage("the last ASPDC module has no attention fusion".into()))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    // Attention lives at a quarter of the padded resolution.
    let s = attn.shape();
    for c in 0..s.c {
        let path = a.out.join(format!("a_{}.png", c + 1));
        write_gray_png(&path, s.h, s.w, attn.plane(0, c))?;
        println!("{}", path.display());
    }
    Ok(())
}
