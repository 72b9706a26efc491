use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use usseg::checkpoint::Checkpoint;
use usseg::config::RunConfig;
use usseg::crf::{meanfield, CrfParams};
use usseg::eval::{cross_validate, make_folds, CnnModel, Confusion, CvOptions};
use usseg::net::predict_volume;
use usseg::optim::{select_subset, train, write_loss_log, CyclicLr, Initial, TrainingCase};
use usseg::seed::{derive_seed, stream, tag};
use usseg::tensor::Activation;
use usseg::ussim::{generate_pretrain_set, make_phantom, TARGET_FRACTIONS};
use usseg::volume::{
    compute_mask, read_labelmap, read_volume, resample_isotropic, standardize, write_labelmap, write_volume, FileFormat,
    Interpolation,
};
use usseg::{Label, ProbabilityMap};

use crate::dataset;

#[derive(Parser, Debug)]
#[command(name = "usseg", version, about = "3D ultrasound brain tissue segmentation")]
pub struct Cli {
    /// Run every parallel section on a single thread.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a volume between NRRD and raw + JSON sidecar.
    Convert(ConvertArgs),
    /// Resample to isotropic spacing, compute the mask and standardize.
    Preprocess(PreprocessArgs),
    /// Generate a procedural brain-like phantom labelmap.
    Phantom(PhantomArgs),
    /// Simulate ultrasound sweeps from labelmaps.
    Simulate(SimulateArgs),
    /// Train a network on a case directory.
    Train(TrainArgs),
    /// Predict probability and label maps for a volume.
    Infer(InferArgs),
    /// Refine a probability map with the dense CRF.
    Crf(CrfArgs),
    /// Dice, sensitivity and specificity of one prediction.
    Eval(EvalArgs),
    /// Cross-validate on a case directory.
    Crossval(CrossvalArgs),
    /// Emit the cyclic learning-rate schedule as CSV.
    LrPlot(LrPlotArgs),
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// `nrrd` or `raw-json`; inferred from the output extension when absent.
    #[arg(long)]
    format: Option<FileFormat>,
    /// Treat the data as a labelmap and keep it as unsigned bytes.
    #[arg(long)]
    labels: bool,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write the information mask as a 0/1 labelmap.
    #[arg(long)]
    mask_output: Option<PathBuf>,
    /// Target isotropic spacing in mm.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    output: PathBuf,
    /// Grid size as `X,Y,Z`.
    #[arg(long, value_parser = parse_dims, default_value = "96,96,96")]
    dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [x, y, z] = parts[..] else {
        return Err(format!("expected X,Y,Z, got `{s}`"));
    };
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok([n(x)?, n(y)?, n(z)?])
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Source labelmaps.
    #[arg(long, num_args = 1.., required = true)]
    labels: Vec<PathBuf>,
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    per_case: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run config whose `[simulation]` table overrides the acoustics.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.activation {
            cfg.activation = v;
        }
        cfg.validate()?;
        cfg.validate_paths()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Case directory; defaults to `paths.data_dir` of the config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Defaults to `paths.output_dir` of the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Fine-tune from this checkpoint (fresh optimizer, schedule restarted).
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue this checkpoint's run up to `iterations`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Treat the cases as synthetic pretraining data and keep only `synthetic_fraction` of them.
    #[arg(long)]
    pretrain: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Information mask (non-zero = inside); computed from intensities when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Probability map output (raw + JSON sidecar).
    #[arg(long)]
    prob_output: PathBuf,
    #[arg(long)]
    labels_output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CrfFlags {
    #[arg(long)]
    w_spatial: Option<f64>,
    #[arg(long)]
    theta_gamma: Option<f64>,
    #[arg(long)]
    w_bilateral: Option<f64>,
    #[arg(long)]
    theta_alpha: Option<f64>,
    #[arg(long)]
    theta_beta: Option<f64>,
    #[arg(long)]
    crf_iterations: Option<usize>,
}

impl CrfFlags {
    fn apply(&self, mut p: CrfParams) -> Result<CrfParams> {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.w_spatial, self.w_spatial);
        set(&mut p.theta_gamma, self.theta_gamma);
        set(&mut p.w_bilateral, self.w_bilateral);
        set(&mut p.theta_alpha, self.theta_alpha);
        set(&mut p.theta_beta, self.theta_beta);
        if let Some(n) = self.crf_iterations {
            p.iterations = n;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Debug)]
pub struct CrfArgs {
    #[arg(long)]
    prob: PathBuf,
    /// The volume the probabilities were predicted from.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    labels_output: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: CrfFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Restrict metrics to the non-zero voxels of this labelmap.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CrossvalArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Seed for the fold assignment; reuse it across experiment arms.
    #[arg(long, default_value_t = 0)]
    fold_seed: u64,
    /// Fine-tune every fold from this pretrained checkpoint.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Refine predictions with the CRF (parameters from the config `[crf]` table and flags).
    #[arg(long)]
    crf: bool,
    #[command(flatten)]
    crf_flags: CrfFlags,
    /// Score every voxel instead of only the information mask.
    #[arg(long)]
    no_mask: bool,
}

#[derive(Args, Debug)]
pub struct LrPlotArgs {
    #[arg(long, default_value_t = 1e-3)]
    base: f64,
    #[arg(long, default_value_t = 8e-3)]
    max: f64,
    #[arg(long, default_value_t = 1600)]
    step: u64,
    /// Last iteration to emit (inclusive).
    #[arg(long, default_value_t = 3200)]
    iters: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert(a) => convert(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Phantom(a) => phantom(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Crf(a) => crf(a),
        Command::Eval(a) => eval(a),
        Command::Crossval(a) => crossval(a),
        Command::LrPlot(a) => lr_plot(a),
    }
}

fn output_format(path: &Path, explicit: Option<FileFormat>) -> Result<FileFormat> {
    Ok(match explicit {
        Some(f) => f,
        None => FileFormat::from_path(path)?,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let format = output_format(&a.output, a.format)?;
    ensure_parent(&a.output)?;
    if a.labels {
        write_labelmap(&read_labelmap(&a.input)?, &a.output, format)?;
    } else {
        write_volume(&read_volume(&a.input)?, &a.output, format)?;
    }
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let format = output_format(&a.output, None)?;
    let raw = read_volume(&a.input)?;
    let iso = resample_isotropic(&raw, a.spacing, Interpolation::Trilinear)?;
    let mask = compute_mask(&iso);
    let std = standardize(&iso, &mask)?;
    ensure_parent(&a.output)?;
    write_volume(&std, &a.output, format)?;
    if let Some(m) = a.mask_output {
        ensure_parent(&m)?;
        write_labelmap(&dataset::mask_to_labelmap(&mask, &std)?, &m, FileFormat::from_path(&m)?)?;
    }
    Ok(())
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let lm = make_phantom(&mut stream(a.seed, &[tag::PHANTOM]), a.dims, TARGET_FRACTIONS)?;
    ensure_parent(&a.output)?;
    write_labelmap(&lm, &a.output, FileFormat::from_path(&a.output)?)?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let params = match &a.config {
        Some(p) => RunConfig::load(p)?.simulation,
        None => Default::default(),
    };
    let labelmaps = a.labels.iter().map(read_labelmap).collect::<usseg::Result<Vec<_>>>()?;
    let pairs = generate_pretrain_set(&labelmaps, a.per_case, &params, &mut stream(a.seed, &[tag::ACOUSTICS]))?;
    fs::create_dir_all(&a.output_dir).with_context(|| format!("creating {}", a.output_dir.display()))?;
    for (k, (vol, lm)) in pairs.iter().enumerate() {
        let src = &a.labels[k / a.per_case];
        let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("case");
        let (img, lab) = dataset::case_paths(&a.output_dir, &format!("{stem}_s{}", k % a.per_case), "nrrd");
        write_volume(vol, img, FileFormat::Nrrd)?;
        write_labelmap(lm, lab, FileFormat::Nrrd)?;
    }
    Ok(())
}

fn required_dir(flag: Option<PathBuf>, from_config: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    match flag.or_else(|| from_config.cloned()) {
        Some(p) => Ok(p),
        None => bail!(usseg::Error::Config(format!(
            "no {what}: pass --{} or set paths.{} in the config",
            what.replace('_', "-"),
            what
        ))),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let data_dir = required_dir(a.data_dir, cfg.paths.data_dir.as_ref(), "data_dir")?;
    let out_dir = required_dir(a.output_dir, cfg.paths.output_dir.as_ref(), "output_dir")?;
    let tcfg = cfg.train_config();
    let initial = match (&a.init, &a.resume) {
        (Some(p), _) => Initial::FineTune(Checkpoint::load_for(p, &tcfg.net)?.net),
        (None, Some(p)) => Initial::Resume(Checkpoint::load_for(p, &tcfg.net)?),
        (None, None) => Initial::Fresh,
    };
    let mut cases = dataset::load_cases(&data_dir)?;
    if a.pretrain {
        let keep = select_subset(cases.len(), cfg.synthetic_fraction, cfg.seed)?;
        cases = keep.into_iter().map(|i| cases[i].clone()).collect();
    }
    let data = cases
        .into_iter()
        .map(|c| TrainingCase::new(c.volume, c.labels, c.mask).with_context(|| format!("case {}", c.id)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    let outcome = train(&tcfg, &data, initial, Some(&out_dir.join("checkpoints")), |r| {
        if r.iter % 100 == 0 {
            eprintln!("iter {} lr {} loss {:.5}", r.iter, r.lr, r.loss);
        }
    })?;
    write_loss_log(out_dir.join("loss.csv"), &outcome.log)?;
    outcome.checkpoint.save(out_dir.join("final"))?;
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let raw = read_volume(&a.input)?;
    let (vol, mask) = dataset::prepare(&raw, a.mask.as_deref())?;
    let pm = predict_volume(&ck.net, &vol, &mask)?;
    ensure_parent(&a.prob_output)?;
    pm.write(&a.prob_output)?;
    if let Some(p) = a.labels_output {
        ensure_parent(&p)?;
        write_labelmap(&pm.argmax_labels(), &p, FileFormat::from_path(&p)?)?;
    }
    Ok(())
}

fn crf(a: CrfArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?.crf,
        None => CrfParams::default(),
    };
    let params = a.flags.apply(base)?;
    let pm = ProbabilityMap::read(&a.prob)?;
    let raw = read_volume(&a.input)?;
    let (vol, _) = dataset::prepare(&raw, a.mask.as_deref())?;
    let out = meanfield(&pm, &vol, &params)?;
    ensure_parent(&a.output)?;
    out.write(&a.output)?;
    if let Some(p) = a.labels_output {
        ensure_parent(&p)?;
        write_labelmap(&out.argmax_labels(), &p, FileFormat::from_path(&p)?)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = read_labelmap(&a.pred)?;
    let reference = read_labelmap(&a.reference)?;
    let mask = a.mask.as_deref().map(dataset::read_mask).transpose()?;
    let mut out = String::from("class,dice,sensitivity,specificity\n");
    for l in Label::ALL {
        let c = Confusion::count(&pred, &reference, l, mask.as_ref())?;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            l.short_name(),
            c.dice(),
            c.sensitivity(),
            c.specificity()
        ));
    }
    emit(a.output.as_deref(), &out)
}

fn crossval(a: CrossvalArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let data_dir = required_dir(a.data_dir, cfg.paths.data_dir.as_ref(), "data_dir")?;
    let tcfg = cfg.train_config();
    let pretrained = a
        .pretrained
        .as_ref()
        .map(|p| Checkpoint::load_for(p, &tcfg.net).map(|c| c.net))
        .transpose()?;
    let crf = if a.crf { Some(a.crf_flags.apply(cfg.crf)?) } else { None };
    let cases = dataset::load_cases(&data_dir)?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let plan = make_folds(&ids, a.folds, a.fold_seed)?;
    let mut model = CnnModel::new(
        usseg::optim::TrainConfig {
            seed: derive_seed(cfg.seed, &[]),
            ..tcfg
        },
        pretrained,
        crf,
    );
    let table = cross_validate(&cases, &plan, &mut model, CvOptions { use_mask: !a.no_mask })?;
    ensure_parent(&a.output)?;
    table.write_csv(&a.output)?;
    Ok(())
}

fn lr_plot(a: LrPlotArgs) -> Result<()> {
    let sched = CyclicLr::new(a.base, a.max, a.step)?;
    let mut out = String::from("iter,lr\n");
    for it in 0..=a.iters {
        out.push_str(&format!("{it},{}\n", sched.at(it)));
    }
    emit(a.output.as_deref(), &out)
}
