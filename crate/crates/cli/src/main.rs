//! Command-line front end: every core operation over TNSR files and JSON.

mod inputs;
mod json;
mod ops;
mod run;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geostyle_core::contentloss::{project_layer, self_correlation};
use geostyle_core::diffusion::{
    build_schedule, ddim_invert, denoised_estimate, guided_step, q_sample, sample_loop, BetaSpec, Denominator, Guide,
    InvertOptions, NoisePredictor, ScheduleConfig, SigmaMode,
};
use geostyle_core::geodesic::{augment, curve_point_flagged, generate_weight_sets, surface_point};
use geostyle_core::grad::{self, FdOptions, LossConfig, LossId};
use geostyle_core::metrics::{self, Peak};
use geostyle_core::preshape::{geodesic_distance, project, reshape_to_landmarks};
use geostyle_core::swc::{self, CropMode};
use geostyle_core::{AugmentConfig, DType, Error, Result, Tensor, WeightScheme, WeightSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use inputs::{io_err, json_or_default, load, read_json, save, InputArgs};
use run::{PredictorConfig, Run};

#[derive(Parser, Debug)]
#[command(name = "geostyle", version, about = "Pre-shape geometry, patch losses and guided diffusion over TNSR tensors")]
struct Cli {
    /// Worker threads (also GEOSTYLE_THREADS).
    #[arg(long, global = true, env = "GEOSTYLE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Print shape, dtype and summary statistics of a tensor.
    Inspect {
        file: PathBuf,
        /// Include all values.
        #[arg(long)]
        values: bool,
    },
    /// Convert between TNSR and JSON (`{"shape": [...], "data": [...]}`), or change dtype.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum)]
        dtype: Option<DTypeArg>,
    },
    /// Split-half landmark rows of a tensor.
    Landmarks { file: PathBuf },
    /// Project a tensor into the pre-shape space.
    Project {
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Geodesic distance between the projections of two tensors.
    Gdist { a: PathBuf, b: PathBuf },
    /// Point at arc length `s` on the geodesic from `a` towards `b`.
    Curve {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        s: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted geodesic surface point of several tensors.
    Surface {
        #[arg(long = "tau", required = true)]
        taus: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        weights: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the weight sets used for augmentation.
    Weights {
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        aug: AugArgs,
    },
    /// Augmented pre-shapes of a set of tensors.
    Augment {
        #[arg(long = "tau", required = true)]
        taus: Vec<PathBuf>,
        #[command(flatten)]
        aug: AugArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Sliding-window crop plan.
    SwcPlan {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 49)]
        n: usize,
        #[arg(long, default_value_t = CropMode::FullCoverage)]
        mode: CropMode,
    },
    /// Crop an image into sliding-window patches.
    SwcExtract {
        image: PathBuf,
        #[arg(long, default_value_t = 49)]
        n: usize,
        #[arg(long, default_value_t = CropMode::FullCoverage)]
        mode: CropMode,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cosine self-correlation map of one position of a layer feature.
    Selfcorr {
        file: PathBuf,
        #[arg(long)]
        u: usize,
        #[arg(long)]
        v: usize,
        /// Skip the pre-shape projection of the layer.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a loss.
    Loss {
        #[command(subcommand)]
        which: LossCmd,
    },
    /// Loss value and gradients with respect to every input.
    Grad {
        #[arg(long)]
        loss: LossId,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        cfg: LossConfigArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        loss: LossId,
        /// Fixture seed when no inputs are given; also seeds coordinate sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        cfg: LossConfigArg,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Noise schedule over the respaced steps.
    Schedule {
        #[command(flatten)]
        sched: SchedArgs,
    },
    /// Forward-noise a clean tensor to base timestep `t`.
    QSample {
        x0: PathBuf,
        #[arg(long)]
        t: usize,
        /// Noise tensor; drawn from N(0, I) with `--seed` when absent.
        #[arg(long)]
        eps: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        sched: SchedArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Toy Gaussian noise prediction at respaced step `k`.
    ToyPredict {
        x: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        pred: PredArgs,
        #[command(flatten)]
        sched: SchedArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoised estimate at respaced step `k` with the toy predictor.
    Denoise {
        x: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        pred: PredArgs,
        #[command(flatten)]
        sched: SchedArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic inversion of a clean tensor to respaced step `k_stop`.
    Invert {
        x0: PathBuf,
        #[arg(long)]
        k_stop: usize,
        #[command(flatten)]
        pred: PredArgs,
        #[command(flatten)]
        sched: SchedArgs,
        #[arg(long, default_value_t = InvertOptions::default().max_iters)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One guided reverse step `k -> k-1` using a run config.
    Step {
        x: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full guided run: invert to t0, then guided steps to 0.
    Guide {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image metrics.
    Metrics {
        #[command(subcommand)]
        which: MetricsCmd,
    },
    /// Print the operation-to-subcommand table.
    Ops,
}

#[derive(Subcommand, Debug)]
enum LossCmd {
    Pc(LossArgs),
    Pd(LossArgs),
    Style(LossArgs),
    Psc(LossArgs),
    Mse(LossArgs),
    /// Layer-wise feature MSE.
    Vgg(LossArgs),
    /// Patch contrastive loss.
    Zecon(LossArgs),
    Content(LossArgs),
    Total(LossArgs),
}

#[derive(Args, Debug)]
struct LossArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[command(flatten)]
    cfg: LossConfigArg,
}

#[derive(Args, Debug)]
struct LossConfigArg {
    /// JSON loss config (`weights`, `augment`, `temperature`).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl LossConfigArg {
    fn load(&self) -> Result<LossConfig> {
        json_or_default(self.config.as_deref())
    }
}

#[derive(Subcommand, Debug)]
enum MetricsCmd {
    Psnr(PairArgs),
    Ssim(PairArgs),
    /// Cosine between a whole-image embedding and a text embedding.
    ClipI {
        image: PathBuf,
        #[arg(long)]
        text: PathBuf,
    },
    /// Mean cosine between patch embeddings and a text embedding.
    ClipP {
        #[arg(long)]
        text: PathBuf,
        #[arg(long = "patch")]
        patches: Vec<PathBuf>,
        /// Directory of patch embeddings (`*.tnsr`, numeric-suffix order).
        #[arg(long, required_unless_present = "patches")]
        patch_dir: Option<PathBuf>,
    },
    /// Non-overlapping (by default) tiles for patch-level scoring.
    Tiles {
        image: PathBuf,
        #[arg(long, default_value_t = metrics::CLIP_TILE)]
        side: usize,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct PairArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = PeakArg::EightBit)]
    peak: PeakArg,
    /// Explicit peak value, overriding `--peak`.
    #[arg(long)]
    peak_value: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PeakArg {
    EightBit,
    Unit,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Emphasis,
    Dirichlet,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SigmaArg {
    Ddim,
    Ddpm,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DenomArg {
    Standard,
    Eq3Literal,
}

#[derive(Args, Debug)]
struct AugArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, value_enum, default_value_t = SchemeArg::Emphasis)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AugArgs {
    fn config(&self) -> AugmentConfig {
        AugmentConfig {
            m: self.m,
            gamma: self.gamma,
            scheme: match self.scheme {
                SchemeArg::Emphasis => WeightScheme::Emphasis,
                SchemeArg::Dirichlet => WeightScheme::Dirichlet { seed: self.seed },
            },
        }
    }
}

#[derive(Args, Debug)]
struct SchedArgs {
    /// Base steps T.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Respaced steps T'.
    #[arg(long, default_value_t = 50)]
    respaced: usize,
    #[arg(long, default_value_t = 25)]
    t0: usize,
    #[arg(long, value_enum, default_value_t = SigmaArg::Ddim)]
    sigma: SigmaArg,
    #[arg(long, value_enum, default_value_t = DenomArg::Standard)]
    denominator: DenomArg,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    beta_end: f64,
}

impl SchedArgs {
    fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps,
            beta: BetaSpec::Linear {
                start: self.beta_start,
                end: self.beta_end,
            },
            respaced: self.respaced,
            t0: self.t0,
            sigma: match self.sigma {
                SigmaArg::Ddim => SigmaMode::Ddim,
                SigmaArg::Ddpm => SigmaMode::Ddpm,
            },
            denominator: match self.denominator {
                DenomArg::Standard => Denominator::Standard,
                DenomArg::Eq3Literal => Denominator::Eq3Literal,
            },
        }
    }
}

#[derive(Args, Debug)]
struct PredArgs {
    /// Mean tensor of the toy data distribution.
    #[arg(long)]
    mean: Option<PathBuf>,
    /// Constant mean used when `--mean` is absent.
    #[arg(long, default_value_t = 0.5)]
    mean_value: f64,
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
}

impl PredArgs {
    fn config(&self) -> PredictorConfig {
        PredictorConfig {
            mean: self.mean.clone(),
            mean_value: self.mean_value,
            scale: self.scale,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    dtype: Option<DType>,
}

fn print<T: Serialize + ?Sized>(v: &T) {
    let _ = writeln!(std::io::stdout().lock(), "{}", json::to_string(v));
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "json")
}

fn load_any(p: &Path) -> Result<Tensor> {
    if is_json(p) {
        let jt: JsonTensor = read_json(p)?;
        let t = Tensor::new(jt.shape, jt.data)?;
        Ok(match jt.dtype {
            Some(d) => t.with_dtype(d),
            None => t,
        })
    } else {
        load(p)
    }
}

fn load_list(paths: &[PathBuf]) -> Result<Vec<Tensor>> {
    paths.iter().map(|p| load(p)).collect()
}

fn load_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tnsr"))
        .collect();
    // numeric suffix order: patch.2 before patch.10
    paths.sort_by_key(|p| {
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        let idx = stem.rsplit('.').next().and_then(|s| s.parse::<usize>().ok());
        (idx, stem)
    });
    load_list(&paths)
}

fn projected_all(paths: &[PathBuf]) -> Result<Vec<geostyle_core::PreShape>> {
    paths.iter().map(|p| project(&load(p)?)).collect()
}

fn summary(t: &Tensor) -> serde_json::Value {
    let d = t.data();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    json!({
        "shape": t.shape(),
        "dtype": t.dtype(),
        "len": t.len(),
        "min": min,
        "max": max,
        "mean": d.iter().sum::<f64>() / d.len() as f64,
        "norm": t.norm(),
    })
}

fn loss_id(which: &LossCmd) -> (LossId, &LossArgs) {
    match which {
        LossCmd::Pc(a) => (LossId::Pc, a),
        LossCmd::Pd(a) => (LossId::Pd, a),
        LossCmd::Style(a) => (LossId::Style, a),
        LossCmd::Psc(a) => (LossId::Psc, a),
        LossCmd::Mse(a) => (LossId::Mse, a),
        LossCmd::Vgg(a) => (LossId::FeatureMse, a),
        LossCmd::Zecon(a) => (LossId::PatchContrastive, a),
        LossCmd::Content(a) => (LossId::Content, a),
        LossCmd::Total(a) => (LossId::Total, a),
    }
}

fn peak_of(a: &PairArgs) -> f64 {
    a.peak_value.unwrap_or(match a.peak {
        PeakArg::EightBit => Peak::EightBit.value(),
        PeakArg::Unit => Peak::Unit.value(),
    })
}

fn toy_setup(x: &Path, pred: &PredArgs, sched: &SchedArgs) -> Result<(Tensor, geostyle_core::ToyPredictor, geostyle_core::Schedule)> {
    let x = load(x)?;
    let p = pred.config().build(&x, Path::new(""))?;
    let s = build_schedule(&sched.config())?;
    Ok((x, p, s))
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Inspect { file, values } => {
            let t = load(&file)?;
            let mut v = summary(&t);
            if values {
                v["data"] = json!(t.data());
            }
            print(&v);
        }
        Cmd::Convert { input, output, dtype } => {
            let mut t = load_any(&input)?;
            if let Some(d) = dtype {
                t = t.with_dtype(match d {
                    DTypeArg::F32 => DType::F32,
                    DTypeArg::F64 => DType::F64,
                });
            }
            if is_json(&output) {
                let jt = JsonTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                    dtype: Some(t.dtype()),
                };
                fs::write(&output, json::to_string(&jt) + "\n").map_err(|e| io_err(&output, e))?;
                print(&json!({ "output": output, "shape": t.shape() }));
            } else {
                save(&output, &t)?;
                let bytes = fs::metadata(&output).map_err(|e| io_err(&output, e))?.len();
                print(&json!({ "output": output, "shape": t.shape(), "bytes": bytes }));
            }
        }
        Cmd::Landmarks { file } => {
            let l = reshape_to_landmarks(&load(&file)?)?;
            print(&json!({ "k": l.x.len(), "x": l.x, "y": l.y }));
        }
        Cmd::Project { file, out } => {
            let t = load(&file)?;
            let p = project(&t)?;
            if let Some(out) = &out {
                save(out, &p.to_tensor_shaped(t.shape())?)?;
            }
            print(&json!({ "k": p.k(), "norm": p.norm(), "max_row_mean": p.max_row_mean() }));
        }
        Cmd::Gdist { a, b } => {
            let d = geodesic_distance(&project(&load(&a)?)?, &project(&load(&b)?)?)?;
            print(&json!({ "distance": d }));
        }
        Cmd::Curve { a, b, s, out } => {
            let ta = load(&a)?;
            let (pa, pb) = (project(&ta)?, project(&load(&b)?)?);
            let c = curve_point_flagged(&pa, &pb, s)?;
            if let Some(out) = &out {
                save(out, &c.point.to_tensor_shaped(ta.shape())?)?;
            }
            print(&json!({
                "distance": geodesic_distance(&pa, &pb)?,
                "s": s,
                "overshoot": c.overshoot,
                "distance_from_a": geodesic_distance(&pa, &c.point)?,
            }));
        }
        Cmd::Surface { taus, weights, out } => {
            let shape = load(&taus[0])?.shape().to_vec();
            let p = surface_point(&projected_all(&taus)?, &WeightSet::new(weights)?)?;
            if let Some(out) = &out {
                save(out, &p.to_tensor_shaped(&shape)?)?;
            }
            print(&json!({ "k": p.k(), "norm": p.norm() }));
        }
        Cmd::Weights { n, aug } => {
            let sets = generate_weight_sets(n, &aug.config())?;
            print(&sets);
        }
        Cmd::Augment { taus, aug, out_dir } => {
            let shape = load(&taus[0])?.shape().to_vec();
            let outs = augment(&projected_all(&taus)?, &aug.config())?;
            if let Some(dir) = &out_dir {
                for (i, p) in outs.iter().enumerate() {
                    save(&dir.join(format!("aug.{i}.tnsr")), &p.to_tensor_shaped(&shape)?)?;
                }
            }
            print(&json!({ "m": outs.len(), "k": outs[0].k() }));
        }
        Cmd::SwcPlan { height, width, n, mode } => {
            print(&swc::plan(height, width, n, mode)?);
        }
        Cmd::SwcExtract { image, n, mode, out_dir } => {
            let img = load(&image)?;
            let (_, h, w) = img.chw()?;
            let plan = swc::plan(h, w, n, mode)?;
            let patches = swc::extract(&img, &plan)?;
            for (i, p) in patches.iter().enumerate() {
                save(&out_dir.join(format!("patch.{i}.tnsr")), p)?;
            }
            print(&json!({ "n": patches.len(), "side": plan.side, "stride": plan.stride }));
        }
        Cmd::Selfcorr { file, u, v, raw, out } => {
            let t = load(&file)?;
            let z = if raw { t } else { project_layer(&t)? };
            let c = self_correlation(&z, u, v)?;
            if let Some(out) = &out {
                save(out, &c)?;
            }
            print(&json!({ "shape": c.shape(), "values": c.data() }));
        }
        Cmd::Loss { which } => {
            let (id, args) = loss_id(&which);
            let set = args.inputs.load(id)?;
            let cfg = args.cfg.load()?;
            let value = grad::evaluate(id, &set, &cfg)?;
            print(&json!({ "loss": id, "value": value }));
        }
        Cmd::Grad { loss, inputs, cfg, out_dir } => {
            let set = inputs.load(loss)?;
            let r = grad::grad_eval(loss, &set, &cfg.load()?)?;
            let mut norms = serde_json::Map::new();
            for (name, g) in r.grads.iter() {
                if let Some(dir) = &out_dir {
                    save(&dir.join(format!("{name}.tnsr")), g)?;
                }
                norms.insert(name.to_string(), json!(g.norm()));
            }
            print(&json!({ "loss": loss, "value": r.value, "clamped": r.clamped, "grad_norms": norms }));
        }
        Cmd::Gradcheck { loss, seed, inputs, cfg, h, coords } => {
            let set = if inputs.is_empty() {
                grad::random_inputs(loss, seed)
            } else {
                inputs.load(loss)?
            };
            let opts = FdOptions {
                step: h,
                coords_per_input: coords,
                seed,
                ..Default::default()
            };
            print(&grad::fd_check(loss, &set, &cfg.load()?, &opts)?);
        }
        Cmd::Schedule { sched } => {
            let s = build_schedule(&sched.config())?;
            let mut steps = Vec::with_capacity(s.len());
            for k in 1..=s.len() {
                let ts = s.timestep(k)?;
                steps.push(json!({
                    "k": k,
                    "t": ts.t,
                    "beta": s.betas[ts.t - 1],
                    "alpha_bar": ts.alpha_bar,
                    "sigma": s.sigma(k)?,
                }));
            }
            print(&json!({ "T": s.base_steps(), "T_prime": s.len(), "t0": s.t0, "steps": steps }));
        }
        Cmd::QSample { x0, t, eps, seed, sched, out } => {
            let x = load(&x0)?;
            let e = match eps {
                Some(p) => load(&p)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let data = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
            };
            let s = build_schedule(&sched.config())?;
            let xt = q_sample(&x, t, &e, &s)?;
            save(&out, &xt)?;
            print(&json!({ "t": t, "alpha_bar": s.alpha_bar(t)?, "norm": xt.norm() }));
        }
        Cmd::ToyPredict { x, k, pred, sched, out } => {
            let (x, p, s) = toy_setup(&x, &pred, &sched)?;
            let ts = s.timestep(k)?;
            let eps = p.predict(&x, ts)?;
            save(&out, &eps)?;
            print(&json!({ "k": k, "t": ts.t, "alpha_bar": ts.alpha_bar, "norm": eps.norm() }));
        }
        Cmd::Denoise { x, k, pred, sched, out } => {
            let (x, p, s) = toy_setup(&x, &pred, &sched)?;
            let (x0, _) = denoised_estimate(&x, k, &p, &s)?;
            save(&out, &x0)?;
            print(&json!({ "k": k, "t": s.timestep(k)?.t, "norm": x0.norm() }));
        }
        Cmd::Invert { x0, k_stop, pred, sched, max_iters, out } => {
            let (x, p, s) = toy_setup(&x0, &pred, &sched)?;
            let opts = InvertOptions {
                max_iters,
                ..Default::default()
            };
            let inv = ddim_invert(&x, &p, &s, k_stop, &opts)?;
            save(&out, &inv.x)?;
            print(&json!({ "k_stop": k_stop, "residual": inv.residual, "norm": inv.x.norm() }));
        }
        Cmd::Step { x, k, config, out } => {
            let run = Run::from_file(&config)?;
            let xt = load(&x)?;
            let guide = Guide {
                objective: &run.objective,
                config: &run.config.guidance,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed);
            let step = guided_step(&xt, k, &run.predictor, &run.schedule, Some(&guide), &mut rng)?;
            save(&out, &step.x)?;
            print(&json!({ "k": k, "loss": step.loss_before, "loss_after": step.loss_after }));
        }
        Cmd::Guide { config, out } => {
            let run = Run::from_file(&config)?;
            let out = out
                .or_else(|| {
                    run.config
                        .output
                        .as_ref()
                        .map(|o| config.parent().unwrap_or(Path::new(".")).join(o))
                })
                .unwrap_or_else(|| PathBuf::from("out"));
            let guide = Guide {
                objective: &run.objective,
                config: &run.config.guidance,
            };
            let res = sample_loop(
                &run.source,
                &run.predictor,
                &run.schedule,
                Some(&guide),
                run.config.seed,
                &run.config.invert,
            )?;
            save(&out.join("stylized.tnsr"), &res.image)?;
            let trace = json!({
                "steps": res.trace.len(),
                "inversion_residual": res.inversion_residual,
                "trace": res.trace,
            });
            let trace_path = out.join("trace.json");
            fs::write(&trace_path, json::to_string(&trace) + "\n").map_err(|e| io_err(&trace_path, e))?;
            print(&json!({
                "output": out,
                "steps": res.trace.len(),
                "first_loss": res.trace.first().and_then(|e| e.loss),
                "last_loss": res.trace.last().and_then(|e| e.loss),
            }));
        }
        Cmd::Metrics { which } => match which {
            MetricsCmd::Psnr(p) => {
                let v = metrics::psnr(&load(&p.a)?, &load(&p.b)?, peak_of(&p))?;
                print(&json!({ "psnr": v }));
            }
            MetricsCmd::Ssim(p) => {
                let v = metrics::ssim(&load(&p.a)?, &load(&p.b)?, peak_of(&p))?;
                print(&json!({ "ssim": v }));
            }
            MetricsCmd::ClipI { image, text } => {
                print(&json!({ "clip_i": metrics::clip_i(&load(&image)?, &load(&text)?)? }));
            }
            MetricsCmd::ClipP { text, patches, patch_dir } => {
                let mut feats = load_list(&patches)?;
                if let Some(d) = &patch_dir {
                    feats.extend(load_dir(d)?);
                }
                print(&json!({ "clip_p": metrics::clip_p(&feats, &load(&text)?)?, "patches": feats.len() }));
            }
            MetricsCmd::Tiles { image, side, stride, out_dir } => {
                let img = load(&image)?;
                let stride = stride.unwrap_or(side);
                let (_, h, w) = img.chw()?;
                let grid = metrics::tile_grid(h, w, side, stride)?;
                if let Some(dir) = &out_dir {
                    for (i, t) in metrics::tiles(&img, side, stride)?.iter().enumerate() {
                        save(&dir.join(format!("tile.{i}.tnsr")), t)?;
                    }
                }
                print(&json!({ "side": side, "stride": stride, "tiles": grid }));
            }
        },
        Cmd::Ops => {
            let table: Vec<_> = ops::OP_TABLE
                .iter()
                .map(|(op, cmd)| json!({ "op": op, "command": cmd }))
                .collect();
            print(&table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json::to_string(&json!({ "error": { "kind": "config", "message": e.to_string() } })));
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err: Error = e;
            eprintln!(
                "{}",
                json::to_string(&json!({ "error": { "kind": err.kind(), "message": err.to_string() } }))
            );
            ExitCode::from(1)
        }
    }
}
