//! Command-line driver: `synth`, `train`, `detect`, `eval`, `sweep`, `bench`.
//!
//! Every knob lives in a [`RunConfig`] built from defaults, an optional
//! `key = value` file and `--set key=value` overrides, in that order. The
//! fully resolved configuration is echoed to stderr as `# key = value`
//! lines so any run can be replayed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::data::{
    load_image, load_split, negative_windows, positive_windows, synth_generate, Jitter, SynthConfig, SynthImage,
};
use crate::detector::{detect, DetectConfig, DetectorModel, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    curve_to_text, curves_svg, dataset_size_sweep, evaluate_images, tpr_at_fp, tpr_at_fppi, tsv, MatchMode,
};
use crate::features::PyramidConfig;
use crate::regressor::{
    refine_detection, regressor_from_str, regressor_samples, regressor_to_string, train_regressor, RegressorConfig,
    RegressorLoss, RegressorModel,
};
use crate::trainer::{load_model, save_model, train, train_with_bootstrap, TrainConfig};

/// Every configuration key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // synthetic corpus
    ("num_pos", "500"),
    ("num_neg", "100"),
    ("image_size", "128"),
    ("pose_count", "2"),
    ("face_major_min", "30"),
    ("face_major_max", "42"),
    ("max_rotation", "0.25"),
    ("test_fraction", "0.2"),
    ("clutter", "6"),
    ("occluder_rate", "0"),
    ("occluder_size", "0.35"),
    // model
    ("filters", "8,8"),
    ("kernels", "5,5"),
    ("lcn_after", "0"),
    ("block_n", "2"),
    ("lambda", "1"),
    ("loss", "grid"),
    ("dropout", "0.1"),
    ("deep_supervision", "true"),
    // training
    ("lr", "0.01"),
    ("momentum", "0.9"),
    ("epochs", "10"),
    ("batch_size", "64"),
    ("bootstrap_rounds", "3"),
    ("negatives_per_round", "10000"),
    ("val_fraction", "0.2"),
    ("mirror", "true"),
    ("mining_threshold", "0"),
    ("neg_windows_per_image", "20"),
    // detection
    ("scales_per_octave", "2"),
    ("min_size", "20"),
    ("score_threshold", "0"),
    ("nms_threshold", "0.3"),
    ("stride", "1"),
    // evaluation
    ("fppi", "0.1"),
    ("fp_counts", "0,1,2,5,10,20,50"),
    ("match_mode", "discrete"),
    // regressor
    ("reg_epochs", "20"),
    ("reg_lr", "0.01"),
    ("reg_momentum", "0.9"),
    ("reg_batch", "16"),
    ("reg_filters", "4,8"),
    ("reg_per_face", "2"),
];

/// Resolved `key = value` configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => invalid(format!("unknown config key `{key}`")),
        }
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.into(),
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: source.into(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key is in DEFAULTS")
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().or_else(|_| invalid(format!("config `{key}`: cannot parse `{v}`")))
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse().or_else(|_| invalid(format!("config `{key}`: bad element `{s}`"))))
            .collect()
    }

    /// `# key = value` lines.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "# {k} = {v}");
        }
        out
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            num_pos: self.parse("num_pos")?,
            num_neg: self.parse("num_neg")?,
            image_size: self.parse("image_size")?,
            pose_count: self.parse("pose_count")?,
            face_major: (self.parse("face_major_min")?, self.parse("face_major_max")?),
            max_rotation: self.parse("max_rotation")?,
            test_fraction: self.parse("test_fraction")?,
            clutter: self.parse("clutter")?,
            occluder_rate: self.parse("occluder_rate")?,
            occluder_size: self.parse("occluder_size")?,
            seed: self.seed()?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let filters: Vec<usize> = self.list("filters")?;
        Ok(ModelConfig {
            kernels: self.list("kernels")?,
            lcn_after: self.parse("lcn_after")?,
            poses: self.parse("pose_count")?,
            block_n: self.parse("block_n")?,
            lambda: self.parse("lambda")?,
            loss: self.parse("loss")?,
            dropout: self.parse("dropout")?,
            deep_supervision: self.parse("deep_supervision")?,
            seed: self.seed()?,
            filters,
        })
    }

    pub fn detect(&self) -> Result<DetectConfig> {
        Ok(DetectConfig {
            pyramid: PyramidConfig {
                scales_per_octave: self.parse("scales_per_octave")?,
                min_size: self.parse("min_size")?,
            },
            score_threshold: self.parse("score_threshold")?,
            nms_threshold: self.parse("nms_threshold")?,
            stride_cells: self.parse("stride")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            model: self.model()?,
            lr: self.parse("lr")?,
            momentum: self.parse("momentum")?,
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            seed: self.seed()?,
            bootstrap_rounds: self.parse("bootstrap_rounds")?,
            negatives_per_round: self.parse("negatives_per_round")?,
            val_fraction: self.parse("val_fraction")?,
            mirror: self.parse("mirror")?,
            mining_threshold: self.parse("mining_threshold")?,
            detect: self.detect()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn regressor(&self, loss: RegressorLoss) -> Result<RegressorConfig> {
        let f: Vec<usize> = self.list("reg_filters")?;
        if f.len() != 2 {
            return invalid("reg_filters needs two values");
        }
        Ok(RegressorConfig {
            loss,
            lr: self.parse("reg_lr")?,
            momentum: self.parse("reg_momentum")?,
            epochs: self.parse("reg_epochs")?,
            batch_size: self.parse("reg_batch")?,
            filters: (f[0], f[1]),
            freeze_features: false,
            seed: self.seed()?,
        })
    }

    pub fn match_mode(&self) -> Result<MatchMode> {
        match self.get("match_mode") {
            "discrete" => Ok(MatchMode::Discrete),
            "continuous" => Ok(MatchMode::Continuous),
            m => invalid(format!("match_mode `{m}` (expected discrete|continuous)")),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gridloss", version, about = "Grid-loss sliding-window detector toolkit")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root seed (falls back to GRIDLOSS_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the toy-face corpus (P6 images plus manifests).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector (and optionally ellipse regressors).
    Train(TrainArgs),
    /// Print detections, one `path pose score x y w h` line each.
    Detect(DetectArgs),
    /// Evaluate on an annotated split: TPR table and curves.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of one parameter.
    Sweep(SweepArgs),
    /// Time detection for several pyramid densities.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also train ellipse regressors, written to `<out>.sse.reg` and
    /// `<out>.num.reg`.
    #[arg(long)]
    pub regressors: bool,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Images (P6/P5) to scan.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Refine with the regressor trained by this loss (`<model>.<loss>.reg`).
    #[arg(long)]
    pub refine: Option<RegressorLoss>,
    /// Explicit regressor file.
    #[arg(long)]
    pub regressor: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub refine: Option<RegressorLoss>,
    #[arg(long)]
    pub regressor: Option<PathBuf>,
    /// Directory for the curve file (and SVG with `--plot`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `block_n`, `lambda`, `fraction` or any numeric config key.
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Seeds averaged per cell.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Scales per octave to time. Repeatable.
    #[arg(long = "scales", required = true)]
    pub scales: Vec<usize>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 640)]
    pub width: usize,
    #[arg(long, default_value_t = 480)]
    pub height: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

/// Builds the configuration for a parsed command line.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var("GRIDLOSS_SEED") {
        cfg.set("seed", &s)?;
    }
    if let Some(path) = &cli.config {
        let text = crate::error::read_text(path)?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn regressor_path(model: &Path, loss: RegressorLoss) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(format!(".{loss}.reg"));
    PathBuf::from(s)
}

fn load_regressor(model: &Path, refine: Option<RegressorLoss>, explicit: Option<&Path>) -> Result<Option<RegressorModel>> {
    let path = match (explicit, refine) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(loss)) => regressor_path(model, loss),
        (None, None) => return Ok(None),
    };
    let text = crate::error::read_text(&path)?;
    let (m, loss) = regressor_from_str(&text, &path.display().to_string())?;
    if let Some(want) = refine {
        if want != loss {
            return invalid(format!("{} holds a {loss} regressor, asked for {want}", path.display()));
        }
    }
    Ok(Some(m))
}

fn training_windows(images: &[SynthImage], cfg: &RunConfig) -> Result<(Vec<crate::detector::network::Sample>, Vec<crate::detector::network::Sample>)> {
    let pos = positive_windows(images)?;
    let neg = negative_windows(images, cfg.parse("neg_windows_per_image")?, cfg.seed()?)?;
    Ok((pos, neg))
}

fn negative_images(images: &[SynthImage]) -> Vec<crate::tensor::Tensor> {
    images.iter().filter(|im| im.faces.is_empty()).map(|im| im.image.clone()).collect()
}

fn cmd_train(args: &TrainArgs, cfg: &RunConfig, out: &mut (dyn std::io::Write + Send)) -> Result<()> {
    let images = load_split(&args.data, "train")?;
    let (pos, neg) = training_windows(&images, cfg)?;
    let tc = cfg.train()?;
    let (model, report) = train_with_bootstrap(&pos, &neg, &negative_images(&images), &tc)?;
    save_model(&model, &args.out)?;
    writeln!(out, "positives\t{}\nnegatives\t{}", pos.len(), neg.len())?;
    for (r, m) in report.mined.iter().enumerate() {
        writeln!(out, "mined_round_{}\t{m}", r + 1)?;
    }
    if args.regressors {
        let samples = regressor_samples(&images, cfg.parse("reg_per_face")?, Jitter::REGRESSOR, cfg.seed()?)?;
        for loss in [RegressorLoss::Sse, RegressorLoss::Num] {
            let reg = train_regressor(&samples, &cfg.regressor(loss)?)?;
            std::fs::write(regressor_path(&args.out, loss), regressor_to_string(&reg, loss))?;
        }
    }
    writeln!(out, "model\t{}", args.out.display())?;
    Ok(())
}

fn cmd_detect(args: &DetectArgs, cfg: &RunConfig, out: &mut (dyn std::io::Write + Send)) -> Result<()> {
    let model = load_model(&args.model)?;
    let reg = load_regressor(&args.model, args.refine, args.regressor.as_deref())?;
    let dc = cfg.detect()?;
    for path in &args.images {
        let image = load_image(path)?;
        let name = path.display().to_string();
        for mut d in detect(&image, &model, &dc)? {
            if let Some(r) = &reg {
                d.ellipse = Some(refine_detection(r, &image, &d)?);
            }
            writeln!(out, "{}", d.to_line(&name))?;
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, cfg: &RunConfig, out: &mut (dyn std::io::Write + Send)) -> Result<()> {
    let model = load_model(&args.model)?;
    let reg = load_regressor(&args.model, args.refine, args.regressor.as_deref())?;
    let images = load_split(&args.data, &args.split)?;
    let mut dc = cfg.detect()?;
    dc.score_threshold = f64::NEG_INFINITY;
    let counts: Vec<usize> = cfg.list("fp_counts")?;
    let mode = cfg.match_mode()?;
    let (res, total) = evaluate_images(&model, reg.as_ref(), &images, &dc, mode)?;
    let curve = tpr_at_fp(&res, total, &counts);
    let fppi: f64 = cfg.parse("fppi")?;
    let k = (fppi * images.len() as f64).floor() as usize;
    let at = tpr_at_fp(&res, total, &[k]).points[0].1;
    let rows: Vec<Vec<String>> = curve
        .points
        .iter()
        .map(|(fp, t)| vec![fp.to_string(), format!("{t:.6}")])
        .collect();
    write!(out, "{}", tsv(&["fp_count", "tpr"], &rows))?;
    writeln!(out, "# images {}  faces {total}  tpr@{fppi}fppi {at:.6}  truncated {}", images.len(), curve.truncated)?;
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("curve.txt"), curve_to_text(&curve))?;
        if args.plot {
            std::fs::write(dir.join("curve.svg"), curves_svg(&[("detector", &curve)]))?;
        }
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, cfg: &RunConfig, out: &mut (dyn std::io::Write + Send)) -> Result<()> {
    let train_imgs = load_split(&args.data, "train")?;
    let test_imgs = load_split(&args.data, "test")?;
    let (pos, neg) = training_windows(&train_imgs, cfg)?;
    let fppi: f64 = cfg.parse("fppi")?;
    if args.param == "fraction" {
        let fractions = args
            .values
            .iter()
            .map(|v| v.parse::<f64>().or_else(|_| invalid(format!("bad fraction `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        let rows = dataset_size_sweep(&fractions, &args.seeds, &cfg.train()?, &pos, &neg, &test_imgs, fppi)?;
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.fraction.to_string(), r.loss.to_string(), format!("{:.6}", r.mean_tpr)])
            .collect();
        write!(out, "{}", tsv(&["fraction", "loss", "tpr"], &table))?;
        return Ok(());
    }
    let mut table = Vec::new();
    for v in &args.values {
        let mut c = cfg.clone();
        c.set(&args.param, v)?;
        let mut tprs = Vec::new();
        for &seed in &args.seeds {
            c.set("seed", &seed.to_string())?;
            let tc = c.train()?;
            let m = train(&pos, &neg, &tc)?;
            tprs.push(tpr_at_fppi(&m, &test_imgs, &tc.detect, fppi)?);
        }
        let mean = tprs.iter().sum::<f64>() / tprs.len().max(1) as f64;
        table.push(vec![v.clone(), c.get("loss").to_string(), format!("{mean:.6}")]);
    }
    write!(out, "{}", tsv(&[&args.param, "loss", "tpr"], &table))?;
    Ok(())
}

/// Synthetic benchmark scene: a toy-corpus background tiled to the size.
pub fn bench_image(width: usize, height: usize, seed: u64) -> Result<crate::tensor::Tensor> {
    let side = width.max(height);
    let cfg = SynthConfig {
        num_pos: 1,
        num_neg: 0,
        image_size: side,
        face_major: (30.0, (side as f64 * 0.3).max(30.0)),
        test_fraction: 0.0,
        clutter: 40,
        seed,
        ..SynthConfig::default()
    };
    let img = synth_generate(&cfg)?.train_images.remove(0).image;
    img.crop3(0, 0, height, width)
}

/// Minimum wall time of `repeats` detections.
pub fn time_detection(image: &crate::tensor::Tensor, model: &DetectorModel, cfg: &DetectConfig, repeats: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let d = detect(image, model, cfg)?;
        std::hint::black_box(d);
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

fn cmd_bench(args: &BenchArgs, cfg: &RunConfig, out: &mut (dyn std::io::Write + Send)) -> Result<()> {
    let model = match &args.model {
        Some(p) => load_model(p)?,
        None => {
            let mut m = DetectorModel::new(cfg.model()?)?;
            m.fold();
            m
        }
    };
    let image = bench_image(args.width, args.height, cfg.seed()?)?;
    let mut dc = cfg.detect()?;
    let mut times = Vec::new();
    writeln!(out, "scales_per_octave\tlevels\tseconds")?;
    for &s in &args.scales {
        dc.pyramid.scales_per_octave = s;
        let levels = crate::features::level_count(args.height, args.width, dc.pyramid);
        let t = time_detection(&image, &model, &dc, args.repeats)?;
        writeln!(out, "{s}\t{levels}\t{t:.6}")?;
        times.push(t);
    }
    if times.len() >= 2 {
        writeln!(out, "# ratio first/last {:.3}", times[0] / times[times.len() - 1])?;
    }
    Ok(())
}

/// Runs a parsed command line, writing results to `out`.
pub fn run(cli: &Cli, out: &mut (dyn std::io::Write + Send)) -> Result<()> {
    let cfg = resolve_config(cli)?;
    eprint!("{}", cfg.dump());
    let mut body = || -> Result<()> {
        match &cli.command {
            Command::Synth { out: dir } => {
                let d = synth_generate(&cfg.synth()?)?;
                d.save(dir)?;
                writeln!(out, "train_images\t{}\ntest_images\t{}", d.train_images.len(), d.test_images.len())?;
                Ok(())
            }
            Command::Train(a) => cmd_train(a, &cfg, out),
            Command::Detect(a) => cmd_detect(a, &cfg, out),
            Command::Eval(a) => cmd_eval(a, &cfg, out),
            Command::Sweep(a) => cmd_sweep(a, &cfg, out),
            Command::Bench(a) => cmd_bench(a, &cfg, out),
        }
    };
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Process entry: exit 0 on success, 2 on usage errors, 1 on failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout();
    match run(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(Error::InvalidInput(m)) if m.starts_with("unknown config key") || m.contains("is not KEY=VALUE") => {
            eprintln!("error: {m}");
            2
        }
        Err(e) => {
            let _ = stdout.flush();
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::LossKind;

    #[test]
    fn config_file_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("lambda = 0.5 # half\n\nblock_n=4\n", "cfg").unwrap();
        assert_eq!(c.get("lambda"), "0.5");
        assert_eq!(c.model().unwrap().block_n, 4);
        assert!(c.apply_text("bogus = 1\n", "cfg").is_err());
        match c.apply_text("lambda 3\n", "cfg") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(c.dump().contains("# lambda = 0.5"));
    }

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default();
        let t = c.train().unwrap();
        assert_eq!(t.model.loss, LossKind::Grid);
        assert_eq!(t.batch_size, 64);
        assert!(c.synth().unwrap().validate().is_ok());
        assert_eq!(c.detect().unwrap().pyramid.scales_per_octave, 2);
        assert!(c.regressor(RegressorLoss::Num).is_ok());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["gridloss", "frobnicate"]), 2);
        assert_eq!(main_with_args(["gridloss", "bench"]), 2);
        assert_eq!(main_with_args(["gridloss", "--set", "nope=1", "bench", "--scales", "2"]), 2);
    }
}
