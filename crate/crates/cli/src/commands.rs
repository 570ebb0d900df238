use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;

use pointsea::geom::{fixed_test_viewpoints, fps, io, viewpoint_crop, PointCloud};
use pointsea::metrics::{self, format_value, MetricReport, DEFAULT_DCD_ALPHA, DEFAULT_TAU, METRIC_NAMES};
use pointsea::nn::WeightStore;
use pointsea::pipeline::{self, Ablation};
use pointsea::projection::{axis_viewpoints, project_depth, DepthMap};
use pointsea::sdg::PathMode;
use pointsea::selfcheck;
use pointsea::{Error, Profile};

use crate::GlobalOpts;

const PROTOCOL_MISSING: [usize; 3] = [2048, 4096, 6144];
const PROTOCOL_KEEP: usize = 2048;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Check(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Format { .. }) => 3,
            CliError::Core(_) => 2,
            CliError::Check(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Check(n) => write!(f, "{n} self-check(s) failed"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

fn with_path<T>(path: &Path, r: pointsea::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        Error::Io(io) => CliError::Usage(format!("{}: {io}", path.display())),
        other => CliError::Core(other),
    })
}

fn load_cloud(path: &Path) -> Result<PointCloud, CliError> {
    with_path(path, io::load(path))
}

/// Builtin base, then the config file, then `--set` overrides. A `profile`
/// key in the file is ignored when `--profile` is given.
pub fn resolve_profile(g: &GlobalOpts) -> Result<Profile, CliError> {
    let mut p = Profile::builtin(g.profile.as_deref().unwrap_or("pcn"))?;
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let text = if g.profile.is_some() {
            text.lines()
                .map(|l| match l.split('#').next().and_then(|s| s.split_once('=')) {
                    Some((k, _)) if k.trim() == "profile" => "",
                    _ => l,
                })
                .collect::<Vec<_>>()
                .join("\n")
        } else {
            text
        };
        p.apply_config(&text)?;
    }
    if !g.overrides.is_empty() {
        let mut text = String::new();
        for o in &g.overrides {
            if !o.contains('=') {
                return Err(CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")));
            }
            let _ = writeln!(text, "{o}");
        }
        p.apply_config(&text)?;
    }
    p.validate()?;
    Ok(p)
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    input: PathBuf,
    out_dir: PathBuf,
    /// Number of axis views (1..=6)
    #[arg(long)]
    views: Option<usize>,
}

pub fn project(g: &GlobalOpts, a: &ProjectArgs) -> Result<(), CliError> {
    let mut p = resolve_profile(g)?;
    if let Some(v) = a.views {
        p.n_views = v;
        p.validate()?;
    }
    let cloud = load_cloud(&a.input)?;
    let params = p.projection_params()?;
    let vps = axis_viewpoints(p.n_views, p.camera_distance)?;
    let maps = vps
        .par_iter()
        .map(|vp| project_depth(&cloud, vp, &params))
        .collect::<pointsea::Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out_dir)?;
    for (i, m) in maps.iter().enumerate() {
        fs::write(a.out_dir.join(format!("view_{i}.dmb")), m.encode())?;
        fs::write(a.out_dir.join(format!("view_{i}.pgm")), m.to_pgm())?;
        println!(
            "view {i}: {} of {} pixels covered",
            m.nonzero_count(),
            m.height * m.width
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Also write every intermediate into this directory
    #[arg(long, value_name = "DIR")]
    trace: Option<PathBuf>,
    /// Global descriptor from the point branch only
    #[arg(long)]
    no_projection: bool,
    /// Alignment path only
    #[arg(long, conflicts_with_all = ["no_alignment", "fixed_alpha"])]
    no_analysis: bool,
    /// Structure path only
    #[arg(long, conflicts_with = "fixed_alpha")]
    no_alignment: bool,
    /// Replace the learned gate with a constant
    #[arg(long, value_name = "ALPHA")]
    fixed_alpha: Option<f64>,
    /// Zero the incompleteness embedding
    #[arg(long)]
    no_incompleteness: bool,
}

impl CompleteArgs {
    fn ablation(&self) -> Result<Ablation, CliError> {
        let mut a = Ablation {
            no_projection: self.no_projection,
            ..Ablation::default()
        };
        a.sdg.zero_incompleteness = self.no_incompleteness;
        if self.no_analysis {
            a.sdg.path = PathMode::AlignmentOnly;
        } else if self.no_alignment {
            a.sdg.path = PathMode::StructureOnly;
        } else if let Some(alpha) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(CliError::Usage(format!(
                    "--fixed-alpha must lie in [0, 1], got {alpha}"
                )));
            }
            a.sdg.path = PathMode::Fixed(alpha);
        }
        Ok(a)
    }
}

pub fn complete(g: &GlobalOpts, a: &CompleteArgs) -> Result<(), CliError> {
    let p = resolve_profile(g)?;
    let ablation = a.ablation()?;
    let w = with_path(&a.weights, WeightStore::load(&a.weights))?;
    let mut input = load_cloud(&a.input)?;
    if input.len() > p.n_input {
        input = input.select(&fps(&input, p.n_input)?);
    }
    let c = pipeline::complete(&input, &p, &w, &ablation)?;
    with_path(&a.out, io::save(c.output(), &a.out))?;
    if let Some(dir) = &a.trace {
        c.trace().write_dir(dir)?;
    }
    let t = c.trace();
    println!(
        "points: coarse {} | seed {} | step 1 {} | step 2 {}",
        t.p_c.len(),
        t.p_0.len(),
        t.p_1.len(),
        t.p_2.len()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProtocolArgs {
    input: PathBuf,
    /// Test viewpoint index 0..=7
    #[arg(long)]
    viewpoint: usize,
    /// Points removed: 2048, 4096 or 6144
    #[arg(long)]
    missing: usize,
    /// Partial cloud output
    #[arg(long, short)]
    out: PathBuf,
    /// Removed points output
    #[arg(long, value_name = "FILE")]
    missing_out: Option<PathBuf>,
}

pub fn protocol(a: &ProtocolArgs) -> Result<(), CliError> {
    let vps = fixed_test_viewpoints();
    let vp = vps
        .get(a.viewpoint)
        .ok_or_else(|| CliError::Usage(format!("viewpoint index {} is outside 0..=7", a.viewpoint)))?;
    if !PROTOCOL_MISSING.contains(&a.missing) {
        return Err(CliError::Usage(format!(
            "--missing must be one of {PROTOCOL_MISSING:?}, got {}",
            a.missing
        )));
    }
    let gt = load_cloud(&a.input)?;
    if gt.len() < a.missing + PROTOCOL_KEEP {
        return Err(CliError::Usage(format!(
            "ground truth has {} points, need at least {}",
            gt.len(),
            a.missing + PROTOCOL_KEEP
        )));
    }
    let (partial, missing) = viewpoint_crop(&gt, vp, a.missing, PROTOCOL_KEEP)?;
    with_path(&a.out, io::save(&partial, &a.out))?;
    if let Some(m) = &a.missing_out {
        with_path(m, io::save(&missing, m))?;
    }
    println!("partial {} points, missing {} points", partial.len(), missing.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction cloud, repeatable for batch mode
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Ground truth, either one shared cloud or one per prediction
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Comma-separated subset of cd_l1_sum, cd_l1, cd_l2, dcd, f1, precision, recall
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// DCD temperature
    #[arg(long, default_value_t = DEFAULT_DCD_ALPHA)]
    alpha: f64,
    /// One CSV row per prediction
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Gallery clouds for minimal matching distance, repeatable
    #[arg(long)]
    gallery: Vec<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let names: Vec<&str> =
        if a.metrics.is_empty() {
            METRIC_NAMES.to_vec()
        } else {
            a.metrics
                .iter()
                .map(|m| {
                    METRIC_NAMES.iter().copied().find(|n| *n == m.trim()).ok_or_else(|| {
                        CliError::Usage(format!("unknown metric `{m}`; known: {}", METRIC_NAMES.join(", ")))
                    })
                })
                .collect::<Result<_, _>>()?
        };
    if a.gt.len() != 1 && a.gt.len() != a.pred.len() {
        return Err(CliError::Usage(format!(
            "got {} --gt for {} --pred; give one shared or one per prediction",
            a.gt.len(),
            a.pred.len()
        )));
    }
    if !(a.tau > 0.0 && a.alpha > 0.0) {
        return Err(CliError::Usage("--tau and --alpha must be positive".into()));
    }
    let preds = a.pred.iter().map(|p| load_cloud(p)).collect::<Result<Vec<_>, _>>()?;
    let gts = a.gt.iter().map(|p| load_cloud(p)).collect::<Result<Vec<_>, _>>()?;
    let gallery = a.gallery.iter().map(|p| load_cloud(p)).collect::<Result<Vec<_>, _>>()?;
    let reports = preds
        .par_iter()
        .enumerate()
        .map(|(i, pred)| {
            let gt = &gts[if gts.len() == 1 { 0 } else { i }];
            let r = MetricReport::compute(pred, gt, a.tau, a.alpha)?;
            let m = if gallery.is_empty() {
                None
            } else {
                Some(metrics::mmd(pred, &gallery)?)
            };
            Ok((r, m))
        })
        .collect::<pointsea::Result<Vec<_>>>()?;

    let batch = reports.len() > 1;
    let mut out = String::new();
    for (i, (r, m)) in reports.iter().enumerate() {
        if batch {
            let _ = writeln!(out, "# {}", a.pred[i].display());
        }
        for n in &names {
            let _ = writeln!(out, "{n} = {}", format_value(r.value(n).expect("known metric")));
        }
        if let Some((d, j)) = m {
            let _ = writeln!(out, "mmd = {}", format_value(*d));
            let _ = writeln!(out, "mmd_match = {}", a.gallery[*j].display());
        }
    }
    if batch {
        let _ = writeln!(out, "# mean over {} shapes", reports.len());
        for n in &names {
            let mean = reports
                .iter()
                .map(|(r, _)| r.value(n).expect("known metric"))
                .sum::<f64>()
                / reports.len() as f64;
            let _ = writeln!(out, "{n} = {}", format_value(mean));
        }
    }
    print!("{out}");

    if let Some(path) = &a.csv {
        let mut csv = String::from("pred,gt");
        for n in &names {
            csv.push(',');
            csv.push_str(n);
        }
        if !gallery.is_empty() {
            csv.push_str(",mmd");
        }
        csv.push('\n');
        for (i, (r, m)) in reports.iter().enumerate() {
            let gt = &a.gt[if a.gt.len() == 1 { 0 } else { i }];
            let _ = write!(csv, "{},{}", a.pred[i].display(), gt.display());
            for n in &names {
                let _ = write!(csv, ",{}", format_value(r.value(n).expect("known metric")));
            }
            if let Some((d, _)) = m {
                let _ = write!(csv, ",{}", format_value(*d));
            }
            csv.push('\n');
        }
        fs::write(path, csv)?;
    }
    Ok(())
}

pub fn selfcheck() -> Result<(), CliError> {
    let outcomes = selfcheck::run_all();
    let mut failed = 0;
    for o in &outcomes {
        let ms = o.elapsed.as_secs_f64() * 1e3;
        match &o.error {
            None => println!("PASS {:<32} {ms:>10.1} ms", o.name),
            Some(e) => {
                failed += 1;
                println!("FAIL {:<32} {ms:>10.1} ms  {e}", o.name);
            }
        }
    }
    let total: f64 = outcomes.iter().map(|o| o.elapsed.as_secs_f64()).sum();
    println!(
        "{} of {} checks passed in {total:.2} s",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed > 0 {
        return Err(CliError::Check(failed));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long, short)]
    out: PathBuf,
    /// Defaults to the profile seed
    #[arg(long)]
    seed: Option<u64>,
}

pub fn init_weights(g: &GlobalOpts, a: &InitArgs) -> Result<(), CliError> {
    let p = resolve_profile(g)?;
    let w = pipeline::init_weights(&p, a.seed.unwrap_or(p.seed))?;
    with_path(&a.out, w.save(&a.out))?;
    println!("wrote {} tensors for profile `{}`", w.len(), p.name);
    Ok(())
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Loss curve CSV (`step,loss`)
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    points: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also save the fitted cloud
    #[arg(long, value_name = "FILE")]
    fitted: Option<PathBuf>,
}

pub fn fit_demo(a: &FitArgs) -> Result<(), CliError> {
    if a.points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    let (x0, target) = metrics::fit_demo_inputs(a.points, a.seed);
    let (x, curve) = metrics::toy_fit(&x0, &target, a.steps, a.lr)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", format_value(*l));
    }
    fs::write(&a.out, csv)?;
    if let Some(f) = &a.fitted {
        with_path(f, io::save(&x, f))?;
    }
    let (first, last) = (curve[0], curve[curve.len() - 1]);
    println!("initial = {}", format_value(first));
    println!("final = {}", format_value(last));
    println!("ratio = {}", format_value(last / first));
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("dmb") => {
            let m = with_path(
                path,
                fs::read(path).map_err(Error::from).and_then(|b| DepthMap::decode(&b)),
            )?;
            println!(
                "DMB1 {}x{}, {} foreground pixels, max depth {}",
                m.height,
                m.width,
                m.nonzero_count(),
                m.max_depth()
            );
        }
        Some("psw") => {
            let w = with_path(path, WeightStore::load(path))?;
            let params: usize = w
                .iter()
                .filter(|(n, _)| !n.starts_with("meta."))
                .map(|(_, t)| t.len())
                .sum();
            println!(
                "PSW1 {} tensors, {params} parameters, profile {}, seed {}",
                w.len(),
                w.profile_name().unwrap_or_else(|| "?".into()),
                w.seed().map_or("?".into(), |s| s.to_string())
            );
        }
        _ => {
            let c = load_cloud(path)?;
            let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
            for p in c.points() {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            println!("{} points, bounds {lo:?} .. {hi:?}", c.len());
        }
    }
    Ok(())
}
