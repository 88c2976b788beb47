use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use radiance_mcl::field_fit::{fit_field, FitConfig, TrainSet};
use radiance_mcl::geometry::parse_pose_list;
use radiance_mcl::harness::{emit_report, emit_traces, run_experiment, BenchmarkSpec};
use radiance_mcl::mcl::{refine, FilterConfig, Resampling};
use radiance_mcl::radiance_field::build_procedural_scene;
use radiance_mcl::renderer::render_image;
use radiance_mcl::{
    stream_rng, BoundingBox, CameraIntrinsics, Error, GridDims, Image, Pose, RaySamplingConfig, SceneSpec, Vec3,
    VoxelGrid,
};

#[derive(Parser, Debug)]
#[command(name = "rmcl", version, about = "Radiance-field map building and particle-filter pose refinement")]
struct Cli {
    /// Root seed for every random choice
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Voxelize a procedural scene description into a grid file
    GenScene(GenSceneArgs),
    /// Fit a grid to posed PPM images
    Fit(FitArgs),
    /// Render one view of a grid to PPM
    Render(RenderArgs),
    /// Refine an initial pose against a query image
    Localize(LocalizeArgs),
    /// Run the synthetic relocalization benchmark
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct GenSceneArgs {
    #[arg(long)]
    spec: PathBuf,
    /// `nx,ny,nz` or a single edge length
    #[arg(long, default_value = "64")]
    dims: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Directory of PPM images, paired with poses in file-name order
    #[arg(long)]
    images: PathBuf,
    /// Pose list, one `tx ty tz qw qx qy qz` per line
    #[arg(long)]
    poses: PathBuf,
    #[arg(long, default_value = "32")]
    dims: String,
    /// `minx,miny,minz,maxx,maxy,maxz`
    #[arg(long, default_value = "-1,-1,-1,1,1,1", allow_hyphen_values = true)]
    bbox: String,
    /// `WxH[:fx,fy,cx,cy]`; defaults to the image size with focal = width
    #[arg(long)]
    intr: Option<String>,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 512)]
    rays: usize,
    /// SGD step on the batch-mean gradient
    #[arg(long, default_value_t = 20000.0)]
    step: f64,
    /// Step-size multiplier per iteration
    #[arg(long, default_value_t = 0.999)]
    decay: f64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss CSV (default: `<out>.loss.csv`)
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pose: String,
    #[arg(long, default_value = "160x120")]
    intr: String,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Outdoor setting: rotation noise 0.01 rad
    Cambridge,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ResamplingArg {
    Multinomial,
    Systematic,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    init_pose: String,
    /// Ground truth; adds error columns to the trace
    #[arg(long, allow_hyphen_values = true)]
    gt_pose: Option<String>,
    /// `WxH[:fx,fy,cx,cy]`; defaults to the query size with focal = width
    #[arg(long)]
    intr: Option<String>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 200)]
    particles: usize,
    #[arg(long)]
    sigma_t: Option<f64>,
    #[arg(long)]
    sigma_r: Option<f64>,
    #[arg(long, default_value_t = 128)]
    pixels: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 0.02)]
    init_radius_t: f64,
    #[arg(long, default_value_t = 0.02)]
    init_radius_r: f64,
    #[arg(long, default_value_t = 100)]
    annealed_particles: usize,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, value_enum, default_value = "multinomial")]
    resampling: ResamplingArg,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Benchmark description; the bundled default when omitted
    #[arg(long)]
    bench: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the bundled default benchmark description and exit
    #[arg(long)]
    print_default: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure worker pool: {e}");
            return ExitCode::from(2);
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Degenerate(_) | Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn echo(cli: &Cli, resolved: &dyn std::fmt::Debug) {
    eprintln!(
        "config: seed={} workers={}",
        cli.seed.map_or("default".to_string(), |s| s.to_string()),
        rayon::current_num_threads()
    );
    eprintln!("config: {resolved:#?}");
}

fn run(cli: &Cli) -> radiance_mcl::Result<()> {
    match &cli.command {
        Command::GenScene(a) => gen_scene(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Render(a) => render(cli, a),
        Command::Localize(a) => localize(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
    }
}

fn gen_scene(cli: &Cli, a: &GenSceneArgs) -> radiance_mcl::Result<()> {
    let dims = GridDims::parse(&a.dims)?;
    let spec = SceneSpec::load(&a.spec)?;
    echo(cli, &(a, dims, &spec));
    let grid = build_procedural_scene(&spec, dims)?;
    grid.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn parse_bbox(text: &str) -> radiance_mcl::Result<BoundingBox> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad bbox `{text}`")))?;
    if v.len() != 6 {
        return Err(Error::InvalidArgument(format!("bbox needs 6 numbers, got `{text}`")));
    }
    BoundingBox::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
}

fn read_text(path: &Path) -> radiance_mcl::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn intrinsics_for(intr: &Option<String>, image: &Image) -> radiance_mcl::Result<CameraIntrinsics> {
    let k = match intr {
        Some(s) => CameraIntrinsics::parse(s)?,
        None => CameraIntrinsics::with_default_focal(image.width(), image.height())?,
    };
    if (k.width, k.height) != (image.width(), image.height()) {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are {}x{} but the image is {}x{}",
            k.width,
            k.height,
            image.width(),
            image.height()
        )));
    }
    Ok(k)
}

fn fit(cli: &Cli, a: &FitArgs) -> radiance_mcl::Result<()> {
    let dims = GridDims::parse(&a.dims)?;
    let bbox = parse_bbox(&a.bbox)?;
    let poses = parse_pose_list(&read_text(&a.poses)?)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.images)
        .map_err(|e| Error::Io {
            path: a.images.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    if files.len() != poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} poses",
            files.len(),
            poses.len()
        )));
    }
    if files.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let images = files.iter().map(Image::load_ppm).collect::<radiance_mcl::Result<Vec<_>>>()?;
    let intr = intrinsics_for(&a.intr, &images[0])?;
    let cfg = FitConfig {
        iterations: a.iters,
        rays_per_step: a.rays,
        step_size: a.step,
        step_decay: a.decay,
        sampling: RaySamplingConfig::with_samples(a.samples),
        seed: cli.seed.unwrap_or(0),
        ..Default::default()
    };
    echo(cli, &(a, dims, bbox, intr, cfg));
    let train = TrainSet::new(intr, images.into_iter().zip(poses).collect())?;
    let report = fit_field(&train, dims, bbox, &cfg)?;
    report.grid.save(&a.out)?;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    fs::write(&loss_path, report.loss_csv()).map_err(|e| Error::Io {
        path: loss_path.clone(),
        source: e,
    })?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        info!("batch loss {first} -> {last}");
    }
    println!("{}", a.out.display());
    Ok(())
}

fn render(cli: &Cli, a: &RenderArgs) -> radiance_mcl::Result<()> {
    let pose = Pose::parse(&a.pose)?;
    let intr = CameraIntrinsics::parse(&a.intr)?;
    let sampling = RaySamplingConfig::with_samples(a.samples);
    echo(cli, &(a, pose, intr, sampling));
    let grid = VoxelGrid::load(&a.grid)?;
    let img = render_image(&grid, &pose, &intr, &sampling, None)?;
    img.save_ppm(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn localize(cli: &Cli, a: &LocalizeArgs) -> radiance_mcl::Result<()> {
    let init = Pose::parse(&a.init_pose)?;
    let gt = a.gt_pose.as_deref().map(Pose::parse).transpose()?;
    let preset_sigma_r = match a.preset {
        Some(Preset::Cambridge) => 0.01,
        None => 0.005,
    };
    let cfg = FilterConfig {
        n_particles: a.particles,
        m_pixels: a.pixels,
        sigma_t: a.sigma_t.unwrap_or(0.005),
        sigma_r: a.sigma_r.unwrap_or(preset_sigma_r),
        init_radius_t: a.init_radius_t,
        init_radius_r: a.init_radius_r,
        annealed_particles: a.annealed_particles,
        iterations: a.iters,
        render_samples: a.samples,
        resampling: match a.resampling {
            ResamplingArg::Multinomial => Resampling::Multinomial,
            ResamplingArg::Systematic => Resampling::Systematic,
        },
        seed: cli.seed.unwrap_or(0),
        ..Default::default()
    };
    cfg.validate()?;
    let query = Image::load_ppm(&a.query)?;
    let intr = intrinsics_for(&a.intr, &query)?;
    echo(cli, &(a, init, gt, intr, &cfg));
    let grid = VoxelGrid::load(&a.grid)?;
    let mut rng = stream_rng(cfg.seed, 0);
    let (est, trace) = refine(&grid, &query, &intr, &init, &cfg, &mut rng, gt.as_ref())?;
    if let Some(path) = &a.trace {
        fs::write(path, trace.to_csv()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    if let Some(e) = trace.records.last().and_then(|r| r.error) {
        info!("final error {:.5} m / {:.4} deg", e.translation_err, e.rotation_err);
    }
    println!("{est}");
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> radiance_mcl::Result<()> {
    if a.print_default {
        print!("{}", radiance_mcl::harness::DEFAULT_BENCHMARK);
        return Ok(());
    }
    let Some(out) = &a.out else {
        return Err(Error::InvalidArgument("evaluate needs --out".into()));
    };
    let mut spec = match &a.bench {
        Some(p) => BenchmarkSpec::load(p)?,
        None => BenchmarkSpec::default_benchmark(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    echo(cli, &spec);
    let result = run_experiment(&spec)?;
    emit_report(&result.report, out)?;
    emit_traces(&result, out)?;
    if let Some(s) = &result.report.summary {
        println!("median_terr_m={} median_rerr_deg={}", s.median_terr_m, s.median_rerr_deg);
        println!("impr_t_pct={} impr_r_pct={}", s.impr_t_pct, s.impr_r_pct);
        println!("queries={} failures={}", s.queries, s.failures);
    } else {
        println!("queries=0 failures=0");
    }
    Ok(())
}
