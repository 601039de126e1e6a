//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical failure
//! (divergence or non-finite values during training).

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use chronofield::archive::{archive_info, ArchiveMetadata, ArchiveReader, ArchiveWriter};
use chronofield::dataset::{
    convert_panoptic_calibration, frame_path, split_views, Dataset, FrameEntry, PanopticCalibration, PanopticOptions,
    SplitSpec, Transforms,
};
use chronofield::geometry::{fibonacci_camera_positions, look_at_zup, Vec3};
use chronofield::metrics::{composited, evaluate, psnr, rendered_rgb, ssim};
use chronofield::profiles::{Profile, ProfileName};
use chronofield::renderer::{render_image, RenderParams};
use chronofield::scene_synth::{synth_dataset, SceneSpec};
use chronofield::trainer::{train_sequence, Precision, SplitSource, TrainLog};
use chronofield::{Field32, Field64};
use chronofield_service::{AppState, RenderRequest, ServiceConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] chronofield::Error),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) | CliError::Data(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "chronofield",
    version,
    about = "Train, archive and render per-time-step radiance fields"
)]
pub struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a transforms file for cameras on a sphere looking at the origin.
    GenCameras(GenCamerasArgs),
    /// Render a procedural moving scene into a dataset directory.
    SynthScene(SynthSceneArgs),
    /// Convert a Panoptic-studio calibration file to a transforms file.
    ConvertCmu(ConvertCmuArgs),
    /// Train one field per time step and write them to an archive.
    Train(TrainArgs),
    /// Render PNGs from an archive.
    Render(RenderArgs),
    /// Score an archive against a dataset's held-out views.
    Eval(EvalArgs),
    /// Print an archive summary.
    Info(InfoArgs),
    /// Serve renders over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenCamerasArgs {
    /// Number of cameras.
    #[arg(long)]
    pub n: usize,
    /// Sphere radius.
    #[arg(long)]
    pub radius: f64,
    /// Horizontal field of view in radians.
    #[arg(long, default_value_t = 0.8)]
    pub fov_x: f64,
    /// Image width in pixels.
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    /// Frame entries are emitted for time steps 0..time-steps.
    #[arg(long, default_value_t = 1)]
    pub time_steps: u32,
    /// Output transforms file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthSceneArgs {
    /// Scene description JSON; the built-in desk scene when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the number of cameras.
    #[arg(long)]
    pub cameras: Option<usize>,
    /// Override the image width and height.
    #[arg(long)]
    pub resolution: Option<u32>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertCmuArgs {
    /// Calibration JSON with K, R, t and distCoef per camera.
    #[arg(long)]
    pub calibration: PathBuf,
    /// Keep only cameras of this type, e.g. "hd".
    #[arg(long)]
    pub camera_type: Option<String>,
    /// Number of time steps to list frames for.
    #[arg(long, default_value_t = 1)]
    pub time_steps: u32,
    /// Scene scale recorded in the output.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Output transforms file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings that can come from a profile, a config file or flags, in increasing
/// order of precedence. The config file is a JSON object with these field names.
#[derive(Debug, Default, Clone, Args, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    /// Optimizer steps per time step.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Rays per optimizer step.
    #[arg(long)]
    pub batch_rays: Option<usize>,
    /// Samples per ray.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Learning rate of the hash tables.
    #[arg(long)]
    pub lr_table: Option<f64>,
    /// Learning rate of the MLPs.
    #[arg(long)]
    pub lr_mlp: Option<f64>,
    /// Weight of the pull toward the previous time step (0 = independent).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scalar type used for training: f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Scene scale; the dataset's own value when absent.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Initialize each time step from the previous one (sequential).
    #[arg(long)]
    pub warm_start: Option<bool>,
    /// Skip empty space with an occupancy grid during training.
    #[arg(long)]
    pub occupancy: Option<bool>,
}

impl TrainOverrides {
    /// Fields set in `self` win over `base`.
    pub fn over(&self, base: &TrainOverrides) -> TrainOverrides {
        macro_rules! pick {
            ($($f:ident),*) => { TrainOverrides { $($f: self.$f.clone().or_else(|| base.$f.clone())),* } };
        }
        pick!(iterations, batch_rays, samples, lr_table, lr_mlp, kappa, seed, precision, scale, warm_start, occupancy)
    }

    pub fn apply(&self, profile: &mut Profile) -> CliResult<Precision> {
        let t = &mut profile.train;
        if let Some(v) = self.iterations {
            t.iterations = v;
        }
        if let Some(v) = self.batch_rays {
            t.batch_rays = v;
        }
        if let Some(v) = self.samples {
            t.render = t.render.with_samples(v);
        }
        if let Some(v) = self.lr_table {
            t.lr_table = v;
        }
        if let Some(v) = self.lr_mlp {
            t.lr_mlp = v;
        }
        if let Some(v) = self.kappa {
            t.kappa = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.warm_start {
            t.warm_start = v;
        }
        match self.occupancy {
            Some(false) => t.occupancy = None,
            Some(true) if t.occupancy.is_none() => t.occupancy = Some(Default::default()),
            _ => {}
        }
        let precision = match self.precision.as_deref() {
            None | Some("f32") => Precision::F32,
            Some("f64") => Precision::F64,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "--precision must be f32 or f64, got '{other}'"
                )))
            }
        };
        profile.train.precision = precision;
        profile.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(precision)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory containing transforms.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Output archive.
    #[arg(long)]
    pub out: PathBuf,
    /// Settings preset: paper, desk or tiny.
    #[arg(long, default_value = "desk")]
    pub profile: ProfileName,
    /// JSON file of training settings (same names as the flags).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Time steps to train, comma-separated; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<u32>>,
    /// Time steps trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Archive to render from.
    #[arg(long)]
    pub archive: PathBuf,
    /// Time step to render.
    #[arg(long)]
    pub time: Option<u32>,
    /// Render from this dataset camera (needs --data).
    #[arg(long)]
    pub pose_from_view: Option<u32>,
    /// Dataset directory, for --pose-from-view.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON array of render requests (camera path); one PNG each.
    #[arg(long)]
    pub camera_path: Option<PathBuf>,
    /// Samples per ray; the archive default when absent.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output PNG, or directory for --camera-path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Archive to evaluate.
    #[arg(long)]
    pub archive: PathBuf,
    /// Dataset directory with the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    /// Time steps to evaluate, comma-separated; all archived ones when absent.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<u32>>,
    /// Samples per ray; the archive default when absent.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Report JSON; a text table is printed as well.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    /// Archive to describe.
    #[arg(long)]
    pub archive: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Archive to serve.
    #[arg(long)]
    pub archive: PathBuf,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: std::net::SocketAddr,
    /// Time steps kept in memory.
    #[arg(long, default_value_t = 4)]
    pub cache_size: usize,
    /// Largest accepted image width and height.
    #[arg(long, default_value_t = 2048)]
    pub max_resolution: u32,
    /// Largest accepted samples per ray.
    #[arg(long, default_value_t = 1024)]
    pub max_samples: usize,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenCameras(a) => gen_cameras(&a),
        Command::SynthScene(a) => synth_scene(&a),
        Command::ConvertCmu(a) => convert_cmu(&a),
        Command::Train(a) => train(&a),
        Command::Render(a) => render(&a),
        Command::Eval(a) => eval(&a),
        Command::Info(a) => info(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn gen_cameras(a: &GenCamerasArgs) -> CliResult {
    if a.n == 0 || a.time_steps == 0 {
        return Err(CliError::Usage("--n and --time-steps must be positive".into()));
    }
    let positions = fibonacci_camera_positions(a.n, a.radius).map_err(|e| CliError::Usage(e.to_string()))?;
    let poses = positions
        .into_iter()
        .map(|p| look_at_zup(p, Vec3::new(0.0, 0.0, 0.0)))
        .collect::<chronofield::Result<Vec<_>>>()?;
    let frames = (0..a.time_steps)
        .flat_map(|t| {
            poses.iter().enumerate().map(move |(c, pose)| FrameEntry {
                file_path: frame_path(t, c as u32),
                time_index: t,
                camera_index: c as u32,
                transform_matrix: *pose.matrix(),
            })
        })
        .collect();
    let transforms = Transforms {
        camera_angle_x: a.fov_x,
        camera_angle_y: None,
        w: a.width,
        h: a.height,
        fl_x: None,
        fl_y: None,
        cx: None,
        cy: None,
        scale: 1.0,
        background: [1.0; 3],
        split: SplitSpec::default(),
        cameras: Vec::new(),
        frames,
    };
    transforms.save(&a.out)?;
    println!("wrote {} cameras to {}", a.n, a.out.display());
    Ok(())
}

fn synth_scene(a: &SynthSceneArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<SceneSpec>(&fs::read_to_string(p)?)?,
        None => SceneSpec::desk(),
    };
    if let Some(n) = a.cameras {
        spec.rig.cameras = n;
        spec.split.test.retain(|&c| (c as usize) < n);
        spec.split.val.retain(|&c| (c as usize) < n);
    }
    if let Some(r) = a.resolution {
        spec.rig.width = r;
        spec.rig.height = r;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    split_views(spec.rig.cameras as u32, &spec.split).map_err(|e| CliError::Usage(e.to_string()))?;
    let t = synth_dataset(&spec, &a.out)?;
    println!("wrote {} frames to {}", t.frames.len(), a.out.display());
    Ok(())
}

fn convert_cmu(a: &ConvertCmuArgs) -> CliResult {
    let calib: PanopticCalibration = serde_json::from_str(&fs::read_to_string(&a.calibration)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.calibration.display())))?;
    let options = PanopticOptions {
        camera_type: a.camera_type.clone(),
        timesteps: a.time_steps,
    };
    let mut transforms = convert_panoptic_calibration(&calib, &options)?;
    transforms.scale = a.scale;
    transforms.save(&a.out)?;
    println!("wrote {} cameras to {}", transforms.cameras.len(), a.out.display());
    Ok(())
}

/// Profile, then config file, then flags.
pub fn resolve_training(a: &TrainArgs) -> CliResult<(Profile, Precision, Option<f64>)> {
    let mut profile = Profile::get(a.profile);
    let file = match &a.config {
        Some(p) => serde_json::from_str::<TrainOverrides>(&fs::read_to_string(p)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => TrainOverrides::default(),
    };
    let merged = a.overrides.over(&file);
    let precision = merged.apply(&mut profile)?;
    Ok((profile, precision, merged.scale))
}

fn train(a: &TrainArgs) -> CliResult {
    let (profile, precision, scale) = resolve_training(a)?;
    if a.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let mut dataset = Dataset::open(&a.data)?;
    if let Some(s) = scale {
        dataset = dataset.with_scale(s).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let times = a.times.clone().unwrap_or_else(|| dataset.time_indices());
    let split = dataset.split()?;
    let source = SplitSource {
        dataset: &dataset,
        split,
    };
    let meta = ArchiveMetadata {
        field_config: profile.field.clone(),
        background: dataset.background(),
        samples: profile.train.render.sample_count(1.0),
    };
    let mut writer = ArchiveWriter::create(&a.out, meta, dataset.scale)?;
    let mut log_out = String::new();
    let start = Instant::now();
    let outcome = {
        let mut sink32 = |f: Field32, log: &TrainLog| -> chronofield::Result<()> {
            log_out += &log.to_jsonl();
            writer.append(&f)
        };
        match precision {
            Precision::F32 => {
                train_sequence::<f32, _>(&source, &times, &profile.field, &profile.train, a.workers, &mut sink32)?
            }
            Precision::F64 => train_sequence::<f64, _>(
                &source,
                &times,
                &profile.field,
                &profile.train,
                a.workers,
                |f: Field64, log: &TrainLog| sink32(f.cast(), log),
            )?,
        }
    };
    let log_path = a.out.with_extension("log.jsonl");
    fs::write(&log_path, log_out)?;
    println!(
        "trained {} time steps in {:.1}s ({} workers); archive {}, log {}",
        outcome.trained.len(),
        start.elapsed().as_secs_f64(),
        a.workers,
        a.out.display(),
        log_path.display()
    );
    if let Some((t, e)) = outcome.failures.into_iter().next() {
        return Err(CliError::Core(chronofield::Error::Timestep {
            time: t,
            source: Box::new(e),
        }));
    }
    Ok(())
}

fn render_params(archive: &ArchiveReader, samples: Option<usize>) -> RenderParams {
    RenderParams::inference(
        samples.unwrap_or(archive.metadata().samples),
        archive.metadata().background,
    )
}

fn render(a: &RenderArgs) -> CliResult {
    let archive = ArchiveReader::open(&a.archive)?;
    if let Some(path) = &a.camera_path {
        if a.pose_from_view.is_some() {
            return Err(CliError::Usage("use either --camera-path or --pose-from-view".into()));
        }
        let requests: Vec<RenderRequest> = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        fs::create_dir_all(&a.out)?;
        let state = AppState::with_archive(ServiceConfig::default(), archive);
        for (i, mut req) in requests.into_iter().enumerate() {
            if let Some(t) = a.time {
                req.time_index = t as i64;
            }
            req.samples = req.samples.or(a.samples);
            let png = state
                .render(&req)
                .map_err(|e| CliError::Data(format!("request {i}: {}", e.detail)))?;
            fs::write(a.out.join(format!("frame_{i:04}.png")), png)?;
        }
        println!("wrote frames to {}", a.out.display());
        return Ok(());
    }
    let (Some(t), Some(view)) = (a.time, a.pose_from_view) else {
        return Err(CliError::Usage(
            "render needs --time with --pose-from-view, or --camera-path".into(),
        ));
    };
    let data = a
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("--pose-from-view needs --data".into()))?;
    let dataset = Dataset::open(data)?.with_scale(archive.header().scene_scale)?;
    let camera = dataset.camera(t, view)?;
    let field = archive.read_timestep::<f32>(t)?;
    let params = render_params(&archive, a.samples);
    let image = render_image(&field, &camera, &params)?;
    image.opaque().write_png(&a.out)?;
    let truth = dataset.load_frame_set(t, &[view]);
    match truth {
        Ok(set) => {
            let gt = composited(&set.views[0].image, params.background);
            let pred = rendered_rgb(&image);
            let (w, h) = (image.width as usize, image.height as usize);
            println!(
                "wrote {}: PSNR {:.2} dB, SSIM {:.4} against view {view}",
                a.out.display(),
                psnr(&pred, &gt)?,
                ssim(&pred, &gt, w, h)?
            );
        }
        Err(_) => println!("wrote {}", a.out.display()),
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult {
    let archive = ArchiveReader::open(&a.archive)?;
    let dataset = Dataset::open(&a.data)?.with_scale(archive.header().scene_scale)?;
    let times = a.times.clone().unwrap_or_else(|| archive.time_indices());
    let test = dataset.split()?.test;
    if test.is_empty() {
        return Err(CliError::Data("the dataset has no test views".into()));
    }
    let report = evaluate(&archive, &dataset, &times, &test, &render_params(&archive, a.samples))?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{}", report.to_table());
    Ok(())
}

fn info(a: &InfoArgs) -> CliResult {
    let info = archive_info(&a.archive)?;
    if a.json {
        println!("{}", serde_json::to_string(&info)?);
    } else {
        print!("{}", info.to_text());
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> CliResult {
    if !a.archive.exists() {
        return Err(CliError::Data(format!("{} does not exist", a.archive.display())));
    }
    let config = ServiceConfig {
        bind: a.bind,
        max_width: a.max_resolution,
        max_height: a.max_resolution,
        max_samples: a.max_samples,
        cache_size: a.cache_size,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(chronofield_service::serve(a.archive.clone(), config))?;
    Ok(())
}
