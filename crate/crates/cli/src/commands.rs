use std::fs;
use std::path::{Path, PathBuf};

use asrf::field::render_image;
use asrf::metrics::write_view_metrics_csv;
use asrf::pipeline::{
    evaluate, load_field_checkpoint, load_stage1, load_stage2, read_run_config, run_ablation, save_stage1, save_stage2,
    save_stage3, stage1, stage2, stage3, write_run_config, PipelineConfig, PipelineError, Variant, CONFIG_FILE,
};
use asrf::synth::{generate_dataset, load_dataset, save_dataset, AsyncDataset, DatasetSpec, SynthError};
use serde::Serialize;
use serde_json::{json, Value};

use crate::overrides::{env_overrides, load_config, read_json};
use crate::provenance::Provenance;
use crate::{Cli, CliError, Command, RunArgs};

fn pipeline_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::InvalidConfig(_)
        | PipelineError::UnknownVariant(_)
        | PipelineError::MissingStage { .. }
        | PipelineError::EmptyDataset
        | PipelineError::TimePose(asrf::timepose::TimePoseError::InvalidConfig(_))
        | PipelineError::Field(asrf::field::FieldError::InvalidConfig(_)) => CliError::Validation(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_dataset(path: &Path) -> Result<AsyncDataset, CliError> {
    load_dataset(path).map_err(|e| CliError::Validation(format!("dataset {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn seed_flag(seed: Option<u64>, path: &[&str]) -> Vec<(Vec<String>, Value)> {
    seed.map(|s| (path.iter().map(|p| p.to_string()).collect(), json!(s))).into_iter().collect()
}

fn pipeline_config(base: Option<Value>, seed: Option<u64>) -> Result<PipelineConfig, CliError> {
    let cfg: PipelineConfig = load_config(base, &env_overrides(std::env::vars()), &seed_flag(seed, &["seed"]))?;
    cfg.validate().map_err(pipeline_err)?;
    Ok(cfg)
}

fn run_config(run: &RunArgs) -> Result<PipelineConfig, CliError> {
    pipeline_config(run.config.as_deref().map(read_json).transpose()?, run.seed)
}

/// Explicit config, else the sidecar written next to `ckpt`, else defaults.
fn checkpoint_config(config: Option<&Path>, ckpt: &Path) -> Result<PipelineConfig, CliError> {
    if let Some(p) = config {
        return pipeline_config(Some(read_json(p)?), None);
    }
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    if dir.join(CONFIG_FILE).exists() {
        let rc = read_run_config(dir).map_err(pipeline_err)?;
        let base = serde_json::to_value(rc.config).map_err(runtime)?;
        return pipeline_config(Some(base), None);
    }
    pipeline_config(None, None)
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    s.parse().map_err(pipeline_err)
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads.unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(runtime)?;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Gen(run) => gen(&run, threads),
        Command::FitTimepose { run, dataset } => fit_timepose(&run, &dataset, threads),
        Command::Bootstrap { run, dataset } => bootstrap(&run, &dataset, threads),
        Command::Joint {
            run,
            dataset,
            stages,
            variant,
        } => joint(&run, &dataset, stages, &variant, threads),
        Command::Eval {
            dataset,
            ckpt,
            config,
            out,
        } => eval(&dataset, &ckpt, config.as_deref(), out, threads),
        Command::Render {
            dataset,
            ckpt,
            config,
            out,
        } => render(&dataset, &ckpt, config.as_deref(), &out, threads),
        Command::Ablate { run, dataset, variant } => ablate(&run, &dataset, &variant, threads),
    }
}

fn gen(run: &RunArgs, threads: usize) -> Result<(), CliError> {
    let base = run.config.as_deref().map(read_json).transpose()?;
    let mut flags = seed_flag(run.seed, &["scene", "seed"]);
    flags.extend(seed_flag(run.seed, &["trajectory", "seed"]));
    flags.extend(seed_flag(run.seed, &["protocol", "seed"]));
    let spec: DatasetSpec = load_config(base, &env_overrides(std::env::vars()), &flags)?;
    let ds = generate_dataset(&spec).map_err(|e| match e {
        SynthError::InvalidSpec(_) | SynthError::PackingCapacity { .. } => CliError::Validation(e.to_string()),
        other => runtime(other),
    })?;
    save_dataset(&ds, &run.out).map_err(runtime)?;
    log::info!(
        "wrote {} RGB and {} depth frames to {}",
        ds.rgb.len(),
        ds.depth.len(),
        run.out.display()
    );
    let mut prov = Provenance::new("gen", &spec, spec.scene.seed, threads)?;
    if let Some(c) = &run.config {
        prov.input("config", c)?;
    }
    prov.write(&run.out)
}

fn fit_timepose(run: &RunArgs, dataset: &Path, threads: usize) -> Result<(), CliError> {
    let cfg = run_config(run)?;
    let ds = read_dataset(dataset)?;
    create_dir(&run.out)?;
    let s1 = stage1(&ds, &cfg).map_err(pipeline_err)?;
    log::info!(
        "stage 1: rgb fit {:.3} m / {:.3} deg, depth poses {:.3} m / {:.3} deg",
        s1.fit.train.mean_trans_m,
        s1.fit.train.mean_rot_deg,
        s1.depth_pose.mean_trans_m,
        s1.depth_pose.mean_rot_deg
    );
    write_run_config(&run.out, &cfg, Variant::Full).map_err(pipeline_err)?;
    save_stage1(&run.out, &s1.model).map_err(pipeline_err)?;
    write_json(&run.out.join("stage1_report.json"), &json!({"fit": s1.fit, "depth_pose": s1.depth_pose}))?;
    let mut prov = Provenance::new("fit-timepose", &cfg, cfg.seed, threads)?;
    prov.input("dataset", dataset)?;
    prov.write(&run.out)
}

fn bootstrap(run: &RunArgs, dataset: &Path, threads: usize) -> Result<(), CliError> {
    let cfg = run_config(run)?;
    let ds = read_dataset(dataset)?;
    create_dir(&run.out)?;
    let (grid, curve) = stage2(&ds, &cfg).map_err(pipeline_err)?;
    if !run.out.join(CONFIG_FILE).exists() {
        write_run_config(&run.out, &cfg, Variant::Full).map_err(pipeline_err)?;
    }
    save_stage2(&run.out, &grid).map_err(pipeline_err)?;
    write_json(&run.out.join("stage2_report.json"), &json!({ "losses": curve }))?;
    let mut prov = Provenance::new("bootstrap", &cfg, cfg.seed, threads)?;
    prov.input("dataset", dataset)?;
    prov.write(&run.out)
}

fn joint(run: &RunArgs, dataset: &Path, stages: Option<PathBuf>, variant: &str, threads: usize) -> Result<(), CliError> {
    let variant = parse_variant(variant)?;
    let cfg = run_config(run)?;
    let stages = stages.unwrap_or_else(|| run.out.clone());
    let phi = load_stage1(&stages, &cfg).map_err(pipeline_err)?;
    let grid = load_stage2(&stages, &cfg).map_err(pipeline_err)?;
    let ds = read_dataset(dataset)?;
    create_dir(&run.out)?;
    let s3 = stage3(&ds, &cfg, variant, &phi, grid).map_err(pipeline_err)?;
    write_run_config(&run.out, &cfg, variant).map_err(pipeline_err)?;
    save_stage3(&run.out, &s3.grid, &s3.poses).map_err(pipeline_err)?;
    write_json(
        &run.out.join("stage3_report.json"),
        &json!({"variant": variant, "losses": s3.losses, "pose_curve": s3.pose_curve}),
    )?;
    let mut prov = Provenance::new("joint", &cfg, cfg.seed, threads)?;
    prov.input("dataset", dataset)?;
    prov.input("stage1", &stages.join(asrf::pipeline::STAGE1_CKPT))?;
    prov.input("stage2", &stages.join(asrf::pipeline::STAGE2_CKPT))?;
    prov.write(&run.out)
}

fn load_checkpoint(
    ckpt: &Path,
    cfg: &PipelineConfig,
    ds: &AsyncDataset,
) -> Result<(asrf::field::RadianceFieldGrid, Option<asrf::pipeline::DepthPoseSource>), CliError> {
    if !ckpt.exists() {
        return Err(CliError::Validation(format!("checkpoint {} not found", ckpt.display())));
    }
    load_field_checkpoint(ckpt, cfg, ds.depth.len()).map_err(pipeline_err)
}

fn eval(dataset: &Path, ckpt: &Path, config: Option<&Path>, out: Option<PathBuf>, threads: usize) -> Result<(), CliError> {
    let cfg = checkpoint_config(config, ckpt)?;
    let ds = read_dataset(dataset)?;
    let (grid, poses) = load_checkpoint(ckpt, &cfg, &ds)?;
    let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&out)?;
    let e = evaluate(&grid, poses.as_ref(), &ds, &cfg).map_err(pipeline_err)?;
    log::info!(
        "psnr {:.2} dB, ssim {:.3}, depth rmse {:.3} m, depth poses {:.3} m / {:.3} deg",
        e.mean.psnr,
        e.mean.ssim,
        e.mean.depth_rmse,
        e.mean.trans_err_m,
        e.mean.rot_err_deg
    );
    write_json(&out.join("metrics.json"), &e.mean)?;
    let rows: Vec<(String, _)> = e.views.iter().map(|v| (v.name.clone(), v.metrics)).collect();
    write_view_metrics_csv(&out.join("views.csv"), &rows).map_err(runtime)?;
    let mut prov = Provenance::new("eval", &cfg, cfg.seed, threads)?;
    prov.input("dataset", dataset)?;
    prov.input("checkpoint", ckpt)?;
    prov.write(&out)
}

fn render(dataset: &Path, ckpt: &Path, config: Option<&Path>, out: &Path, threads: usize) -> Result<(), CliError> {
    let cfg = checkpoint_config(config, ckpt)?;
    let ds = read_dataset(dataset)?;
    let (grid, _) = load_checkpoint(ckpt, &cfg, &ds)?;
    create_dir(out)?;
    for (i, view) in ds.test_views.iter().enumerate() {
        let (rgb, depth, _) =
            render_image(&grid, &view.pose, &ds.intrinsics, None, &cfg.render, cfg.eval.chunk).map_err(pipeline_err_field)?;
        let max_depth = view.depth.data.iter().copied().fold(0.0f32, f32::max);
        let max_depth = if max_depth > 0.0 { max_depth } else { cfg.render.far as f32 };
        rgb.write_png(&out.join(format!("test_{i:04}_color.png"))).map_err(runtime)?;
        depth
            .colorize(max_depth)
            .write_png(&out.join(format!("test_{i:04}_depth.png")))
            .map_err(runtime)?;
    }
    log::info!("rendered {} views to {}", ds.test_views.len(), out.display());
    let mut prov = Provenance::new("render", &cfg, cfg.seed, threads)?;
    prov.input("dataset", dataset)?;
    prov.input("checkpoint", ckpt)?;
    prov.write(out)
}

fn pipeline_err_field(e: asrf::field::FieldError) -> CliError {
    pipeline_err(e.into())
}

#[derive(Serialize)]
struct AblationRow {
    variant: Variant,
    metrics: asrf::metrics::MetricsBundle,
    stage1_depth_pose: asrf::timepose::PoseErrorStats,
    final_depth_pose: asrf::timepose::PoseErrorStats,
}

fn ablate(run: &RunArgs, dataset: &Path, variants: &[String], threads: usize) -> Result<(), CliError> {
    let variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.iter().map(|v| parse_variant(v)).collect::<Result<_, _>>()?
    };
    let cfg = run_config(run)?;
    let ds = read_dataset(dataset)?;
    create_dir(&run.out)?;
    let reports = run_ablation(&ds, &cfg, &variants, Some(&run.out)).map_err(pipeline_err)?;
    let rows: Vec<AblationRow> = reports
        .iter()
        .map(|r| AblationRow {
            variant: r.variant,
            metrics: r.metrics,
            stage1_depth_pose: r.stage1_depth_pose,
            final_depth_pose: r.final_depth_pose,
        })
        .collect();
    write_json(&run.out.join("ablation.json"), &rows)?;
    let mut prov = Provenance::new("ablate", &cfg, cfg.seed, threads)?;
    prov.input("dataset", dataset)?;
    prov.write(&run.out)
}
