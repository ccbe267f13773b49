use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use locogs::codec::{decode_scene, encode_scene, CompressedScene};
use locogs::coherence::{coherence_report, CoherenceConfig};
use locogs::densify::{sample_dense_points, DensityField};
use locogs::field::{FieldConfig, HashGridField};
use locogs::model::{load_ply, load_point_cloud, save_ply, save_point_cloud, SplatScene};
use locogs::render::{metrics, render, Camera};
use locogs::synthetic::{coherent_scene, shuffled_scene};
use locogs::train::{attribute_rmse, distill, masks_for_scene, train_e2e, LocoModel, View};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::image_io::{read_png, write_png};
use crate::Command;

/// Progress lines go to stderr as JSON; `LOCOGS_LOG=off` silences them.
fn log(event: &str, body: Value) {
    if std::env::var("LOCOGS_LOG").is_ok_and(|v| v.eq_ignore_ascii_case("off")) {
        return;
    }
    let mut line = json!({ "event": event });
    if let (Value::Object(l), Value::Object(b)) = (&mut line, body) {
        l.extend(b);
    }
    eprintln!("{line}");
}

fn every(step: usize, n: usize) -> bool {
    n > 0 && step.is_multiple_of(n)
}

pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<Value> {
    match cmd {
        Command::Synth { out, shuffled } => synth(cfg, out, *shuffled),
        Command::Analyze { scene, out, csv } => analyze(cfg, scene, out, csv.as_deref()),
        Command::Distill { scene, out_dir, field } => distill_cmd(cfg, scene, out_dir, field.as_deref()),
        Command::Train { views, init, points, field, out_dir } => {
            train_cmd(cfg, views, init.as_deref(), points.as_deref(), field.as_deref(), out_dir)
        }
        Command::Densify { density, cameras, out } => densify_cmd(cfg, density, cameras, out),
        Command::Encode { scene, field, out } => encode(cfg, scene, field, out),
        Command::Decode { input, out, field_out } => decode(input, out, field_out.as_deref()),
        Command::Render { input, out, camera, reference } => render_cmd(cfg, input, out, camera.as_deref(), reference.as_deref()),
        Command::Stats { input } => stats(input),
    }
}

fn read_scene(path: &Path) -> Result<SplatScene> {
    load_ply(path).with_context(|| format!("reading scene {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Field config with centre and radius fitted to `positions` when enabled.
fn field_config(cfg: &RunConfig, positions: impl Iterator<Item = [f32; 3]>) -> FieldConfig {
    let mut fc = cfg.field;
    if !cfg.fit_to_scene {
        return fc;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] as f64);
            hi[a] = hi[a].max(p[a] as f64);
        }
    }
    if lo[0].is_finite() {
        fc.center = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
        let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
        fc.radius = if half > 0.0 { half } else { 1.0 };
    }
    fc
}

fn make_field(cfg: &RunConfig, path: Option<&Path>, positions: impl Iterator<Item = [f32; 3]>) -> Result<HashGridField> {
    match path {
        Some(p) => Ok(HashGridField::load(p).with_context(|| format!("reading field {}", p.display()))?.0),
        None => Ok(HashGridField::new(field_config(cfg, positions), cfg.seed)?),
    }
}

fn write_checkpoint(dir: &Path, cfg: &RunConfig, model: &LocoModel, report: &impl serde::Serialize) -> Result<SplatScene> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let scene = model.to_scene()?;
    save_ply(&scene, dir.join("scene.ply"))?;
    model.field.save(cfg.seed, &dir.join("field.bin"))?;
    write_json(&dir.join("masks.json"), &model.masks)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("report.json"), report)?;
    Ok(scene)
}

fn synth(cfg: &RunConfig, out: &Path, shuffled: bool) -> Result<Value> {
    let scene = if shuffled { shuffled_scene(&cfg.synth) } else { coherent_scene(&cfg.synth) };
    save_ply(&scene, out)?;
    Ok(json!({ "gaussians": scene.len(), "out": out }))
}

fn analyze(cfg: &RunConfig, scene: &Path, out: &Path, csv: Option<&Path>) -> Result<Value> {
    let scene = read_scene(scene)?;
    let cc: CoherenceConfig = if cfg.fit_to_scene { cfg.coherence.clone().fit_to(&scene) } else { cfg.coherence.clone() };
    let report = coherence_report(&scene, &cc)?;
    fs::write(out, report.to_json())?;
    if let Some(p) = csv {
        fs::write(p, report.to_csv())?;
    }
    let means: Vec<Value> = report
        .buckets
        .iter()
        .map(|b| json!({ "threshold": b.threshold, "pairs": b.pair_count, "means": b.attributes.iter().map(|a| a.mean).collect::<Vec<_>>() }))
        .collect();
    Ok(json!({ "attributes": report.attributes, "buckets": means, "out": out }))
}

fn distill_cmd(cfg: &RunConfig, scene_path: &Path, out_dir: &Path, field: Option<&Path>) -> Result<Value> {
    let scene = read_scene(scene_path)?;
    let mut field = make_field(cfg, field, scene.gaussians.iter().map(|g| g.position))?;
    let every_n = cfg.log_every;
    let report = distill(&scene, &mut field, &cfg.distill, |l| {
        if every(l.step, every_n) {
            log("distill", json!(l));
        }
    })?;
    let rmse = attribute_rmse(&scene, &field)?;
    let mut model = LocoModel::from_scene(&scene, field, cfg.train.tau, cfg.train.tau_sh)?;
    model.masks = masks_for_scene(&scene, cfg.train.tau, cfg.train.tau_sh);
    let summary = json!({
        "gaussians": scene.len(),
        "final_loss": report.losses.last(),
        "rmse": rmse,
        "params": model.field.param_count(),
    });
    write_checkpoint(out_dir, cfg, &model, &report)?;
    Ok(summary)
}

#[derive(Deserialize)]
struct ViewEntry {
    camera: Camera,
    image: PathBuf,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CameraFile {
    List(Vec<Camera>),
    Cameras { cameras: Vec<Camera> },
    Views { views: Vec<ViewEntry> },
}

impl CameraFile {
    fn cameras(self) -> Vec<Camera> {
        match self {
            CameraFile::List(c) | CameraFile::Cameras { cameras: c } => c,
            CameraFile::Views { views } => views.into_iter().map(|v| v.camera).collect(),
        }
    }
}

fn load_views(path: &Path) -> Result<Vec<View>> {
    #[derive(Deserialize)]
    struct Views {
        views: Vec<ViewEntry>,
    }
    let v: Views = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    v.views
        .into_iter()
        .map(|e| {
            let image = read_png(&dir.join(&e.image))?;
            if (image.width, image.height) != (e.camera.width, e.camera.height) {
                bail!("{}: image is {}x{} but camera is {}x{}", e.image.display(), image.width, image.height, e.camera.width, e.camera.height);
            }
            Ok(View { camera: e.camera, image })
        })
        .collect()
}

fn train_cmd(
    cfg: &RunConfig,
    views: &Path,
    init: Option<&Path>,
    points: Option<&Path>,
    field: Option<&Path>,
    out_dir: &Path,
) -> Result<Value> {
    let views = load_views(views)?;
    if views.is_empty() {
        bail!("no views");
    }
    let (tau, tau_sh) = (cfg.train.tau, cfg.train.tau_sh);
    let mut model = match (init, points) {
        (Some(p), _) => {
            let scene = read_scene(p)?;
            let f = make_field(cfg, field, scene.gaussians.iter().map(|g| g.position))?;
            LocoModel::from_scene(&scene, f, tau, tau_sh)?
        }
        (None, Some(p)) => {
            let cloud = load_point_cloud(p).with_context(|| format!("reading points {}", p.display()))?;
            let f = make_field(cfg, field, cloud.positions.iter().copied())?;
            LocoModel::from_points(&cloud, f, tau, tau_sh)?
        }
        (None, None) => bail!("either --init or --points is required"),
    };
    let start = model.len();
    let every_n = cfg.log_every;
    let report = train_e2e(&views, &mut model, &cfg.train, |l| {
        if every(l.step, every_n) {
            log("train", json!(l));
        }
    })?;
    for p in &report.prunes {
        log("prune", json!(p));
    }
    let scene = write_checkpoint(out_dir, cfg, &model, &report)?;
    Ok(json!({
        "initial_gaussians": start,
        "gaussians": scene.len(),
        "final_loss": report.history.last().map(|h| h.loss),
        "prunes": report.prunes,
    }))
}

fn densify_cmd(cfg: &RunConfig, density: &Path, cameras: &Path, out: &Path) -> Result<Value> {
    let field: DensityField = read_json(density)?;
    let cams = read_json::<CameraFile>(cameras)?.cameras();
    let cloud = sample_dense_points(&field, &cams, &cfg.densify)?;
    save_point_cloud(&cloud, out)?;
    Ok(json!({ "points": cloud.positions.len(), "rays": cfg.densify.rays, "out": out }))
}

fn encode(cfg: &RunConfig, scene: &Path, field: &Path, out: &Path) -> Result<Value> {
    let scene = read_scene(scene)?;
    let (field, _) = HashGridField::load(field).with_context(|| format!("reading field {}", field.display()))?;
    let cs = encode_scene(&scene, &field, &cfg.encode.options())?;
    cs.save(out)?;
    Ok(json!({ "gaussians": scene.len(), "bytes": cs.to_bytes().len(), "stats": cs.stats(), "out": out }))
}

fn load_container(path: &Path) -> Result<CompressedScene> {
    CompressedScene::load(path).with_context(|| format!("reading container {}", path.display()))
}

fn decode(input: &Path, out: &Path, field_out: Option<&Path>) -> Result<Value> {
    let cs = load_container(input)?;
    let (scene, field) = decode_scene(&cs)?;
    save_ply(&scene, out)?;
    if let Some(p) = field_out {
        field.save(0, p)?;
    }
    Ok(json!({ "gaussians": scene.len(), "out": out }))
}

fn is_container(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut magic = [0u8; 6];
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(f.read(&mut magic)? == 6 && &magic == locogs::codec::container::MAGIC)
}

fn default_camera(cfg: &RunConfig, scene: &SplatScene) -> Result<Camera> {
    let b = scene.bounds().context("empty scene")?;
    let center: [f64; 3] = std::array::from_fn(|a| 0.5 * (b.min[a] + b.max[a]) as f64);
    let radius = (0..3).map(|a| 0.5 * (b.max[a] - b.min[a]) as f64).fold(0.0, f64::max).max(1e-3);
    let r = &cfg.render;
    let n = r.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        bail!("render.direction must be non-zero");
    }
    let eye = std::array::from_fn(|a| center[a] + r.distance * radius * r.direction[a] / n);
    Ok(Camera::look_at(eye, center, r.up, r.width, r.height, r.fov_y)?)
}

fn render_cmd(cfg: &RunConfig, input: &Path, out: &Path, camera: Option<&Path>, reference: Option<&Path>) -> Result<Value> {
    let scene = if is_container(input)? { decode_scene(&load_container(input)?)?.0 } else { read_scene(input)? };
    let cam = match camera {
        Some(p) => read_json(p)?,
        None => default_camera(cfg, &scene)?,
    };
    let image = render(&scene, &cam, cfg.render.background)?;
    write_png(out, &image)?;
    let mut result = json!({ "width": image.width, "height": image.height, "gaussians": scene.len(), "out": out });
    if let Some(r) = reference {
        let target = read_png(r)?;
        // Compare against what was written, after 8-bit rounding.
        let written = read_png(out)?;
        let psnr = metrics::psnr(&written, &target)?;
        result["psnr"] = if psnr.is_finite() { json!(psnr) } else { json!("inf") };
        result["ssim"] = json!(metrics::ssim(&written, &target)?);
    }
    Ok(result)
}

fn stats(input: &Path) -> Result<Value> {
    let cs = load_container(input)?;
    let s = cs.stats();
    let size = fs::metadata(input)?.len() as usize;
    if s.total + s.header != size {
        bail!("category sizes {} + header {} do not add up to file size {size}", s.total, s.header);
    }
    Ok(json!({
        "gaussians": cs.header.count,
        "position": s.position,
        "color": s.color,
        "scale": s.scale,
        "mask": s.mask,
        "hash+mlp": s.hash_mlp,
        "total": s.total,
        "header": s.header,
        "file_size": size,
    }))
}
