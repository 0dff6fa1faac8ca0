//! Single-template 2D deformation experiment.
//!
//! A scene is one base image observed through per-frame warps (random
//! translation, rotation, and a smooth swirl distortion near the center).
//! The task is to recover every frame with a single template MLP
//! F: (x, y) -> rgb and a per-frame-conditioned 2D deformation field,
//! either a plain translation field or a pivot-rotation (rigid) field —
//! the planar analogs of the 3D displacement and screw-axis fields.
//!
//! Frames live on normalized coordinates [-1, 1]^2; ground-truth warp
//! parameters are kept for evaluation only and never reach training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use warpfield_core::encoding::{encode_windowed_tape, EncodingSpec};
use warpfield_core::fields::{
    register_deformation_field, DeformationConfig, DeformationField, WarpKind,
};
use warpfield_core::img::{load_png_rgb, save_png_rgb, ImageF};
use warpfield_core::nn::{
    adam_step, forward_mlp, register_mlp, AdamConfig, Activation, LrSchedule, MlpParams, MlpSpec,
    OutputInit, ParamStore,
};
use warpfield_core::tape::Tape;
use warpfield_core::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySceneConfig {
    pub n_frames: usize,
    pub resolution: usize,
    /// Per-axis translation range (normalized units).
    pub translation_range: f64,
    /// Rotation range in radians.
    pub rotation_range: f64,
    /// Swirl strength range in radians.
    pub swirl_range: f64,
    /// Gaussian width of the swirl falloff.
    pub swirl_width: f64,
    pub seed: u64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        ToySceneConfig {
            n_frames: 20,
            resolution: 64,
            translation_range: 0.15,
            rotation_range: std::f64::consts::FRAC_PI_4,
            swirl_range: 0.8,
            swirl_width: 0.4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FrameTruth {
    pub translation: [f64; 2],
    pub rotation: f64,
    pub swirl: f64,
}

pub struct ToyScene {
    pub cfg: ToySceneConfig,
    pub base: ImageF,
    pub frames: Vec<ImageF>,
    pub truth: Vec<FrameTruth>,
}

/// Pixel center to normalized coordinates.
pub fn pixel_to_coord(px: usize, res: usize) -> f64 {
    (px as f64 + 0.5) / res as f64 * 2.0 - 1.0
}

/// Observation-to-canonical ground-truth map: swirl about the frame
/// center, rotate, then shift. The rigid part (swirl = 0) is exactly
/// representable by the pivot-rotation field.
pub fn truth_warp(t: &FrameTruth, swirl_width: f64, p: [f64; 2]) -> [f64; 2] {
    // Swirl: rotate about the center by an angle falling off with radius.
    let rho2 = p[0] * p[0] + p[1] * p[1];
    let phi = -t.swirl * (-rho2 / (swirl_width * swirl_width)).exp();
    let (sp, cp) = phi.sin_cos();
    let q = [cp * p[0] - sp * p[1], sp * p[0] + cp * p[1]];
    // Inverse rotation about the center, then remove the translation.
    let (sr, cr) = (-t.rotation).sin_cos();
    let r = [cr * q[0] - sr * q[1], sr * q[0] + cr * q[1]];
    [r[0] - t.translation[0], r[1] - t.translation[1]]
}

/// Bilinear sample with zero padding outside [-1, 1]^2.
pub fn bilinear(img: &ImageF, x: f64, y: f64) -> [f64; 3] {
    let res_x = img.width as f64;
    let res_y = img.height as f64;
    let fx = (x + 1.0) / 2.0 * res_x - 0.5;
    let fy = (y + 1.0) / 2.0 * res_y - 0.5;
    let x0 = fx.floor() as isize;
    let y0 = fy.floor() as isize;
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let mut out = [0.0; 3];
    for (dy, wy) in [(0isize, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0isize, 1.0 - tx), (1, tx)] {
            let xi = x0 + dx;
            let yi = y0 + dy;
            if xi < 0 || yi < 0 || xi >= img.width as isize || yi >= img.height as isize {
                continue; // zero padding
            }
            let p = img.pixel(xi as usize, yi as usize);
            for ch in 0..3 {
                out[ch] += wx * wy * p[ch];
            }
        }
    }
    out
}

/// Procedural test card: concentric rings, bars, and a diagonal stripe —
/// structure at several frequencies, no licensed assets.
pub fn test_card(res: usize) -> ImageF {
    let mut img = ImageF::new(res, res);
    for y in 0..res {
        for x in 0..res {
            let u = pixel_to_coord(x, res);
            let v = pixel_to_coord(y, res);
            let r = (u * u + v * v).sqrt();
            // Rings around the center.
            let ring = 0.5 + 0.5 * (r * 18.0).cos();
            // Vertical bars in the upper-left quadrant.
            let bars = if u < -0.15 && v < -0.15 {
                if ((u + 1.0) * 10.0) as i32 % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                0.5
            };
            // Diagonal stripe.
            let stripe: f64 = if (u + v - 0.6).abs() < 0.08 { 1.0 } else { 0.0 };
            let base = [
                0.15 + 0.7 * ring,
                0.2 + 0.6 * bars,
                0.25 + 0.6 * stripe.max(ring * 0.4),
            ];
            img.set_pixel(x, y, [base[0].min(1.0), base[1].min(1.0), base[2].min(1.0)]);
        }
    }
    img
}

/// Renders one frame of the scene by resampling the base through the
/// ground-truth warp.
pub fn render_truth_frame(base: &ImageF, t: &FrameTruth, swirl_width: f64, res: usize) -> ImageF {
    let mut img = ImageF::new(res, res);
    for y in 0..res {
        for x in 0..res {
            let p = [pixel_to_coord(x, res), pixel_to_coord(y, res)];
            let c = truth_warp(t, swirl_width, p);
            img.set_pixel(x, y, bilinear(base, c[0], c[1]));
        }
    }
    img
}

/// Generates the seeded dataset: base image plus warped frames with
/// recorded ground truth.
pub fn generate_toy_dataset(base: ImageF, cfg: &ToySceneConfig) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut truth = Vec::with_capacity(cfg.n_frames);
    for _ in 0..cfg.n_frames {
        let t = FrameTruth {
            translation: [
                sample_range(&mut rng, cfg.translation_range),
                sample_range(&mut rng, cfg.translation_range),
            ],
            rotation: sample_range(&mut rng, cfg.rotation_range),
            swirl: sample_range(&mut rng, cfg.swirl_range),
        };
        frames.push(render_truth_frame(&base, &t, cfg.swirl_width, cfg.resolution));
        truth.push(t);
    }
    ToyScene {
        cfg: cfg.clone(),
        base,
        frames,
        truth,
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.gen_range(-r..r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AnnealMode {
    /// Encoding with exactly m bands, fully on from the start.
    Fixed(usize),
    /// Bands ease in linearly from 0 to m over the given fraction of
    /// training.
    CoarseToFine { bands: usize, fraction: f64 },
}

impl AnnealMode {
    pub fn bands(&self) -> usize {
        match *self {
            AnnealMode::Fixed(m) => m,
            AnnealMode::CoarseToFine { bands, .. } => bands,
        }
    }

    pub fn alpha_at(&self, step: usize, total: usize) -> f64 {
        match *self {
            AnnealMode::Fixed(m) => m as f64,
            AnnealMode::CoarseToFine { bands, fraction } => {
                let n = (total as f64 * fraction).max(1.0);
                (bands as f64 * step as f64 / n).clamp(0.0, bands as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    /// Rigid (pivot-rotation) deformation when true, translation field
    /// otherwise.
    pub rigid: bool,
    pub anneal: AnnealMode,
    pub steps: usize,
    /// Pixels sampled per step (mixed across frames).
    pub batch: usize,
    pub lr: f64,
    pub template_bands: usize,
    pub template_depth: usize,
    pub template_width: usize,
    pub warp_depth: usize,
    pub warp_width: usize,
    pub code_dim: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            rigid: true,
            anneal: AnnealMode::CoarseToFine {
                bands: 6,
                fraction: 0.8,
            },
            steps: 3000,
            batch: 512,
            lr: 2e-3,
            template_bands: 6,
            template_depth: 4,
            template_width: 64,
            warp_depth: 4,
            warp_width: 48,
            code_dim: 8,
            seed: 1,
        }
    }
}

pub struct ToyModel {
    pub store: ParamStore,
    pub template: MlpParams,
    pub template_encoding: EncodingSpec,
    pub warp: DeformationField,
    pub cfg: ToyTrainConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error("training diverged (non-finite loss) at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Field(#[from] warpfield_core::fields::FieldError),
    #[error(transparent)]
    Nn(#[from] warpfield_core::nn::NnError),
    #[error(transparent)]
    Img(#[from] warpfield_core::img::ImgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(String),
}

pub fn build_model(cfg: &ToyTrainConfig, n_frames: usize) -> Result<ToyModel, ToyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let template_encoding = EncodingSpec::new(2, cfg.template_bands);
    let template = register_mlp(
        &mut store,
        &mut rng,
        "template",
        MlpSpec {
            in_dim: template_encoding.output_dim(),
            depth: cfg.template_depth,
            width: cfg.template_width,
            skip_at: if cfg.template_depth > 2 {
                Some(cfg.template_depth / 2)
            } else {
                None
            },
            hidden: Activation::Relu,
            out_dim: 3,
            output: Activation::Sigmoid,
        },
        OutputInit::FanIn,
    )?;
    let warp = register_deformation_field(
        &mut store,
        &mut rng,
        "warp",
        DeformationConfig {
            depth: cfg.warp_depth,
            width: cfg.warp_width,
            skip_at: if cfg.warp_depth > 2 {
                Some(cfg.warp_depth / 2)
            } else {
                None
            },
            code_dim: cfg.code_dim,
            bands: cfg.anneal.bands(),
            point_dim: 2,
            ..DeformationConfig::new(
                if cfg.rigid {
                    WarpKind::Se2
                } else {
                    WarpKind::Translation
                },
                n_frames,
            )
        },
    )?;
    Ok(ToyModel {
        store,
        template,
        template_encoding,
        warp,
        cfg: cfg.clone(),
    })
}

/// Queries the model: warp observation coords into the template, then
/// evaluate the template color there.
fn model_rgb(
    model: &ToyModel,
    tape: &mut Tape,
    coords: &[[f64; 2]],
    frames: &[usize],
    alpha: f64,
) -> Result<warpfield_core::NodeId, ToyError> {
    let rows: Vec<Vec<f64>> = coords.iter().map(|c| c.to_vec()).collect();
    let x = tape.input(Tensor::from_rows(&rows));
    let warped = model.warp.warp(tape, &model.store, x, frames, alpha)?;
    let enc = encode_windowed_tape(
        tape,
        &model.template_encoding,
        model.template_encoding.bands as f64,
        warped,
    );
    Ok(forward_mlp(tape, &model.store, &model.template, enc))
}

pub struct ToyRunResult {
    pub model: ToyModel,
    pub loss_curve: Vec<f64>,
    pub per_frame_mse: Vec<f64>,
    pub mean_mse: f64,
}

/// Trains the template and deformation field jointly on sampled pixels
/// with an MSE photometric loss.
pub fn train_toy(scene: &ToyScene, cfg: &ToyTrainConfig) -> Result<ToyRunResult, ToyError> {
    let mut model = build_model(cfg, scene.cfg.n_frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let sched = LrSchedule::new(cfg.lr, cfg.steps as u64);
    let adam = AdamConfig::default();
    let res = scene.cfg.resolution;
    let mut loss_curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let alpha = cfg.anneal.alpha_at(step, cfg.steps);
        let mut coords = Vec::with_capacity(cfg.batch);
        let mut frames = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let f = rng.gen_range(0..scene.cfg.n_frames);
            let px = rng.gen_range(0..res);
            let py = rng.gen_range(0..res);
            coords.push([pixel_to_coord(px, res), pixel_to_coord(py, res)]);
            frames.push(f);
            targets.push(scene.frames[f].pixel(px, py).to_vec());
        }
        let mut tape = Tape::new();
        let rgb = model_rgb(&model, &mut tape, &coords, &frames, alpha)?;
        let t = tape.input(Tensor::from_rows(&targets));
        let d = tape.sub(rgb, t);
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(ToyError::Diverged(step));
        }
        loss_curve.push(lv);
        let adj = tape.backward(loss);
        let grads = adj.param_grads(&tape);
        adam_step(&mut model.store, &grads, sched.lr_at(step as u64), &adam)?;
    }

    let per_frame_mse = eval_frame_mse(&model, scene)?;
    let mean_mse = per_frame_mse.iter().sum::<f64>() / per_frame_mse.len() as f64;
    Ok(ToyRunResult {
        model,
        loss_curve,
        per_frame_mse,
        mean_mse,
    })
}

/// Full-image reconstruction MSE per frame.
pub fn eval_frame_mse(model: &ToyModel, scene: &ToyScene) -> Result<Vec<f64>, ToyError> {
    let res = scene.cfg.resolution;
    let alpha = model.cfg.anneal.bands() as f64;
    let mut out = Vec::with_capacity(scene.cfg.n_frames);
    for f in 0..scene.cfg.n_frames {
        let recon = render_reconstruction(model, f, res, alpha)?;
        let mut err = 0.0;
        for (a, b) in recon.data.iter().zip(scene.frames[f].data.iter()) {
            err += (a - b) * (a - b);
        }
        out.push(err / recon.data.len() as f64);
    }
    Ok(out)
}

/// Renders the model's reconstruction of one frame.
pub fn render_reconstruction(
    model: &ToyModel,
    frame: usize,
    res: usize,
    alpha: f64,
) -> Result<ImageF, ToyError> {
    let mut img = ImageF::new(res, res);
    // Chunked evaluation keeps tape memory modest.
    let chunk = 2048;
    let total = res * res;
    let mut i = 0;
    while i < total {
        let n = chunk.min(total - i);
        let coords: Vec<[f64; 2]> = (i..i + n)
            .map(|k| {
                let (x, y) = (k % res, k / res);
                [pixel_to_coord(x, res), pixel_to_coord(y, res)]
            })
            .collect();
        let frames = vec![frame; n];
        let mut tape = Tape::new();
        let rgb = model_rgb(model, &mut tape, &coords, &frames, alpha)?;
        let v = tape.value(rgb);
        for k in 0..n {
            let (x, y) = ((i + k) % res, (i + k) / res);
            let r = v.row_slice(k);
            img.set_pixel(x, y, [r[0], r[1], r[2]]);
        }
        i += n;
    }
    Ok(img)
}

/// Renders the canonical template on the pixel grid.
pub fn render_template(model: &ToyModel, res: usize) -> Result<ImageF, ToyError> {
    let mut img = ImageF::new(res, res);
    let chunk = 2048;
    let total = res * res;
    let mut i = 0;
    while i < total {
        let n = chunk.min(total - i);
        let rows: Vec<Vec<f64>> = (i..i + n)
            .map(|k| {
                let (x, y) = (k % res, k / res);
                vec![pixel_to_coord(x, res), pixel_to_coord(y, res)]
            })
            .collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&rows));
        let enc = encode_windowed_tape(
            &mut tape,
            &model.template_encoding,
            model.template_encoding.bands as f64,
            x,
        );
        let rgb = forward_mlp(&mut tape, &model.store, &model.template, enc);
        let v = tape.value(rgb);
        for k in 0..n {
            let (px, py) = ((i + k) % res, (i + k) / res);
            let r = v.row_slice(k);
            img.set_pixel(px, py, [r[0], r[1], r[2]]);
        }
        i += n;
    }
    Ok(img)
}

/// Per-pixel flow (displacement observation -> canonical) of one frame.
pub fn model_flow(model: &ToyModel, frame: usize, res: usize) -> Result<Vec<[f64; 2]>, ToyError> {
    let alpha = model.cfg.anneal.bands() as f64;
    let mut out = Vec::with_capacity(res * res);
    let chunk = 4096;
    let total = res * res;
    let mut i = 0;
    while i < total {
        let n = chunk.min(total - i);
        let coords: Vec<Vec<f64>> = (i..i + n)
            .map(|k| {
                let (x, y) = (k % res, k / res);
                vec![pixel_to_coord(x, res), pixel_to_coord(y, res)]
            })
            .collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&coords));
        let warped = model
            .warp
            .warp(&mut tape, &model.store, x, &vec![frame; n], alpha)?;
        for k in 0..n {
            let w = tape.value(warped).row_slice(k);
            let c = &coords[k];
            out.push([w[0] - c[0], w[1] - c[1]]);
        }
        i += n;
    }
    Ok(out)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Flow visualization: hue encodes direction, saturation magnitude.
pub fn flow_image(flow: &[[f64; 2]], res: usize, max_mag: f64) -> ImageF {
    let mut img = ImageF::new(res, res);
    for y in 0..res {
        for x in 0..res {
            let f = flow[y * res + x];
            let mag = (f[0] * f[0] + f[1] * f[1]).sqrt();
            let hue = f[1].atan2(f[0]) / (2.0 * std::f64::consts::PI);
            let sat = (mag / max_mag).min(1.0);
            img.set_pixel(x, y, hsv_to_rgb(hue, sat, 1.0));
        }
    }
    img
}

/// Writes reconstruction, absolute-error, template, and flow images.
pub fn emit_toy_figures(model: &ToyModel, scene: &ToyScene, out: &Path) -> Result<(), ToyError> {
    std::fs::create_dir_all(out)?;
    let res = scene.cfg.resolution;
    let alpha = model.cfg.anneal.bands() as f64;
    let template = render_template(model, res)?;
    save_png_rgb(&template, &out.join("template.png"))?;
    for f in 0..scene.cfg.n_frames {
        let recon = render_reconstruction(model, f, res, alpha)?;
        save_png_rgb(&recon, &out.join(format!("recon_{f:02}.png")))?;
        let mut err = ImageF::new(res, res);
        for y in 0..res {
            for x in 0..res {
                let a = recon.pixel(x, y);
                let b = scene.frames[f].pixel(x, y);
                let e = (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
                err.set_pixel(x, y, [e, e, e]);
            }
        }
        save_png_rgb(&err, &out.join(format!("error_{f:02}.png")))?;
        let flow = model_flow(model, f, res)?;
        save_png_rgb(&flow_image(&flow, res, 0.5), &out.join(format!("flow_{f:02}.png")))?;
    }
    Ok(())
}

// ---- dataset and run IO ----

#[derive(Serialize, Deserialize)]
struct TruthManifest {
    cfg: ToySceneConfig,
    frames: Vec<FrameTruth>,
}

pub fn save_dataset(scene: &ToyScene, dir: &Path) -> Result<(), ToyError> {
    std::fs::create_dir_all(dir)?;
    save_png_rgb(&scene.base, &dir.join("base.png"))?;
    for (i, f) in scene.frames.iter().enumerate() {
        save_png_rgb(f, &dir.join(format!("frame_{i:03}.png")))?;
    }
    let manifest = TruthManifest {
        cfg: scene.cfg.clone(),
        frames: scene.truth.clone(),
    };
    std::fs::write(
        dir.join("truth.json"),
        serde_json::to_string_pretty(&manifest).expect("serialize truth"),
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<ToyScene, ToyError> {
    let manifest: TruthManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("truth.json"))?)
            .map_err(|e| ToyError::Data(format!("truth.json: {e}")))?;
    let base = load_png_rgb(&dir.join("base.png"))?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for i in 0..manifest.frames.len() {
        frames.push(load_png_rgb(&dir.join(format!("frame_{i:03}.png")))?);
    }
    Ok(ToyScene {
        cfg: manifest.cfg,
        base,
        frames,
        truth: manifest.frames,
    })
}
