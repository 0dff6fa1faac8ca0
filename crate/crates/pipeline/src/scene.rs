//! Synthetic deforming scene with exact ground truth.
//!
//! The scene is analytic: a textured static backdrop plane plus a rigidly
//! moving two-blob dumbbell (rotation makes the rigid-motion structure
//! matter; a plain translation field must bend to explain it). Training
//! and validation images are rendered by dense quadrature of the exact
//! fields, so image supervision carries no model error beyond sampling,
//! and every frame's blob pose is known.
//!
//! A capture manifest records image paths, per-image cameras, the
//! train/validation split (the rig's left/right cameras alternate roles
//! per frame), and the static background points on the plane.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use warpfield_core::img::{load_png_rgb, save_png_rgb, ImageF};
use warpfield_core::lie::RigidTransform3;
use warpfield_core::render::{composite_host, deltas_from_depths, Camera, Forward};
use warpfield_core::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_frames: usize,
    pub resolution: usize,
    /// Half-distance between the two blobs.
    pub blob_separation: f64,
    pub blob_radius: f64,
    /// Peak blob density.
    pub blob_density: f64,
    /// Total dumbbell rotation over the sequence (radians about z).
    pub motion_rotation: f64,
    /// Total dumbbell translation over the sequence (x axis).
    pub motion_translation: f64,
    pub plane_z: f64,
    pub plane_thickness: f64,
    pub plane_density: f64,
    /// Camera distance from the origin along +z.
    pub camera_distance: f64,
    /// Rig half-baseline along x.
    pub baseline: f64,
    pub focal_px: f64,
    pub near: f64,
    pub far: f64,
    /// Quadrature samples per ray for ground-truth rendering.
    pub quadrature_samples: usize,
    /// Background point grid side count.
    pub bg_grid: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_frames: 8,
            resolution: 32,
            blob_separation: 0.28,
            blob_radius: 0.13,
            blob_density: 40.0,
            motion_rotation: 1.1,
            motion_translation: 0.25,
            plane_z: -0.6,
            plane_thickness: 0.04,
            plane_density: 60.0,
            camera_distance: 2.2,
            baseline: 0.18,
            focal_px: 0.0, // 0 = auto: 1.1 * resolution
            near: 1.0,
            far: 3.4,
            quadrature_samples: 128,
            bg_grid: 24,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn focal(&self) -> f64 {
        if self.focal_px > 0.0 {
            self.focal_px
        } else {
            1.1 * self.resolution as f64
        }
    }

    /// Rigid pose of the dumbbell at frame i: rotation about z plus an x
    /// translation, both swept linearly over the sequence.
    pub fn blob_pose(&self, frame: usize) -> (f64, Vector3<f64>) {
        let s = if self.n_frames > 1 {
            2.0 * frame as f64 / (self.n_frames - 1) as f64 - 1.0
        } else {
            0.0
        };
        let angle = 0.5 * self.motion_rotation * s;
        let t = Vector3::new(0.5 * self.motion_translation * s, 0.0, 0.0);
        (angle, t)
    }

    /// Blob centers at frame i.
    pub fn blob_centers(&self, frame: usize) -> [Vector3<f64>; 2] {
        let (angle, t) = self.blob_pose(frame);
        let rot = Matrix3::new(
            angle.cos(),
            -angle.sin(),
            0.0,
            angle.sin(),
            angle.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        );
        let arm = Vector3::new(self.blob_separation, 0.0, 0.0);
        [rot * arm + t, rot * (-arm) + t]
    }

    /// Analytic density and color at a point for frame i.
    pub fn field(&self, frame: usize, x: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut color = [0.0f64; 3];
        // Backdrop plane: thin Gaussian slab carrying a checker texture.
        let dz = (x.z - self.plane_z) / self.plane_thickness;
        let s_plane = self.plane_density * (-0.5 * dz * dz).exp();
        if s_plane > 1e-12 {
            let check = (((x.x * 3.0).floor() + (x.y * 3.0).floor()) as i64).rem_euclid(2);
            let v = if check == 0 { 0.75 } else { 0.25 };
            let c = [v, v, 0.55 * v + 0.2];
            sigma += s_plane;
            for ch in 0..3 {
                color[ch] += s_plane * c[ch];
            }
        }
        // Dumbbell blobs.
        let centers = self.blob_centers(frame);
        let tints = [[0.9, 0.2, 0.15], [0.15, 0.3, 0.9]];
        for (c, tint) in centers.iter().zip(tints.iter()) {
            let d2 = (x - c).norm_squared();
            let s = self.blob_density * (-0.5 * d2 / (self.blob_radius * self.blob_radius)).exp();
            if s > 1e-12 {
                sigma += s;
                for ch in 0..3 {
                    color[ch] += s * tint[ch];
                }
            }
        }
        if sigma > 1e-12 {
            for ch in &mut color {
                *ch /= sigma;
            }
        }
        (sigma, color)
    }

    /// Rig camera (0 = left, 1 = right) looking down -z at the origin.
    pub fn camera(&self, rig_cam: usize) -> Camera {
        let x = if rig_cam == 0 { -self.baseline } else { self.baseline };
        Camera {
            fx: self.focal(),
            fy: self.focal(),
            cx: self.resolution as f64 / 2.0,
            cy: self.resolution as f64 / 2.0,
            width: self.resolution,
            height: self.resolution,
            pose: RigidTransform3::new(
                Matrix3::identity(),
                Vector3::new(x, 0.0, self.camera_distance),
            ),
            near: self.near,
            far: self.far,
            forward: Forward::NegZ,
        }
    }

    /// Static points on the backdrop plane.
    pub fn background_points(&self) -> Vec<[f64; 3]> {
        let n = self.bg_grid;
        let mut pts = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let u = 2.2 * (i as f64 / (n - 1) as f64 - 0.5);
                let v = 2.2 * (j as f64 / (n - 1) as f64 - 0.5);
                pts.push([u, v, self.plane_z]);
            }
        }
        pts
    }
}

/// Ground-truth render of one frame from one camera by dense quadrature.
pub fn render_ground_truth(spec: &SynthSpec, frame: usize, camera: &Camera, samples: usize) -> ImageF {
    let res = camera.width;
    let mut img = ImageF::new(res, camera.height);
    let n = samples;
    let depths: Vec<f64> = (0..n)
        .map(|i| camera.near + (camera.far - camera.near) * i as f64 / n as f64)
        .collect();
    let deltas = Tensor::new(1, n, deltas_from_depths(&depths, camera.far));
    for py in 0..camera.height {
        for px in 0..res {
            let (o, d) = camera.ray(px as f64 + 0.5, py as f64 + 0.5);
            let mut sig = Vec::with_capacity(n);
            let mut cols = Vec::with_capacity(n);
            for &t in &depths {
                let p = o + d * t;
                let (s, c) = spec.field(frame, &p);
                sig.push(s);
                cols.push(c.to_vec());
            }
            let out = composite_host(
                &Tensor::new(1, n, sig),
                &Tensor::from_rows(&cols),
                &deltas,
            )
            .expect("analytic density is non-negative");
            img.set_pixel(px, py, out.rgb[0]);
        }
    }
    img
}

// ---- capture manifest ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SerCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for SerCamera {
    fn from(c: &Camera) -> Self {
        let r = &c.pose.rotation;
        SerCamera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [c.pose.translation.x, c.pose.translation.y, c.pose.translation.z],
            near: c.near,
            far: c.far,
        }
    }
}

impl SerCamera {
    pub fn to_camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            pose: RigidTransform3::new(
                Matrix3::from_row_slice(&[
                    self.rotation[0][0],
                    self.rotation[0][1],
                    self.rotation[0][2],
                    self.rotation[1][0],
                    self.rotation[1][1],
                    self.rotation[1][2],
                    self.rotation[2][0],
                    self.rotation[2][1],
                    self.rotation[2][2],
                ]),
                Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
            ),
            near: self.near,
            far: self.far,
            forward: Forward::NegZ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: String,
    pub camera: SerCamera,
    /// Temporal frame index (the deformation code index).
    pub time: usize,
    /// Rig camera id: 0 = left, 1 = right.
    pub rig_cam: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureManifest {
    pub frames: Vec<FrameEntry>,
    pub n_times: usize,
    /// Appearance codes indexed per rig camera instead of per frame.
    pub per_camera_appearance: bool,
    pub bg_points_file: Option<String>,
}

impl CaptureManifest {
    pub fn load(dir: &Path) -> std::io::Result<CaptureManifest> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )
    }

    pub fn bg_points(&self, dir: &Path) -> std::io::Result<Vec<[f64; 3]>> {
        match &self.bg_points_file {
            None => Ok(Vec::new()),
            Some(f) => {
                let text = std::fs::read_to_string(dir.join(f))?;
                serde_json::from_str(&text)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
            }
        }
    }
}

/// The generated dataset held in memory.
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub manifest: CaptureManifest,
    pub images: Vec<ImageF>,
}

/// Renders all frames from the rig, alternating which camera trains.
pub fn generate_synth_scene(spec: &SynthSpec) -> SynthDataset {
    let mut frames = Vec::new();
    let mut images = Vec::new();
    for time in 0..spec.n_frames {
        for rig_cam in 0..2usize {
            let cam = spec.camera(rig_cam);
            let img = render_ground_truth(spec, time, &cam, spec.quadrature_samples);
            // Even frames train on the left view, odd on the right.
            let train_cam = time % 2;
            let split = if rig_cam == train_cam {
                Split::Train
            } else {
                Split::Val
            };
            frames.push(FrameEntry {
                image: format!(
                    "images/{}_{time:03}.png",
                    if split == Split::Train { "train" } else { "val" }
                ),
                camera: SerCamera::from(&cam),
                time,
                rig_cam,
                split,
            });
            images.push(img);
        }
    }
    SynthDataset {
        spec: spec.clone(),
        manifest: CaptureManifest {
            frames,
            n_times: spec.n_frames,
            per_camera_appearance: true,
            bg_points_file: Some("bg_points.json".to_string()),
        },
        images,
    }
}

pub fn save_dataset(ds: &SynthDataset, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (entry, img) in ds.manifest.frames.iter().zip(ds.images.iter()) {
        save_png_rgb(img, &dir.join(&entry.image))
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))?;
    }
    std::fs::write(
        dir.join("bg_points.json"),
        serde_json::to_string(&ds.spec.background_points()).expect("points serialize"),
    )?;
    std::fs::write(
        dir.join("scene_manifest.json"),
        serde_json::to_string_pretty(&ds.spec).expect("spec serializes"),
    )?;
    ds.manifest.save(dir)
}

/// Loads images referenced by a manifest.
pub fn load_images(manifest: &CaptureManifest, dir: &Path) -> std::io::Result<Vec<ImageF>> {
    manifest
        .frames
        .iter()
        .map(|e| {
            load_png_rgb(&dir.join(&e.image))
                .map_err(|err| std::io::Error::new(std::io::ErrorKind::Other, err.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            n_frames: 3,
            resolution: 16,
            quadrature_samples: 64,
            bg_grid: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn static_spec_renders_identical_frames() {
        let spec = SynthSpec {
            motion_rotation: 0.0,
            motion_translation: 0.0,
            ..tiny_spec()
        };
        let cam = spec.camera(0);
        let a = render_ground_truth(&spec, 0, &cam, 64);
        let b = render_ground_truth(&spec, 2, &cam, 64);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn blob_centroid_moves_as_projected() {
        // The red blob's image centroid displaces consistently with the
        // projection of its known 3D translation.
        let spec = SynthSpec {
            motion_rotation: 0.0,
            motion_translation: 0.4,
            resolution: 48,
            ..tiny_spec()
        };
        let cam = spec.camera(0);
        let centroid_x = |img: &ImageF| {
            let mut num = 0.0;
            let mut den = 0.0;
            for y in 0..img.height {
                for x in 0..img.width {
                    let p = img.pixel(x, y);
                    let redness = (p[0] - p[2]).max(0.0); // red blob mask
                    num += redness * x as f64;
                    den += redness;
                }
            }
            num / den.max(1e-9)
        };
        let first = render_ground_truth(&spec, 0, &cam, 96);
        let last = render_ground_truth(&spec, 2, &cam, 96);
        let dx_img = centroid_x(&last) - centroid_x(&first);

        // Project the known center displacement through the pinhole.
        let c0 = spec.blob_centers(0)[0];
        let c2 = spec.blob_centers(2)[0];
        let project = |c: &Vector3<f64>| {
            let rel = c - cam.pose.translation; // camera axes = world axes
            cam.fx * (rel.x / -rel.z) + cam.cx
        };
        let dx_proj = project(&c2) - project(&c0);
        assert!(
            (dx_img - dx_proj).abs() < 1.0,
            "centroid moved {dx_img} px, projection predicts {dx_proj} px"
        );
    }

    #[test]
    fn doubling_quadrature_changes_little() {
        let spec = tiny_spec();
        let cam = spec.camera(1);
        let a = render_ground_truth(&spec, 1, &cam, 128);
        let b = render_ground_truth(&spec, 1, &cam, 256);
        let mean_abs: f64 = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.data.len() as f64;
        assert!(mean_abs < 1e-3, "quadrature not converged: {mean_abs}");
    }

    #[test]
    fn split_alternates_cameras() {
        let spec = tiny_spec();
        let ds = generate_synth_scene(&spec);
        for e in &ds.manifest.frames {
            let expect_train = e.time % 2 == e.rig_cam;
            assert_eq!(e.split == Split::Train, expect_train);
        }
        // One train and one val view per time step.
        assert_eq!(ds.manifest.frames.len(), 2 * spec.n_frames);
    }

    #[test]
    fn manifest_round_trips() {
        let spec = tiny_spec();
        let ds = generate_synth_scene(&spec);
        let dir = std::env::temp_dir().join(format!("wf-scene-{}", std::process::id()));
        save_dataset(&ds, &dir).unwrap();
        let m = CaptureManifest::load(&dir).unwrap();
        assert_eq!(m.frames.len(), ds.manifest.frames.len());
        assert_eq!(m.n_times, spec.n_frames);
        let pts = m.bg_points(&dir).unwrap();
        assert_eq!(pts.len(), spec.bg_grid * spec.bg_grid);
        let imgs = load_images(&m, &dir).unwrap();
        assert_eq!(imgs.len(), m.frames.len());
        std::fs::remove_dir_all(&dir).ok();
    }
}
