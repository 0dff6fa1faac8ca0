//! Observation-to-canonical warp fields and the canonical template field.
//!
//! The deformation field maps observation-space points into the template,
//! conditioned on a per-frame latent code looked up from an embedding
//! table. Three parameterizations: a plain displacement field, a dense
//! screw-axis field (rotation + translation recovered from the 6-vector
//! output), and the planar pivot-rotation analog. The output layer starts
//! in U(-1e-5, 1e-5) so every field begins at the identity.
//!
//! The template is a NeRF-style trunk with a softplus density head and a
//! color branch conditioned on the encoded view direction and an
//! appearance code. Density never sees the direction or the appearance
//! code, so swapping appearance codes cannot move geometry.

use crate::encoding::{encode_windowed_tape, EncodingSpec};
use crate::nn::{
    forward_mlp, register_embedding, register_mlp, Activation, MlpParams, MlpSpec, NnError,
    OutputInit, ParamStore,
};
use crate::tape::{NodeId, ParamId, RotCoeffKind, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("frame index {frame} out of range ({frames} frames)")]
    BadFrame { frame: usize, frames: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpKind {
    /// x' = x + V(x, code)
    Translation,
    /// x' = exp([r]x) x + G v with (r; v) = W(x, code)
    Se3,
    /// Planar: (angle, pivot, translation) = W(x, code)
    Se2,
}

impl WarpKind {
    pub fn point_dim(self) -> usize {
        match self {
            WarpKind::Se2 => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DeformationConfig {
    pub kind: WarpKind,
    pub depth: usize,
    pub width: usize,
    pub skip_at: Option<usize>,
    pub code_dim: usize,
    pub n_frames: usize,
    /// Frequency bands of the windowed input encoding.
    pub bands: usize,
    /// Spatial dimension; 2 for the planar field, else 3.
    pub point_dim: usize,
    /// Hidden activation of the warp MLP.
    pub hidden: Activation,
}

impl DeformationConfig {
    pub fn new(kind: WarpKind, n_frames: usize) -> Self {
        DeformationConfig {
            kind,
            depth: 6,
            width: 128,
            skip_at: Some(4),
            code_dim: 8,
            n_frames,
            bands: 6,
            point_dim: kind.point_dim(),
            hidden: Activation::Relu,
        }
    }

    fn head_dim(&self) -> usize {
        match self.kind {
            WarpKind::Translation => self.point_dim,
            WarpKind::Se3 => 6,
            WarpKind::Se2 => 5,
        }
    }
}

/// Warp MLP, per-frame deformation codes, and the input encoding.
pub struct DeformationField {
    pub cfg: DeformationConfig,
    pub encoding: EncodingSpec,
    mlp: MlpParams,
    pub codes: ParamId,
}

/// Scale of the output-layer init that keeps the field at the identity.
pub const IDENTITY_INIT_EPS: f64 = 1e-5;

pub fn register_deformation_field(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: DeformationConfig,
) -> Result<DeformationField, FieldError> {
    let encoding = EncodingSpec::new(cfg.point_dim, cfg.bands);
    let spec = MlpSpec {
        in_dim: encoding.output_dim() + cfg.code_dim,
        depth: cfg.depth,
        width: cfg.width,
        skip_at: cfg.skip_at,
        hidden: cfg.hidden,
        out_dim: cfg.head_dim(),
        output: Activation::None,
    };
    let mlp = register_mlp(store, rng, prefix, spec, OutputInit::Uniform(IDENTITY_INIT_EPS))?;
    let codes = register_embedding(
        store,
        rng,
        &format!("{prefix}.codes"),
        cfg.n_frames,
        cfg.code_dim,
        0.01,
    )?;
    Ok(DeformationField {
        cfg,
        encoding,
        mlp,
        codes,
    })
}

fn check_frames(frames: &[usize], n_frames: usize) -> Result<(), FieldError> {
    for &f in frames {
        if f >= n_frames {
            return Err(FieldError::BadFrame {
                frame: f,
                frames: n_frames,
            });
        }
    }
    Ok(())
}

/// Applies x' = exp([r]x) x + G v per row, with r, v, x as (n x 3) nodes.
/// Rodrigues and the translation generator are expanded with cross
/// products: R x = x + A (r x x) + B (r x (r x x)), G v likewise with B, C,
/// where A, B, C are smooth functions of s = |r|^2.
fn screw_apply(tape: &mut Tape, r: NodeId, v: NodeId, x: NodeId) -> NodeId {
    let r2 = tape.square(r);
    let s = tape.row_sum(r2);
    let a = tape.rot_coeff(RotCoeffKind::A, s);
    let b = tape.rot_coeff(RotCoeffKind::B, s);
    let c = tape.rot_coeff(RotCoeffKind::C, s);

    let rx = tape.cross(r, x);
    let rrx = tape.cross(r, rx);
    let a_rx = tape.mul_col(rx, a);
    let b_rrx = tape.mul_col(rrx, b);
    let rot = tape.add(x, a_rx);
    let rot = tape.add(rot, b_rrx);

    let rv = tape.cross(r, v);
    let rrv = tape.cross(r, rv);
    let b_rv = tape.mul_col(rv, b);
    let c_rrv = tape.mul_col(rrv, c);
    let p = tape.add(v, b_rv);
    let p = tape.add(p, c_rrv);

    tape.add(rot, p)
}

/// Planar pivot rotation: x' = R(angle)(x - pivot) + pivot + t.
fn se2_apply(tape: &mut Tape, head: NodeId, x: NodeId) -> NodeId {
    let angle = tape.slice_cols(head, 0, 1);
    let pivot = tape.slice_cols(head, 1, 2);
    let trans = tape.slice_cols(head, 3, 2);
    let d = tape.sub(x, pivot);
    let c = tape.cos(angle);
    let s = tape.sin(angle);
    let d1 = tape.slice_cols(d, 0, 1);
    let d2 = tape.slice_cols(d, 1, 1);
    let cd1 = tape.mul(c, d1);
    let sd2 = tape.mul(s, d2);
    let sd1 = tape.mul(s, d1);
    let cd2 = tape.mul(c, d2);
    let r1 = tape.sub(cd1, sd2);
    let r2 = tape.add(sd1, cd2);
    let rot = tape.concat(&[r1, r2]);
    let moved = tape.add(rot, pivot);
    tape.add(moved, trans)
}

impl DeformationField {
    /// Warps a batch of points (n x point_dim) for the given frames at
    /// annealing level `alpha`. Differentiable in the points and in every
    /// parameter the warp touches.
    pub fn warp(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        frames: &[usize],
        alpha: f64,
    ) -> Result<NodeId, FieldError> {
        check_frames(frames, self.cfg.n_frames)?;
        assert_eq!(tape.value(x).rows(), frames.len(), "one frame per row");
        let table = store.record(tape, self.codes);
        let code = tape.embed(table, frames);
        self.warp_with_code_node(tape, store, x, code, alpha)
    }

    /// Warp conditioned on an explicit code vector (used for latent
    /// interpolation); the code is broadcast over the batch.
    pub fn warp_with_code(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        code: &[f64],
        alpha: f64,
    ) -> Result<NodeId, FieldError> {
        assert_eq!(code.len(), self.cfg.code_dim);
        let n = tape.value(x).rows();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| code.to_vec()).collect();
        let code = tape.input(Tensor::from_rows(&rows));
        self.warp_with_code_node(tape, store, x, code, alpha)
    }

    fn warp_with_code_node(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        code: NodeId,
        alpha: f64,
    ) -> Result<NodeId, FieldError> {
        let enc = encode_windowed_tape(tape, &self.encoding, alpha, x);
        let inp = tape.concat(&[enc, code]);
        let head = forward_mlp(tape, store, &self.mlp, inp);
        let warped = match self.cfg.kind {
            WarpKind::Translation => tape.add(x, head),
            WarpKind::Se3 => {
                let r = tape.slice_cols(head, 0, 3);
                let v = tape.slice_cols(head, 3, 3);
                screw_apply(tape, r, v, x)
            }
            WarpKind::Se2 => se2_apply(tape, head, x),
        };
        Ok(warped)
    }

    /// Warp plus the per-point spatial Jacobian, assembled row-major into
    /// an (n x d*d) node. The Jacobian entries are live tape nodes, so a
    /// loss built on them back-propagates into the warp parameters.
    pub fn warp_with_jacobian(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        frames: &[usize],
        alpha: f64,
    ) -> Result<(NodeId, NodeId), FieldError> {
        let warped = self.warp(tape, store, x, frames, alpha)?;
        let jac = jacobian_columns_to_rows(tape, x, warped);
        Ok((warped, jac))
    }

    /// Host-side warp of a point set for one frame (no gradients kept).
    pub fn warp_points(
        &self,
        store: &ParamStore,
        points: &[[f64; 3]],
        frame: usize,
        alpha: f64,
    ) -> Result<Vec<[f64; 3]>, FieldError> {
        assert_eq!(self.cfg.point_dim, 3);
        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        let x = tape.input(Tensor::from_rows(&rows));
        let frames = vec![frame; points.len()];
        let warped = self.warp(&mut tape, store, x, &frames, alpha)?;
        let v = tape.value(warped);
        Ok((0..points.len())
            .map(|r| {
                let s = v.row_slice(r);
                [s[0], s[1], s[2]]
            })
            .collect())
    }
}

/// Assembles the spatial Jacobian of `output` w.r.t. `input` as an
/// (n x d_out*d_in) row-major node, one matrix per row.
pub fn jacobian_columns_to_rows(tape: &mut Tape, input: NodeId, output: NodeId) -> NodeId {
    let upto = tape.len();
    let d_in = tape.value(input).cols();
    let d_out = tape.value(output).cols();
    let cols = tape.jvp_columns(input, output, upto);
    let mut entries = Vec::with_capacity(d_out * d_in);
    for i in 0..d_out {
        for col in cols.iter().take(d_in) {
            entries.push(tape.slice_cols(*col, i, 1));
        }
    }
    tape.concat(&entries)
}

#[derive(Debug, Clone, Copy)]
pub struct TemplateConfig {
    pub depth: usize,
    pub width: usize,
    pub skip_at: Option<usize>,
    /// Position encoding bands (unwindowed).
    pub pos_bands: usize,
    /// View-direction encoding bands.
    pub dir_bands: usize,
    pub psi_dim: usize,
    /// Appearance code rows: per frame, or 2 for a per-camera pair.
    pub n_psi: usize,
    /// Hidden activation of trunk and color branch.
    pub hidden: Activation,
}

impl TemplateConfig {
    pub fn new(n_psi: usize) -> Self {
        TemplateConfig {
            depth: 8,
            width: 256,
            skip_at: Some(4),
            pos_bands: 10,
            dir_bands: 4,
            psi_dim: 8,
            n_psi,
            hidden: Activation::Relu,
        }
    }
}

/// Canonical radiance field: trunk MLP, softplus density head, and a color
/// branch fed by the trunk bottleneck, encoded view direction, and
/// appearance code.
pub struct TemplateField {
    pub cfg: TemplateConfig,
    pos_encoding: EncodingSpec,
    dir_encoding: EncodingSpec,
    trunk: MlpParams,
    sigma_head: MlpParams,
    bottleneck: MlpParams,
    color_head: MlpParams,
    pub psi: ParamId,
}

pub fn register_template_field(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: TemplateConfig,
) -> Result<TemplateField, FieldError> {
    let pos_encoding = EncodingSpec::new(3, cfg.pos_bands);
    let dir_encoding = EncodingSpec::new(3, cfg.dir_bands);
    let trunk = register_mlp(
        store,
        rng,
        &format!("{prefix}.trunk"),
        MlpSpec {
            in_dim: pos_encoding.output_dim(),
            depth: cfg.depth,
            width: cfg.width,
            skip_at: cfg.skip_at,
            hidden: cfg.hidden,
            out_dim: cfg.width,
            output: cfg.hidden,
        },
        OutputInit::FanIn,
    )?;
    let sigma_head = register_mlp(
        store,
        rng,
        &format!("{prefix}.sigma"),
        MlpSpec {
            in_dim: cfg.width,
            depth: 1,
            width: cfg.width,
            skip_at: None,
            hidden: Activation::None,
            out_dim: 1,
            output: Activation::None,
        },
        OutputInit::FanIn,
    )?;
    let bottleneck = register_mlp(
        store,
        rng,
        &format!("{prefix}.bottleneck"),
        MlpSpec {
            in_dim: cfg.width,
            depth: 1,
            width: cfg.width,
            skip_at: None,
            hidden: Activation::None,
            out_dim: cfg.width,
            output: Activation::None,
        },
        OutputInit::FanIn,
    )?;
    let color_head = register_mlp(
        store,
        rng,
        &format!("{prefix}.color"),
        MlpSpec {
            in_dim: cfg.width + dir_encoding.output_dim() + cfg.psi_dim,
            depth: 1,
            width: (cfg.width / 2).max(1),
            skip_at: None,
            hidden: cfg.hidden,
            out_dim: 3,
            output: Activation::None,
        },
        OutputInit::FanIn,
    )?;
    let psi = register_embedding(
        store,
        rng,
        &format!("{prefix}.psi"),
        cfg.n_psi,
        cfg.psi_dim,
        0.01,
    )?;
    Ok(TemplateField {
        cfg,
        pos_encoding,
        dir_encoding,
        trunk,
        sigma_head,
        bottleneck,
        color_head,
        psi,
    })
}

impl TemplateField {
    /// Queries color and density at canonical points. `dirs` are unit view
    /// directions (n x 3); `psi_indices` select appearance codes. Density
    /// is softplus-activated and sees neither direction nor appearance;
    /// color is sigmoid-bounded to [0, 1].
    pub fn query(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        dirs: NodeId,
        psi_indices: &[usize],
    ) -> Result<(NodeId, NodeId), FieldError> {
        check_frames(psi_indices, self.cfg.n_psi)?;
        let table = store.record(tape, self.psi);
        let psi = tape.embed(table, psi_indices);
        self.query_with_psi_node(tape, store, x, dirs, psi)
    }

    /// Query with an explicit appearance code, broadcast over the batch.
    pub fn query_with_psi(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        dirs: NodeId,
        psi: &[f64],
    ) -> Result<(NodeId, NodeId), FieldError> {
        assert_eq!(psi.len(), self.cfg.psi_dim);
        let n = tape.value(x).rows();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| psi.to_vec()).collect();
        let psi = tape.input(Tensor::from_rows(&rows));
        self.query_with_psi_node(tape, store, x, dirs, psi)
    }

    fn query_with_psi_node(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        dirs: NodeId,
        psi: NodeId,
    ) -> Result<(NodeId, NodeId), FieldError> {
        let enc = encode_windowed_tape(
            tape,
            &self.pos_encoding,
            self.pos_encoding.bands as f64,
            x,
        );
        let h = forward_mlp(tape, store, &self.trunk, enc);
        let sigma = forward_mlp(tape, store, &self.sigma_head, h);
        let sigma = tape.softplus(sigma);

        let feat = forward_mlp(tape, store, &self.bottleneck, h);
        let denc = encode_windowed_tape(
            tape,
            &self.dir_encoding,
            self.dir_encoding.bands as f64,
            dirs,
        );
        let cin = tape.concat(&[feat, denc, psi]);
        let rgb = forward_mlp(tape, store, &self.color_head, cin);
        let rgb = tape.sigmoid(rgb);
        Ok((rgb, sigma))
    }
}

/// Deformation composed with the template: the field actually rendered.
pub struct ObservationField {
    pub deformation: Option<DeformationField>,
    pub template: TemplateField,
}

/// One batched observation query.
pub struct ObservationSample {
    pub rgb: NodeId,
    pub sigma: NodeId,
    pub warped: NodeId,
    /// Row-major warp Jacobians (n x d*d), present when requested.
    pub jacobian: Option<NodeId>,
}

impl ObservationField {
    /// Evaluates color/density at observation-space points by warping into
    /// the canonical frame first. With no deformation field the query is
    /// the template itself (a rigid baseline).
    #[allow(clippy::too_many_arguments)]
    pub fn query(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        dirs: NodeId,
        frames: &[usize],
        psi_indices: &[usize],
        alpha: f64,
        want_jacobian: bool,
    ) -> Result<ObservationSample, FieldError> {
        let (warped, jacobian) = match &self.deformation {
            Some(def) => {
                if want_jacobian {
                    let (w, j) = def.warp_with_jacobian(tape, store, x, frames, alpha)?;
                    (w, Some(j))
                } else {
                    (def.warp(tape, store, x, frames, alpha)?, None)
                }
            }
            None => (x, None),
        };
        let (rgb, sigma) = self.template.query(tape, store, warped, dirs, psi_indices)?;
        Ok(ObservationSample {
            rgb,
            sigma,
            warped,
            jacobian,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_field(kind: WarpKind, rng: &mut ChaCha8Rng) -> (ParamStore, DeformationField) {
        let mut store = ParamStore::new();
        let cfg = DeformationConfig {
            depth: 3,
            width: 16,
            skip_at: Some(2),
            code_dim: 4,
            bands: 4,
            ..DeformationConfig::new(kind, 3)
        };
        let field = register_deformation_field(&mut store, rng, "warp", cfg).unwrap();
        (store, field)
    }

    #[test]
    fn fresh_field_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [WarpKind::Translation, WarpKind::Se3] {
            let (store, field) = small_field(kind, &mut rng);
            let pts: Vec<[f64; 3]> = (0..64)
                .map(|i| {
                    let t = i as f64 / 63.0 * 2.0 - 1.0;
                    [t, (t * 3.7).sin(), (t * 2.3).cos()]
                })
                .collect();
            let warped = field.warp_points(&store, &pts, 1, 4.0).unwrap();
            for (p, w) in pts.iter().zip(warped.iter()) {
                let d = ((p[0] - w[0]).powi(2) + (p[1] - w[1]).powi(2) + (p[2] - w[2]).powi(2))
                    .sqrt();
                assert!(d < 1e-4, "{kind:?} moved a point by {d}");
            }
        }
    }

    #[test]
    fn frozen_se3_head_rotates_quarter_turn() {
        // Bypass the MLP: feed the screw application directly.
        let mut tape = Tape::new();
        let r = tape.input(Tensor::row(&[0.0, 0.0, std::f64::consts::FRAC_PI_2]));
        let v = tape.input(Tensor::row(&[0.0, 0.0, 0.0]));
        let x = tape.input(Tensor::row(&[1.0, 0.0, 0.0]));
        let y = screw_apply(&mut tape, r, v, x);
        let got = tape.value(y).row_slice(0).to_vec();
        assert!((got[0]).abs() < 1e-12 && (got[1] - 1.0).abs() < 1e-12 && got[2].abs() < 1e-12);
    }

    #[test]
    fn screw_apply_matches_host_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rv: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let vv: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xv: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let r = tape.input(Tensor::row(&rv));
            let v = tape.input(Tensor::row(&vv));
            let x = tape.input(Tensor::row(&xv));
            let y = screw_apply(&mut tape, r, v, x);
            let got = tape.value(y).row_slice(0).to_vec();

            let t = crate::lie::exp_se3(&crate::lie::ScrewAxis3::new(
                Vector3::new(rv[0], rv[1], rv[2]),
                Vector3::new(vv[0], vv[1], vv[2]),
            ));
            let want = t.apply(&Vector3::new(xv[0], xv[1], xv[2]));
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-12, "{got:?} vs {want}");
            }
        }
    }

    #[test]
    fn jacobian_of_identity_map_is_identity() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![0.2, -0.4, 0.9], vec![1.0, 2.0, 3.0]]));
        let y = tape.scale(x, 1.0);
        let j = jacobian_columns_to_rows(&mut tape, x, y);
        for r in 0..2 {
            let jr = tape.value(j).row_slice(r);
            let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            assert_eq!(jr, &eye);
        }
    }

    #[test]
    fn jacobian_of_doubling_map() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(&[0.3, 0.1, -0.7]));
        let y = tape.scale(x, 2.0);
        let j = jacobian_columns_to_rows(&mut tape, x, y);
        let want = [2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0];
        assert_eq!(tape.value(j).row_slice(0), &want);
    }

    #[test]
    fn init_jacobian_has_positive_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (store, field) = small_field(WarpKind::Se3, &mut rng);
        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let n = rows.len();
        let x = tape.input(Tensor::from_rows(&rows));
        let (_, jac) = field
            .warp_with_jacobian(&mut tape, &store, x, &vec![0; n], 4.0)
            .unwrap();
        for r in 0..n {
            let j = tape.value(jac).row_slice(r);
            let m = Matrix3::from_row_slice(j);
            assert!(m.determinant() > 0.0, "row {r}: det {} <= 0", m.determinant());
        }
    }

    #[test]
    fn density_ignores_direction_and_appearance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = TemplateConfig {
            depth: 3,
            width: 32,
            skip_at: Some(2),
            pos_bands: 4,
            dir_bands: 2,
            psi_dim: 4,
            n_psi: 3,
            hidden: Activation::Relu,
        };
        let tpl = register_template_field(&mut store, &mut rng, "tpl", cfg).unwrap();

        let query = |dir: [f64; 3], psi: usize| -> (Vec<f64>, f64) {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::row(&[0.3, -0.2, 0.5]));
            let d = tape.input(Tensor::row(&dir));
            let (rgb, sigma) = tpl.query(&mut tape, &store, x, d, &[psi]).unwrap();
            (
                tape.value(rgb).row_slice(0).to_vec(),
                tape.value(sigma).item(),
            )
        };

        let (rgb_a, sig_a) = query([0.0, 0.0, -1.0], 0);
        let (rgb_b, sig_b) = query([0.7, 0.1, 0.7], 0);
        assert_eq!(sig_a, sig_b, "density must be view-independent");
        assert_ne!(rgb_a, rgb_b, "color should react to direction");

        let (rgb_c, sig_c) = query([0.0, 0.0, -1.0], 2);
        assert_eq!(sig_a, sig_c, "density must ignore appearance codes");
        assert_ne!(rgb_a, rgb_c, "appearance code should modulate color");
    }

    #[test]
    fn deep_negative_sigma_bias_empties_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = TemplateConfig {
            depth: 2,
            width: 16,
            skip_at: None,
            pos_bands: 2,
            dir_bands: 1,
            psi_dim: 2,
            n_psi: 1,
            hidden: Activation::Relu,
        };
        let tpl = register_template_field(&mut store, &mut rng, "tpl", cfg).unwrap();
        let bias = store.id_of("tpl.sigma.out.b").unwrap();
        *store.value_mut(bias) = Tensor::row(&[-20.0]);
        // Zero the head weights so the bias dominates.
        let w = store.id_of("tpl.sigma.out.w").unwrap();
        let (r, c) = store.value(w).shape();
        *store.value_mut(w) = Tensor::zeros(r, c);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(&[0.1, 0.2, 0.3]));
        let d = tape.input(Tensor::row(&[0.0, 0.0, -1.0]));
        let (_, sigma) = tpl.query(&mut tape, &store, x, d, &[0]).unwrap();
        assert!(tape.value(sigma).item() < 1e-8);
    }

    #[test]
    fn bad_frame_index_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, field) = small_field(WarpKind::Translation, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(&[0.0, 0.0, 0.0]));
        let err = field.warp(&mut tape, &store, x, &[7], 4.0).unwrap_err();
        assert!(matches!(err, FieldError::BadFrame { frame: 7, frames: 3 }));
    }
}
