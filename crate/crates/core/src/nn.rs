//! Parameter storage, MLP forward passes, the Adam optimizer, and the
//! binary checkpoint container.

use crate::tape::{NodeId, ParamId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("parameter '{0}' already registered")]
    DuplicateParam(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("gradient for '{name}' is not finite; step rejected")]
    NonFiniteGradient { name: String },
    #[error("gradient shape mismatch for '{name}'")]
    GradientShape { name: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Softplus,
    Sigmoid,
}

/// MLP shape: `depth` hidden layers of `width` units, an optional skip that
/// re-concatenates the input before the given hidden layer, and a linear
/// output head with its own activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub skip_at: Option<usize>,
    pub hidden: Activation,
    pub out_dim: usize,
    pub output: Activation,
}

impl MlpSpec {
    pub fn validate(&self) {
        assert!(self.width > 0, "width must be positive");
        assert!(self.depth > 0, "depth must be positive");
        if let Some(s) = self.skip_at {
            assert!(s > 0 && s < self.depth, "skip_at must lie in 1..depth");
        }
    }
}

/// How to initialize the output layer weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputInit {
    /// Fan-in scaled uniform, same as hidden layers.
    FanIn,
    /// U(-eps, eps); used to start deformation fields at the identity.
    Uniform(f64),
}

struct ParamEntry {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameter tensors plus Adam moment buffers and the step counter.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId, NnError> {
        if self.by_name.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let (r, c) = value.shape();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            value,
        });
        let id = ParamId(self.entries.len() - 1);
        self.by_name.insert(name.to_string(), id.0);
        Ok(id)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Records the parameter on a tape as a differentiable leaf.
    pub fn record(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.param(id, self.entries[id.0].value.clone())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Standard normal draw via Box-Muller.
pub fn sample_gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fan-in scaled uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn fan_in_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(rows, cols, data)
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, eps: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-eps..eps)).collect();
    Tensor::new(rows, cols, data)
}

/// Parameter handles of a registered MLP.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

/// Registers and initializes all layers of an MLP under `prefix`.
pub fn register_mlp(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    spec: MlpSpec,
    out_init: OutputInit,
) -> Result<MlpParams, NnError> {
    spec.validate();
    let mut layers = Vec::with_capacity(spec.depth);
    let mut in_dim = spec.in_dim;
    for i in 0..spec.depth {
        if spec.skip_at == Some(i) {
            in_dim += spec.in_dim;
        }
        let w = store.register(
            &format!("{prefix}.l{i}.w"),
            fan_in_uniform(rng, in_dim, spec.width),
        )?;
        let b = store.register(&format!("{prefix}.l{i}.b"), Tensor::zeros(1, spec.width))?;
        layers.push((w, b));
        in_dim = spec.width;
    }
    let w_out = match out_init {
        OutputInit::FanIn => fan_in_uniform(rng, spec.width, spec.out_dim),
        OutputInit::Uniform(eps) => uniform(rng, spec.width, spec.out_dim, eps),
    };
    let out = (
        store.register(&format!("{prefix}.out.w"), w_out)?,
        store.register(&format!("{prefix}.out.b"), Tensor::zeros(1, spec.out_dim))?,
    );
    Ok(MlpParams { spec, layers, out })
}

fn apply_activation(tape: &mut Tape, act: Activation, x: NodeId) -> NodeId {
    match act {
        Activation::None => x,
        Activation::Relu => tape.relu(x),
        Activation::Softplus => tape.softplus(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// Forward pass of an MLP over a batch (n x in_dim) node. All primitives
/// are recorded on the tape for the backward pass.
pub fn forward_mlp(tape: &mut Tape, store: &ParamStore, mlp: &MlpParams, input: NodeId) -> NodeId {
    let (_, in_cols) = tape.value(input).shape();
    assert_eq!(
        in_cols, mlp.spec.in_dim,
        "forward_mlp: input dim {} does not match spec {}",
        in_cols, mlp.spec.in_dim
    );
    let mut h = input;
    for (i, &(w, b)) in mlp.layers.iter().enumerate() {
        if mlp.spec.skip_at == Some(i) {
            h = tape.concat(&[h, input]);
        }
        let wn = store.record(tape, w);
        let bn = store.record(tape, b);
        let z = tape.matmul(h, wn);
        let z = tape.add_row(z, bn);
        h = apply_activation(tape, mlp.spec.hidden, z);
    }
    let wn = store.record(tape, mlp.out.0);
    let bn = store.record(tape, mlp.out.1);
    let z = tape.matmul(h, wn);
    let z = tape.add_row(z, bn);
    apply_activation(tape, mlp.spec.output, z)
}

/// Registers an embedding table of `rows` codes of dimension `dim`,
/// initialized from N(0, sigma^2) (small but non-degenerate so frames are
/// distinguishable from the first step).
pub fn register_embedding(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    rows: usize,
    dim: usize,
    sigma: f64,
) -> Result<ParamId, NnError> {
    let data = (0..rows * dim).map(|_| sigma * sample_gaussian(rng)).collect();
    store.register(name, Tensor::new(rows, dim, data))
}

// ---- Adam ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Exponential decay to `final_factor` x initial at `max_steps`:
/// lr(t) = initial * final_factor^(t / max_steps).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_factor: f64,
    pub max_steps: u64,
}

impl LrSchedule {
    pub fn new(initial: f64, max_steps: u64) -> Self {
        LrSchedule {
            initial,
            final_factor: 0.1,
            max_steps,
        }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        if self.max_steps == 0 {
            return self.initial;
        }
        let frac = (t.min(self.max_steps)) as f64 / self.max_steps as f64;
        self.initial * self.final_factor.powf(frac)
    }
}

/// One Adam update over the given gradients. Parameters without a gradient
/// entry decay their moments as if the gradient were zero. Any non-finite
/// gradient rejects the whole step before mutating anything.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    let mut dense: Vec<Option<&Tensor>> = vec![None; store.entries.len()];
    for (id, g) in grads {
        let entry = &store.entries[id.0];
        if !g.same_shape(&entry.value) {
            return Err(NnError::GradientShape {
                name: entry.name.clone(),
            });
        }
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient {
                name: entry.name.clone(),
            });
        }
        dense[id.0] = Some(g);
    }

    let t = store.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, entry) in store.entries.iter_mut().enumerate() {
        let zero;
        let g = match dense[i] {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(entry.value.rows(), entry.value.cols());
                &zero
            }
        };
        let m = entry.m.data_mut();
        let v = entry.v.data_mut();
        let p = entry.value.data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    store.step = t;
    Ok(())
}

// ---- checkpoint container ----

const CKPT_MAGIC: &[u8; 8] = b"WFCKPT1\0";

/// Writes parameters, Adam moments, and the step counter. The write is
/// atomic: a temp file is renamed into place.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), NnError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&store.step.to_le_bytes());
    buf.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for e in &store.entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let (r, c) = e.value.shape();
        buf.extend_from_slice(&(r as u64).to_le_bytes());
        buf.extend_from_slice(&(c as u64).to_le_bytes());
        for t in [&e.value, &e.m, &e.v] {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NnError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *pos + n > bytes.len() {
            return Err(NnError::BadCheckpoint("truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(NnError::BadCheckpoint("bad magic".into()));
    }
    let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| NnError::BadCheckpoint("non-utf8 name".into()))?;
        let r = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let c = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(3);
        for _ in 0..3 {
            let raw = take(&mut pos, r * c * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(r, c, data));
        }
        let v = tensors.pop().unwrap();
        let m = tensors.pop().unwrap();
        let value = tensors.pop().unwrap();
        let id = store.register(&name, value)?;
        store.entries[id.0].m = m;
        store.entries[id.0].v = v;
    }
    store.step = step;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_net_broadcasts_bias() {
        let mut store = ParamStore::new();
        let spec = MlpSpec {
            in_dim: 2,
            depth: 1,
            width: 3,
            skip_at: None,
            hidden: Activation::None,
            out_dim: 2,
            output: Activation::None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = register_mlp(&mut store, &mut rng, "t", spec, OutputInit::FanIn).unwrap();
        for id in store.param_ids() {
            if store.name_of(id).ends_with(".w") {
                let (r, c) = store.value(id).shape();
                *store.value_mut(id) = Tensor::zeros(r, c);
            }
        }
        let bias = store.id_of("t.out.b").unwrap();
        *store.value_mut(bias) = Tensor::row(&[0.5, -1.5]);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[vec![3.0, 4.0], vec![-1.0, 2.0]]));
        let y = forward_mlp(&mut tape, &store, &mlp, x);
        assert_eq!(tape.value(y).row_slice(0), &[0.5, -1.5]);
        assert_eq!(tape.value(y).row_slice(1), &[0.5, -1.5]);
    }

    #[test]
    fn identity_linear_net_passes_input_through() {
        let mut store = ParamStore::new();
        let spec = MlpSpec {
            in_dim: 2,
            depth: 1,
            width: 2,
            skip_at: None,
            hidden: Activation::None,
            out_dim: 2,
            output: Activation::None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = register_mlp(&mut store, &mut rng, "id", spec, OutputInit::FanIn).unwrap();
        let eye2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        *store.value_mut(store.id_of("id.l0.w").unwrap()) = eye2.clone();
        *store.value_mut(store.id_of("id.out.w").unwrap()) = eye2;

        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(&[0.25, -4.0]));
        let y = forward_mlp(&mut tape, &store, &mlp, x);
        assert_eq!(tape.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn two_layer_relu_matches_hand_rolled_oracle() {
        let mut store = ParamStore::new();
        let spec = MlpSpec {
            in_dim: 3,
            depth: 2,
            width: 4,
            skip_at: None,
            hidden: Activation::Relu,
            out_dim: 2,
            output: Activation::None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = register_mlp(&mut store, &mut rng, "n", spec, OutputInit::FanIn).unwrap();
        let x = [0.3, -1.2, 0.8];

        // Independent dense evaluation of the same weights.
        let get = |name: &str| store.value(store.id_of(name).unwrap()).clone();
        let dense = |w: &Tensor, b: &Tensor, x: &[f64], relu: bool| -> Vec<f64> {
            let mut out = vec![0.0; w.cols()];
            for (j, o) in out.iter_mut().enumerate() {
                let mut s = b.data()[j];
                for (i, xi) in x.iter().enumerate() {
                    s += xi * w.at(i, j);
                }
                *o = if relu { s.max(0.0) } else { s };
            }
            out
        };
        let h0 = dense(&get("n.l0.w"), &get("n.l0.b"), &x, true);
        let h1 = dense(&get("n.l1.w"), &get("n.l1.b"), &h0, true);
        let expect = dense(&get("n.out.w"), &get("n.out.b"), &h1, false);

        let mut tape = Tape::new();
        let xin = tape.input(Tensor::row(&x));
        let y = forward_mlp(&mut tape, &store, &mlp, xin);
        for (a, b) in tape.value(y).data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_with_unit_gradient() {
        let mut store = ParamStore::new();
        let p = store.register("w", Tensor::scalar(1.0)).unwrap();
        adam_step(
            &mut store,
            &[(p, Tensor::scalar(1.0))],
            0.1,
            &AdamConfig::default(),
        )
        .unwrap();
        // Bias-corrected first step moves by ~lr.
        let got = store.value(p).item();
        assert!((got - 0.9).abs() < 1e-6, "got {got}");
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_fixed() {
        let mut store = ParamStore::new();
        let p = store.register("w", Tensor::scalar(2.5)).unwrap();
        adam_step(
            &mut store,
            &[(p, Tensor::scalar(0.0))],
            0.1,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(store.value(p).item(), 2.5);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let p = store.register("w", Tensor::scalar(1.0)).unwrap();
        let err = adam_step(
            &mut store,
            &[(p, Tensor::scalar(f64::NAN))],
            0.1,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { .. }));
        assert!(err.to_string().contains('w'));
        assert_eq!(store.value(p).item(), 1.0);
        assert_eq!(store.step(), 0);
    }

    #[test]
    fn lr_decays_to_tenth_at_max_steps() {
        let sched = LrSchedule::new(1e-3, 1000);
        assert_eq!(sched.lr_at(0), 1e-3);
        assert!((sched.lr_at(1000) - 1e-4).abs() < 1e-18);
        assert!((sched.lr_at(500) - 1e-3 * 0.1f64.powf(0.5)).abs() < 1e-18);
        assert_eq!(sched.lr_at(2000), sched.lr_at(1000));
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = std::env::temp_dir().join(format!("wf-ckpt-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.wfckpt");

        let mut store = ParamStore::new();
        let a = store
            .register("layer.w", Tensor::from_rows(&[vec![1.5, -2.5], vec![0.0, 3.25]]))
            .unwrap();
        store.register("layer.b", Tensor::row(&[0.125])).unwrap();
        adam_step(
            &mut store,
            &[(a, Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.5, 2.0]]))],
            0.01,
            &AdamConfig::default(),
        )
        .unwrap();

        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step(), store.step());
        assert_eq!(loaded.len(), store.len());
        for id in store.param_ids() {
            assert_eq!(loaded.name_of(id), store.name_of(id));
            assert_eq!(loaded.value(id), store.value(id));
            assert_eq!(loaded.entries[id.0].m, store.entries[id.0].m);
            assert_eq!(loaded.entries[id.0].v, store.entries[id.0].v);
        }
        fs::remove_dir_all(&dir).ok();
    }
}
