//! Central finite-difference oracles for every differentiable path:
//! network parameters, encodings, compositing, and both regularizers.
//!
//! The step is h = 1e-5 at f64. Comparison rule: where the gradient scale
//! max(|fd|, |ad|) exceeds 1e-6 the error must be below 1e-5 relative
//! (1e-4 for paths through singular values); smaller gradients sit at the
//! finite-difference noise floor and must agree within 1e-9 absolute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpfield_core::encoding::{encode_windowed_tape, EncodingSpec};
use warpfield_core::fields::{
    register_deformation_field, register_template_field, DeformationConfig, ObservationField,
    TemplateConfig, WarpKind,
};
use warpfield_core::nn::{
    adam_step, forward_mlp, register_mlp, AdamConfig, Activation, MlpSpec, OutputInit, ParamStore,
};
use warpfield_core::regularizers::{
    background_loss_tape, elastic_loss_tape, BackgroundConfig, ElasticConfig,
};
use warpfield_core::render::composite_tape;
use warpfield_core::tape::Tape;
use warpfield_core::tensor::Tensor;

const FD_H: f64 = 1e-5;

/// Max deviation of autodiff parameter gradients from central differences,
/// as (worst_relative, worst_small_scale_absolute). Gradients below 1e-4
/// in magnitude sit at the central-difference roundoff floor
/// (eps |L| / 2h ~ 1e-11), so they are held to an absolute bound instead.
fn param_gradient_errors(
    store: &mut ParamStore,
    build: &mut dyn FnMut(&mut Tape, &ParamStore) -> warpfield_core::NodeId,
) -> (f64, f64) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
    let adj = tape.backward(loss);
    let grads = adj.param_grads(&tape);

    let eval = |store: &ParamStore, build: &mut dyn FnMut(&mut Tape, &ParamStore) -> warpfield_core::NodeId| -> f64 {
        let mut t = Tape::new();
        let l = build(&mut t, store);
        t.value(l).item()
    };

    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for (pid, g) in &grads {
        for idx in 0..g.len() {
            let orig = store.value(*pid).data()[idx];
            store.value_mut(*pid).data_mut()[idx] = orig + FD_H;
            let lp = eval(store, build);
            store.value_mut(*pid).data_mut()[idx] = orig - FD_H;
            let lm = eval(store, build);
            store.value_mut(*pid).data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * FD_H);
            let ad = g.data()[idx];
            let scale = fd.abs().max(ad.abs());
            if scale > 1e-4 {
                let rel = (fd - ad).abs() / scale;
                if rel > worst_rel {
                    worst_rel = rel;
                    if std::env::var("FD_DEBUG").is_ok() {
                        eprintln!("worst so far: {} [{}]: fd {fd} ad {ad} rel {rel}", store.name_of(*pid), idx);
                    }
                }
            } else {
                worst_abs = worst_abs.max((fd - ad).abs());
            }
        }
    }
    (worst_rel, worst_abs)
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(lo..hi)).collect())
        .collect()
}

#[test]
fn mlp_parameter_gradients_match_fd_many_instances() {
    // >= 20 random small networks across activations and shapes.
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = if seed % 2 == 0 {
            Activation::Softplus
        } else {
            Activation::Relu
        };
        let spec = MlpSpec {
            in_dim: 3,
            depth: 3,
            width: 8,
            skip_at: Some(2),
            hidden,
            out_dim: 2,
            output: Activation::Sigmoid,
        };
        let mut store = ParamStore::new();
        let mlp = register_mlp(&mut store, &mut rng, "n", spec, OutputInit::FanIn).unwrap();
        let xs = random_rows(&mut rng, 4, 3, -1.0, 1.0);
        let target = random_rows(&mut rng, 4, 2, 0.0, 1.0);
        let mut build = |tape: &mut Tape, store: &ParamStore| {
            let x = tape.input(Tensor::from_rows(&xs));
            let y = forward_mlp(tape, store, &mlp, x);
            let t = tape.input(Tensor::from_rows(&target));
            let d = tape.sub(y, t);
            let sq = tape.square(d);
            tape.mean(sq)
        };
        let (rel, abs) = param_gradient_errors(&mut store, &mut build);
        if rel > 1e-5 || abs > 1e-9 {
            failures.push((seed, rel, abs));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn embedding_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut store = ParamStore::new();
    let table = warpfield_core::nn::register_embedding(&mut store, &mut rng, "codes", 5, 4, 0.5)
        .unwrap();
    let _ = table;
    let mut build = |tape: &mut Tape, store: &ParamStore| {
        let t = store.record(tape, store.id_of("codes").unwrap());
        let e = tape.embed(t, &[1, 3, 1]);
        let sq = tape.square(e);
        tape.sum(sq)
    };
    let (rel, abs) = param_gradient_errors(&mut store, &mut build);
    assert!(rel <= 1e-5 && abs <= 1e-9, "rel {rel}, abs {abs}");
}

#[test]
fn windowed_encoding_input_gradient_matches_fd() {
    let spec = EncodingSpec::new(3, 5);
    let xs = vec![vec![0.31, -0.42, 0.87], vec![-0.9, 0.13, 0.55]];
    for alpha in [0.0, 1.3, 2.5, 5.0] {
        // Autodiff input gradient of a scalar head applied to the encoding.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&xs));
        let e = encode_windowed_tape(&mut tape, &spec, alpha, x);
        let sq = tape.square(e);
        let loss = tape.sum(sq);
        let adj = tape.backward(loss);
        let g = adj.adjoint(x).unwrap().clone();

        let eval = |rows: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let x = t.input(Tensor::from_rows(rows));
            let e = encode_windowed_tape(&mut t, &spec, alpha, x);
            let sq = t.square(e);
            let l = t.sum(sq);
            t.value(l).item()
        };
        for r in 0..xs.len() {
            for c in 0..3 {
                let mut plus = xs.clone();
                plus[r][c] += FD_H;
                let mut minus = xs.clone();
                minus[r][c] -= FD_H;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
                let ad = g.at(r, c);
                let scale = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    (fd - ad).abs() / scale <= 1e-5,
                    "alpha {alpha}: d/dx[{r}][{c}] fd {fd} vs ad {ad}"
                );
            }
        }
    }
}

#[test]
fn photometric_loss_through_compositing_matches_fd() {
    // Densities and colors come from tiny networks so the check covers
    // params -> field -> compositing -> mse end to end.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let sig_net = register_mlp(
        &mut store,
        &mut rng,
        "sig",
        MlpSpec {
            in_dim: 3,
            depth: 2,
            width: 8,
            skip_at: None,
            hidden: Activation::Softplus,
            out_dim: 1,
            output: Activation::Softplus,
        },
        OutputInit::FanIn,
    )
    .unwrap();
    let col_net = register_mlp(
        &mut store,
        &mut rng,
        "col",
        MlpSpec {
            in_dim: 3,
            depth: 2,
            width: 8,
            skip_at: None,
            hidden: Activation::Softplus,
            out_dim: 3,
            output: Activation::Sigmoid,
        },
        OutputInit::FanIn,
    )
    .unwrap();

    let rays = 3usize;
    let k = 4usize;
    let pts = random_rows(&mut rng, rays * k, 3, -1.0, 1.0);
    let deltas_v = Tensor::full(rays, k, 0.4);
    let target = random_rows(&mut rng, rays, 3, 0.0, 1.0);

    let mut build = |tape: &mut Tape, store: &ParamStore| {
        let x = tape.input(Tensor::from_rows(&pts));
        let sigma = forward_mlp(tape, store, &sig_net, x);
        let sigma = tape.reshape(sigma, rays, k);
        let rgb = forward_mlp(tape, store, &col_net, x);
        let chans = [0, 1, 2].map(|ch| {
            let c = tape.slice_cols(rgb, ch, 1);
            tape.reshape(c, rays, k)
        });
        let deltas = tape.input(deltas_v.clone());
        let comp = composite_tape(tape, sigma, chans, deltas);
        let pred = tape.concat(&[comp.rgb[0], comp.rgb[1], comp.rgb[2]]);
        let t = tape.input(Tensor::from_rows(&target));
        let d = tape.sub(pred, t);
        let sq = tape.square(d);
        tape.mean(sq)
    };
    let (rel, abs) = param_gradient_errors(&mut store, &mut build);
    assert!(rel <= 1e-5 && abs <= 1e-9, "rel {rel}, abs {abs}");
}

#[test]
fn warp_jacobian_matches_fd_jacobian() {
    // Spatial Jacobian from the tape vs finite differences of the warp.
    for (seed, kind) in [(3u64, WarpKind::Translation), (5, WarpKind::Se3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = DeformationConfig {
            depth: 2,
            width: 8,
            skip_at: None,
            code_dim: 3,
            bands: 3,
            ..DeformationConfig::new(kind, 2)
        };
        let field = register_deformation_field(&mut store, &mut rng, "w", cfg).unwrap();
        // Perturb the head so the field is not just the identity.
        let out_w = store.id_of("w.out.w").unwrap();
        let (r, c) = store.value(out_w).shape();
        let jitter: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-0.05..0.05)).collect();
        *store.value_mut(out_w) = Tensor::new(r, c, jitter);

        let x0 = [0.31, -0.22, 0.44];
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(&x0));
        let (_, jac) = field
            .warp_with_jacobian(&mut tape, &store, x, &[1], 3.0)
            .unwrap();
        let jac_ad = tape.value(jac).row_slice(0).to_vec();

        let warp_at = |p: [f64; 3]| -> Vec<f64> {
            field.warp_points(&store, &[p], 1, 3.0).unwrap()[0].to_vec()
        };
        for col in 0..3 {
            let mut plus = x0;
            plus[col] += FD_H;
            let mut minus = x0;
            minus[col] -= FD_H;
            let wp = warp_at(plus);
            let wm = warp_at(minus);
            for row in 0..3 {
                let fd = (wp[row] - wm[row]) / (2.0 * FD_H);
                let ad = jac_ad[row * 3 + col];
                let scale = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    (fd - ad).abs() / scale <= 1e-5,
                    "{kind:?} J[{row}][{col}]: fd {fd} vs ad {ad}"
                );
            }
        }
    }
}

#[test]
fn elastic_loss_parameter_gradients_match_fd() {
    // Second-order path: d/dtheta of a loss on d(warp)/dx. The SVD bound
    // is looser (1e-4) per the conditioning of singular values.
    for seed in [11u64, 13, 17] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = DeformationConfig {
            depth: 2,
            width: 6,
            skip_at: None,
            code_dim: 2,
            bands: 2,
            hidden: Activation::Softplus,
            ..DeformationConfig::new(WarpKind::Se3, 2)
        };
        let field = register_deformation_field(&mut store, &mut rng, "w", cfg).unwrap();
        let out_w = store.id_of("w.out.w").unwrap();
        let (r, c) = store.value(out_w).shape();
        let jitter: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-0.3..0.3)).collect();
        *store.value_mut(out_w) = Tensor::new(r, c, jitter);

        let pts = random_rows(&mut rng, 2, 3, -0.8, 0.8);
        let w_v = Tensor::from_rows(&[vec![0.6, 0.4]]);
        let ecfg = ElasticConfig::default();
        let mut build = |tape: &mut Tape, store: &ParamStore| {
            let x = tape.input(Tensor::from_rows(&pts));
            let (_, jac) = field
                .warp_with_jacobian(tape, store, x, &[0, 1], 2.0)
                .unwrap();
            let w = tape.input(w_v.clone());
            elastic_loss_tape(tape, jac, 3, w, &ecfg).loss
        };
        let (rel, abs) = param_gradient_errors(&mut store, &mut build);
        assert!(rel <= 1e-4 && abs <= 1e-8, "seed {seed}: rel {rel}, abs {abs}");
    }
}

#[test]
fn background_loss_parameter_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let cfg = DeformationConfig {
        depth: 2,
        width: 8,
        skip_at: None,
        code_dim: 2,
        bands: 2,
        hidden: Activation::Softplus, // smooth, so the FD oracle is valid everywhere
        ..DeformationConfig::new(WarpKind::Translation, 2)
    };
    let field = register_deformation_field(&mut store, &mut rng, "w", cfg).unwrap();
    let out_w = store.id_of("w.out.w").unwrap();
    let (r, c) = store.value(out_w).shape();
    let jitter: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-0.2..0.2)).collect();
    *store.value_mut(out_w) = Tensor::new(r, c, jitter);

    let points: Vec<[f64; 3]> = (0..6)
        .map(|i| {
            let t = i as f64 / 5.0;
            [t - 0.5, (t * 7.0).sin() * 0.4, 0.3]
        })
        .collect();
    let bcfg = BackgroundConfig {
        subsample: 6,
        jitter_sigma: 0.0, // deterministic build for the FD loop
        ..BackgroundConfig::default()
    };
    let frames = [0usize, 1];
    let mut build = |tape: &mut Tape, store: &ParamStore| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        background_loss_tape(tape, store, &field, &points, &frames, 2.0, &bcfg, &mut rng)
            .unwrap()
            .loss
    };
    let (rel, abs) = param_gradient_errors(&mut store, &mut build);
    assert!(rel <= 1e-5 && abs <= 1e-9, "rel {rel}, abs {abs}");
}

#[test]
fn observation_query_gradients_match_fd_on_single_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let def = register_deformation_field(
        &mut store,
        &mut rng,
        "warp",
        DeformationConfig {
            depth: 2,
            width: 6,
            skip_at: None,
            code_dim: 2,
            bands: 2,
            hidden: Activation::Softplus,
            ..DeformationConfig::new(WarpKind::Se3, 2)
        },
    )
    .unwrap();
    let tpl = register_template_field(
        &mut store,
        &mut rng,
        "tpl",
        TemplateConfig {
            depth: 2,
            width: 8,
            skip_at: None,
            pos_bands: 2,
            dir_bands: 1,
            psi_dim: 2,
            n_psi: 2,
            hidden: Activation::Softplus,
        },
    )
    .unwrap();
    let obs = ObservationField {
        deformation: Some(def),
        template: tpl,
    };
    let mut build = |tape: &mut Tape, store: &ParamStore| {
        let x = tape.input(Tensor::row(&[0.2, -0.1, 0.4]));
        let d = tape.input(Tensor::row(&[0.0, 0.0, -1.0]));
        let s = obs
            .query(tape, store, x, d, &[1], &[0], 1.5, false)
            .unwrap();
        let sq = tape.square(s.rgb);
        let c = tape.sum(sq);
        let sg = tape.sum(s.sigma);
        tape.add(c, sg)
    };
    let (rel, abs) = param_gradient_errors(&mut store, &mut build);
    assert!(rel <= 1e-5 && abs <= 1e-9, "rel {rel}, abs {abs}");
}

#[test]
fn determinism_forward_backward_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut store = ParamStore::new();
    let spec = MlpSpec {
        in_dim: 4,
        depth: 3,
        width: 32,
        skip_at: Some(1),
        hidden: Activation::Relu,
        out_dim: 2,
        output: Activation::None,
    };
    let mlp = register_mlp(&mut store, &mut rng, "n", spec, OutputInit::FanIn).unwrap();
    let xs = random_rows(&mut rng, 64, 4, -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&xs));
        let y = forward_mlp(&mut tape, &store, &mlp, x);
        let sq = tape.square(y);
        let l = tape.mean(sq);
        let adj = tape.backward(l);
        let mut out = vec![tape.value(l).item()];
        for (_, g) in adj.param_grads(&tape) {
            out.extend_from_slice(g.data());
        }
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "identical inputs must give bit-identical results");
}

#[test]
fn adam_trains_a_tiny_regression_to_convergence() {
    // Sanity: the optimizer plus tape learn y = 2x - 1 quickly.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let spec = MlpSpec {
        in_dim: 1,
        depth: 2,
        width: 8,
        skip_at: None,
        hidden: Activation::Softplus,
        out_dim: 1,
        output: Activation::None,
    };
    let mlp = register_mlp(&mut store, &mut rng, "f", spec, OutputInit::FanIn).unwrap();
    let xs: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64 / 8.0 - 1.0]).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![2.0 * x[0] - 1.0]).collect();
    let mut last = f64::INFINITY;
    for _ in 0..400 {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&xs));
        let y = forward_mlp(&mut tape, &store, &mlp, x);
        let t = tape.input(Tensor::from_rows(&ys));
        let d = tape.sub(y, t);
        let sq = tape.square(d);
        let l = tape.mean(sq);
        last = tape.value(l).item();
        let adj = tape.backward(l);
        let grads = adj.param_grads(&tape);
        adam_step(&mut store, &grads, 5e-3, &AdamConfig::default()).unwrap();
    }
    assert!(last < 1e-3, "final loss {last}");
}
