//! Finite-difference verification of every differentiable operation and of
//! the full encoder + contrastive-loss composition.
//!
//! The oracle is central differences in shadow (f64) precision, h = 1e-3,
//! evaluated by re-running the forward pass only; it never touches the
//! reverse sweep it checks. Coordinates with |gradient| <= 1e-6 are skipped,
//! everything else must agree within relative error 1e-3.

use cpd_core::contrastive::info_nce_graph;
use cpd_core::encoder::{encode_pair_graph, init, EncoderConfig, EncoderParams};
use cpd_core::graph::{Graph, Mode};
use cpd_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-6;

/// Forward-only loss evaluation as a function of a flat input vector.
type LossFn<'a> = dyn Fn(&[f64]) -> f64 + 'a;

fn central_difference(f: &LossFn, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Compare an analytic gradient against the finite-difference oracle on the
/// given coordinates.
fn assert_grads_match(name: &str, f: &LossFn, x: &[f64], analytic: &[f64], coords: &[usize]) {
    assert_grads_match_h(name, f, x, analytic, coords, H)
}

fn assert_grads_match_h(
    name: &str,
    f: &LossFn,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) {
    let mut checked = 0usize;
    for &i in coords {
        let ad = analytic[i];
        let fd = central_difference(f, x, i, h);
        if ad.abs() <= GRAD_FLOOR && fd.abs() <= GRAD_FLOOR {
            continue;
        }
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs());
        assert!(
            rel < REL_TOL,
            "{name}: coordinate {i}: analytic {ad:.9}, finite-diff {fd:.9}, rel err {rel:.2e}"
        );
        checked += 1;
    }
    assert!(checked > 0, "{name}: no coordinate exceeded the gradient floor");
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() - 0.5) * 2.0 * scale).collect()
}

fn all_coords(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    let (batch, tlen, cin, k, cout, dilation) = (2usize, 7usize, 3usize, 3usize, 4usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let nx = batch * tlen * cin;
    let nw = k * cin * cout;
    let nb = cout;
    let mut x0 = rand_vec(&mut rng, nx + nw + nb, 1.0);

    let loss = |flat: &[f64]| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![batch, tlen, cin], flat[..nx].to_vec()).unwrap());
        let w = g.leaf(Tensor::new(vec![k, cin, cout], flat[nx..nx + nw].to_vec()).unwrap());
        let b = g.leaf(Tensor::new(vec![cout], flat[nx + nw..].to_vec()).unwrap());
        let y = g.conv1d(x, w, b, dilation).unwrap();
        let l = g.sum(y);
        g.value(l).item()
    };

    // analytic gradients via one tracked forward/backward
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::new(vec![batch, tlen, cin], x0[..nx].to_vec())
            .unwrap()
            .with_requires_grad(true),
    );
    let w = g.leaf(
        Tensor::new(vec![k, cin, cout], x0[nx..nx + nw].to_vec())
            .unwrap()
            .with_requires_grad(true),
    );
    let b = g.leaf(
        Tensor::new(vec![cout], x0[nx + nw..].to_vec())
            .unwrap()
            .with_requires_grad(true),
    );
    let y = g.conv1d(x, w, b, dilation).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    let mut analytic = Vec::new();
    analytic.extend_from_slice(g.gradient(x).unwrap());
    analytic.extend_from_slice(g.gradient(w).unwrap());
    analytic.extend_from_slice(g.gradient(b).unwrap());

    assert_grads_match(
        "conv1d(sum)",
        &loss,
        &mut x0,
        &analytic,
        &all_coords(nx + nw + nb),
    );
}

#[test]
fn relu_gradient_matches_finite_differences() {
    // keep sample points away from the kink at 0
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0: Vec<f64> = (0..40)
        .map(|_| {
            let v: f64 = (rng.random::<f64>() - 0.5) * 4.0;
            if v.abs() < 1e-2 {
                v + 0.5
            } else {
                v
            }
        })
        .collect();
    let weights = rand_vec(&mut rng, 40, 1.0);

    let loss = |flat: &[f64]| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![40], flat.to_vec()).unwrap());
        let wt = g.leaf(Tensor::new(vec![40], weights.clone()).unwrap());
        let y = g.relu(x);
        let yw = g.mul(y, wt).unwrap();
        let l = g.sum(yw);
        g.value(l).item()
    };

    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::new(vec![40], x0.clone())
            .unwrap()
            .with_requires_grad(true),
    );
    let wt = g.leaf(Tensor::new(vec![40], weights.clone()).unwrap());
    let y = g.relu(x);
    let yw = g.mul(y, wt).unwrap();
    let l = g.sum(yw);
    g.backward(l).unwrap();
    let analytic = g.gradient(x).unwrap().to_vec();

    assert_grads_match("relu(weighted sum)", &loss, &x0, &analytic, &all_coords(40));
}

#[test]
fn dense_gradient_matches_finite_differences() {
    let (batch, fin, fout) = (3usize, 4usize, 5usize);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let nx = batch * fin;
    let nw = fin * fout;
    let nb = fout;
    let x0 = [
        rand_vec(&mut rng, nx, 1.0),
        rand_vec(&mut rng, nw, 1.0),
        rand_vec(&mut rng, nb, 1.0),
    ]
    .concat();
    let mix = rand_vec(&mut rng, batch * fout, 1.0);

    let run = |flat: &[f64], track: bool| {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![batch, fin], flat[..nx].to_vec())
                .unwrap()
                .with_requires_grad(track),
        );
        let w = g.leaf(
            Tensor::new(vec![fin, fout], flat[nx..nx + nw].to_vec())
                .unwrap()
                .with_requires_grad(track),
        );
        let b = g.leaf(
            Tensor::new(vec![fout], flat[nx + nw..].to_vec())
                .unwrap()
                .with_requires_grad(track),
        );
        let y = g.dense(x, w, b).unwrap();
        let m = g.leaf(Tensor::new(vec![batch, fout], mix.clone()).unwrap());
        let ym = g.mul(y, m).unwrap();
        let l = g.sum(ym);
        (g, x, w, b, l)
    };
    let loss = |flat: &[f64]| -> f64 {
        let (g, _, _, _, l) = run(flat, false);
        g.value(l).item()
    };

    let (mut g, x, w, b, l) = run(&x0, true);
    g.backward(l).unwrap();
    let analytic = [
        g.gradient(x).unwrap().to_vec(),
        g.gradient(w).unwrap().to_vec(),
        g.gradient(b).unwrap().to_vec(),
    ]
    .concat();

    assert_grads_match(
        "dense(weighted sum)",
        &loss,
        &x0,
        &analytic,
        &all_coords(nx + nw + nb),
    );
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for mode in [Mode::Train, Mode::Eval] {
        let (batch, feat) = (6usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let nx = batch * feat;
        let x0 = [
            rand_vec(&mut rng, nx, 1.5),
            rand_vec(&mut rng, feat, 0.5)
                .iter()
                .map(|v| v + 1.0)
                .collect(), // gamma near 1
            rand_vec(&mut rng, feat, 0.5),
        ]
        .concat();
        let mix = rand_vec(&mut rng, nx, 1.0);
        let running_mean = rand_vec(&mut rng, feat, 0.3);
        let running_var: Vec<f64> = rand_vec(&mut rng, feat, 0.2).iter().map(|v| v + 1.0).collect();

        let run = |flat: &[f64], track: bool| {
            let mut g = Graph::new();
            let x = g.leaf(
                Tensor::new(vec![batch, feat], flat[..nx].to_vec())
                    .unwrap()
                    .with_requires_grad(track),
            );
            let gamma = g.leaf(
                Tensor::new(vec![feat], flat[nx..nx + feat].to_vec())
                    .unwrap()
                    .with_requires_grad(track),
            );
            let beta = g.leaf(
                Tensor::new(vec![feat], flat[nx + feat..].to_vec())
                    .unwrap()
                    .with_requires_grad(track),
            );
            let running = match mode {
                Mode::Train => None,
                Mode::Eval => Some((running_mean.as_slice(), running_var.as_slice())),
            };
            let (y, _) = g.batch_norm(x, gamma, beta, 1e-3, mode, running).unwrap();
            let m = g.leaf(Tensor::new(vec![batch, feat], mix.clone()).unwrap());
            let ym = g.mul(y, m).unwrap();
            let l = g.sum(ym);
            (g, x, gamma, beta, l)
        };
        let loss = |flat: &[f64]| -> f64 {
            let (g, _, _, _, l) = run(flat, false);
            g.value(l).item()
        };

        let (mut g, x, gamma, beta, l) = run(&x0, true);
        g.backward(l).unwrap();
        let analytic = [
            g.gradient(x).unwrap().to_vec(),
            g.gradient(gamma).unwrap().to_vec(),
            g.gradient(beta).unwrap().to_vec(),
        ]
        .concat();

        assert_grads_match(
            &format!("batch_norm({mode:?})"),
            &loss,
            &x0,
            &analytic,
            &all_coords(nx + 2 * feat),
        );
    }
}

#[test]
fn cosine_matrix_gradient_matches_finite_differences() {
    let (k, c) = (3usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = k * c;
    let x0 = [rand_vec(&mut rng, n, 1.0), rand_vec(&mut rng, n, 1.0)].concat();
    let mix = rand_vec(&mut rng, k * k, 1.0);

    let run = |flat: &[f64], track: bool| {
        let mut g = Graph::new();
        let h = g.leaf(
            Tensor::new(vec![k, c], flat[..n].to_vec())
                .unwrap()
                .with_requires_grad(track),
        );
        let f = g.leaf(
            Tensor::new(vec![k, c], flat[n..].to_vec())
                .unwrap()
                .with_requires_grad(track),
        );
        let sim = g.cosine_matrix(h, f).unwrap();
        let m = g.leaf(Tensor::new(vec![k, k], mix.clone()).unwrap());
        let sm = g.mul(sim, m).unwrap();
        let l = g.sum(sm);
        (g, h, f, l)
    };
    let loss = |flat: &[f64]| -> f64 {
        let (g, _, _, l) = run(flat, false);
        g.value(l).item()
    };

    let (mut g, h, f, l) = run(&x0, true);
    g.backward(l).unwrap();
    let analytic = [
        g.gradient(h).unwrap().to_vec(),
        g.gradient(f).unwrap().to_vec(),
    ]
    .concat();

    assert_grads_match(
        "cosine_matrix(weighted sum)",
        &loss,
        &x0,
        &analytic,
        &all_coords(2 * n),
    );
}

#[test]
fn info_nce_gradient_matches_finite_differences() {
    let (k, c) = (4usize, 5usize);
    let tau = 0.3f64;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let n = k * c;
    let x0 = [rand_vec(&mut rng, n, 1.0), rand_vec(&mut rng, n, 1.0)].concat();

    let run = |flat: &[f64], track: bool| {
        let mut g = Graph::new();
        let h = g.leaf(
            Tensor::new(vec![k, c], flat[..n].to_vec())
                .unwrap()
                .with_requires_grad(track),
        );
        let f = g.leaf(
            Tensor::new(vec![k, c], flat[n..].to_vec())
                .unwrap()
                .with_requires_grad(track),
        );
        let (l, _) = info_nce_graph(&mut g, h, f, tau).unwrap();
        (g, h, f, l)
    };
    let loss = |flat: &[f64]| -> f64 {
        let (g, _, _, l) = run(flat, false);
        g.value(l).item()
    };

    let (mut g, h, f, l) = run(&x0, true);
    g.backward(l).unwrap();
    let analytic = [
        g.gradient(h).unwrap().to_vec(),
        g.gradient(f).unwrap().to_vec(),
    ]
    .concat();

    assert_grads_match("info_nce", &loss, &x0, &analytic, &all_coords(2 * n));
}

fn flatten_params(params: &EncoderParams<f64>) -> Vec<f64> {
    let mut flat = Vec::new();
    for t in params.trainable() {
        flat.extend_from_slice(t.data());
    }
    flat
}

fn unflatten_params(template: &EncoderParams<f64>, flat: &[f64]) -> EncoderParams<f64> {
    let mut params = template.clone();
    let mut offset = 0usize;
    for t in params.trainable_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len());
    params
}

/// End-to-end: encoder (train mode, shared head) + contrastive loss, checked
/// on a random sample of parameter coordinates.
#[test]
fn full_encoder_loss_gradient_matches_finite_differences() {
    let cfg = EncoderConfig {
        window_len: 12,
        channels: 2,
        filters: 5,
        kernel: 3,
        dilations: vec![1, 2],
        stacks: 2,
        head_widths: [7, 6],
        code_size: 4,
        bn_momentum: 0.99,
        bn_epsilon: 1e-3,
        separate_heads: false,
    };
    let pairs = 3usize;
    let template = init::<f64>(&cfg, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let windows = rand_vec(&mut rng, 2 * pairs * cfg.window_len * cfg.channels, 1.0);
    let tau = 0.2f64;

    let forward = |params: &EncoderParams<f64>, track: bool| {
        let mut g = Graph::new();
        let nodes = params.insert_leaves(&mut g, track);
        let input = g.leaf(
            Tensor::new(vec![2 * pairs, cfg.window_len, cfg.channels], windows.clone()).unwrap(),
        );
        let enc = encode_pair_graph(&mut g, &cfg, &nodes, input, pairs, Mode::Train).unwrap();
        let (l, _) = info_nce_graph(&mut g, enc.history, enc.future, tau).unwrap();
        (g, nodes, l)
    };

    let x0 = flatten_params(&template);
    let loss = |flat: &[f64]| -> f64 {
        let params = unflatten_params(&template, flat);
        let (g, _, l) = forward(&params, false);
        g.value(l).item()
    };

    let (mut g, nodes, l) = forward(&template, true);
    g.backward(l).unwrap();
    let analytic: Vec<f64> = template
        .collect_gradients(&g, &nodes)
        .into_iter()
        .flatten()
        .collect();
    assert_eq!(analytic.len(), x0.len());

    // at least 20 randomly selected parameters, plus the first/last coords
    let mut coords: Vec<usize> = (0..30).map(|_| rng.random_range(0..x0.len())).collect();
    coords.push(0);
    coords.push(x0.len() - 1);
    coords.sort_unstable();
    coords.dedup();
    assert!(coords.len() >= 20);

    // deep composition: a 1e-3 stencil can straddle a ReLU kink, so the
    // oracle steps smaller here
    assert_grads_match_h("encoder+info_nce", &loss, &x0, &analytic, &coords, 1e-4);
}
