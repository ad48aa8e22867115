use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::*;
use super::*;
use crate::loss::{combined_loss, LossConfig};
use crate::tensor::{gradcheck_many, Tensor, DEFAULT_EPS};

fn tiny(disable: &[Component]) -> ModelConfig {
    ModelConfig {
        window: 16,
        channels: 3,
        d_model: 8,
        heads: 2,
        experts: 2,
        classes: 4,
        dropout: 0.0,
        conv_blocks: 1,
        kernel: 3,
        disable: Disabled::of(disable),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn frames(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Frame {
            data: (0..cfg.window * cfg.channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
            window: cfg.window,
            channels: cfg.channels,
            label: i % cfg.classes,
            chrono_index: i,
            session_id: "s".into(),
            start: i,
        })
        .collect()
}

fn run(cfg: &ModelConfig, frames: &[Frame]) -> (Tape, ForwardTrace) {
    let (model, store) = Model::new(cfg.clone(), 7).unwrap();
    let refs: Vec<&Frame> = frames.iter().collect();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = model.forward(&mut tape, &store, &refs, false, &mut rng).unwrap();
    (tape, trace)
}

fn rows_sum_to_one(values: &[f64], cols: usize) {
    for row in values.chunks(cols) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&w| w >= 0.0));
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

#[test]
fn trace_shapes() {
    let cfg = tiny(&[]);
    let f = frames(5, &cfg, 1);
    let (tape, tr) = run(&cfg, &f);
    assert_eq!(tape.shape(tr.features), &[5, 16, 8]);
    assert_eq!(tape.shape(tr.x_bar), &[5, 8]);
    assert_eq!(tape.shape(tr.intra_weights.unwrap()), &[5, 16]);
    assert_eq!(tape.shape(tr.inter_weights.unwrap()), &[5, 5]);
    assert_eq!(tape.shape(tr.a_mul), &[5, 8]);
    assert_eq!(tr.head_weights.len(), 2);
    assert_eq!(tape.shape(tr.moe_weights.unwrap()), &[5, 2]);
    assert_eq!(tape.shape(tr.logits), &[5, 4]);
}

#[test]
fn attention_weights_are_distributions() {
    let cfg = tiny(&[]);
    let f = frames(6, &cfg, 2);
    let (tape, tr) = run(&cfg, &f);
    rows_sum_to_one(tape.value(tr.intra_weights.unwrap()), 16);
    rows_sum_to_one(tape.value(tr.inter_weights.unwrap()), 6);
    for w in &tr.head_weights {
        rows_sum_to_one(tape.value(*w), 6);
    }
    rows_sum_to_one(tape.value(tr.moe_weights.unwrap()), 2);
    assert!(tape.value(tr.gate.unwrap()).iter().all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding(3, 4);
    assert_eq!(pe.at(&[0, 0]), 0.0);
    assert_eq!(pe.at(&[0, 1]), 1.0);
    assert!((pe.at(&[1, 0]) - 0.841471).abs() < 1e-6);
    assert!((pe.at(&[1, 1]) - 0.540302).abs() < 1e-6);
    assert!((pe.at(&[1, 2]) - 0.01f64.sin()).abs() < 1e-12);
}

#[test]
fn single_timestep_intra_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let h = tape.leaf(&random(&[3, 1, 4], &mut rng));
    let p = IntraVars {
        w1: tape.leaf(&random(&[4, 2], &mut rng)),
        b1: tape.leaf(&random(&[2], &mut rng)),
        w2: tape.leaf(&random(&[2, 1], &mut rng)),
        b2: tape.leaf(&random(&[1], &mut rng)),
    };
    let (pooled, w) = intra_frame_attention(&mut tape, h, &p).unwrap();
    assert!(tape.value(w).iter().all(|&v| v == 1.0));
    assert_eq!(tape.value(pooled), tape.value(h));
}

#[test]
fn inter_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, d) = (5, 4);
    let x = random(&[b, d], &mut rng);
    let ws: Vec<Tensor> = (0..3).map(|_| random(&[d, d], &mut rng)).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let p = InterVars {
        wq: tape.leaf(&ws[0]),
        wk: tape.leaf(&ws[1]),
        wv: tape.leaf(&ws[2]),
    };
    let (out, _) = inter_frame_attention(&mut tape, xv, &p).unwrap();

    let q = matmul(x.data(), ws[0].data(), b, d, d);
    let k = matmul(x.data(), ws[1].data(), b, d, d);
    let v = matmul(x.data(), ws[2].data(), b, d, d);
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            s[i * b + j] = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt();
        }
    }
    softmax_rows(&mut s, b);
    close(tape.value(out), &matmul(&s, &v, b, b, d), 1e-12);
}

#[test]
fn zero_alpha_gives_exact_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
    let alpha = tape.leaf(&Tensor::scalar(0.0));
    let c = combine_attention(&mut tape, av, bv, alpha).unwrap();
    let mean: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect();
    assert_eq!(tape.value(c), &mean[..]);
}

#[test]
fn saturated_gate_selects_one_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, x) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
    for (g, expect) in [(0.0, &x), (1.0, &a)] {
        let mut tape = Tape::new();
        let gv = tape.leaf(&Tensor::full([3, 4], g));
        let (av, xv) = (tape.leaf(&a), tape.leaf(&x));
        let out = fuse_with_gate(&mut tape, gv, av, xv).unwrap();
        assert_eq!(tape.value(out), expect.data());
    }
}

fn mha_vars(tape: &mut Tape, ws: &[Tensor]) -> MultiHeadVars {
    MultiHeadVars {
        wq: tape.leaf(&ws[0]),
        wk: tape.leaf(&ws[1]),
        wv: tape.leaf(&ws[2]),
        wo: tape.leaf(&ws[3]),
        bo: tape.leaf(&ws[4]),
    }
}

#[test]
fn multi_head_matches_per_head_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, d, h) = (4, 6, 3);
    let dh = d / h;
    let x = random(&[b, d], &mut rng);
    let mut ws: Vec<Tensor> = (0..4).map(|_| random(&[d, d], &mut rng)).collect();
    ws.push(random(&[d], &mut rng));
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let p = mha_vars(&mut tape, &ws);
    let (out, weights) = multi_head_attention(&mut tape, xv, &p, h).unwrap();

    let q = matmul(x.data(), ws[0].data(), b, d, d);
    let k = matmul(x.data(), ws[1].data(), b, d, d);
    let v = matmul(x.data(), ws[2].data(), b, d, d);
    let mut joined = vec![0.0; b * d];
    for head in 0..h {
        let mut s = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                s[i * b + j] = (0..dh)
                    .map(|c| q[i * d + head * dh + c] * k[j * d + head * dh + c])
                    .sum::<f64>()
                    / (dh as f64).sqrt();
            }
        }
        softmax_rows(&mut s, b);
        close(tape.value(weights[head]), &s, 1e-12);
        for i in 0..b {
            for c in 0..dh {
                joined[i * d + head * dh + c] = (0..b).map(|j| s[i * b + j] * v[j * d + head * dh + c]).sum();
            }
        }
    }
    let mut expect = matmul(&joined, ws[3].data(), b, d, d);
    for (i, e) in expect.iter_mut().enumerate() {
        *e += ws[4].data()[i % d];
    }
    close(tape.value(out), &expect, 1e-12);
}

#[test]
fn one_head_is_plain_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, d) = (4, 4);
    let x = random(&[b, d], &mut rng);
    let mut ws: Vec<Tensor> = (0..4).map(|_| random(&[d, d], &mut rng)).collect();
    ws.push(random(&[d], &mut rng));
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let p = mha_vars(&mut tape, &ws);
    let (out, _) = multi_head_attention(&mut tape, xv, &p, 1).unwrap();
    let inter = InterVars {
        wq: p.wq,
        wk: p.wk,
        wv: p.wv,
    };
    let (att, _) = inter_frame_attention(&mut tape, xv, &inter).unwrap();
    let proj = tape.matmul(att, p.wo).unwrap();
    let expect = tape.add(proj, p.bo).unwrap();
    close(tape.value(out), tape.value(expect), 1e-12);
}

#[test]
fn indivisible_heads_are_rejected() {
    let mut cfg = tiny(&[]);
    cfg.heads = 3;
    assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn moe_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, d, n) = (3, 4, 3);
    let x = random(&[b, d], &mut rng);
    let gate = random(&[d, n], &mut rng);
    let params: Vec<[Tensor; 4]> = (0..n)
        .map(|_| {
            [
                random(&[d, d], &mut rng),
                random(&[d], &mut rng),
                random(&[d, d], &mut rng),
                random(&[d], &mut rng),
            ]
        })
        .collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let gv = tape.leaf(&gate);
    let experts: Vec<ExpertVars> = params
        .iter()
        .map(|p| ExpertVars {
            w1: tape.leaf(&p[0]),
            b1: tape.leaf(&p[1]),
            w2: tape.leaf(&p[2]),
            b2: tape.leaf(&p[3]),
        })
        .collect();
    let (out, _) = moe_layer(&mut tape, xv, &experts, gv).unwrap();

    let mut g = matmul(x.data(), gate.data(), b, d, n);
    softmax_rows(&mut g, n);
    let mut expect = vec![0.0; b * d];
    for (e, p) in params.iter().enumerate() {
        let mut h = matmul(x.data(), p[0].data(), b, d, d);
        for (i, v) in h.iter_mut().enumerate() {
            *v = (*v + p[1].data()[i % d]).max(0.0);
        }
        let o = matmul(&h, p[2].data(), b, d, d);
        for i in 0..b {
            for c in 0..d {
                expect[i * d + c] += g[i * n + e] * (o[i * d + c] + p[3].data()[c]);
            }
        }
    }
    close(tape.value(out), &expect, 1e-12);
}

#[test]
fn one_expert_is_that_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tape = Tape::new();
    let x = tape.leaf(&random(&[3, 4], &mut rng));
    let gate = tape.leaf(&random(&[4, 1], &mut rng));
    let e = ExpertVars {
        w1: tape.leaf(&random(&[4, 4], &mut rng)),
        b1: tape.leaf(&random(&[4], &mut rng)),
        w2: tape.leaf(&random(&[4, 4], &mut rng)),
        b2: tape.leaf(&random(&[4], &mut rng)),
    };
    let (out, w) = moe_layer(&mut tape, x, &[e], gate).unwrap();
    let direct = expert(&mut tape, x, &e).unwrap();
    assert!(tape.value(w).iter().all(|&v| v == 1.0));
    assert_eq!(tape.value(out), tape.value(direct));
}

#[test]
fn disabled_components_pass_through() {
    use Component::*;
    let f = frames(4, &tiny(&[]), 11);

    let (t, tr) = run(&tiny(&[Pe]), &f);
    assert_eq!(t.value(tr.x_pe), t.value(tr.x_bar));

    let (t, tr) = run(&tiny(&[Intra]), &f);
    assert!(tr.a_intra.is_none());
    assert_eq!(t.value(tr.a_com), t.value(tr.a_inter.unwrap()));

    let (t, tr) = run(&tiny(&[Inter]), &f);
    assert!(tr.inter_weights.is_none());
    assert_eq!(t.value(tr.a_com), t.value(tr.a_intra.unwrap()));

    let (t, tr) = run(&tiny(&[Intra, Inter]), &f);
    assert_eq!(t.value(tr.a_com), t.value(tr.x_pe));

    let (t, tr) = run(&tiny(&[Gate]), &f);
    assert!(tr.gate.is_none());
    assert_eq!(t.value(tr.o_gated), t.value(tr.a_mul));

    let (t, tr) = run(&tiny(&[Moe]), &f);
    assert!(tr.moe_weights.is_none());
    assert_eq!(t.value(tr.o_moe), t.value(tr.o_gated));
}

#[test]
fn fresh_model_blends_evenly() {
    let cfg = tiny(&[]);
    let f = frames(4, &cfg, 12);
    let (t, tr) = run(&cfg, &f);
    let mean: Vec<f64> = t
        .value(tr.a_inter.unwrap())
        .iter()
        .zip(t.value(tr.a_intra.unwrap()))
        .map(|(x, y)| (x + y) / 2.0)
        .collect();
    assert_eq!(t.value(tr.a_com), &mean[..]);
}

#[test]
fn batch_permutation_equivariance_without_positions() {
    let cfg = tiny(&[Component::Pe]);
    let f = frames(5, &cfg, 13);
    let perm = [3, 0, 4, 1, 2];
    let permuted: Vec<Frame> = perm.iter().map(|&i| f[i].clone()).collect();
    let (t1, a) = run(&cfg, &f);
    let (t2, b) = run(&cfg, &permuted);
    let (la, lb) = (t1.value(a.logits), t2.value(b.logits));
    for (row, &src) in perm.iter().enumerate() {
        close(&lb[row * 4..row * 4 + 4], &la[src * 4..src * 4 + 4], 1e-12);
    }
}

#[test]
fn positions_break_equivariance() {
    let cfg = tiny(&[]);
    let f = frames(5, &cfg, 13);
    let permuted: Vec<Frame> = [3, 0, 4, 1, 2].iter().map(|&i| f[i].clone()).collect();
    let (t1, a) = run(&cfg, &f);
    let (t2, b) = run(&cfg, &permuted);
    assert_ne!(&t1.value(a.logits)[4..8], &t2.value(b.logits)[4..8]);
}

#[test]
fn dropout_only_in_training() {
    let mut cfg = tiny(&[]);
    cfg.dropout = 0.3;
    let f = frames(4, &cfg, 14);
    let refs: Vec<&Frame> = f.iter().collect();
    let (model, store) = Model::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eval = |rng: &mut ChaCha8Rng| {
        let mut tape = Tape::new();
        let tr = model.forward(&mut tape, &store, &refs, false, rng).unwrap();
        tape.value(tr.logits).to_vec()
    };
    assert_eq!(eval(&mut rng), eval(&mut rng));
    let mut tape = Tape::new();
    let tr = model.forward(&mut tape, &store, &refs, true, &mut rng).unwrap();
    assert_ne!(tape.value(tr.logits), &eval(&mut rng)[..]);
}

#[test]
fn init_is_seeded_and_bounded() {
    let (_, a) = Model::new(tiny(&[]), 3).unwrap();
    let (_, b) = Model::new(tiny(&[]), 3).unwrap();
    let (_, c) = Model::new(tiny(&[]), 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let alpha = a.find("blend.alpha").unwrap();
    assert_eq!(a.get(alpha).data(), &[0.0]);
    let w = a.get(a.find("inter.wq").unwrap());
    assert!(w.data().iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
    for p in a.iter() {
        if p.name.ends_with("bias") || p.name.contains(".b") {
            assert!(!p.decay && p.tensor.data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }
}

#[test]
fn wrong_frame_shape_is_rejected() {
    let cfg = tiny(&[]);
    let mut f = frames(2, &cfg, 0);
    f[1].window = 8;
    let (model, store) = Model::new(cfg, 0).unwrap();
    let refs: Vec<&Frame> = f.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = model.forward(&mut Tape::new(), &store, &refs, false, &mut rng);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn config_validation() {
    let base = tiny(&[]);
    for bad in [
        ModelConfig { kernel: 4, ..base.clone() },
        ModelConfig { window: 2, ..base.clone() },
        ModelConfig { classes: 1, ..base.clone() },
        ModelConfig { experts: 0, ..base.clone() },
        ModelConfig { dropout: 1.0, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert!(base.validate().is_ok());
}

#[test]
fn disabled_list_parsing() {
    let d = Disabled::parse_list("moe, intra,gate").unwrap();
    assert!(d.contains(Component::Intra) && d.contains(Component::Moe) && d.enabled(Component::Pe));
    assert_eq!(d.to_string(), "intra,moe,gate");
    assert!(Disabled::parse_list("attention").is_err());
    assert_eq!(Disabled::parse_list("").unwrap(), Disabled::none());
}

#[test]
fn composed_model_gradcheck() {
    let mut cfg = tiny(&[]);
    cfg.classes = 3;
    let (model, store) = Model::new(cfg.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut inputs: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    // Nonzero biases and blend so every path carries gradient.
    for t in &mut inputs {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    inputs.push(random(&[4, 16, 3], &mut rng));
    let labels = [0, 1, 2, 1];
    let loss_cfg = LossConfig::default();
    let err = gradcheck_many(
        |tape, vars| {
            let (params, x) = vars.split_at(vars.len() - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let tr = model.forward_with(tape, params, x[0], false, &mut rng)?;
            combined_loss(tape, tr.logits, &labels, &loss_cfg)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
