mod common;

use common::{check_tensor, seeded_model, tiny_config};
use prunelab::model::{Mode, Model, ModelConfig};
use prunelab::{Error, RngState, Tensor2D};

type M = Vec<Vec<f64>>;

fn get(model: &Model, name: &str) -> M {
    let t = model.param_by_name(name).unwrap();
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| f64::from(v)).collect()).collect()
}

fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for x in 0..k {
                out[i][j] += a[i][x] * b[x][j];
            }
        }
    }
    out
}

fn add_bias(a: &M, b: &M) -> M {
    a.iter().map(|r| r.iter().zip(&b[0]).map(|(x, y)| x + y).collect()).collect()
}

fn ln(a: &M, g: &M, b: &M) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(c, x)| (x - mu) / (var + 1e-5).sqrt() * g[0][c] + b[0][c]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One post-LN encoder layer plus tied MLM head, written out longhand.
fn reference_forward(model: &Model, tokens: &[usize]) -> M {
    let we = get(model, "embeddings.word");
    let pe = get(model, "embeddings.position");
    let x: M = tokens.iter().enumerate().map(|(i, &t)| (0..we[0].len()).map(|c| we[t][c] + pe[i][c]).collect()).collect();
    let h0 = ln(&x, &get(model, "embeddings.ln.gamma"), &get(model, "embeddings.ln.beta"));
    let q = add_bias(&mm(&h0, &get(model, "layer.0.attention.query")), &get(model, "layer.0.attention.query_bias"));
    let k = add_bias(&mm(&h0, &get(model, "layer.0.attention.key")), &get(model, "layer.0.attention.key_bias"));
    let v = add_bias(&mm(&h0, &get(model, "layer.0.attention.value")), &get(model, "layer.0.attention.value_bias"));
    let (t, d, heads) = (tokens.len(), 4, 2);
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; t];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> =
                (0..t).map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..t {
                let p = (scores[j] - mx).exp() / z;
                for c in 0..dh {
                    ctx[i][h * dh + c] += p * v[j][h * dh + c];
                }
            }
        }
    }
    let a = add_bias(&mm(&ctx, &get(model, "layer.0.attention.output")), &get(model, "layer.0.attention.output_bias"));
    let r1: M = a.iter().zip(&h0).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
    let h1 = ln(&r1, &get(model, "layer.0.attention.ln.gamma"), &get(model, "layer.0.attention.ln.beta"));
    let u: M = add_bias(&mm(&h1, &get(model, "layer.0.ffn.in")), &get(model, "layer.0.ffn.in_bias"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f = add_bias(&mm(&u, &get(model, "layer.0.ffn.out")), &get(model, "layer.0.ffn.out_bias"));
    let r2: M = f.iter().zip(&h1).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
    let h2 = ln(&r2, &get(model, "layer.0.ffn.ln.gamma"), &get(model, "layer.0.ffn.ln.beta"));
    let z: M = add_bias(&mm(&h2, &get(model, "mlm.transform")), &get(model, "mlm.transform_bias"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let tt = ln(&z, &get(model, "mlm.ln.gamma"), &get(model, "mlm.ln.beta"));
    let bias = get(model, "mlm.output_bias");
    tt.iter().map(|r| we.iter().enumerate().map(|(vi, e)| r.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + bias[0][vi]).collect()).collect()
}

#[test]
fn forward_matches_longhand_reference() {
    let cfg = ModelConfig { num_layers: 1, hidden: 4, num_heads: 2, ffn: 8, vocab: 10, max_len: 4, dropout: 0.0, init_std: 0.5 };
    let model = seeded_model(cfg, 21, None);
    let tokens = [3u32, 7];
    let (logits, _) = model.forward(&tokens, Mode::Eval).unwrap();
    let want = reference_forward(&model, &[3, 7]);
    for r in 0..2 {
        for c in 0..10 {
            let diff = (f64::from(logits.get(r, c)) - want[r][c]).abs();
            assert!(diff < 1e-5, "({r},{c}) {} vs {}", logits.get(r, c), want[r][c]);
        }
    }
}

#[test]
fn zero_weights_give_uniform_distribution() {
    let mut model = Model::new(ModelConfig { num_layers: 2, hidden: 8, num_heads: 2, ffn: 16, vocab: 12, ..Default::default() }, &mut RngState::new(0)).unwrap();
    for t in model.params_mut() {
        t.fill(0.0);
    }
    let (mut logits, _) = model.forward(&[1, 2, 3], Mode::Eval).unwrap();
    prunelab::model::ops::softmax_rows(&mut logits);
    for v in logits.data() {
        assert!((v - 1.0 / 12.0).abs() < 1e-7);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let a = seeded_model(tiny_config(2, 8, 2), 5, None);
    let b = seeded_model(tiny_config(2, 8, 2), 5, None);
    let bits = |t: &Tensor2D| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let (la, _) = a.forward(&[1, 4, 9, 2], Mode::Eval).unwrap();
    let (lb, _) = b.forward(&[1, 4, 9, 2], Mode::Eval).unwrap();
    let (lc, _) = a.forward(&[1, 4, 9, 2], Mode::Eval).unwrap();
    assert_eq!(bits(&la), bits(&lb));
    assert_eq!(bits(&la), bits(&lc));
}

#[test]
fn dropout_only_in_training_mode() {
    let mut cfg = tiny_config(2, 8, 2);
    cfg.dropout = 0.3;
    let m = seeded_model(cfg, 5, None);
    let (e1, _) = m.forward(&[1, 2, 3], Mode::Eval).unwrap();
    let (e2, _) = m.forward(&[1, 2, 3], Mode::Eval).unwrap();
    assert_eq!(e1, e2);
    let mut rng = RngState::new(1);
    let (t1, _) = m.forward(&[1, 2, 3], Mode::Train(&mut rng)).unwrap();
    assert_ne!(t1, e1);
}

#[test]
fn out_of_range_and_overlong_inputs_rejected() {
    let m = seeded_model(tiny_config(1, 8, 2), 1, None);
    assert!(matches!(m.forward(&[1, 16], Mode::Eval), Err(Error::TokenOutOfRange { id: 16, pos: 1, .. })));
    assert!(matches!(m.forward(&[1; 9], Mode::Eval), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn every_parameter_matches_central_differences() {
    for classes in [None, Some(3)] {
        let model = seeded_model(tiny_config(2, 8, 2), 13, classes);
        let tokens = [1u32, 5, 9, 14, 2];
        for i in 0..model.num_params() {
            let check = check_tensor(&model, &tokens, i, 1e-3);
            assert!(check.passes(1e-2), "{}: {check:?}", model.param_names()[i]);
        }
    }
}

#[test]
fn zero_loss_gradient_gives_zero_gradients() {
    let m = seeded_model(tiny_config(2, 8, 2), 2, None);
    let (logits, trace) = m.forward(&[1, 2, 3], Mode::Eval).unwrap();
    let g = m.backward(&trace, &Tensor2D::zeros(logits.rows(), logits.cols())).unwrap();
    assert!(g.is_zero());
}

#[test]
fn stale_trace_rejected() {
    let mut m = seeded_model(tiny_config(1, 8, 2), 2, None);
    let (logits, trace) = m.forward(&[1, 2, 3], Mode::Eval).unwrap();
    m.param_mut(0).data_mut()[0] += 1.0;
    let err = m.backward(&trace, &logits).unwrap_err();
    assert!(matches!(err, Error::StaleTrace(_)));
}

#[test]
fn permuting_heads_consistently_leaves_logits_unchanged() {
    let cfg = ModelConfig { num_layers: 2, hidden: 12, num_heads: 3, ffn: 16, vocab: 16, max_len: 8, dropout: 0.0, init_std: 0.3 };
    let m = seeded_model(cfg, 8, None);
    let perm = [2usize, 0, 1];
    let dh = 4;
    let mut p = m.clone();
    for l in 0..2 {
        for name in ["query", "key", "value"] {
            for suffix in ["", "_bias"] {
                let n = format!("layer.{l}.attention.{name}{suffix}");
                let i = m.param_index(&n).unwrap();
                let src = m.param(i).clone();
                let dst = p.param_mut(i);
                for (new, &old) in perm.iter().enumerate() {
                    dst.set_col_block(new * dh, &src.col_block(old * dh, dh));
                }
            }
        }
        let i = m.param_index(&format!("layer.{l}.attention.output")).unwrap();
        let src = m.param(i).clone();
        let dst = p.param_mut(i);
        for (new, &old) in perm.iter().enumerate() {
            for r in 0..dh {
                dst.row_mut(new * dh + r).copy_from_slice(src.row(old * dh + r));
            }
        }
    }
    let toks = [3u32, 1, 4, 1, 5, 9];
    let (a, _) = m.forward(&toks, Mode::Eval).unwrap();
    let (b, _) = p.forward(&toks, Mode::Eval).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn features_have_one_vector_per_layer() {
    let m = Model::new(ModelConfig::default(), &mut RngState::new(3)).unwrap();
    let f = m.extract_features(&[5, 6, 7, 8]).unwrap();
    assert_eq!(f.len(), 4);
    assert!(f.iter().all(|v| v.len() == 64));
    assert_eq!(f, m.clone().extract_features(&[5, 6, 7, 8]).unwrap());
}

#[test]
fn zeroing_an_ffn_matrix_changes_that_layer_and_deeper() {
    let m = seeded_model(ModelConfig { num_layers: 4, hidden: 16, num_heads: 2, ffn: 32, vocab: 16, max_len: 8, dropout: 0.0, init_std: 0.3 }, 4, None);
    let mut z = m.clone();
    let i = z.param_index("layer.1.ffn.out").unwrap();
    z.param_mut(i).fill(0.0);
    let toks = [1u32, 2, 3, 4, 5];
    let fa = m.extract_features(&toks).unwrap();
    let fb = z.extract_features(&toks).unwrap();
    let cos: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| prunelab::tensor::cosine(a, b)).collect();
    assert!((cos[0] - 1.0).abs() < 1e-9);
    for (l, c) in cos.iter().enumerate().skip(1) {
        assert!(*c < 1.0 - 1e-6, "layer {l}: {c}");
    }
}


