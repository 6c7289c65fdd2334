use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(v: usize, l: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        embed_dim: l,
        n_layers: layers,
        n_heads: heads,
        ff_dim: 2 * l,
        max_positions: 16,
        dropout_rate: 0.0,
    }
}

/// Parameters drawn larger than the default init so attention is far from uniform.
fn spiky_model(config: ModelConfig, seed: u64) -> Transformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Transformer::new(config, &mut rng).unwrap();
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.5 * (rand::Rng::gen::<f64>(&mut rng) - 0.5);
        }
    }
    model
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let c = ModelConfig { n_heads: 3, ..ModelConfig::default() };
    assert!(c.validate().is_err());
    let c = ModelConfig { dropout_rate: 1.0, ..ModelConfig::default() };
    assert!(c.validate().is_err());
}

#[test]
fn embed_examples() {
    let model = spiky_model(tiny(7, 4, 1, 1), 1);
    let mut g = Graph::new();
    let p = model.bind(&mut g);

    let empty = embed(&mut g, &p, &[], 0).unwrap();
    assert_eq!(g.shape(empty), &[0, 4]);

    let one = embed(&mut g, &p, &[5], 0).unwrap();
    let tok = model.params.get("tok_emb").unwrap();
    let pos = model.params.get("pos_emb").unwrap();
    let want: Vec<f64> = tok.row(5).iter().zip(pos.row(0)).map(|(a, b)| a + b).collect();
    assert_eq!(g.value(one).data(), &want[..]);

    // Response rows following a 3-token context start at position 3.
    let resp = embed(&mut g, &p, &[2, 6], 3).unwrap();
    let want: Vec<f64> = tok.row(6).iter().zip(pos.row(4)).map(|(a, b)| a + b).collect();
    assert_eq!(g.value(resp).row(1), &want[..]);

    assert!(matches!(
        embed(&mut g, &p, &[7], 0),
        Err(RadError::Vocabulary { id: 7, .. })
    ));
}

#[test]
fn forward_shapes() {
    let config = tiny(7, 4, 2, 2);
    let model = spiky_model(config.clone(), 2);
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let x = embed_tokens(&mut g, &p, &[1, 2, 3]).unwrap();
    let y = embed_tokens(&mut g, &p, &[4, 5]).unwrap();
    let out = forward(&mut g, &p, &config, x, y, None).unwrap();
    assert_eq!(g.shape(out.hidden), &[5, 4]);
    assert_eq!(g.shape(out.logits), &[2, 7]);
    assert_eq!(g.shape(out.probs), &[2, 7]);
    for r in 0..2 {
        let s: f64 = g.value(out.probs).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn forward_rejects_overlong_sequence() {
    let config = tiny(7, 4, 1, 1);
    let model = spiky_model(config.clone(), 3);
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let x = embed_tokens(&mut g, &p, &[1; 10]).unwrap();
    let y = embed_tokens(&mut g, &p, &[1; 7]).unwrap();
    assert!(matches!(
        forward(&mut g, &p, &config, x, y, None),
        Err(RadError::Capacity { len: 17, max: 16 })
    ));
}

#[test]
fn response_perturbation_leaves_earlier_logits_unchanged() {
    let config = tiny(9, 8, 2, 2);
    let model = spiky_model(config.clone(), 4);
    let logits = |resp: &[usize]| {
        let mut g = Graph::no_grad();
        let p = model.bind(&mut g);
        let x = embed_tokens(&mut g, &p, &[1, 2, 3]).unwrap();
        let y = embed_tokens(&mut g, &p, resp).unwrap();
        let out = forward(&mut g, &p, &config, x, y, None).unwrap();
        g.value(out.logits).clone()
    };
    let base = logits(&[4, 5, 6, 7]);
    let changed = logits(&[4, 5, 8, 7]);
    // Token 2 is the input at response position 2, visible to logits 3.. only.
    for t in 0..3 {
        assert_eq!(base.row(t), changed.row(t), "row {t}");
    }
    assert_ne!(base.row(3), changed.row(3));
}

#[test]
fn nll_examples() {
    let mut g = Graph::new();
    let certain = g.constant(Tensor::matrix(2, 3, vec![0., 1., 0., 1., 0., 0.]).unwrap());
    let loss = nll_loss(&mut g, certain, &[1, 0], &[true, true]).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);

    let uniform = g.constant(Tensor::full(&[3, 8], 1.0 / 8.0));
    let loss = nll_loss(&mut g, uniform, &[0, 5, 7], &[true, true, true]).unwrap();
    assert!((g.value(loss).item() - 8f64.ln()).abs() < 1e-12);

    // Direct summation oracle on a random distribution with one padded slot.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let logits = g.constant(raw);
    let probs = g.softmax_rows(logits).unwrap();
    let targets = [3, 0, 5, 2];
    let mask = [true, false, true, true];
    let loss = nll_loss(&mut g, probs, &targets, &mask).unwrap();
    let pv = g.value(probs);
    let mut s = 0.0;
    let mut count = 0.0;
    for t in 0..4 {
        if mask[t] {
            s -= pv.row(t)[targets[t]].ln();
            count += 1.0;
        }
    }
    assert!((g.value(loss).item() - s / count).abs() < 1e-12);
}

/// Standalone one-layer, one-head forward written with plain loops.
fn oracle_logits(model: &Transformer, ctx: &[usize], resp: &[usize]) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let l = cfg.embed_dim;
    let get = |n: &str| model.params.get(n).unwrap();
    let mat = |n: &str, i: usize, j: usize| {
        let t = get(n);
        t.data()[i * t.cols() + j]
    };
    let vecv = |n: &str, j: usize| get(n).data()[j];
    let ln = |x: &[f64], gname: &str, bname: &str| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / l as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64;
        (0..l)
            .map(|j| (x[j] - mean) / (var + LAYER_NORM_EPS).sqrt() * vecv(gname, j) + vecv(bname, j))
            .collect()
    };
    let lin = |x: &[f64], w: &str, b: &str, out: usize| -> Vec<f64> {
        (0..out)
            .map(|j| (0..x.len()).map(|i| x[i] * mat(w, i, j)).sum::<f64>() + vecv(b, j))
            .collect()
    };

    let tokens: Vec<usize> = ctx.iter().chain(resp).copied().collect();
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &id)| (0..l).map(|j| mat("tok_emb", id, j) + mat("pos_emb", pos, j)).collect())
        .collect();

    let hs: Vec<Vec<f64>> = xs.iter().map(|x| ln(x, "h0.ln1.g", "h0.ln1.b")).collect();
    let qs: Vec<Vec<f64>> = hs.iter().map(|h| lin(h, "h0.attn.wq", "h0.attn.bq", l)).collect();
    let ks: Vec<Vec<f64>> = hs.iter().map(|h| lin(h, "h0.attn.wk", "h0.attn.bk", l)).collect();
    let vs: Vec<Vec<f64>> = hs.iter().map(|h| lin(h, "h0.attn.wv", "h0.attn.bv", l)).collect();
    for i in 0..xs.len() {
        let scores: Vec<f64> = (0..=i)
            .map(|j| (0..l).map(|d| qs[i][d] * ks[j][d]).sum::<f64>() / (l as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let ctxv: Vec<f64> = (0..l)
            .map(|d| (0..=i).map(|j| exps[j] / z * vs[j][d]).sum())
            .collect();
        let o = lin(&ctxv, "h0.attn.wo", "h0.attn.bo", l);
        for d in 0..l {
            xs[i][d] += o[d];
        }
    }
    for x in xs.iter_mut() {
        let h = ln(x, "h0.ln2.g", "h0.ln2.b");
        let inner = lin(&h, "h0.ff.w1", "h0.ff.b1", cfg.ff_dim);
        let act: Vec<f64> = inner
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            .collect();
        let ff = lin(&act, "h0.ff.w2", "h0.ff.b2", l);
        for d in 0..l {
            x[d] += ff[d];
        }
    }
    let m = ctx.len();
    (0..resp.len())
        .map(|t| {
            let h = ln(&xs[m - 1 + t], "ln_f.g", "ln_f.b");
            lin(&h, "head.w", "head.b", cfg.vocab_size)
        })
        .collect()
}

#[test]
fn one_layer_forward_matches_loop_oracle() {
    let config = tiny(7, 4, 1, 1);
    let model = spiky_model(config.clone(), 42);
    let ctx = [1, 4, 2];
    let resp = [6, 0, 3];
    let mut g = Graph::no_grad();
    let p = model.bind(&mut g);
    let x = embed_tokens(&mut g, &p, &ctx).unwrap();
    let y = embed_tokens(&mut g, &p, &resp).unwrap();
    let out = forward(&mut g, &p, &config, x, y, None).unwrap();
    let want = oracle_logits(&model, &ctx, &resp);
    for (t, row) in want.iter().enumerate() {
        for (a, b) in g.value(out.logits).row(t).iter().zip(row) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn forward_is_deterministic_without_dropout() {
    let config = tiny(7, 8, 2, 2);
    let model = spiky_model(config.clone(), 9);
    let run = || {
        let mut g = Graph::no_grad();
        let p = model.bind(&mut g);
        let x = embed_tokens(&mut g, &p, &[1, 2]).unwrap();
        let y = embed_tokens(&mut g, &p, &[3, 4, 5]).unwrap();
        let out = forward(&mut g, &p, &config, x, y, None).unwrap();
        g.value(out.logits).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn next_token_matches_forward_rows() {
    let config = tiny(7, 8, 2, 2);
    let model = spiky_model(config.clone(), 10);
    let mut g = Graph::no_grad();
    let p = model.bind(&mut g);
    let x = embed_tokens(&mut g, &p, &[1, 2, 3]).unwrap();
    let y = embed_tokens(&mut g, &p, &[4, 5]).unwrap();
    let out = forward(&mut g, &p, &config, x, y, None).unwrap();
    let prefix = embed_tokens(&mut g, &p, &[4]).unwrap();
    let (logits, _) = next_token(&mut g, &p, &config, x, prefix).unwrap();
    assert_eq!(g.value(logits).row(0), g.value(out.logits).row(1));
}

#[test]
fn from_parts_checks_layout() {
    let config = tiny(7, 4, 1, 1);
    let model = spiky_model(config.clone(), 1);
    assert!(Transformer::from_parts(config.clone(), model.params.clone()).is_ok());
    let mut wrong = config;
    wrong.vocab_size = 8;
    assert!(Transformer::from_parts(wrong, model.params).is_err());
}
