use super::*;
use crate::tensor::grad_check;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(101)
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn mhsa_single_token_is_linear_map() {
    let mut rng = rng();
    let p = AttentionParams::init(&mut rng, 6, 2);
    let x = randn(&mut rng, vec![1, 6]);
    let out = mhsa(&x, &p, None);
    // with one token the softmax weight is 1, so out = sum_h x Wv_h Wo_h
    let mut expect: Option<Tensor> = None;
    for h in 0..2 {
        let o = x.matmul(&p.wv[h]).matmul(&p.wo[h]);
        expect = Some(match expect {
            Some(acc) => acc.add(&o),
            None => o,
        });
    }
    for (a, b) in out.data().iter().zip(expect.unwrap().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mhsa_identical_tokens_identical_outputs() {
    let mut rng = rng();
    let p = AttentionParams::init(&mut rng, 4, 2);
    let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(vec![3, 4], row.repeat(3));
    let out = mhsa(&x, &p, None);
    for r in 1..3 {
        for j in 0..4 {
            assert!((out.data()[j] - out.data()[r * 4 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn mhsa_gradcheck() {
    let mut rng = rng();
    let p = AttentionParams::init(&mut rng, 4, 2);
    let x = randn(&mut rng, vec![3, 4]);
    let w = randn(&mut rng, vec![3, 4]);
    let report = grad_check(|x| mhsa(x, &p, None).mul(&w).sum_all(), &x, 1e-5);
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn mhsa_mask_zeroes_attention() {
    let mut rng = rng();
    let p = AttentionParams::init(&mut rng, 4, 2);
    let x = randn(&mut rng, vec![3, 4]);
    let weights = attention_weight_matrices(&x, &x, &p, Some(&[true, false, true]));
    for w in weights {
        for r in 0..3 {
            assert!(w.data()[r * 3 + 1].abs() < 1e-12, "masked key got weight");
            let sum: f64 = w.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_weights_sum_to_one() {
    let mut rng = rng();
    let p = AttentionParams::init(&mut rng, 8, 4);
    let q = randn(&mut rng, vec![5, 8]);
    let ctx = randn(&mut rng, vec![7, 8]);
    for w in attention_weight_matrices(&q, &ctx, &p, None) {
        for r in 0..5 {
            let sum: f64 = w.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn mhca_single_context_token() {
    let mut rng = rng();
    let p = AttentionParams::init(&mut rng, 4, 2);
    let q = randn(&mut rng, vec![3, 4]);
    let ctx = randn(&mut rng, vec![1, 4]);
    let out = mhca(&q, &ctx, &p);
    // every query sees the one context token with weight 1
    let mut expect: Option<Tensor> = None;
    for h in 0..2 {
        let o = ctx.matmul(&p.wv[h]).matmul(&p.wo[h]);
        expect = Some(match expect {
            Some(acc) => acc.add(&o),
            None => o,
        });
    }
    let e = expect.unwrap();
    for r in 0..3 {
        for j in 0..4 {
            assert!((out.data()[r * 4 + j] - e.data()[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn mhca_context_permutation_invariant() {
    let mut rng = rng();
    let p = AttentionParams::init(&mut rng, 4, 2);
    let q = randn(&mut rng, vec![2, 4]);
    let ctx = randn(&mut rng, vec![4, 4]);
    let permuted = ctx.gather_rows(&[2, 0, 3, 1]);
    let a = mhca(&q, &ctx, &p);
    let b = mhca(&q, &permuted, &p);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn mhca_gradcheck() {
    let mut rng = rng();
    let p = AttentionParams::init(&mut rng, 4, 2);
    let ctx = randn(&mut rng, vec![3, 4]);
    let q = randn(&mut rng, vec![2, 4]);
    let w = randn(&mut rng, vec![2, 4]);
    let report = grad_check(|q| mhca(q, &ctx, &p).mul(&w).sum_all(), &q, 1e-5);
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn mlp_zero_weights_output_bias() {
    let mut p = MlpParams::init(&mut rng(), &[3, 4]);
    p.layers[0].w = Tensor::zeros(vec![3, 4]);
    p.layers[0].b = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
    let x = Tensor::from_vec(vec![2, 3], vec![0.5; 6]);
    let out = p.apply(&x);
    assert_eq!(&out.data()[0..4], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(&out.data()[4..8], &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn single_layer_mlp_equals_affine() {
    let mut rng = rng();
    let p = MlpParams::init(&mut rng, &[3, 2]);
    let x = randn(&mut rng, vec![4, 3]);
    let direct = x.matmul(&p.layers[0].w).add(&p.layers[0].b);
    for (a, b) in p.apply(&x).data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn mlp_gradcheck() {
    let mut rng = rng();
    let p = MlpParams::init(&mut rng, &[3, 5, 2]);
    let x = randn(&mut rng, vec![2, 3]);
    let w = randn(&mut rng, vec![2, 2]);
    let report = grad_check(|x| p.apply(x).mul(&w).sum_all(), &x, 1e-5);
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

fn test_backbone() -> BackboneConfig {
    BackboneConfig {
        patch: 8,
        frame_side: 48,
        vocab_size: 10,
        width: 8,
        max_tokens: 6,
        max_frames: 4,
    }
}

#[test]
fn patch_embed_token_count() {
    let cfg = test_backbone();
    assert_eq!(cfg.tokens_per_frame(), 36);
    let mut rng = rng();
    let proj = LinearParams::init(&mut rng, cfg.patch_dim(), cfg.width);
    let frame = randn(&mut rng, vec![3, 48, 48]);
    assert_eq!(patch_embed(&frame, &proj, &cfg).shape(), &[36, 8]);
}

#[test]
fn zero_frame_embeds_to_bias_plus_positions() {
    let cfg = test_backbone();
    let mut rng = rng();
    let mut proj = LinearParams::init(&mut rng, cfg.patch_dim(), cfg.width);
    proj.b = Tensor::from_vec(vec![8], (0..8).map(|i| i as f64 * 0.1).collect());
    let frame = Tensor::zeros(vec![3, 48, 48]);
    let out = patch_embed(&frame, &proj, &cfg);
    let pos = pos_2d(6, 6, 8);
    for (i, v) in out.data().iter().enumerate() {
        let expect = proj.b.data()[i % 8] + pos.data()[i];
        assert!((v - expect).abs() < 1e-12);
    }
}

#[test]
fn single_patch_change_is_local_before_positions() {
    let cfg = test_backbone();
    let mut rng = rng();
    let proj = LinearParams::init(&mut rng, cfg.patch_dim(), cfg.width);
    let a = randn(&mut rng, vec![3, 48, 48]);
    let mut data = a.data().to_vec();
    // perturb one pixel inside patch (2, 3) of channel 1
    data[48 * 48 + (2 * 8 + 3) * 48 + (3 * 8 + 1)] += 1.0;
    let b = Tensor::from_vec(vec![3, 48, 48], data);
    let ta = patch_embed_raw(&a, &proj, &cfg);
    let tb = patch_embed_raw(&b, &proj, &cfg);
    let mut changed = vec![];
    for tok in 0..36 {
        let differs = (0..8).any(|j| (ta.data()[tok * 8 + j] - tb.data()[tok * 8 + j]).abs() > 1e-12);
        if differs {
            changed.push(tok);
        }
    }
    assert_eq!(changed, vec![2 * 6 + 3]);
}

#[test]
fn token_embed_repeated_id_differs_only_by_position() {
    let cfg = test_backbone();
    let mut rng = rng();
    let table = randn(&mut rng, vec![10, 8]);
    let out = token_embed(&[4, 4], &table, &cfg).unwrap();
    let pos = pos_1d(2, 8);
    for j in 0..8 {
        let a = out.data()[j] - pos.data()[j];
        let b = out.data()[8 + j] - pos.data()[8 + j];
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn token_embed_rejects_empty_and_oov() {
    let cfg = test_backbone();
    let table = Tensor::zeros(vec![10, 8]);
    assert!(token_embed(&[], &table, &cfg).is_err());
    assert!(token_embed(&[10], &table, &cfg).is_err());
    assert!(token_embed(&[0; 7], &table, &cfg).is_err());
}

#[test]
fn token_embed_gradient_hits_only_used_rows() {
    let cfg = test_backbone();
    let mut rng = rng();
    let table = randn(&mut rng, vec![10, 8]);
    let tape = crate::tensor::Tape::new();
    let bound = tape.leaf(&table, true);
    let out = token_embed(&[3, 7, 3], &bound, &cfg).unwrap();
    tape.backward(&out.sum_all());
    let g = tape.grad(&bound).unwrap();
    for row in 0..10 {
        let nonzero = g.data()[row * 8..(row + 1) * 8].iter().any(|v| *v != 0.0);
        assert_eq!(nonzero, row == 3 || row == 7, "row {row}");
    }
}

#[test]
fn temporal_single_frame_closed_form() {
    let mut rng = rng();
    let p = TemporalBlockParams::init(&mut rng, 4, 2);
    let x = randn(&mut rng, vec![3, 4]); // t=1, s=3
    let out = temporal_attention(&x, 1, 3, &p);
    // each column is one token: attention weight 1, so
    // out = x + sum_h ln(x) Wv_h Wo_h row-wise
    let ln = x.layernorm(&p.ln.gamma, &p.ln.beta, LN_EPS);
    let mut attn: Option<Tensor> = None;
    for h in 0..2 {
        let o = ln.matmul(&p.attn.wv[h]).matmul(&p.attn.wo[h]);
        attn = Some(match attn {
            Some(acc) => acc.add(&o),
            None => o,
        });
    }
    let expect = x.add(&attn.unwrap());
    for (a, b) in out.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn temporal_frame_permutation_equivariance() {
    let mut rng = rng();
    let (t, s, c) = (4, 2, 4);
    let p = TemporalBlockParams::init(&mut rng, c, 2);
    let x = randn(&mut rng, vec![t * s, c]);
    let perm = [2usize, 0, 3, 1];
    let row_perm: Vec<usize> = (0..t * s).map(|i| perm[i / s] * s + i % s).collect();
    let shuffled = x.gather_rows(&row_perm);
    let a = temporal_attention(&x, t, s, &p).gather_rows(&row_perm);
    let b = temporal_attention(&shuffled, t, s, &p);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn temporal_gradcheck() {
    let mut rng = rng();
    let p = TemporalBlockParams::init(&mut rng, 4, 2);
    let x = randn(&mut rng, vec![6, 4]); // t=3, s=2
    let w = randn(&mut rng, vec![6, 4]);
    let report = grad_check(|x| temporal_attention(x, 3, 2, &p).mul(&w).sum_all(), &x, 1e-5);
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn blocks_preserve_shapes_across_configs() {
    let mut rng = rng();
    for trial in 0..20 {
        let heads = 1 + trial % 4;
        let width = heads * (2 + trial % 3) * 2;
        let tokens = 1 + trial % 7;
        let ctx_len = 1 + (trial * 3) % 5;
        let p = AttentionParams::init(&mut rng, width, heads);
        let x = randn(&mut rng, vec![tokens, width]);
        let ctx = randn(&mut rng, vec![ctx_len, width]);
        assert_eq!(mhsa(&x, &p, None).shape(), &[tokens, width]);
        assert_eq!(mhca(&x, &ctx, &p).shape(), &[tokens, width]);
        let m = MlpParams::init(&mut rng, &[width, width * 2, width]);
        assert_eq!(m.apply(&x).shape(), &[tokens, width]);
    }
}

#[test]
fn backbone_validation() {
    let mut cfg = test_backbone();
    assert!(cfg.validate().is_ok());
    cfg.frame_side = 50;
    assert!(cfg.validate().is_err());
}
