use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check, DEFAULT_FD_STEP};
use crate::tokenize::{build_alignment_masks, pack_pair, N_SPECIAL};

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_len: 12,
        dropout: 0.0,
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Weighted sum of a node against fixed random weights, as a scalar node.
fn project(tape: &mut Tape<'_>, v: Var, weights: &Tensor) -> Var {
    let w = tape.mul_const(v, weights.data().to_vec());
    tape.sum(w)
}

fn tape_gradient(
    point: &[Tensor],
    build: impl Fn(&mut Tape<'_>, &[Var]) -> Var,
) -> crate::error::Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new(point);
    let vars: Vec<Var> = (0..point.len()).map(|i| tape.param(i)).collect();
    let out = build(&mut tape, &vars);
    let value = tape.value(out).data()[0];
    let grads = tape.backward(&[(out, Tensor::scalar(1.0))]);
    Ok((value, grads.into_dense(point)))
}

#[test]
fn attention_block_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 5;
    let point = vec![
        random_tensor(&[n, 8], &mut rng, 1.0),
        random_tensor(&[8, 8], &mut rng, 0.5),
        random_tensor(&[8], &mut rng, 0.5),
        random_tensor(&[8, 8], &mut rng, 0.5),
        random_tensor(&[8, 8], &mut rng, 0.5),
        random_tensor(&[8, 8], &mut rng, 0.5),
        random_tensor(&[8], &mut rng, 1.0),
        random_tensor(&[8], &mut rng, 0.3),
    ];
    let weights = random_tensor(&[n, 8], &mut rng, 1.0);
    let f = |p: &[Tensor]| {
        tape_gradient(p, |t, v| {
            let q = t.matmul(v[0], v[1]);
            let q = t.add_bias(q, v[2]);
            let k = t.matmul(v[0], v[3]);
            let vv = t.matmul(v[0], v[4]);
            let a = t.attention(q, k, vv, 2);
            let o = t.matmul(a, v[5]);
            let r = t.add(v[0], o);
            let h = t.layer_norm(r, v[6], v[7], LAYER_NORM_EPS);
            project(t, h, &weights)
        })
    };
    let r = grad_check(f, &point, DEFAULT_FD_STEP).unwrap();
    assert!(r.max_relative_error < 1e-6, "{r:?}");
}

#[test]
fn ffn_block_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let point = vec![
        random_tensor(&[4, 6], &mut rng, 1.0),
        random_tensor(&[6, 10], &mut rng, 0.7),
        random_tensor(&[10], &mut rng, 0.3),
        random_tensor(&[10, 6], &mut rng, 0.7),
        random_tensor(&[6], &mut rng, 0.3),
        random_tensor(&[6], &mut rng, 1.0),
        random_tensor(&[6], &mut rng, 0.3),
    ];
    let weights = random_tensor(&[4, 6], &mut rng, 1.0);
    let f = |p: &[Tensor]| {
        tape_gradient(p, |t, v| {
            let a = t.matmul(v[0], v[1]);
            let a = t.add_bias(a, v[2]);
            let a = t.gelu(a);
            let b = t.matmul(a, v[3]);
            let b = t.add_bias(b, v[4]);
            let r = t.add(v[0], b);
            let h = t.layer_norm(r, v[5], v[6], LAYER_NORM_EPS);
            project(t, h, &weights)
        })
    };
    let r = grad_check(f, &point, DEFAULT_FD_STEP).unwrap();
    assert!(r.max_relative_error < 1e-6, "{r:?}");
}

#[test]
fn gather_select_and_cross_entropy_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = vec![
        random_tensor(&[7, 4], &mut rng, 1.0),
        random_tensor(&[7], &mut rng, 1.0),
    ];
    let f = |p: &[Tensor]| {
        tape_gradient(p, |t, v| {
            let x = t.gather(v[0], &[3, 1, 3, 6]);
            let x = t.select_rows(x, &[0, 2, 3]);
            let logits = t.matmul_bt(x, v[0]);
            let logits = t.add_bias(logits, v[1]);
            t.cross_entropy(logits, &[(0, 2), (1, 5), (2, 5)])
        })
    };
    let r = grad_check(f, &point, DEFAULT_FD_STEP).unwrap();
    assert!(r.max_relative_error < 1e-7, "{r:?}");
}

#[test]
fn full_encoder_cls_matches_finite_differences() {
    let cfg = tiny_config();
    let base = ModelParams::init(cfg.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Larger-than-init weights make the check sensitive.
    let point: Vec<Tensor> = base
        .tensors()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
            t
        })
        .collect();
    let ex = pack_pair(&[5, 6, 7], &[8, 9], 12).unwrap();
    let masks = build_alignment_masks(&ex);
    let weights = random_tensor(&[1, 8], &mut rng, 1.0);
    let names = base.names().to_vec();
    let f = |p: &[Tensor]| {
        let params = ModelParams::from_named(
            cfg.clone(),
            names.iter().cloned().zip(p.iter().cloned()).collect(),
        )?;
        let mut tape = Tape::new(params.tensors());
        let vars = ParamVars::register(&mut tape, &params);
        let enc = encode_on_tape::<ChaCha8Rng>(
            &mut tape,
            &vars,
            &params,
            &ex.ids,
            &ex.segment_ids,
            &masks.mask_b,
            None,
        )?;
        let row = enc.row_of(ex.cls_b_pos).unwrap();
        let z = tape.select_rows(enc.hidden, &[row]);
        let out = project(&mut tape, z, &weights);
        let value = tape.value(out).data()[0];
        let g = tape.backward(&[(out, Tensor::scalar(1.0))]);
        Ok((value, g.into_dense(params.tensors())))
    };
    let r = grad_check(f, &point, DEFAULT_FD_STEP).unwrap();
    assert!(r.max_relative_error < 1e-6, "{r:?}");
}

#[test]
fn all_false_attendable_is_rejected() {
    let p = ModelParams::init(tiny_config(), 1).unwrap();
    let ex = pack_pair(&[5], &[6], 12).unwrap();
    let r = forward(&p, &ex.ids, &ex.segment_ids, &[false; 12]);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn singleton_attention_depends_only_on_own_stack() {
    let p = ModelParams::init(tiny_config(), 1).unwrap();
    let ex = pack_pair(&[5, 6, 7], &[8], 12).unwrap();
    let mut only = vec![false; 12];
    only[2] = true;
    let h1 = forward(&p, &ex.ids, &ex.segment_ids, &only).unwrap();
    let mut ids = ex.ids.clone();
    ids[1] = 15;
    ids[3] = 11;
    let h2 = forward(&p, &ids, &ex.segment_ids, &only).unwrap();
    assert_eq!(h1, h2);
    let maps = attention_maps(&p, &ex.ids, &ex.segment_ids, &only).unwrap();
    assert!(maps.iter().all(|m| m.probs.iter().all(|&v| v == 1.0)));
    for r in (0..12).filter(|&r| r != 2) {
        assert!(h1.row(r).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn occluded_contents_do_not_leak() {
    let p = ModelParams::init(tiny_config(), 2).unwrap();
    let ex = pack_pair(&[5, 6, 7], &[8, 9], 12).unwrap();
    let m = build_alignment_masks(&ex);
    let h1 = forward(&p, &ex.ids, &ex.segment_ids, &m.mask_a).unwrap();
    let mut ids = ex.ids.clone();
    ids.swap(6, 7);
    ids[5] = 19;
    ids[11] = 4;
    let h2 = forward(&p, &ids, &ex.segment_ids, &m.mask_a).unwrap();
    for pos in (0..12).filter(|&q| m.mask_a[q]) {
        assert_eq!(h1.row(pos), h2.row(pos));
    }
    let again = forward(&p, &ex.ids, &ex.segment_ids, &m.mask_a).unwrap();
    assert_eq!(h1, again);
}

#[test]
fn attention_rows_are_stochastic() {
    let p = ModelParams::init(tiny_config(), 3).unwrap();
    let ex = pack_pair(&[5, 6, 7, 4], &[8, 9, 10], 12).unwrap();
    for m in attention_maps(&p, &ex.ids, &ex.segment_ids, &ex.padding_mask).unwrap() {
        let n = m.positions.len();
        for row in m.probs.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn mlm_logits_zero_hidden_is_uniform() {
    let cfg = tiny_config();
    let p = ModelParams::init(cfg.clone(), 1).unwrap();
    let logits = mlm_logits(&Tensor::zeros(&[12, 8]), &p);
    assert_eq!(logits.shape(), &[12, cfg.vocab_size]);
    assert!(logits.data().iter().all(|v| *v == 0.0));
    let probs = crate::numerics::softmax(logits.row(0));
    assert!(probs.iter().all(|q| (q - 1.0 / 20.0).abs() < 1e-15));
    // Cross-entropy at uniform logits is exactly ln V.
    let mut tape = Tape::new(&[]);
    let l = tape.constant(logits);
    let ce = tape.cross_entropy(l, &[(0, 4), (3, 9)]);
    assert!((tape.value(ce).data()[0] / 2.0 - 20f64.ln()).abs() < 1e-12);
}

#[test]
fn mlm_bias_shifts_logits() {
    let mut p = ModelParams::init(tiny_config(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hidden = random_tensor(&[12, 8], &mut rng, 1.0);
    let before = mlm_logits(&hidden, &p);
    p.get_mut(ParamId::MLM_BIAS).data_mut()[7] += 2.5;
    let after = mlm_logits(&hidden, &p);
    for r in 0..12 {
        for c in 0..20 {
            let delta = after.get(r, c) - before.get(r, c);
            let expect = if c == 7 { 2.5 } else { 0.0 };
            assert!((delta - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn cls_embedding_bounds() {
    let h = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    assert_eq!(cls_embedding(&h, 0).unwrap(), vec![1., 2.]);
    assert!(cls_embedding(&h, 2).is_err());
}

#[test]
fn identity_predictor() {
    let z = vec![0.5, -1.0, 3.0];
    assert_eq!(IdentityPredictor.predict(&z), z);
    assert_eq!(IdentityPredictor.predict(&[0.0; 3]), vec![0.0; 3]);
    assert_eq!(
        IdentityPredictor.backward(&z, &[1.0, 2.0, 3.0]),
        vec![1.0, 2.0, 3.0]
    );
}

#[test]
fn occluded_passes_give_distinct_embeddings() {
    let p = ModelParams::init(tiny_config(), 4).unwrap();
    let ex = pack_pair(&[5, 6, 7], &[8, 9], 12).unwrap();
    let (za, zb) = occluded_cls_pair(&p, &ex).unwrap();
    assert_eq!(za.len(), 8);
    assert_ne!(za, zb);
    assert_eq!(occluded_cls_pair(&p, &ex).unwrap(), (za, zb));
}

#[test]
fn pass_a_has_no_gradient_into_segment_b() {
    let p = ModelParams::init(tiny_config(), 5).unwrap();
    // Segment B tokens (15..=17) never occur in segment A.
    let ex = pack_pair(&[5, 6, 7], &[15, 16, 17], 12).unwrap();
    let m = build_alignment_masks(&ex);
    let mut tape = Tape::new(p.tensors());
    let vars = ParamVars::register(&mut tape, &p);
    let enc = encode_on_tape::<ChaCha8Rng>(
        &mut tape,
        &vars,
        &p,
        &ex.ids,
        &ex.segment_ids,
        &m.mask_a,
        None,
    )
    .unwrap();
    let z = tape.select_rows(enc.hidden, &[enc.row_of(0).unwrap()]);
    let s = tape.sum(z);
    let g = tape.backward(&[(s, Tensor::scalar(1.0))]);
    let tok = g.get(0).unwrap();
    for id in 15..=17 {
        assert!(tok.row(id).iter().all(|v| *v == 0.0));
    }
    assert!(tok.row(5).iter().any(|v| *v != 0.0));
    let pos = g.get(1).unwrap();
    for q in ex.cls_b_pos..12 {
        assert!(pos.row(q).iter().all(|v| *v == 0.0));
    }
    assert!(g.get(2).unwrap().row(1).iter().all(|v| *v == 0.0));
}

#[test]
fn dropout_is_seeded() {
    let cfg = EncoderConfig {
        dropout: 0.5,
        ..tiny_config()
    };
    let p = ModelParams::init(cfg, 5).unwrap();
    let ex = pack_pair(&[5, 6, 7], &[8], 12).unwrap();
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new(p.tensors());
        let vars = ParamVars::register(&mut tape, &p);
        let d = Dropout {
            rate: 0.5,
            rng: &mut rng,
        };
        let enc = encode_on_tape(
            &mut tape,
            &vars,
            &p,
            &ex.ids,
            &ex.segment_ids,
            &ex.padding_mask,
            Some(d),
        )
        .unwrap();
        tape.value(enc.hidden).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let tokens: Vec<String> = (0..cfg.vocab_size - N_SPECIAL)
        .map(|i| format!("t{i:02}"))
        .collect();
    let pair = crate::corpus::ParallelPair {
        text_a: tokens.join(" "),
        lang_a: "x".into(),
        text_b: String::new(),
        lang_b: "y".into(),
        related: true,
    };
    let vocab = crate::tokenize::Vocab::build(&[pair]);
    let p = ModelParams::init(cfg.clone(), 8).unwrap();
    let meta = serde_json::json!({"lambda": 1.0});
    save_checkpoint(dir.path(), &p, &vocab, &meta).unwrap();
    let ck = load_checkpoint(dir.path(), Some(&cfg)).unwrap();
    assert_eq!(ck.params, p);
    assert_eq!(ck.vocab, vocab);
    assert_eq!(ck.metadata, meta);
    let other = EncoderConfig { d_model: 16, ..cfg };
    assert!(matches!(
        load_checkpoint(dir.path(), Some(&other)),
        Err(Error::CheckpointMismatch(_))
    ));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing"), None),
        Err(Error::Io { .. })
    ));
}
