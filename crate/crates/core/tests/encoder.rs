use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlkd::distill::loss_sce;
use mlkd::encoder::checkpoint::{MANIFEST_FILE, PARAMS_FILE};
use mlkd::encoder::{load_checkpoint, load_checkpoint_expecting, seeded_rng, LrSchedule, Mode, TaskHead};
use mlkd::gradcheck::relative_error;
use mlkd::vocab::{EncodedBatch, Vocabulary, CLS_ID, IGNORE_INDEX, PAD_ID};
use mlkd::{Checkpoint, Encoder, EncoderConfig, Error, LabelCatalog, Task};

const VOCAB: usize = 20;

/// Rows of real token ids (CLS is prepended), padded to the longest row.
fn batch(rows: &[&[u32]]) -> EncodedBatch {
    let width = 1 + rows.iter().map(|r| r.len()).max().unwrap();
    let n = rows.len();
    let mut b = EncodedBatch {
        n,
        width,
        token_ids: vec![PAD_ID; n * width],
        mask: vec![0; n * width],
        slot_targets: vec![IGNORE_INDEX; n * width],
        intent_targets: vec![0; n],
        domain_targets: vec![0; n],
    };
    for (i, r) in rows.iter().enumerate() {
        b.token_ids[i * width] = CLS_ID;
        b.mask[i * width] = 1;
        for (j, &t) in r.iter().enumerate() {
            b.token_ids[i * width + 1 + j] = t;
            b.mask[i * width + 1 + j] = 1;
            b.slot_targets[i * width + 1 + j] = (t % 3) as i32;
        }
    }
    b
}

fn tiny(d: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: layers,
        n_heads: 2,
        d_hidden: d,
        d_ff: 2 * d,
        dropout: 0.0,
        max_len: 16,
        vocab_size: VOCAB,
        init_std: 0.1,
        embed_init_std: 1.0,
    }
}

fn with_heads(cfg: EncoderConfig, heads: &[(Task, usize)], seed: u64) -> Encoder {
    let mut rng = seeded_rng(seed);
    let mut e = Encoder::new(cfg, &mut rng).unwrap();
    for &(t, k) in heads {
        e.add_head(t, k, &mut rng).unwrap();
    }
    e
}

#[test]
fn student_shapes() {
    let e = with_heads(EncoderConfig::student(VOCAB), &[(Task::Id, 7), (Task::Sf, 5)], 0);
    let b = batch(&[&[3, 4, 5, 6], &[7, 8]]);
    assert_eq!((b.n, b.width), (2, 5));
    let id = e.infer(&b, Some(Task::Id)).unwrap();
    assert_eq!(id.logits.len(), 2 * 7);
    assert_eq!(id.classes, 7);
    let sf = e.infer(&b, Some(Task::Sf)).unwrap();
    assert_eq!(sf.logits.len(), 2 * 5 * 5);
    assert_eq!(sf.pooled.len(), 2 * 768);
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_uses_the_stream() {
    let mut cfg = tiny(16, 2);
    cfg.dropout = 0.3;
    let e = with_heads(cfg, &[(Task::Id, 4)], 1);
    let b = batch(&[&[3, 4, 5], &[6, 7, 8, 9]]);
    let a = e.forward(&b, Some(Task::Id), Mode::Eval, &mut seeded_rng(1)).unwrap().0;
    let c = e.forward(&b, Some(Task::Id), Mode::Eval, &mut seeded_rng(2)).unwrap().0;
    assert_eq!(a.logits, c.logits);
    let t1 = e.forward(&b, Some(Task::Id), Mode::Train, &mut seeded_rng(5)).unwrap().0;
    let t2 = e.forward(&b, Some(Task::Id), Mode::Train, &mut seeded_rng(5)).unwrap().0;
    let t3 = e.forward(&b, Some(Task::Id), Mode::Train, &mut seeded_rng(6)).unwrap().0;
    assert_eq!(t1.logits, t2.logits);
    assert_ne!(t1.logits, t3.logits);
    assert_ne!(t1.logits, a.logits);
}

fn ce(e: &Encoder, b: &EncodedBatch, targets: &[i32], k: usize) -> f64 {
    let out = e.infer(b, Some(Task::Id)).unwrap();
    loss_sce(&out.logits, targets, k).unwrap().value
}

#[test]
fn cross_entropy_gradients_match_central_differences() {
    let k = 3;
    let mut e = with_heads(tiny(8, 1), &[(Task::Id, k)], 2);
    let b = batch(&[&[3, 4, 5], &[6, 7], &[8, 9, 10, 11]]);
    let targets = [0, 2, 1];
    let (out, tape) = e.forward(&b, Some(Task::Id), Mode::Eval, &mut seeded_rng(0)).unwrap();
    let dl = loss_sce(&out.logits, &targets, k).unwrap().grad;
    let grads = e.backward(&tape, Some(&dl), None).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-3f32;
    let mut worst: f64 = 0.0;
    let ids: Vec<usize> = (0..e.params.len()).collect();
    for _ in 0..100 {
        let id = ids[rng.random_range(0..ids.len())];
        let at = rng.random_range(0..e.params.tensor(id).numel());
        let x0 = e.params.tensor(id).data[at];
        e.params.tensor_mut(id).data[at] = x0 + eps;
        let xp = e.params.tensor(id).data[at];
        let lp = ce(&e, &b, &targets, k);
        e.params.tensor_mut(id).data[at] = x0 - eps;
        let xm = e.params.tensor(id).data[at];
        let lm = ce(&e, &b, &targets, k);
        e.params.tensor_mut(id).data[at] = x0;
        let numeric = (lp - lm) / (xp as f64 - xm as f64);
        worst = worst.max(relative_error(grads.get(id)[at], numeric));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn unreached_head_gets_zero_gradient() {
    let e = with_heads(tiny(8, 1), &[(Task::Id, 3), (Task::Dc, 2)], 3);
    let b = batch(&[&[3, 4], &[5, 6, 7]]);
    let (out, tape) = e.forward(&b, Some(Task::Id), Mode::Eval, &mut seeded_rng(0)).unwrap();
    let dl = loss_sce(&out.logits, &[1, 2], 3).unwrap().grad;
    let g = e.backward(&tape, Some(&dl), None).unwrap();
    for name in [TaskHead::weight_name(Task::Dc), TaskHead::bias_name(Task::Dc)] {
        let id = e.params.id(&name).unwrap();
        assert!(g.get(id).iter().all(|&v| v == 0.0), "{name}");
    }
    let id = e.params.id(&TaskHead::weight_name(Task::Id)).unwrap();
    assert!(g.get(id).iter().any(|&v| v != 0.0));

    let pooled_only = e.backward(&tape, None, Some(&vec![1.0; 2 * 8])).unwrap();
    for t in [Task::Id, Task::Dc] {
        let id = e.params.id(&TaskHead::weight_name(t)).unwrap();
        assert!(pooled_only.get(id).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn doubling_the_loss_doubles_every_gradient() {
    let e = with_heads(tiny(8, 2), &[(Task::Sf, 3)], 4);
    let b = batch(&[&[3, 4, 5], &[6, 7]]);
    let (out, tape) = e.forward(&b, Some(Task::Sf), Mode::Eval, &mut seeded_rng(0)).unwrap();
    let dl = loss_sce(&out.logits, &b.slot_targets, 3).unwrap().grad;
    let dl2: Vec<f64> = dl.iter().map(|v| 2.0 * v).collect();
    let g1 = e.backward(&tape, Some(&dl), None).unwrap();
    let g2 = e.backward(&tape, Some(&dl2), None).unwrap();
    for (a, b) in g1.grads.iter().flatten().zip(g2.grads.iter().flatten()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn padding_columns_do_not_change_real_positions() {
    let e = with_heads(tiny(16, 2), &[(Task::Id, 4), (Task::Sf, 3)], 5);
    let b = batch(&[&[3, 4, 5, 6, 7], &[8, 9]]);
    for extra in [1, 4, 9] {
        let p = b.with_extra_padding(extra);
        let id0 = e.infer(&b, Some(Task::Id)).unwrap();
        let id1 = e.infer(&p, Some(Task::Id)).unwrap();
        for (x, y) in id0.logits.iter().zip(&id1.logits) {
            assert!((x - y).abs() < 1e-6);
        }
        let sf0 = e.infer(&b, Some(Task::Sf)).unwrap();
        let sf1 = e.infer(&p, Some(Task::Sf)).unwrap();
        for i in 0..b.n {
            for j in 0..b.row_len(i) {
                for c in 0..3 {
                    let x = sf0.logits[(i * b.width + j) * 3 + c];
                    let y = sf1.logits[(i * p.width + j) * 3 + c];
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }
}

fn checkpoint(cfg: EncoderConfig) -> Checkpoint {
    let catalog = LabelCatalog::new(
        vec!["O".into(), "B-x".into(), "I-x".into()],
        vec!["a".into(), "b".into()],
        vec!["d".into()],
    )
    .unwrap();
    let words: Vec<String> = (0..VOCAB - 3).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_words(words);
    let e = with_heads(cfg, &[(Task::Id, 2), (Task::Sf, 3)], 6);
    Checkpoint::new(e, catalog, vocab, Some(Task::Id)).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(tiny(16, 2));
    ck.save(dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.encoder.params.len(), ck.encoder.params.len());
    for (a, b) in ck.encoder.params.iter().zip(back.encoder.params.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &mlkd::encoder::Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back, ck);
}

#[test]
fn truncated_blob_names_the_missing_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(tiny(16, 2));
    ck.save(dir.path()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    let last = manifest["tensors"].as_array().unwrap().last().unwrap().clone();
    let blob = std::fs::read(dir.path().join(PARAMS_FILE)).unwrap();
    let cut = last["offset"].as_u64().unwrap() as usize;
    std::fs::write(dir.path().join(PARAMS_FILE), &blob[..cut]).unwrap();
    match load_checkpoint(dir.path()).unwrap_err() {
        Error::Checkpoint(msg) => assert!(msg.contains(last["name"].as_str().unwrap()), "{msg}"),
        e => panic!("expected a checkpoint error, got {e}"),
    }
}

#[test]
fn layer_count_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(tiny(16, 2));
    ck.save(dir.path()).unwrap();
    let err = load_checkpoint_expecting(dir.path(), &tiny(16, 6)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(load_checkpoint_expecting(dir.path(), &tiny(16, 2)).is_ok());
}

#[test]
fn warmup_schedule_points() {
    let s = LrSchedule::new(5e-5, 0.1, 1000);
    assert_eq!(s.warmup_steps(), 100);
    assert!((s.lr(100) - 5e-5).abs() < 1e-18);
    assert!((s.lr(50) - 2.5e-5).abs() < 1e-18);
    assert_eq!(s.lr(1000), 5e-5);
}
