use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlkd::corpus::Sample;
use mlkd::teacher::SignalCache;
use mlkd::vocab::encode_batch;
use mlkd::{
    distill_student, evaluate, finetune_teacher, generate_synthetic, teacher_signals, train_probe_heads, Checkpoint,
    Corpus, Dialogue, DistillHyper, EncoderConfig, Error, F1Mode, LabelCatalog, LossConfig, Split, SyntheticSpec,
    Task, TeacherEnsemble, TrainHyper, Turn,
};

fn small_teacher() -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_hidden: 32,
        d_ff: 64,
        ..EncoderConfig::desk_teacher(0)
    }
}

fn small_corpus(seed: u64) -> Corpus {
    generate_synthetic(&SyntheticSpec {
        n_dialogues: 40,
        seed,
        ..SyntheticSpec::reference()
    })
    .unwrap()
}

/// Two domains whose turns each open with a domain word; intents are nested in domains.
fn domain_token_corpus(n_dialogues: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = ["hotel", "train"];
    let intents = ["book_hotel", "ask_hotel", "book_train", "ask_train"];
    let verbs = [["reserve", "need"], ["where", "when"]];
    let filler = ["please", "the", "a", "for", "me", "today", "now", "one"];
    let catalog = LabelCatalog::new(
        vec!["O".into()],
        intents.iter().map(|s| s.to_string()).collect(),
        domains.iter().map(|s| s.to_string()).collect(),
    )
    .unwrap();
    let mut dialogues = Vec::new();
    let mut split_of = BTreeMap::new();
    for i in 0..n_dialogues {
        let d = i % 2;
        let turns = (0..3)
            .map(|_| {
                let kind = rng.random_range(0..2);
                let mut tokens = vec![domains[d].to_string(), verbs[kind][rng.random_range(0..2)].to_string()];
                for _ in 0..rng.random_range(1..4) {
                    tokens.push(filler[rng.random_range(0..filler.len())].to_string());
                }
                Turn {
                    slot_tag_ids: vec![0; tokens.len()],
                    tokens,
                    intent_id: 2 * d + kind,
                }
            })
            .collect();
        let id = format!("t{i}");
        let split = match i % 10 {
            8 => Split::Dev,
            9 => Split::Test,
            _ => Split::Train,
        };
        split_of.insert(id.clone(), split);
        dialogues.push(Dialogue {
            id,
            turns,
            domain_id: d,
            source: "synthetic".into(),
        });
    }
    Corpus::new(catalog, dialogues, split_of).unwrap()
}

#[test]
fn step_count_is_batches_per_epoch_times_epochs() {
    let c = small_corpus(1);
    let n = c.samples(Split::Train).len();
    let run = finetune_teacher(&c, Task::Id, &small_teacher(), &TrainHyper::default(), 0).unwrap();
    assert_eq!(run.steps, n.div_ceil(32) * 3);
    assert_eq!(run.log.len(), 3);
    assert_eq!(run.log.last().unwrap().steps, run.steps);
}

#[test]
fn single_domain_dc_teacher_is_perfect() {
    let c = generate_synthetic(&SyntheticSpec {
        n_dialogues: 30,
        n_domains: 1,
        ..SyntheticSpec::reference()
    })
    .unwrap();
    let run = finetune_teacher(&c, Task::Dc, &small_teacher(), &TrainHyper::default(), 0).unwrap();
    let r = evaluate(&run.checkpoint, &c, Split::Train, Task::Dc, F1Mode::AllClasses).unwrap();
    assert_eq!(r.value, 1.0);
}

#[test]
fn reference_dc_teacher_fits_its_train_split() {
    let c = generate_synthetic(&SyntheticSpec::reference()).unwrap();
    let run = finetune_teacher(&c, Task::Dc, &EncoderConfig::desk_teacher(0), &TrainHyper::default(), 0).unwrap();
    let r = evaluate(&run.checkpoint, &c, Split::Train, Task::Dc, F1Mode::AllClasses).unwrap();
    assert!(r.value >= 0.90, "DC train accuracy {}", r.value);
}

/// Binary logistic regression by full-batch gradient descent on standardized features.
fn logistic_regression_accuracy(x: &[Vec<f64>], y: &[usize]) -> f64 {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect()).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (r, &t) in z.iter().zip(y) {
            let s = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = 1.0 / (1.0 + (-s).exp()) - t as f64;
            for j in 0..d {
                gw[j] += e * r[j] / n;
            }
            gb += e / n;
        }
        for j in 0..d {
            w[j] -= 0.5 * gw[j];
        }
        b -= 0.5 * gb;
    }
    let hits = z
        .iter()
        .zip(y)
        .filter(|(r, &t)| ((b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()) > 0.0) as usize == t)
        .count();
    hits as f64 / n
}

fn pooled_features(ck: &Checkpoint, c: &Corpus) -> (Vec<Vec<f64>>, Vec<usize>) {
    let samples = c.samples(Split::Train);
    let d = ck.encoder.config.d_hidden;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for chunk in samples.chunks(32) {
        let b = encode_batch(chunk, &ck.vocab, &c.catalog, ck.encoder.config.max_len).unwrap();
        let out = ck.encoder.infer(&b, None).unwrap();
        x.extend(out.pooled.chunks(d).map(<[f64]>::to_vec));
        y.extend(b.domain_targets.iter().copied());
    }
    (x, y)
}

#[test]
fn id_teacher_probed_for_dc_on_separable_features() {
    let c = domain_token_corpus(160, 3);
    let hp = TrainHyper::default();
    let teacher = finetune_teacher(&c, Task::Id, &EncoderConfig::desk_teacher(0), &hp, 0).unwrap().checkpoint;
    let (x, y) = pooled_features(&teacher, &c);
    let oracle = logistic_regression_accuracy(&x, &y);
    assert!(oracle >= 0.95, "pooled features not separable: {oracle}");

    let before = teacher.encoder.backbone_hash();
    let probed = train_probe_heads(&teacher, &c, Task::Dc, &hp, 0).unwrap();
    assert_eq!(probed.encoder.backbone_hash(), before);
    assert_eq!(probed.task, Some(Task::Id));
    let acc = evaluate(&probed, &c, Split::Train, Task::Dc, F1Mode::AllClasses).unwrap().value;
    assert!(acc >= 0.95, "probe train accuracy {acc}, oracle {oracle}");
}

#[test]
fn own_task_probe_is_rejected() {
    let c = small_corpus(2);
    let t = finetune_teacher(&c, Task::Sf, &small_teacher(), &TrainHyper::default(), 0).unwrap().checkpoint;
    assert!(train_probe_heads(&t, &c, Task::Sf, &TrainHyper::default(), 0).is_err());
}

fn full_ensemble(c: &Corpus) -> TeacherEnsemble {
    let hp = TrainHyper::default();
    let members = Task::ALL
        .iter()
        .map(|&own| {
            let mut ck = finetune_teacher(c, own, &small_teacher(), &hp, own as u64).unwrap().checkpoint;
            for target in Task::ALL {
                if target != own {
                    ck = train_probe_heads(&ck, c, target, &hp, 0).unwrap();
                }
            }
            ck
        })
        .collect();
    TeacherEnsemble::from_checkpoints(members).unwrap()
}

#[test]
fn fully_probed_ensemble_has_signals_for_every_task() {
    let c = small_corpus(4);
    let ens = full_ensemble(&c);
    let samples: Vec<Sample<'_>> = c.samples(Split::Train).into_iter().take(12).collect();
    let b = encode_batch(&samples, ens.vocab(), &c.catalog, 512).unwrap();
    let mask = b.token_positions();
    for task in Task::ALL {
        ens.check_heads(task).unwrap();
        let s = teacher_signals(&ens, &b, task, 1.0).unwrap();
        assert_eq!(s.probs.len(), 3);
        assert_eq!(s.pooled.len(), 3);
        for p in &s.probs {
            assert_eq!(p.len(), s.rows * s.classes);
            for (r, row) in p.chunks(s.classes).enumerate() {
                if task.is_token_level() && !mask[r] {
                    continue;
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn cached_signals_equal_direct_signals() {
    let c = small_corpus(5);
    let ens = full_ensemble(&c);
    let samples = c.samples(Split::Train);
    for task in Task::ALL {
        let cache = SignalCache::build(&ens, &c, &samples, task, 1.0, 7, 512).unwrap();
        assert_eq!(cache.len(), samples.len());
        for idx in [vec![0, 1, 2], vec![9, 3, 17, 4, 11], vec![samples.len() - 1]] {
            let picked: Vec<Sample<'_>> = idx.iter().map(|&i| samples[i]).collect();
            let b = encode_batch(&picked, ens.vocab(), &c.catalog, 512).unwrap();
            assert_eq!(cache.gather(&idx, &b).unwrap(), teacher_signals(&ens, &b, task, 1.0).unwrap());
        }
    }
}

#[test]
fn catalog_mismatch_is_a_hard_error() {
    let c = small_corpus(6);
    let other = generate_synthetic(&SyntheticSpec {
        n_dialogues: 40,
        n_domains: 3,
        ..SyntheticSpec::reference()
    })
    .unwrap();
    let t = finetune_teacher(&c, Task::Id, &small_teacher(), &TrainHyper::default(), 0).unwrap().checkpoint;
    assert!(matches!(
        evaluate(&t, &other, Split::Test, Task::Id, F1Mode::AllClasses),
        Err(Error::CatalogMismatch(_))
    ));
    let ens = TeacherEnsemble::from_checkpoints(vec![t]).unwrap();
    let err = distill_student(
        &EncoderConfig::desk_student(0),
        &ens,
        &other,
        Task::Id,
        &LossConfig::default(),
        &DistillHyper::default(),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::CatalogMismatch(_)));
}
