use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::ctes::{pad_batch, Dataset, Sequence};
use crate::params::{finite_difference, max_relative_error, ParamGroup};

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, num_marks: usize) -> Sequence<f64> {
    let mut t = 0.0;
    let mut times = Vec::new();
    let mut marks = Vec::new();
    for _ in 0..n {
        t += rng.random_range(0.1..1.5);
        times.push(t);
        marks.push(rng.random_range(0..num_marks));
    }
    Sequence::new(times, marks).unwrap()
}

fn small_model(seed: u64) -> MtppModel<f64> {
    MtppModel::new(MtppConfig::new(3, 4), seed).unwrap()
}

fn embeddings(model: &MtppModel<f64>, seq: &Sequence<f64>) -> Vec<f64> {
    let tape = Tape::new();
    let input = SequenceInput::from_sequence(seq, model.config.num_marks);
    encode(&tape, &model.config, &model.params.constants(), &input).unwrap().to_vec()
}

#[test]
fn single_event_embedding_is_ffn_of_value_projection() {
    let model = small_model(1);
    let seq = Sequence::new(vec![0.7], vec![2]).unwrap();
    let h = embeddings(&model, &seq);
    let p = &model.params;
    let d = 4;
    let z: Vec<f64> = (0..d)
        .map(|k| {
            let freq = 10000f64.powf(-2.0 * (k % 2) as f64 / d as f64);
            let pe = if k < 2 { (0.7 * freq).sin() } else { (0.7 * freq).cos() };
            p.mark_embed.values[2 * d + k] + pe * p.time_weight.values[k]
        })
        .collect();
    let vz: Vec<f64> = (0..d).map(|j| (0..d).map(|i| z[i] * p.enc_v.values[i * d + j]).sum()).collect();
    for j in 0..d {
        let pre: f64 = (0..d).map(|i| vz[i] * p.enc_out.values[i * d + j]).sum::<f64>() + p.enc_out_b.values[j];
        assert!((h[j] - pre.tanh()).abs() < 1e-12);
    }
}

#[test]
fn embeddings_are_causal() {
    let model = small_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_sequence(&mut rng, 6, 3);
    let base = embeddings(&model, &seq);
    for i in 0..5 {
        let mut times = seq.times().to_vec();
        let mut marks = seq.marks().to_vec();
        for j in (i + 1)..6 {
            times[j] += 0.37 * (j - i) as f64;
            marks[j] = (marks[j] + 1) % 3;
        }
        let changed = embeddings(&model, &Sequence::new(times, marks).unwrap());
        assert_eq!(&base[..(i + 1) * 4], &changed[..(i + 1) * 4], "prefix {i}");
    }
}

#[test]
fn padding_does_not_change_real_embeddings_or_nll() {
    let model = small_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = random_sequence(&mut rng, 4, 3);
    let batch = pad_batch(std::slice::from_ref(&seq), 7, 3).unwrap();
    let tape = Tape::new();
    let w = model.params.constants();
    let h_pad = encode(&tape, &model.config, &w, &SequenceInput::from_padded(&batch, 0)).unwrap();
    let h = embeddings(&model, &seq);
    assert_eq!(&h_pad.values()[..16], &h[..]);

    let mut shuffled = batch.clone();
    shuffled.times[0][4..].copy_from_slice(&[20.0, 21.5, 30.0]);
    let h_shuf = encode(&tape, &model.config, &w, &SequenceInput::from_padded(&shuffled, 0)).unwrap();
    assert_eq!(&h_shuf.values()[..16], &h[..]);

    let clean = nll_clean(&model, &seq).unwrap();
    assert!((nll_padded(&model, &batch, 0).unwrap() - clean).abs() < 1e-12);
}

#[test]
fn intensity_examples() {
    let cfg = MtppConfig::new(2, 4);
    let zero = MtppModel::from_params(cfg.clone(), MtppParams::zeros(&cfg)).unwrap();
    let h = [0.3, -0.2, 0.5, 0.1];
    assert!((intensity(&zero, &h, 1.0, 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(matches!(
        intensity(&zero, &h, 0.5, 1.0),
        Err(MtppError::QueryBeforeLast { .. })
    ));

    let model = small_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-50.0..50.0)).collect();
        assert!(intensity(&model, &h, 3.0, 1.0).unwrap() > 0.0);
    }

    // larger v.h gives larger intensity
    let mut m = zero.clone();
    m.params.int_v.values = vec![1.0, 0.0, 0.0, 0.0];
    let lo = intensity(&m, &[0.1, 0.0, 0.0, 0.0], 2.0, 1.0).unwrap();
    let hi = intensity(&m, &[0.4, 0.0, 0.0, 0.0], 2.0, 1.0).unwrap();
    assert!(hi > lo);
}

#[test]
fn mark_distribution_examples() {
    let cfg = MtppConfig::new(4, 2);
    let zero = MtppModel::from_params(cfg.clone(), MtppParams::zeros(&cfg)).unwrap();
    for p in mark_dist(&zero, &[0.4, -1.0]) {
        assert!((p - 0.25f64).abs() < 1e-15);
    }

    let mut model = MtppModel::<f64>::new(cfg, 8).unwrap();
    let h = [0.7, -0.3];
    let before = mark_dist(&model, &h);
    assert!((before.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for b in model.params.mark_b.values.iter_mut() {
        *b += 3.5;
    }
    let after = mark_dist(&model, &h);
    for (x, y) in before.iter().zip(&after) {
        assert!((x - y).abs() < 1e-12);
    }
    let logits = mark_logits(&model, &h);
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    assert_eq!(argmax(&logits), argmax(&after));
}

#[test]
fn single_event_nll_with_zero_weights() {
    let cfg = MtppConfig::new(3, 4);
    let zero = MtppModel::from_params(cfg.clone(), MtppParams::zeros(&cfg)).unwrap();
    let t1 = 1.7;
    let seq = Sequence::new(vec![t1], vec![1]).unwrap();
    let ln2 = 2f64.ln();
    let expected = -(ln2.ln() - ln2 * t1 + (1.0f64 / 3.0).ln());
    assert!((nll_clean(&zero, &seq).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn nll_gradients_match_finite_differences() {
    for seed in 0..4 {
        let mut model = small_model(10 + seed);
        // nonzero slope exercises the elapsed-time path of the integral
        model.params.int_w.values[0] = -0.3;
        model.params.int_b.values[0] = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=6);
        let seq = random_sequence(&mut rng, n, 3);
        let (_, analytic) = nll_with_gradients(&model, &seq).unwrap();
        let numeric = finite_difference(&model.params, 1e-5, |p| {
            nll_clean(&MtppModel::from_params(model.config.clone(), p.clone())?, &seq)
        })
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn nll_does_not_depend_on_unused_padding_embedding() {
    let model = small_model(12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = random_sequence(&mut rng, 5, 3);
    let (_, g) = nll_with_gradients(&model, &seq).unwrap();
    let names: Vec<_> = model.params.named().iter().map(|(n, _)| *n).collect();
    let k = names.iter().position(|&n| n == "mark_embed").unwrap();
    assert!(g[k][3 * 4..].iter().all(|&x| x == 0.0));
}

#[test]
fn constant_intensity_prediction_matches_exponential_mean() {
    let mu: f64 = 2.0;
    let mut cfg = MtppConfig::new(3, 4);
    cfg.t_max = 10.0 / mu;
    let mut params = MtppParams::zeros(&cfg);
    params.int_b.values[0] = mu.exp_m1().ln();
    let model = MtppModel::from_params(cfg, params).unwrap();
    let p = predict_next(&model, &[0.0; 4], 3.0);
    assert!((p.time - 3.0 - 1.0 / mu).abs() < 1e-3, "{}", p.time);
    assert_eq!(p.mark, 0);
    assert!(!p.truncated);
}

#[test]
fn predictions_lie_after_the_last_event_and_flag_truncation() {
    let model = small_model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!(predict_next(&model, &h, 5.0).time > 5.0);
    }
    let mut cfg = MtppConfig::new(3, 4);
    cfg.t_max = 0.5;
    let slow = MtppModel::from_params(cfg.clone(), MtppParams::zeros(&cfg)).unwrap();
    assert!(predict_next(&slow, &[0.0; 4], 0.0).truncated);
}

#[test]
fn metrics_of_injected_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<_> = (0..5).map(|_| random_sequence(&mut rng, 6, 3)).collect();
    let ds = Dataset::new("m", 3, seqs).unwrap();
    let oracle: Vec<Vec<Prediction<f64>>> = ds
        .sequences
        .iter()
        .map(|s| {
            s.events()
                .skip(1)
                .map(|e| Prediction {
                    time: e.t,
                    mark: e.c,
                    truncated: false,
                })
                .collect()
        })
        .collect();
    let m = metrics_from_predictions(&ds, &oracle);
    assert_eq!((m.mae, m.mpa, m.events), (0.0, 1.0, 25));
}

#[test]
fn uniform_random_marks_score_one_over_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seqs: Vec<_> = (0..100).map(|_| random_sequence(&mut rng, 101, 5)).collect();
    let ds = Dataset::new("u", 5, seqs).unwrap();
    let preds: Vec<Vec<Prediction<f64>>> = ds
        .sequences
        .iter()
        .map(|s| {
            s.events()
                .skip(1)
                .map(|e| Prediction {
                    time: e.t + 1.0,
                    mark: rng.random_range(0..5),
                    truncated: false,
                })
                .collect()
        })
        .collect();
    let m = metrics_from_predictions(&ds, &preds);
    assert_eq!(m.events, 10_000);
    assert!((m.mpa - 0.2).abs() < 0.03, "{}", m.mpa);
    assert!((m.mae - 1.0).abs() < 1e-12);
}

#[test]
fn model_metrics_stay_in_range() {
    let model = small_model(14);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seqs: Vec<_> = (0..8).map(|i| random_sequence(&mut rng, 1 + i, 3)).collect();
    let ds = Dataset::new("r", 3, seqs).unwrap();
    let m = metrics(&model, &ds, &ds).unwrap();
    assert!((0.0..=1.0).contains(&m.mpa));
    assert!(m.mae >= 0.0);
    assert_eq!(m.sequences, 7);
}

#[test]
fn training_on_one_sequence_lowers_its_nll() {
    let mut model = small_model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ds = Dataset::new("one", 3, vec![random_sequence(&mut rng, 10, 3)]).unwrap();
    let cfg = TrainConfig {
        adam: crate::optim::AdamConfig {
            lr: 1e-2,
            ..Default::default()
        },
        epochs: 50,
        ..Default::default()
    };
    let report = train_mle(&mut model, &ds, None, &cfg).unwrap();
    let last = mean_nll(&model, &ds).unwrap();
    assert!(last < report.initial_train_loss, "{last} vs {}", report.initial_train_loss);
}

#[test]
fn checkpoint_round_trip_and_shape_check() {
    let model = small_model(16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let back = MtppModel::<f64>::load(&path).unwrap();
    assert_eq!(back, model);

    let mut ck = model.to_checkpoint();
    ck.meta.insert("dim".into(), 6.into());
    assert!(matches!(
        MtppModel::<f64>::from_checkpoint(&ck),
        Err(MtppError::Checkpoint(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(MtppModel::<f64>::new(MtppConfig::new(3, 3), 0).is_err());
    assert!(MtppModel::<f64>::new(MtppConfig::new(0, 4), 0).is_err());
}

#[test]
fn f32_model_runs() {
    let model = MtppModel::<f32>::new(MtppConfig::new(2, 4), 0).unwrap();
    let seq = Sequence::new(vec![0.5f32, 1.0, 2.0], vec![0, 1, 0]).unwrap();
    assert!(nll_clean(&model, &seq).unwrap().is_finite());
}
