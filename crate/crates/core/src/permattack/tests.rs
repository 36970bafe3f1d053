use itertools::Itertools;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Tape, Tensor};
use crate::ctes::Sequence;
use crate::mtpp::{nll_clean, MtppConfig, MtppModel, MtppParams, SequenceInput};
use crate::nn::one_hot;
use crate::params::finite_difference;

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, num_marks: usize) -> Sequence<f64> {
    let mut t = 0.0;
    let (mut times, mut marks) = (Vec::new(), Vec::new());
    for _ in 0..n {
        t += rng.random_range(0.2..1.5);
        times.push(t);
        marks.push(rng.random_range(0..num_marks));
    }
    Sequence::new(times, marks).unwrap()
}

fn adversary(seed: u64) -> MtppModel<f64> {
    let mut m = MtppModel::new(MtppConfig::new(3, 4), seed).unwrap();
    m.params.int_w.values[0] = -0.2;
    m
}

fn attack(seed: u64, cfg: AttackConfig) -> AttackModel<f64> {
    AttackModel::new(cfg, 3, 4, seed).unwrap()
}

fn small_cfg() -> AttackConfig {
    AttackConfig {
        noise_dim: 4,
        gs_hidden: 5,
        ..AttackConfig::default()
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Tensor<f64> {
    Tensor::new(&[n, n], (0..n * n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn best_assignment(s: &[f64], n: usize) -> Vec<usize> {
    (0..n)
        .permutations(n)
        .max_by(|a, b| {
            let f = |p: &Vec<usize>| p.iter().enumerate().map(|(i, &j)| s[i * n + j]).sum::<f64>();
            f(a).partial_cmp(&f(b)).unwrap()
        })
        .unwrap()
}

fn assert_doubly_stochastic(p: &Tensor<f64>, tol: f64) {
    let n = p.rows();
    for i in 0..n {
        let row: f64 = (0..n).map(|j| p.at(i, j)).sum();
        let col: f64 = (0..n).map(|j| p.at(j, i)).sum();
        assert!((row - 1.0).abs() < tol && (col - 1.0).abs() < tol, "row {row} col {col}");
        assert!((0..n).all(|j| (0.0..=1.0).contains(&p.at(i, j))));
    }
}

#[test]
fn identity_favoring_scores_give_identity() {
    let tape = Tape::new();
    let s = Tensor::<f64>::identity(5);
    let s = tape.scale(&s, 10.0).unwrap();
    let p = sinkhorn(&tape, &s, 0.1, 30, &[true; 5]).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((p.at(i, j) - want).abs() < 1e-3);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn sinkhorn_is_doubly_stochastic(seed in 0u64..10_000, n in 1usize..12, tau in 0.05f64..5.0) {
        // Twenty sweeps reach 1e-6 while the spread of S / tau stays near 2;
        // sharper inputs converge linearly and need more sweeps.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let p = sinkhorn(&tape, &random_matrix(&mut rng, n, tau), tau, 20, &vec![true; n]).unwrap();
        assert_doubly_stochastic(&p, 1e-6);
    }
}

#[test]
fn sharp_scores_converge_with_more_sweeps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let s = random_matrix(&mut rng, 6, 1.0);
        let tape = Tape::new();
        assert_doubly_stochastic(&sinkhorn(&tape, &s, 0.2, 2000, &[true; 6]).unwrap(), 1e-6);
    }
}

#[test]
fn cold_sinkhorn_matches_the_optimal_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let s = random_matrix(&mut rng, 5, 1.0);
        let tape = Tape::new();
        let p = sinkhorn(&tape, &s, 0.01, 2000, &[true; 5]).unwrap();
        for i in 0..5 {
            let max = (0..5).map(|j| p.at(i, j)).fold(0.0, f64::max);
            assert!(max >= 0.99, "row max {max}");
        }
        assert_eq!(harden(p.values(), 5), best_assignment(s.values(), 5));
    }
}

#[test]
fn padding_is_pinned_to_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let mask = [true, true, true, false, false];
    let p = sinkhorn(&tape, &random_matrix(&mut rng, 5, 1.0), 1.0, 20, &mask).unwrap();
    assert_doubly_stochastic(&p, 1e-6);
    for i in 3..5 {
        for j in 0..5 {
            assert_eq!(p.at(i, j), if i == j { 1.0 } else { 0.0 });
            assert_eq!(p.at(j, i), if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn non_positive_temperature_is_rejected() {
    let tape = Tape::new();
    let s = Tensor::<f64>::zeros(&[2, 2]);
    assert!(matches!(sinkhorn(&tape, &s, 0.0, 5, &[true; 2]), Err(AttackError::Config(_))));
}

#[test]
fn soft_permutation_action() {
    let tape = Tape::new();
    let t = Tensor::column(vec![1.0, 2.0, 3.0]);
    let c: Tensor<f64> = one_hot(&[0, 1, 2], 4);
    let (tp, cp) = apply_soft_perm(&tape, &Tensor::identity(3), &t, &c).unwrap();
    assert_eq!(tp.values(), t.values());
    assert_eq!(cp.values(), c.values());

    let swap = Tensor::new(&[3, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let (tp, cp) = apply_soft_perm(&tape, &swap, &t, &c).unwrap();
    assert_eq!(tp.values(), &[2.0, 1.0, 3.0]);
    assert_eq!(&cp.values()[..4], &[0.0, 1.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = sinkhorn(&tape, &random_matrix(&mut rng, 3, 2.0), 1.0, 30, &[true; 3]).unwrap();
    let (_, cp) = apply_soft_perm(&tape, &p, &t, &c).unwrap();
    for i in 0..3 {
        assert!(((0..4).map(|j| cp.at(i, j)).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn constant_noise_head() {
    let mut a = attack(1, small_cfg());
    a.params.out_w.values.iter_mut().for_each(|v| *v = 0.0);
    a.params.out_b.values[0] = 0.3;
    let tape = Tape::new();
    let t = Tensor::column(vec![0.5, 1.0, 2.0, 2.5]);
    let eps = eps_forward(&tape, &a.params.constants(), &t, &one_hot(&[0, 2, 1, 0], 4), &[true; 4], 1.0).unwrap();
    assert!(eps.values().iter().all(|&e| (e - 0.3).abs() < 1e-15));
}

#[test]
fn noise_is_causal() {
    let a = attack(2, small_cfg());
    let w = a.params.constants();
    let tape = Tape::new();
    let c = one_hot(&[0, 1, 2, 1, 0], 4);
    let base = eps_forward(&tape, &w, &Tensor::column(vec![0.5, 1.0, 2.0, 2.5, 4.0]), &c, &[true; 5], 1.0).unwrap();
    let moved = eps_forward(&tape, &w, &Tensor::column(vec![0.5, 1.0, 2.0, 3.5, 9.0]), &c, &[true; 5], 1.0).unwrap();
    assert_eq!(&base.values()[..3], &moved.values()[..3]);
    assert_ne!(base.values()[3], moved.values()[3]);
}

#[test]
fn noise_gradient_wrt_query_matches_finite_differences() {
    let a = attack(3, small_cfg());
    let t = Tensor::column(vec![0.4, 1.1, 1.9, 3.0]);
    let c = one_hot(&[0, 2, 1, 1], 4);
    let report = grad_check(
        |tape, q| {
            let mut w = a.params.constants();
            w.attn_q = q.clone();
            let eps = eps_forward(tape, &w, &t, &c, &[true; 4], 1.0).map_err(|e| match e {
                AttackError::Autodiff(e) => e,
                other => panic!("{other}"),
            })?;
            tape.sum(&tape.mul(&eps, &eps)?, None)
        },
        &a.params.attn_q.tensor(),
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error);
}

#[test]
fn constraint_matrices_have_the_documented_layout() {
    let sys = ConstraintSystem::<f64>::new(4);
    #[rustfmt::skip]
    let a = [
        1.0, -1.0, 0.0, 0.0,
        0.0, 1.0, -1.0, 0.0,
        0.0, 0.0, 1.0, -1.0,
        -1.0, 0.0, 0.0, 0.0,
    ];
    let b: Vec<f64> = a.iter().map(|x| -x).collect();
    assert_eq!(sys.a.values(), &a);
    assert_eq!(sys.b.values(), &b[..]);
}

fn hinge_value(eps: &[f64], t: &[f64]) -> f64 {
    let tape = Tape::new();
    let sys = ConstraintSystem::new(t.len());
    hinge_penalty(&tape, &Tensor::column(eps.to_vec()), &Tensor::column(t.to_vec()), &sys)
        .unwrap()
        .item()
}

#[test]
fn hinge_examples() {
    assert_eq!(hinge_value(&[0.1, 0.2, -0.1], &[1.0, 2.0, 3.0]), 0.0);
    // t'_1 == t'_2 sits on the boundary
    assert_eq!(hinge_value(&[0.5, -0.5, 0.0], &[1.0, 2.0, 3.0]), 0.0);
    assert!((hinge_value(&[0.75, -0.5, 0.0], &[1.0, 2.0, 3.0]) - 0.25).abs() < 1e-15);
    // negative first time
    assert!((hinge_value(&[-1.5, 0.0], &[1.0, 2.0]) - 0.5).abs() < 1e-15);
}

#[test]
fn hinge_matches_explicit_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.random_range(1..8);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tp: Vec<f64> = t.iter().zip(&eps).map(|(a, b)| a + b).collect();
        let mut want = (-tp[0]).max(0.0);
        for i in 0..n - 1 {
            want += (tp[i] - tp[i + 1]).max(0.0);
        }
        assert!((hinge_value(&eps, &t) - want).abs() < 1e-12);
    }
}

fn identity_attack(seed: u64) -> AttackModel<f64> {
    let mut a = attack(
        seed,
        AttackConfig {
            permute: false,
            ..small_cfg()
        },
    );
    a.params.out_w.values.iter_mut().for_each(|v| *v = 0.0);
    a
}

fn forward_values(a: &AttackModel<f64>, adv: &MtppModel<f64>, seq: &Sequence<f64>) -> (f64, f64, f64, f64) {
    let tape = Tape::new();
    let input = SequenceInput::from_sequence(seq, 3);
    let f = attack_forward(&tape, a, &a.params.constants(), adv, &adv.params.constants(), &input, 1.0).unwrap();
    (f.nll.item(), f.distance.item(), f.hinge.item(), f.loss.item())
}

#[test]
fn unperturbed_adversarial_nll_is_the_clean_nll() {
    let adv = adversary(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = random_sequence(&mut rng, 6, 3);
    let (nll, _, hinge, _) = forward_values(&identity_attack(7), &adv, &seq);
    assert!((nll - nll_clean(&adv, &seq).unwrap()).abs() < 1e-12);
    assert_eq!(hinge, 0.0);
}

#[test]
fn two_event_hand_case_with_zero_weights() {
    let cfg = MtppConfig::new(3, 4);
    let adv = MtppModel::from_params(cfg.clone(), MtppParams::zeros(&cfg)).unwrap();
    let clean = Sequence::new(vec![1.0, 2.5], vec![0, 2]).unwrap();
    let input = SequenceInput::from_sequence(&clean, 3);
    let tape = Tape::new();
    let t_adv = Tensor::column(vec![1.4, 2.0]);
    let (nll, _) = adv_nll(&tape, &adv, &adv.params.constants(), &input, &t_adv, &input.marks).unwrap();
    let ln2 = 2f64.ln();
    let want = -(2.0 * ln2.ln() - ln2 * 1.0 - ln2 * (2.5 - 1.4) + 2.0 * (1.0f64 / 3.0).ln());
    assert!((nll.item() - want).abs() < 1e-12);

    // previous perturbed time beyond the target: the signed integral is negative
    let t_adv = Tensor::column(vec![3.0, 4.0]);
    let (nll, _) = adv_nll(&tape, &adv, &adv.params.constants(), &input, &t_adv, &input.marks).unwrap();
    let want = -(2.0 * ln2.ln() - ln2 * 1.0 - ln2 * (2.5 - 3.0) + 2.0 * (1.0f64 / 3.0).ln());
    assert!((nll.item() - want).abs() < 1e-12);
}

#[test]
fn adversarial_nll_gradient_wrt_times_matches_finite_differences() {
    let adv = adversary(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = random_sequence(&mut rng, 5, 3);
    let input = SequenceInput::from_sequence(&seq, 3);
    let eps0 = Tensor::column((0..5).map(|_| rng.random_range(-0.3..0.3)).collect());
    let report = grad_check(
        |tape, eps| {
            let t_adv = tape.add(&input.times, eps)?;
            let (nll, _) = adv_nll(tape, &adv, &adv.params.constants(), &input, &t_adv, &input.marks)
                .map_err(|e| match e {
                    AttackError::Autodiff(e) => e,
                    other => panic!("{other}"),
                })?;
            Ok(nll)
        },
        &eps0,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error);
}

#[test]
fn soft_distance_examples() {
    let tape = Tape::new();
    let t = Tensor::column(vec![1.0, 2.0, 4.0]);
    let certain = Tensor::zeros(&[3, 1]);
    let d = distance_soft(&tape, &t, &t, &certain, &[true; 3], 1.0).unwrap();
    assert_eq!(d.item(), 0.0);

    let shifted = Tensor::column(vec![1.25, 2.25, 4.25]);
    let log_p = Tensor::column(vec![0.5f64.ln(); 3]);
    let d = distance_soft(&tape, &t, &shifted, &log_p, &[true; 3], 2.0).unwrap();
    assert!((d.item() - (3.0 * 0.25 + 2.0 * 3.0 * 0.5)).abs() < 1e-12);
}

#[test]
fn soft_distance_matches_straight_line_recomputation() {
    let adv = adversary(9);
    let a = attack(9, small_cfg());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seq = random_sequence(&mut rng, 6, 3);
    let input = SequenceInput::from_sequence(&seq, 3);
    let tape = Tape::new();
    let f = attack_forward(&tape, &a, &a.params.constants(), &adv, &adv.params.constants(), &input, 0.7).unwrap();
    // recompute from P and eps by hand
    let (p, eps) = (f.p.values(), f.eps.values());
    let (_, log_p) = adv_nll(&tape, &adv, &adv.params.constants(), &input, &f.t_adv, &f.c_perm).unwrap();
    let mut want = 0.0;
    for i in 0..6 {
        let tp: f64 = (0..6).map(|j| p[i * 6 + j] * seq.times()[j]).sum();
        want += (tp + eps[i] - seq.times()[i]).abs() + a.config.rho_c * (1.0 - log_p.values()[i].exp());
    }
    assert!((f.distance.item() - want).abs() < 1e-12);
}

#[test]
fn penalty_weights_act_linearly() {
    let adv = adversary(10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seq = random_sequence(&mut rng, 5, 3);
    let mut cfg = small_cfg();
    cfg.rho_d = 0.0;
    cfg.rho_ab = 0.0;
    let mut a = attack(10, cfg);
    // a large negative offset pushes the first event before zero
    a.params.out_b.values[0] = -100.0;
    a.params.out_w.values.iter_mut().for_each(|v| *v *= 300.0);
    let (nll, dist, hinge, loss) = forward_values(&a, &adv, &seq);
    assert_eq!(loss, -nll);
    assert!(hinge > 0.0);

    a.config.rho_ab = 1.0;
    a.config.rho_d = 0.5;
    let (_, _, _, l1) = forward_values(&a, &adv, &seq);
    a.config.rho_ab = 10.0;
    let (_, _, _, l10) = forward_values(&a, &adv, &seq);
    assert!((l1 - (-nll + 0.5 * dist + hinge)).abs() < 1e-9);
    assert!(((l10 - l1) - 9.0 * hinge).abs() < 1e-9 * l10.abs().max(1.0));
}

#[test]
fn attack_loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        let adv = adversary(20 + seed);
        let a = attack(20 + seed, small_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_sequence(&mut rng, 5, 3);
        let (_, analytic) = attack_loss_with_gradients(&a, &adv, &seq, 0.8).unwrap();
        let numeric = finite_difference(&a.params, 1e-5, |p| {
            let mut probe = a.clone();
            probe.params = p.clone();
            attack_loss(&probe, &adv, &seq, 0.8)
        })
        .unwrap();
        // Some attention gradients sit near 1e-9, under the central
        // difference roundoff of |loss| * 1e-16 / h ~ 1e-10, so compare on a 1e-6 floor.
        for (x, y) in analytic.iter().flatten().zip(numeric.iter().flatten()) {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
            assert!(err < 1e-3, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn greedy_hardening_matches_assignment_on_near_hard_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = 6;
        let mut sigma: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut sigma[..], &mut rng);
        let a = rng.random_range(0.91..0.99);
        let mut p = vec![(1.0 - a) / n as f64; n * n];
        for i in 0..n {
            for j in 0..n {
                p[i * n + j] += rng.random_range(-1e-3..1e-3);
            }
            p[i * n + sigma[i]] += a;
        }
        assert_eq!(harden(&p, n), best_assignment(&p, n));
    }
}

#[test]
fn hardening_resolves_ties_to_smaller_columns() {
    assert_eq!(harden(&[0.25f64; 16], 4), vec![0, 1, 2, 3]);
}

#[test]
fn emission_is_always_valid() {
    let adv = adversary(12);
    let a = attack(12, small_cfg());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let seq = random_sequence(&mut rng, 12, 3);
        let e = emit_adversarial(&a, &adv, &seq, 50.0).unwrap();
        assert_eq!(e.sequence.len(), 12);
        let mut sorted = e.perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        for (k, &j) in e.perm.iter().enumerate() {
            assert_eq!(e.sequence.marks()[k], seq.marks()[j]);
        }
    }
}

#[test]
fn identity_attack_emits_clean_plus_noise() {
    let adv = adversary(13);
    let mut a = identity_attack(13);
    a.params.out_b.values[0] = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let seq = random_sequence(&mut rng, 7, 3);
    let e = emit_adversarial(&a, &adv, &seq, 1.0).unwrap();
    assert_eq!(e.perm, (0..7).collect::<Vec<_>>());
    for (x, y) in e.sequence.times().iter().zip(seq.times()) {
        assert!((x - y - 0.05).abs() < 1e-12);
    }
    assert!(e.distance.abs() < 1e-12);
    assert_eq!(e.hinge, 0.0);
}

#[test]
fn checkpoint_round_trip() {
    let a = attack(14, small_cfg());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.json");
    a.save(&path).unwrap();
    assert_eq!(AttackModel::<f64>::load(&path).unwrap(), a);
}
