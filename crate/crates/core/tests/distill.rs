mod common;

use std::time::Instant;

use common::*;
use oel::distill::*;
use oel::knowledge::{ExperientialKnowledge, KnowledgeFormat, KnowledgeSet};
use oel::policy::scripted::UniformRandomPolicy;
use oel::policy::{log_softmax, Policy, PolicyHandle, Source, TokenDistribution, ToyConfig, ToyModel, Vocab};
use oel::textgames::{generate_map, Game};
use oel::trajectory::{collect_trajectory, extract_prefixes, EpisodeConfig, PrefixRecord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_vocabulary_kl_matches_exact_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let v = rng.random_range(2..=64);
        let (a, b) = (random_weights(&mut rng, v), random_weights(&mut rng, v));
        let (s, t) = pair(&log_probs(&a), &log_probs(&b), v);
        let kl = token_reverse_kl(&s, &t).unwrap();
        worst = worst.max((kl - exact_kl(&a, &b)).abs());
        assert!(kl >= 0.0);
        let (s, t) = pair(&log_probs(&a), &log_probs(&a), v);
        assert_eq!(token_reverse_kl(&s, &t).unwrap(), 0.0);
    }
    assert!(worst <= 1e-9, "{worst}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn two_token_example() {
    let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    let exact = exact_kl(&[1, 1], &[9, 1]);
    assert!((expect - exact).abs() < 1e-15);
    let (s, t) = pair(&[0.5f64.ln(), 0.5f64.ln()], &[0.9f64.ln(), 0.1f64.ln()], 2);
    assert!((token_reverse_kl(&s, &t).unwrap() - exact).abs() < 1e-12);
}

#[test]
fn truncation_error_is_bounded_by_the_excluded_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let v = rng.random_range(2..=64);
        let (a, b) = (random_weights(&mut rng, v), random_weights(&mut rng, v));
        let (lp, lq) = (log_probs(&a), log_probs(&b));
        let (s, t) = pair(&lp, &lq, v);
        let full = token_reverse_kl(&s, &t).unwrap();
        let terms: Vec<f64> = s.entries.iter().zip(&t.entries).map(|(x, y)| x.1.exp() * (x.1 - y.1)).collect();
        let mut last_bound = f64::INFINITY;
        for k in 1..=v {
            let (sk, tk) = pair(&lp, &lq, k);
            let err = (token_reverse_kl(&sk, &tk).unwrap() - full).abs();
            let bound: f64 = terms[k..].iter().map(|x| x.abs()).sum();
            assert!(err <= bound + 1e-12);
            assert!(bound <= last_bound);
            last_bound = bound;
        }
        assert_eq!(last_bound, 0.0);
    }
}

#[test]
fn mismatched_token_sets_fail() {
    let lp = log_softmax(&[0.1, 0.2, 0.3]);
    let s = TokenDistribution::top_k(&lp, 2, Source::Student);
    let t = TokenDistribution::top_k(&lp, 3, Source::Teacher);
    assert!(matches!(token_reverse_kl(&s, &t), Err(DistillError::TokenSetMismatch)));
}

#[test]
fn parameter_gradients_match_central_differences() {
    let start = Instant::now();
    let worst = (0..100u64).map(|i| fd_instance(i, 256, 12, 1e-5)).fold(0.0, f64::max);
    assert!(worst <= 1e-4, "{worst}");
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let full = (0..100u64).map(|i| fd_instance(i, Vocab::standard().len(), 12, 1e-5)).fold(0.0, f64::max);
    assert!(full <= 1e-4, "{full}");
}

fn rollout(vocab: &Vocab, context: &str, response: &str) -> Rollout {
    Rollout {
        student_context: vocab.encode(context),
        teacher_context: context.into(),
        response: vocab.encode(response),
    }
}

#[test]
fn teacher_equal_to_student_gives_zero_loss() {
    let vocab = Vocab::standard();
    let m = ToyModel::random(vocab.clone(), small_config(), 4, 0.5);
    let rs = [rollout(&vocab, "You moved down.\n\nP H", " [left] goal")];
    let full = onpolicy_objective(&m, &m, &rs, vocab.len()).unwrap();
    assert_eq!(full.loss, 0.0);
    assert!(full.grad.iter().all(|g| g.abs() < 1e-12));
    // Under truncation the value is still zero; the gradient then only
    // raises the covered mass.
    assert_eq!(onpolicy_objective(&m, &m, &rs, 16).unwrap().loss, 0.0);
}

#[test]
fn single_position_loss_is_the_token_kl() {
    let vocab = Vocab::standard();
    let s = ToyModel::random(vocab.clone(), small_config(), 1, 0.5);
    let t = ToyModel::random(vocab.clone(), small_config(), 2, 0.5);
    let r = Rollout {
        student_context: vocab.encode("P G"),
        teacher_context: "rules P G".into(),
        response: vocab.encode("[up]"),
    };
    let obj = onpolicy_objective(&s, &t, std::slice::from_ref(&r), 32).unwrap();
    let sd = s.next_token_topk("P G", 32).unwrap();
    let lq = log_softmax(&t.next_logits(&vocab.encode("rules P G")));
    let td = TokenDistribution {
        entries: sd.entries.iter().map(|&(i, _)| (i, lq[i as usize])).collect(),
        source: Source::Teacher,
    };
    assert!((obj.loss - token_reverse_kl(&sd, &td).unwrap()).abs() < 1e-12);
    assert_eq!((obj.tokens, obj.responses), (1, 1));
}

#[test]
fn one_hot_teacher_reduces_to_negative_log_likelihood() {
    let lp = log_softmax(&[0.3, -1.0, 2.0, 0.0]);
    let teacher = TokenDistribution { entries: vec![(1, 0.0)], source: Source::Teacher };
    let mut g = vec![0.0; 4];
    let kl = forward_kl_logit_grad(&lp, &teacher, &mut g);
    assert!((kl + lp[1]).abs() < 1e-15);
    for (j, gj) in g.iter().enumerate() {
        let want = lp[j].exp() - if j == 1 { 1.0 } else { 0.0 };
        assert!((gj - want).abs() < 1e-15);
    }
}

#[test]
fn offpolicy_self_teacher_has_no_gradient() {
    let vocab = Vocab::standard();
    let m = ToyModel::random(vocab.clone(), small_config(), 9, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rs: Vec<Rollout> = (0..40)
        .map(|_| {
            let ctx = vocab.encode("You moved left.\n\nP  \nHG ");
            let resp = m.generate(&ctx, 1.0, 25, rng.random());
            Rollout { student_context: ctx, teacher_context: "You moved left.\n\nP  \nHG ".into(), response: resp }
        })
        .filter(|r| !r.response.is_empty())
        .collect();
    let obj = offpolicy_objective(&m, &m, &rs, vocab.len()).unwrap();
    assert!(obj.tokens >= 40);
    let norm = obj.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 1e-10, "{norm}");
}

fn prefixes(n: usize) -> Vec<PrefixRecord> {
    (0..n as u64)
        .flat_map(|i| {
            let map = generate_map(Game::FrozenLake, i).unwrap();
            let t =
                collect_trajectory(&map, &UniformRandomPolicy::default(), None, &EpisodeConfig::default(), i).unwrap();
            extract_prefixes(&t)
        })
        .collect()
}

fn knowledge() -> KnowledgeSet {
    KnowledgeSet {
        round: 1,
        entries: (0..3)
            .map(|s| ExperientialKnowledge::new(KnowledgeFormat::Unstructured, format!("Avoid H. Note {s}."), 1, s))
            .collect(),
    }
}

#[test]
fn batches_consume_the_budget_exactly_once() {
    let data = PrefixDataset::from_records(prefixes(1280));
    assert_eq!(data.num_trajectories(), 1280);
    let cfg = DistillConfig::default();
    assert_eq!(cfg.trajectories_needed(), 1280);
    let mut seen = std::collections::HashMap::new();
    for step in 0..cfg.steps {
        for p in data.batch(step, cfg.games_per_step) {
            *seen.entry((p.source_trajectory_id.clone(), p.j)).or_insert(0) += 1;
        }
    }
    let total: usize = data.groups.iter().map(Vec::len).sum();
    assert_eq!(seen.len(), total);
    assert!(seen.values().all(|&c| c == 1));
}

fn toy(seed: u64) -> PolicyHandle {
    PolicyHandle::toy(
        ToyModel::random(Vocab::standard(), ToyConfig { d: 8, h: 12, w: 6 }, seed, 0.5),
        format!("toy{seed}"),
    )
}

fn quick(steps: usize) -> DistillConfig {
    DistillConfig { steps, games_per_step: 4, learning_rate: 1.0, max_response_tokens: 6, ..DistillConfig::default() }
}

#[test]
fn zero_steps_leave_the_student_unchanged() {
    let data = PrefixDataset::from_records(prefixes(8));
    let student = toy(1);
    let teacher = student.frozen_copy();
    let (out, hist) =
        train_consolidation(&student, &teacher, &data, &knowledge(), &quick(0), Mode::OnPolicy, 0, |_| {}).unwrap();
    assert!(hist.is_empty());
    assert_eq!(out.toy_model().unwrap().params(), student.toy_model().unwrap().params());
}

#[test]
fn kl_falls_against_a_fixed_teacher() {
    let data = PrefixDataset::from_records(prefixes(80));
    let student = toy(1);
    let teacher = toy(2).freeze();
    let before = teacher.toy_model().unwrap().param_hash();
    let (out, hist) =
        train_consolidation(&student, &teacher, &data, &knowledge(), &quick(20), Mode::OnPolicy, 5, |_| {}).unwrap();
    assert_eq!(hist.len(), 20);
    let first: f64 = hist[..5].iter().map(|s| s.mean_kl).sum::<f64>() / 5.0;
    let last: f64 = hist[15..].iter().map(|s| s.mean_kl).sum::<f64>() / 5.0;
    assert!(last < first, "first {first} last {last}");
    assert_ne!(out.toy_model().unwrap().params(), student.toy_model().unwrap().params());
    assert_eq!(teacher.toy_model().unwrap().param_hash(), before);
}

#[test]
fn both_modes_report_the_same_statistics() {
    let data = PrefixDataset::from_records(prefixes(16));
    let student = toy(3);
    let teacher = student.frozen_copy();
    for mode in [Mode::OnPolicy, Mode::OffPolicy] {
        let (_, hist) =
            train_consolidation(&student, &teacher, &data, &knowledge(), &quick(2), mode, 0, |_| {}).unwrap();
        assert_eq!(hist.iter().map(|s| s.step).collect::<Vec<_>>(), [0, 1]);
        assert!(hist.iter().all(|s| s.tokens > 0 && s.mean_kl.is_finite() && s.mean_resp_len > 0.0));
    }
}

#[test]
fn training_is_deterministic() {
    let data = PrefixDataset::from_records(prefixes(16));
    let student = toy(3);
    let teacher = toy(4).freeze();
    let run =
        || train_consolidation(&student, &teacher, &data, &knowledge(), &quick(3), Mode::OnPolicy, 9, |_| {}).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a.toy_model().unwrap().params(), b.toy_model().unwrap().params());
}

#[test]
fn unfrozen_teacher_and_empty_data_are_rejected() {
    let data = PrefixDataset::from_records(prefixes(4));
    let student = toy(1);
    let err = train_consolidation(&student, &student, &data, &knowledge(), &quick(1), Mode::OnPolicy, 0, |_| {});
    assert!(matches!(err, Err(DistillError::TeacherNotFrozen)));
    let empty = PrefixDataset::default();
    let err = train_consolidation(
        &student,
        &student.frozen_copy(),
        &empty,
        &knowledge(),
        &quick(1),
        Mode::OnPolicy,
        0,
        |_| {},
    );
    assert!(matches!(err, Err(DistillError::EmptyData)));
    let mut frozen = student.frozen_copy();
    let batch: Vec<&PrefixRecord> = data.batch(0, 1);
    let err = distill_step(&mut frozen, &student.frozen_copy(), &batch, &knowledge(), &quick(1), 0, 0);
    assert!(err.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn logit_gradient_matches_differences(
        zs in prop::collection::vec(-3.0f64..3.0, 2..12),
        seed in any::<u64>(),
        kfrac in 0.0f64..1.0,
    ) {
        let v = zs.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zt: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lq = log_softmax(&zt);
        let k = 1 + (kfrac * (v - 1) as f64) as usize;
        let lp = log_softmax(&zs);
        let top = TokenDistribution::top_k(&lp, k, Source::Student).tokens();
        let tq: Vec<f64> = top.iter().map(|&t| lq[t as usize]).collect();
        let mut g = vec![0.0; v];
        let value = reverse_kl_logit_grad(&lp, &top, &tq, &mut g);
        // Value on the fixed set, as a function of the logits.
        let f = |z: &[f64]| {
            let l = log_softmax(z);
            top.iter().zip(&tq).map(|(&t, &q)| l[t as usize].exp() * (l[t as usize] - q)).sum::<f64>()
        };
        prop_assert!((value - f(&zs)).abs() < 1e-12);
        let h = 1e-6;
        for j in 0..v {
            let mut up = zs.clone();
            up[j] += h;
            let mut dn = zs.clone();
            dn[j] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() < 1e-6, "j {} fd {} g {}", j, fd, g[j]);
        }
    }

    #[test]
    fn kl_is_nonnegative_at_full_k(a in prop::collection::vec(1u64..1000, 2..20), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<u64> = a.iter().map(|_| rng.random_range(1..1000)).collect();
        let (s, t) = pair(&log_probs(&a), &log_probs(&b), a.len());
        prop_assert!(token_reverse_kl(&s, &t).unwrap() >= -1e-15);
    }
}
