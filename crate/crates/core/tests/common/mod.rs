//! Oracles shared by the test targets and the acceptance suite.
#![allow(dead_code)]

pub mod games;
pub mod policies;

use std::sync::OnceLock;

use num_bigint::{BigInt, Sign};
use num_traits::{One, ToPrimitive, Zero};
use oel::chat::{ASSISTANT_MARKER, END_MARKER, USER_MARKER};
use oel::distill::{onpolicy_objective, Rollout};
use oel::policy::{log_softmax, Policy, Source, TokenDistribution, TokenId, ToyConfig, ToyModel, Vocab};
use oel::trajectory::{PrefixRecord, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed-point fraction bits for the exact oracle.
const BITS: u32 = 256;

/// 2·atanh(y) with `y = num/den` in fixed point, for |y| ≤ 1/3.
fn two_atanh(num: &BigInt, den: &BigInt) -> BigInt {
    let y = (num << BITS) / den;
    let y2 = (&y * &y) >> BITS;
    let mut term = y.clone();
    let mut sum = BigInt::zero();
    let mut n = 1u32;
    while !term.is_zero() {
        sum += &term / n;
        term = (&term * &y2) >> BITS;
        n += 2;
    }
    sum * 2
}

fn ln2() -> &'static BigInt {
    static LN2: OnceLock<BigInt> = OnceLock::new();
    LN2.get_or_init(|| two_atanh(&BigInt::one(), &BigInt::from(3)))
}

/// ln(n) for a positive integer, in fixed point.
pub fn ln_int(n: &BigInt) -> BigInt {
    assert!(n.sign() == Sign::Plus);
    let e = n.bits() - 1;
    // n = 2^e · m with m in [1, 2): ln m = 2 atanh((m-1)/(m+1)).
    let m_den = BigInt::one() << e;
    let num = n - &m_den;
    let den = n + &m_den;
    two_atanh(&num, &den) + ln2() * BigInt::from(e)
}

pub fn fixed_to_f64(x: &BigInt) -> f64 {
    let shifted: BigInt = x >> (BITS - 64);
    shifted.to_f64().unwrap() / 2f64.powi(64)
}

/// KL(a/Σa ‖ b/Σb) by direct summation in exact integer arithmetic.
pub fn exact_kl(a: &[u64], b: &[u64]) -> f64 {
    let sa = BigInt::from(a.iter().sum::<u64>());
    let sb = BigInt::from(b.iter().sum::<u64>());
    let (ln_sa, ln_sb) = (ln_int(&sa), ln_int(&sb));
    let mut acc = BigInt::zero();
    for (&x, &y) in a.iter().zip(b) {
        let lx = ln_int(&BigInt::from(x)) - &ln_sa;
        let ly = ln_int(&BigInt::from(y)) - &ln_sb;
        acc += BigInt::from(x) * (lx - ly);
    }
    fixed_to_f64(&(acc / sa))
}

/// Integer weights spanning several orders of magnitude.
pub fn random_weights(rng: &mut ChaCha8Rng, v: usize) -> Vec<u64> {
    (0..v).map(|_| (2f64.powf(rng.random_range(0.0..30.0))) as u64 + 1).collect()
}

pub fn log_probs(w: &[u64]) -> Vec<f64> {
    let s: f64 = w.iter().map(|&x| x as f64).sum();
    w.iter().map(|&x| (x as f64 / s).ln()).collect()
}

/// Student top-k and teacher log-probs on the same tokens.
pub fn pair(student_lp: &[f64], teacher_lp: &[f64], k: usize) -> (TokenDistribution, TokenDistribution) {
    let s = TokenDistribution::top_k(student_lp, k, Source::Student);
    let t = TokenDistribution {
        entries: s.entries.iter().map(|&(id, _)| (id, teacher_lp[id as usize])).collect(),
        source: Source::Teacher,
    };
    (s, t)
}

/// Relative error `‖a − f‖ / max(‖a‖, ‖f‖)` over the checked coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn small_config() -> ToyConfig {
    ToyConfig { d: 6, h: 8, w: 5 }
}

/// The on-policy loss written out directly: mean over responses of the
/// per-position mean of Σ_{j∈S_t} p_j (ln p_j − ln q_j), with the sets `S_t`
/// and teacher log-probs given rather than recomputed.
pub fn fixed_set_loss(model: &ToyModel, rollouts: &[Rollout], sets: &[Vec<Vec<TokenId>>], lq: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for ((r, s), q) in rollouts.iter().zip(sets).zip(lq) {
        let m = r.student_context.len();
        let mut tokens = r.student_context.clone();
        tokens.extend_from_slice(&r.response);
        let fwd = model.forward(&tokens, m..m + r.response.len());
        let mut sum = 0.0;
        for i in 0..r.response.len() {
            let lp = log_softmax(fwd.logits_at(i));
            sum += s[i].iter().zip(&q[i]).map(|(&t, &lq)| lp[t as usize].exp() * (lp[t as usize] - lq)).sum::<f64>();
        }
        total += sum / r.response.len() as f64;
    }
    total / rollouts.len() as f64
}

/// One finite-difference instance: random student and teacher, a random
/// context, responses sampled once and then held fixed. The student's top-k
/// sets are held at their unperturbed value, as the analytic gradient
/// treats them. Returns the relative error between analytic and
/// central-difference gradients on `coords` coordinates (the
/// largest-gradient ones plus random picks).
pub fn fd_instance(seed: u64, k: usize, coords: usize, step: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::standard();
    let cfg = small_config();
    let student = ToyModel::random(vocab.clone(), cfg, rng.random(), 0.5);
    let teacher = ToyModel::random(vocab.clone(), cfg, rng.random(), 0.5);
    let words = ["You moved down.", " [left]", "PH G", "hole", "\n", "goal", " wall", "P"];
    let rollouts: Vec<Rollout> = (0..2)
        .map(|_| {
            let text: String = (0..rng.random_range(1..6)).map(|_| words[rng.random_range(0..words.len())]).collect();
            let student_context = vocab.encode(&text);
            let teacher_text = format!("rules {text}");
            let mut response = student.generate(&student_context, 1.0, rng.random_range(1..5), rng.random());
            if response.is_empty() {
                response = vocab.encode("[down]");
            }
            Rollout { student_context, teacher_context: teacher_text, response }
        })
        .collect();
    let obj = onpolicy_objective(&student, &teacher as &dyn Policy, &rollouts, k).unwrap();
    let sets: Vec<Vec<Vec<TokenId>>> = rollouts
        .iter()
        .map(|r| {
            let m = r.student_context.len();
            let mut tokens = r.student_context.clone();
            tokens.extend_from_slice(&r.response);
            let fwd = student.forward(&tokens, m..m + r.response.len());
            (0..r.response.len())
                .map(|i| TokenDistribution::top_k(&log_softmax(fwd.logits_at(i)), k, Source::Student).tokens())
                .collect()
        })
        .collect();
    let lq: Vec<Vec<Vec<f64>>> = rollouts
        .iter()
        .zip(&sets)
        .map(|(r, s)| teacher.score_sets(&r.teacher_context, &r.response, s).unwrap())
        .collect();
    assert!((fixed_set_loss(&student, &rollouts, &sets, &lq) - obj.loss).abs() < 1e-12);
    let mut order: Vec<usize> = (0..obj.grad.len()).collect();
    order.sort_by(|&a, &b| obj.grad[b].abs().total_cmp(&obj.grad[a].abs()));
    let mut picked: Vec<usize> = order[..coords / 2].to_vec();
    picked.extend((0..coords - coords / 2).map(|_| rng.random_range(0..obj.grad.len())));
    let loss_at = |idx: usize, delta: f64| {
        let mut m = student.clone();
        m.params_mut()[idx] += delta;
        fixed_set_loss(&m, &rollouts, &sets, &lq)
    };
    let numeric: Vec<f64> = picked.iter().map(|&i| (loss_at(i, step) - loss_at(i, -step)) / (2.0 * step)).collect();
    let analytic: Vec<f64> = picked.iter().map(|&i| obj.grad[i]).collect();
    relative_error(&analytic, &numeric)
}

/// Prefix `j` followed by every later response and observation, in the
/// rendered chat format.
pub fn rebuild_from(t: &Trajectory, p: &PrefixRecord) -> String {
    let mut s = p.prefix_text.clone();
    for k in p.j - 1..t.turns.len() {
        s += &format!("{END_MARKER}{ASSISTANT_MARKER}{}{END_MARKER}{USER_MARKER}", t.turns[k].response);
        s += t.turns.get(k + 1).map_or(t.final_feedback.as_str(), |x| x.feedback.as_str());
    }
    s
}
