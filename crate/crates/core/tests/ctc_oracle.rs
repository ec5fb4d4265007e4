//! CTC loss against exhaustive path enumeration, probability conservation,
//! and finite-difference gradients over many random tiny instances.

use blrmoe::gradcheck::{self, DEFAULT_EPS, DEFAULT_TOL};
use blrmoe::kernels;
use blrmoe::tensor::TensorBase;
use blrmoe::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn recursion_agrees_with_enumeration_everywhere() {
    for r in verify::ctc_oracle_checks().unwrap() {
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
}

#[test]
fn loss_matches_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7C1);
    for _ in 0..50 {
        let frames = rng.gen_range(1..=4usize);
        let vocab = rng.gen_range(2..=3usize);
        let mut lp = vec![0.0; frames * vocab];
        let logits: Vec<f64> = (0..frames * vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        kernels::log_softmax_rows(&logits, &mut lp, frames, vocab);
        let max_len = 2.min(frames);
        let len = rng.gen_range(0..=max_len);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
        let brute = verify::ctc_brute_force_prob(&lp, &target, frames, vocab);
        match blrmoe::ctc::forward_alpha(&lp, &target, frames, vocab) {
            Ok((_, loss)) => {
                assert!(
                    (loss - (-brute.ln())).abs() < 1e-10,
                    "loss {loss} vs enumeration {}",
                    -brute.ln()
                );
            }
            Err(_) => assert_eq!(brute, 0.0),
        }
    }
}

#[test]
fn gradient_matches_finite_differences_over_twenty_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x61AD + seed);
        let frames = rng.gen_range(2..=5usize);
        let vocab = rng.gen_range(2..=4usize);
        let len = rng.gen_range(1..=(frames / 2).max(1));
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
        let logits = TensorBase::new(
            (0..frames * vocab).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            vec![frames, vocab],
        )
        .unwrap();
        let tgt = target.clone();
        let build = move |t: &mut blrmoe::Tape, v: &[blrmoe::tape::Var]| {
            let lp = t.log_softmax_rows(v[0])?;
            t.ctc_loss(lp, &tgt)
        };
        let rep = gradcheck::check_gradient(&build, std::slice::from_ref(&logits), DEFAULT_EPS).unwrap();
        assert!(
            rep.max_rel_err < DEFAULT_TOL,
            "seed {seed}: max rel err {} (T={frames}, V={vocab}, target {target:?})",
            rep.max_rel_err
        );
    }
}
