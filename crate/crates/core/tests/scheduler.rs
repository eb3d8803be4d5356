use lts_core::lts::{rate_schedule, threshold, FreezeState, RateStrategy};
use lts_core::quant::BitWidth;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn masks_stay_monotone_over_a_long_trace() {
    let bits = BitWidth::new(2).unwrap();
    let n = 256;
    let iters = 10_000;
    let (per_epoch, epochs, warmup) = (100, 100, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut levels: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let mut state = FreezeState::<f64>::new(bits, levels.clone());
    let mut frozen = vec![false; n];
    let mut previous = 0;
    for i in 1..=iters {
        for (e, q) in levels.iter_mut().enumerate() {
            if !frozen[e] && rng.random_bool(0.02) {
                *q = rng.random_range(0..4);
            }
        }
        let distance: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0 / 3.0)).collect();
        let before = frozen.clone();
        state.ema_update(&distance, &levels, 0.99, &frozen).unwrap();
        let p = rate_schedule(RateStrategy::Linear, i, per_epoch, epochs, warmup, 0.0).unwrap();
        state.set_rate(p);
        state.freeze_step(&mut frozen);
        for (b, a) in before.iter().zip(&frozen) {
            assert!(!*b || *a, "unfroze at iteration {i}");
        }
        let count = frozen.iter().filter(|f| **f).count();
        assert!(count >= previous);
        if i <= per_epoch * warmup {
            assert_eq!(count, 0, "froze during warmup at {i}");
        }
        previous = count;
    }
    assert!(previous > 0);
}

#[test]
fn reset_dominance_delays_freezing() {
    let bits = BitWidth::new(3).unwrap();
    let m: f64 = 0.9;
    let d_inst = 0.01;
    let t = threshold(bits, 0.5);
    let delta = bits.interval();
    let bound = (1..)
        .find(|&n| m.powi(n) * delta + (1.0 - m.powi(n)) * d_inst < t)
        .unwrap() as usize;

    let mut state = FreezeState::<f64>::new(bits, vec![0]);
    state.set_rate(0.5);
    let mut frozen = [false];
    state.ema_update(&[d_inst], &[1], m, &frozen).unwrap();
    assert_eq!(state.ema[0], delta);
    let mut waited = 0;
    while !frozen[0] {
        state.ema_update(&[d_inst], &[1], m, &frozen).unwrap();
        state.freeze_step(&mut frozen);
        waited += 1;
    }
    assert_eq!(waited, bound);
}

proptest! {
    #[test]
    fn rate_is_non_decreasing(
        per_epoch in 1usize..20,
        warmup in 0usize..10,
        extra in 1usize..10,
        c in 0.0f64..=1.0,
    ) {
        let epochs = warmup + extra;
        for strategy in [RateStrategy::Fixing, RateStrategy::Linear, RateStrategy::Sine] {
            let mut last = 0.0;
            for i in 1..=per_epoch * epochs {
                let p = rate_schedule(strategy, i, per_epoch, epochs, warmup, c).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!(p >= last);
                last = p;
            }
            if strategy != RateStrategy::Fixing {
                prop_assert_eq!(last, 1.0);
            }
        }
    }
}
