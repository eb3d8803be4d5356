use std::path::Path;

use lts_harness::checkpoint::{Checkpoint, TensorData};
use lts_harness::random_freeze::random_freeze_step;
use lts_harness::RunConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor_data() -> impl Strategy<Value = TensorData> {
    prop_oneof![
        prop::collection::vec(any::<f32>(), 0..40).prop_map(TensorData::F32),
        prop::collection::vec(any::<f64>(), 0..40).prop_map(TensorData::F64),
        prop::collection::vec(any::<u8>(), 0..40).prop_map(TensorData::U8),
        prop::collection::vec(any::<u64>(), 0..40).prop_map(TensorData::U64),
    ]
}

fn bits(d: &TensorData) -> Vec<u64> {
    match d {
        TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
        TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
        TensorData::U8(v) => v.iter().map(|&x| x as u64).collect(),
        TensorData::U64(v) => v.clone(),
    }
}

proptest! {
    #[test]
    fn checkpoint_bytes_round_trip(tensors in prop::collection::vec(("[a-z][a-z0-9._]{0,12}", tensor_data()), 0..6)) {
        let mut ckpt = Checkpoint::default();
        for (name, data) in &tensors {
            ckpt.push(name.clone(), &[data.len()], data.clone());
        }
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.tensors.len(), tensors.len());
        // Compare bit patterns so NaN payloads count as equal.
        for (a, b) in back.tensors.iter().zip(&ckpt.tensors) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.dims, &b.dims);
            prop_assert_eq!(a.data.dtype(), b.data.dtype());
            prop_assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn config_text_round_trips(
        lr in 1e-5f64..1.0,
        scale in 0.0f64..=1.0,
        epochs in 2usize..200,
        batch in 1usize..512,
        warmup in 0usize..2,
        m in 0.0f64..0.999,
        seed in any::<u64>(),
        bits in 2u8..=8,
        mode in prop::sample::select(vec!["fp", "baseline", "lts"]),
        strategy in prop::sample::select(vec!["fixing", "linear", "sine"]),
    ) {
        let text = format!(
            "optim.lr = {lr}\noptim.bound_lr_scale = {scale}\nepochs = {epochs}\nbatch_size = {batch}\n\
             lts.warmup_epochs = {warmup}\nlts.m = {m}\nseed = {seed}\nbits = {bits}\nmode = {mode}\nlts.strategy = {strategy}\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn random_freezing_hits_the_target_and_never_unfreezes(
        sizes in prop::collection::vec(1usize..60, 1..4),
        mut trajectory in prop::collection::vec(0.0f64..=1.0, 1..20),
        seed in any::<u64>(),
    ) {
        trajectory.sort_by(f64::total_cmp);
        let mut masks: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![false; n]).collect();
        let numel: usize = sizes.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 1..=trajectory.len() {
            let before = masks.clone();
            let mut views: Vec<&mut [bool]> = masks.iter_mut().map(|m| m.as_mut_slice()).collect();
            random_freeze_step(&mut views, &trajectory, i, &mut rng).unwrap();
            for (b, a) in before.iter().flatten().zip(masks.iter().flatten()) {
                prop_assert!(!*b || *a);
            }
            let frozen = masks.iter().flatten().filter(|f| **f).count();
            prop_assert_eq!(frozen, (trajectory[i - 1] * numel as f64).floor() as usize);
        }
    }
}
