use std::io::Write;

use proptest::collection::vec;
use proptest::prelude::*;
use trikd::cli::checkpoint::{decode, encode};
use trikd::data::{batches, generate_synthetic, load_csv, parse_idx, DatasetSplit, SplitId, SyntheticSpec};
use trikd::distill::kl_tempered;
use trikd::metrics::{behavior_similarity, expected_calibration_error};
use trikd::nn::{tempered_softmax, ArchitectureSpec, Network};
use trikd::tensor::{Tape, Tensor};

fn kl_value(target: &[f32], learner: &[f32], k: usize, tau: f32) -> f32 {
    let rows = target.len() / k;
    let t = Tensor::from_vec(vec![rows, k], target.to_vec()).unwrap();
    let l = Tensor::from_vec(vec![rows, k], learner.to_vec()).unwrap();
    kl_tempered(&Tape::no_grad(), &t, &l, tau).unwrap().item().unwrap()
}

fn soft(z: &[f32], k: usize, tau: f32) -> Vec<f32> {
    let t = Tensor::from_vec(vec![z.len() / k, k], z.to_vec()).unwrap();
    tempered_softmax(&Tape::no_grad(), &t, tau).unwrap().to_vec()
}

fn tiny_split(rows: usize) -> DatasetSplit {
    let inputs = Tensor::zeros(vec![rows, 1]).unwrap();
    DatasetSplit::new(inputs, vec![0; rows], 2, SplitId::Train).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative_and_zero_only_for_equal_distributions(
        target in vec(-5.0f32..5.0, 12),
        learner in vec(-5.0f32..5.0, 12),
        tau in 0.5f32..4.0,
    ) {
        let kl = kl_value(&target, &learner, 4, tau);
        prop_assert!(kl >= 0.0, "kl {kl}");
        prop_assert_eq!(kl_value(&target, &target, 4, tau), 0.0);
        let gap = soft(&target, 4, tau)
            .iter()
            .zip(soft(&learner, 4, tau))
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        if gap > 1e-3 {
            prop_assert!(kl > 0.0, "gap {gap} but kl {kl}");
        }
    }

    #[test]
    fn kl_gradient_flows_only_to_learner(
        target in vec(-3.0f32..3.0, 6),
        learner in vec(-3.0f32..3.0, 6),
        tau in 0.5f32..3.0,
    ) {
        let t = Tensor::parameter(vec![2, 3], target.clone()).unwrap();
        let l = Tensor::parameter(vec![2, 3], learner.clone()).unwrap();
        let tape = Tape::new();
        let kl = kl_tempered(&tape, &t, &l, tau).unwrap();
        tape.backward(&kl).unwrap();
        prop_assert_eq!(t.grad(), None);
        let grad = l.grad().unwrap();
        let h = 1e-2f32;
        for i in 0..learner.len() {
            let mut up = learner.clone();
            let mut down = learner.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (kl_value(&target, &up, 3, tau) - kl_value(&target, &down, 3, tau)) / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() <= 2e-3 + 1e-2 * fd.abs(), "i {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn calibrated_bin_never_raises_ece(
        p in vec(0.5f64..1.0, 1..40),
        hits in vec(any::<bool>(), 40),
        m in 5usize..=10,
        bins in 1usize..20,
    ) {
        let mut probs: Vec<f64> = p.iter().flat_map(|&c| [c, 1.0 - c]).collect();
        let mut labels: Vec<usize> = p.iter().zip(&hits).map(|(_, &h)| usize::from(!h)).collect();
        let alone = expected_calibration_error(&probs, 2, &labels, bins).unwrap().ece;
        // Ten samples at confidence m/10 with exactly m of them right.
        let c = m as f64 / 10.0;
        for j in 0..10 {
            probs.extend([c, 1.0 - c]);
            labels.push(usize::from(j >= m));
        }
        let extra = expected_calibration_error(&probs[2 * p.len()..], 2, &labels[p.len()..], bins).unwrap().ece;
        prop_assert!(extra < 1e-12);
        let both = expected_calibration_error(&probs, 2, &labels, bins).unwrap().ece;
        prop_assert!(both <= alone.max(extra) + 1e-12, "{both} > max({alone}, {extra})");
    }

    #[test]
    fn batches_partition_the_split(rows in 1usize..300, size in 1usize..64, seed in any::<u64>()) {
        let split = tiny_split(rows);
        let groups = batches(&split, size, seed);
        prop_assert!(groups.iter().all(|g| !g.is_empty() && g.len() <= size));
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..rows).collect::<Vec<_>>());
    }

    #[test]
    fn idx_parser_is_total(raw in vec(any::<u8>(), 0..64)) {
        let _ = parse_idx(&raw);
    }

    #[test]
    fn truncated_idx_is_rejected(d0 in 1usize..5, d1 in 1usize..5, cut in 0usize..1000) {
        let mut raw = vec![0, 0, 0x08, 2];
        raw.extend((d0 as u32).to_be_bytes());
        raw.extend((d1 as u32).to_be_bytes());
        raw.extend(vec![7u8; d0 * d1]);
        prop_assert!(parse_idx(&raw).is_ok());
        let cut = cut % raw.len();
        prop_assert!(parse_idx(&raw[..cut]).is_err());
    }

    #[test]
    fn csv_loader_is_total(text in "[a-z0-9,.\\-\n ]{0,80}") {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(text.as_bytes()).unwrap();
        if let Ok(split) = load_csv(file.path(), "label", SplitId::Test) {
            prop_assert_eq!(split.inputs.shape()[0], split.labels.len());
            prop_assert!(split.labels.iter().all(|&y| y < split.num_classes));
        }
    }

    #[test]
    fn checkpoint_round_trips(
        input in 1usize..6,
        classes in 2usize..5,
        widths in vec(1usize..12, 1..4),
        multiplier in 0.5f64..2.0,
        seed in any::<u64>(),
        generation in 0usize..10,
    ) {
        let spec = ArchitectureSpec::mlp(input, classes, &widths, multiplier);
        let net = Network::init(&spec, seed).unwrap();
        let bytes = encode(&net, generation);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.generation, generation);
        prop_assert_eq!(back.network.spec(), net.spec());
        prop_assert!(back.network.same_params(&net));
        prop_assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_decoder_is_total(raw in vec(any::<u8>(), 0..128)) {
        let _ = decode(&raw);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn similarity_is_zero_exactly_for_matching_networks(a in any::<u64>(), b in any::<u64>(), data_seed in 0u64..100) {
        let data = generate_synthetic(&SyntheticSpec { train_samples: 50, test_samples: 50, seed: data_seed, ..Default::default() }).unwrap();
        let spec = ArchitectureSpec::mlp(2, 5, &[8], 1.0);
        let net = Network::init(&spec, a).unwrap();
        let same = behavior_similarity(&net, &net.clone(), &data).unwrap();
        prop_assert_eq!((same.kl_train, same.kl_test), (0.0, 0.0));
        if a != b {
            let other = Network::init(&spec, b).unwrap();
            let diff = behavior_similarity(&net, &other, &data).unwrap();
            prop_assert!(diff.kl_train > 0.0 && diff.kl_test > 0.0);
        }
    }

    #[test]
    fn synthetic_splits_share_no_samples(seed in any::<u64>(), dim in 2usize..5) {
        let data = generate_synthetic(&SyntheticSpec { input_dim: dim, train_samples: 200, test_samples: 200, seed, ..Default::default() }).unwrap();
        let key = |s: &DatasetSplit, i: usize| s.inputs.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let train: std::collections::HashSet<_> = (0..data.train.len()).map(|i| key(&data.train, i)).collect();
        prop_assert!((0..data.test.len()).all(|i| !train.contains(&key(&data.test, i))));
    }
}
