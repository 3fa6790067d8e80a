//! End-to-end flows through the public API plus property-based
//! invariants on the statistics, data, and serialization layers.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use wsf_core::checkpoint::{load_param_store, load_snapshot, save_param_store, save_snapshot};
use wsf_core::data::{BatchPlan, BatchStream, Dataset};
use wsf_core::harness::{
    evaluate_accuracy, finetune_with_stats, train, FinetuneSettings, OptimizerSpec, TrainSettings,
};
use wsf_core::nn::{softmax_probs, tiny_spec, Model, Phase};
use wsf_core::resample::{
    build_members, resample_gaussian, resample_mean, Combine, EnsembleSpec, ResampleMethod,
};
use wsf_core::rng::{derive_seed, rng_from_seed};
use wsf_core::stats::WelfordAccumulator;
use wsf_core::{ParamStore, Tensor};

/// Class k gets a bright bar on row k of an 8x8 image, plus noise.
fn synthetic_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let mut images = Tensor::<f32>::zeros(&[n, 1, 8, 8]);
    let mut labels = Vec::with_capacity(n);
    {
        let data = images.data_mut();
        for i in 0..n {
            let label = (rng.random::<u32>() % 8) as u8;
            labels.push(label);
            let img = &mut data[i * 64..(i + 1) * 64];
            for v in img.iter_mut() {
                *v = rng.random::<f32>() * 0.3;
            }
            for x in 0..8 {
                img[label as usize * 8 + x] += 0.8;
            }
        }
    }
    Dataset::new(images, labels).unwrap()
}

#[test]
fn train_finetune_resample_checkpoint_roundtrip() {
    let model = Model::new(tiny_spec(true)).unwrap();
    let train_data = synthetic_dataset(512, 1);
    let test_data = synthetic_dataset(256, 2);

    let settings = TrainSettings {
        optimizer: OptimizerSpec::Sgd { learning_rate: 0.3 },
        epochs: 5,
        batch_size: 32,
    };
    let baseline = train(&model, &settings, &train_data, 3).unwrap();
    let base_acc =
        evaluate_accuracy(&model, &[&baseline], &test_data, Combine::Probabilities).unwrap();
    assert!(base_acc > 0.7, "baseline {base_acc}");

    let ft = FinetuneSettings {
        optimizer: OptimizerSpec::Sgd { learning_rate: 0.05 },
        updates: 40,
        batch_size: 32,
    };
    let (finetuned, snapshot) = finetune_with_stats(&model, &baseline, &ft, &train_data, 3).unwrap();
    assert_eq!(snapshot.count(), 40);

    let mean_model = resample_mean(&finetuned, &snapshot).unwrap();
    let gauss_model = resample_gaussian(&finetuned, &snapshot, 9).unwrap();
    let members = build_members(
        &finetuned,
        &snapshot,
        &EnsembleSpec { method: ResampleMethod::Gaussian, k: 3, seed: 10 },
    )
    .unwrap();
    let refs: Vec<&ParamStore<f32>> = members.iter().collect();

    let mean_acc =
        evaluate_accuracy(&model, &[&mean_model], &test_data, Combine::Probabilities).unwrap();
    let gauss_acc =
        evaluate_accuracy(&model, &[&gauss_model], &test_data, Combine::Probabilities).unwrap();
    let ens_acc = evaluate_accuracy(&model, &refs, &test_data, Combine::Probabilities).unwrap();
    for acc in [mean_acc, gauss_acc, ens_acc] {
        assert!(acc > 0.5, "resampled accuracies {mean_acc} {gauss_acc} {ens_acc}");
    }

    // weights and statistics survive a disk roundtrip bit-exactly
    let dir = tempfile::tempdir().unwrap();
    let weights_path = dir.path().join("finetuned.wsf");
    let stats_path = dir.path().join("stats.wsf");
    let meta: BTreeMap<String, String> =
        [("stage".to_string(), "finetune".to_string())].into_iter().collect();
    save_param_store(&weights_path, &finetuned, &meta).unwrap();
    save_snapshot(&stats_path, &snapshot, &meta).unwrap();

    let (loaded, loaded_meta) = load_param_store::<f32>(&weights_path).unwrap();
    assert_eq!(loaded_meta.get("stage").map(String::as_str), Some("finetune"));
    for (a, b) in finetuned.iter().zip(loaded.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    let (loaded_snapshot, _) = load_snapshot::<f32>(&stats_path).unwrap();
    assert_eq!(loaded_snapshot.count(), 40);

    // the reloaded statistics produce the identical mean model
    let remeaned = resample_mean(&loaded, &loaded_snapshot).unwrap();
    for (a, b) in mean_model.iter().zip(remeaned.iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    let reacc = evaluate_accuracy(&model, &[&remeaned], &test_data, Combine::Probabilities).unwrap();
    assert_eq!(reacc, mean_acc);
}

#[test]
fn adam_pretraining_feeds_sgd_finetuning() {
    let model = Model::new(tiny_spec(false)).unwrap();
    let train_data = synthetic_dataset(512, 4);
    let test_data = synthetic_dataset(256, 5);
    let settings = TrainSettings {
        optimizer: OptimizerSpec::adam_default(),
        epochs: 20,
        batch_size: 32,
    };
    let baseline = train(&model, &settings, &train_data, 6).unwrap();
    let acc = evaluate_accuracy(&model, &[&baseline], &test_data, Combine::Probabilities).unwrap();
    assert!(acc > 0.7, "adam baseline {acc}");

    let ft = FinetuneSettings {
        optimizer: OptimizerSpec::Sgd { learning_rate: 0.05 },
        updates: 30,
        batch_size: 32,
    };
    let (_, snapshot) = finetune_with_stats(&model, &baseline, &ft, &train_data, 6).unwrap();
    let mean_model = resample_mean(&baseline, &snapshot).unwrap();
    let mean_acc =
        evaluate_accuracy(&model, &[&mean_model], &test_data, Combine::Probabilities).unwrap();
    assert!(mean_acc > 0.5, "mean after adam pretrain {mean_acc}");
}

fn single_param_store(values: &[f64]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store
        .insert("x".to_string(), Tensor::from_vec(&[values.len()], values.to_vec()).unwrap(), true)
        .unwrap();
    store
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Streaming mean/variance agree with the two-pass oracle on
    /// arbitrary bounded sequences.
    #[test]
    fn welford_matches_two_pass(values in prop::collection::vec(-1e4f64..1e4, 1..200)) {
        let mut acc = WelfordAccumulator::for_params(&single_param_store(&[0.0]));
        for &v in &values {
            acc.update(&single_param_store(&[v])).unwrap();
        }
        let snapshot = acc.snapshot::<f64>().unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let got_mean = snapshot.mean().get("x").unwrap().data()[0];
        let got_sd = snapshot.stddev().get("x").unwrap().data()[0];
        let tol = 1e-9 * (1.0 + mean.abs());
        prop_assert!((got_mean - mean).abs() <= tol, "mean {got_mean} vs {mean}");
        let sd = var.sqrt();
        let sd_tol = 1e-6 * (1.0 + sd);
        prop_assert!((got_sd - sd).abs() <= sd_tol, "sd {got_sd} vs {sd}");
    }

    /// The observation order does not matter beyond rounding.
    #[test]
    fn welford_is_permutation_insensitive(
        values in prop::collection::vec(-100f64..100.0, 2..100),
        seed in any::<u64>(),
    ) {
        let run = |vals: &[f64]| {
            let mut acc = WelfordAccumulator::for_params(&single_param_store(&[0.0]));
            for &v in vals {
                acc.update(&single_param_store(&[v])).unwrap();
            }
            let s = acc.snapshot::<f64>().unwrap();
            (s.mean().get("x").unwrap().data()[0], s.stddev().get("x").unwrap().data()[0])
        };
        let (m1, s1) = run(&values);
        let mut shuffled = values.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng_from_seed(seed));
        let (m2, s2) = run(&shuffled);
        prop_assert!((m1 - m2).abs() <= 1e-9 * (1.0 + m1.abs()));
        prop_assert!((s1 - s2).abs() <= 1e-7 * (1.0 + s1.abs()));
    }

    /// Every epoch of the batch stream visits each sample exactly once.
    #[test]
    fn batch_stream_epochs_are_permutations(
        n in 1usize..400,
        batch_size in 1usize..64,
        seed in any::<u64>(),
    ) {
        let images = Tensor::<f32>::zeros(&[n, 1, 2, 2]);
        let labels = vec![0u8; n];
        let data = Dataset::new(images, labels).unwrap();
        let mut stream = BatchStream::new(&data, BatchPlan { batch_size, seed }).unwrap();
        for _ in 0..2 {
            let mut seen = vec![false; n];
            let mut taken = 0;
            while taken < n {
                for idx in stream.next_indices() {
                    prop_assert!(!seen[idx as usize], "index {idx} repeated within epoch");
                    seen[idx as usize] = true;
                    taken += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }

    /// Checkpoint files reproduce every tensor bit for bit.
    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        tensors in prop::collection::vec(
            (
                "[a-z][a-z0-9_.]{0,12}",
                prop::collection::vec(any::<f32>(), 1..40),
                any::<bool>(),
            ),
            1..6,
        ),
    ) {
        let mut store = ParamStore::<f32>::new();
        for (name, values, trainable) in &tensors {
            if store.get(name).is_some() {
                continue; // duplicate generated name
            }
            store
                .insert(
                    name.clone(),
                    Tensor::from_vec(&[values.len()], values.clone()).unwrap(),
                    *trainable,
                )
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.wsf");
        save_param_store(&path, &store, &BTreeMap::new()).unwrap();
        let (loaded, _) = load_param_store::<f32>(&path).unwrap();
        for (a, b) in store.iter().zip(loaded.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.trainable, b.trainable);
            prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    /// Softmax rows are probability distributions even for large logits.
    #[test]
    fn softmax_rows_stay_on_the_simplex(
        rows in prop::collection::vec(
            prop::collection::vec(-100f32..100.0, 10),
            1..8,
        ),
    ) {
        let n = rows.len();
        let flat: Vec<f32> = rows.concat();
        let logits = Tensor::from_vec(&[n, 10], flat).unwrap();
        let probs = softmax_probs(&logits).unwrap();
        for row in probs.data().chunks(10) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    /// Seed derivation separates distinct word lists.
    #[test]
    fn derived_seeds_are_distinct(base in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(base, &[a]), derive_seed(base, &[b]));
        prop_assert_ne!(derive_seed(base, &[a, b]), derive_seed(base, &[b, a]));
        prop_assert_ne!(derive_seed(base, &[a]), base);
    }

    /// Gaussian resampling preserves layout and stays finite for finite
    /// inputs; zero stddev reproduces the mean exactly.
    #[test]
    fn gaussian_resampling_layout_and_degeneracy(
        values in prop::collection::vec(-10f32..10.0, 1..30),
        sds in prop::collection::vec(0f32..0.5, 1..30),
        seed in any::<u64>(),
    ) {
        let d = values.len().min(sds.len());
        let base = {
            let mut s = ParamStore::new();
            s.insert("w".to_string(), Tensor::from_vec(&[d], values[..d].to_vec()).unwrap(), true).unwrap();
            s
        };
        let mut acc = WelfordAccumulator::for_params(&base);
        acc.update(&base).unwrap();
        let degenerate = acc.snapshot::<f32>().unwrap(); // one observation: sd = 0
        let resampled = resample_gaussian(&base, &degenerate, seed).unwrap();
        for (a, b) in base.iter().zip(resampled.iter()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let _ = sds;
    }
}

#[test]
fn infer_phase_never_needs_rng_even_with_dropout() {
    let model = Model::new(tiny_spec(true)).unwrap();
    let params = model.init_params::<f32>(11);
    let data = synthetic_dataset(16, 12);
    let idx: Vec<u32> = (0..16).collect();
    let (images, labels) = data.gather(&idx);
    let out = model
        .forward_backward(&params, &images, &labels, Phase::Infer, None)
        .unwrap();
    assert!(out.grads.is_none());
    assert!(out.loss.is_finite());
}
