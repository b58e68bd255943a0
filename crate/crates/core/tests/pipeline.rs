use taskprune::evaluation::DEFAULT_ALPHA_GRID;
use taskprune::format::{decode_mask, decode_model, encode_mask, encode_model};
use taskprune::prelude::*;
use taskprune::train::train_model;

fn trained(seed: u64) -> (SyntheticTaskPair, Model) {
    let pair = generate_task_pair(seed, 0.5, 16).unwrap();
    let init = pair.planted_model(&[24], Nonlinearity::Relu, seed).unwrap();
    let cfg = TrainConfig { steps: 150, lr: 0.2, batch_size: 32, train_embedding: false, seed };
    let (model, _) = train_model(&init, &pair.combined_train(), &cfg).unwrap();
    (pair, model)
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn comparison_is_deterministic_across_thread_counts() {
    let (pair, model) = trained(1);
    let spec = SparsitySpec::unstructured(0.5, Scope::Layer).unwrap();
    let opts = CompareOptions { calib_samples: 64, seed: 9, ..CompareOptions::default() };
    let run = || compare_methods(&pair, &model, &spec, &DEFAULT_ALPHA_GRID, &opts).unwrap();
    let a = in_pool(1, run);
    let b = in_pool(3, run);
    assert_eq!(a, b);
    assert_eq!(a.task_aware_rows().count(), DEFAULT_ALPHA_GRID.len());
    for row in &a.rows {
        for g in &row.group_fractions {
            let f = &g.fractions;
            assert!((f.shared + f.general_only + f.task_only - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn trained_model_and_masks_survive_serialization() {
    let (pair, model) = trained(2);
    let back = decode_model(&encode_model(&model).unwrap()).unwrap();
    assert_eq!(back, model);
    let probe = &pair.task_eval.sequences[0];
    let (x, y) = (forward(&model, probe).unwrap(), forward(&back, probe).unwrap());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let norms = collect_norms(&model, &pair.general_train).unwrap();
    let scores = wanda_scores(&model, &norms, true).unwrap();
    for spec in [SparsitySpec::n_m(4, 8).unwrap(), SparsitySpec::unstructured(0.75, Scope::Global).unwrap()] {
        let mask = make_mask(&scores, &spec).unwrap();
        assert_eq!(decode_mask(&encode_mask(&mask).unwrap()).unwrap(), mask);
    }
}

#[test]
fn task_aware_protects_task_channels_that_the_baseline_drops() {
    let (pair, model) = trained(3);
    let general = collect_norms(&model, &pair.general_train).unwrap();
    let task = collect_norms(&model, &pair.task_train.clone().with_source(SourceTag::Task)).unwrap();
    let spec = SparsitySpec::unstructured(0.5, Scope::Layer).unwrap();
    let baseline = make_mask(&wanda_scores(&model, &general, true).unwrap(), &spec).unwrap();
    let aware = task_aware_scores(&model, &general, &task, &TaskAwareConfig::default()).unwrap();
    let mask = make_mask(&aware.scores, &spec).unwrap();

    // First layer input channels are the planted embedding channels.
    let (b, a) = (&baseline.layers()[0].bits, &mask.layers()[0].bits);
    let kept_in_task_channels = |bits: &Matrix<bool>| {
        (0..bits.rows())
            .flat_map(|i| (0..bits.cols()).map(move |j| (i, j)))
            .filter(|&(i, j)| pair.planted[j] == ChannelGroup::TaskOnly && !bits.get(i, j))
            .count()
    };
    assert!(kept_in_task_channels(a) > kept_in_task_channels(b));
}

#[test]
fn training_reruns_agree() {
    let pair = generate_task_pair(4, 0.5, 16).unwrap();
    let spec = ModelSpec {
        vocab_size: pair.vocab_size(),
        embed_dim: 8,
        layer_dims: vec![16],
        nonlinearity: Nonlinearity::GeluTanhApprox,
        seed: 4,
    };
    let cfg = TrainConfig { steps: 100, lr: 0.1, batch_size: 32, ..TrainConfig::default() };
    let (m1, r1) = train_toy_model(spec.clone(), &pair.general_train, &cfg).unwrap();
    let (m2, r2) = in_pool(2, || train_toy_model(spec, &pair.general_train, &cfg).unwrap());
    assert_eq!(m1, m2);
    assert_eq!(r1.final_loss, r2.final_loss);
    assert!(r1.final_loss < r1.loss_curve[0].1);
}
