#![allow(dead_code)]

use lmn_core::data::{gen_label_stream, gen_repeat_markov, EpisodeDataset, GeneratorSpec};
use lmn_core::pcn::{pcn_train, PcnMode, PcnModel, PcnShape, PcnTrainConfig};

pub fn seq_data(seed: u64, v: usize, episodes: usize) -> EpisodeDataset {
    gen_repeat_markov(&GeneratorSpec {
        seed,
        num_labels: v,
        episodes,
        min_len: 12,
        max_len: 20,
        repeat_bias: 0.7,
        ..Default::default()
    })
    .unwrap()
}

pub fn stateful(v: usize, seed: u64) -> PcnModel<f64> {
    PcnModel::new(
        PcnShape {
            mode: PcnMode::Stateful,
            num_classes: v,
            input_dim: 4,
            hidden_dim: 6,
        },
        seed,
        &[],
    )
    .unwrap()
}

pub fn label_spec(seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        seed,
        num_labels: 8,
        seen: 5,
        unseen: 3,
        episodes: 20,
        train_len: 10,
        test_episodes: 6,
        picks: 3,
        draws: 8,
        ..Default::default()
    }
}

/// Stateless PCN trained on the seen classes of `label_spec(seed)`.
pub fn trained_stateless(seed: u64) -> (PcnModel<f64>, EpisodeDataset) {
    let stream = gen_label_stream(&label_spec(seed)).unwrap();
    let mut pcn = PcnModel::new(
        PcnShape {
            mode: PcnMode::Stateless,
            num_classes: 8,
            input_dim: 16,
            hidden_dim: 8,
        },
        seed,
        &stream.train.unseen_labels(),
    )
    .unwrap();
    pcn_train(
        &mut pcn,
        &stream.train,
        &PcnTrainConfig {
            epochs: 3,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    (pcn, stream.test)
}
