use crate::data::{DatasetKind, Episode, EpisodeDataset, LabeledVector, Vocab};
use crate::error::{invalid, Result};
use crate::numcore::Prng;

/// Tokens per episode-private home set in the repeat-heavy generator.
pub const HOME_SET_SIZE: usize = 5;

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub dim: usize,
    /// Per-coordinate standard deviation of each cluster.
    pub spread: f64,
    /// Per-coordinate standard deviation of the cluster centers.
    pub center_scale: f64,
    /// Minimum pairwise center distance, in multiples of `spread`. At least 4.
    pub min_separation: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            spread: 0.25,
            center_scale: 1.0,
            min_separation: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub seed: u64,
    /// Vocabulary size (sequences) or class count (label streams).
    pub num_labels: usize,
    /// Episodes to draw (training episodes for label streams).
    pub episodes: usize,
    /// Token-sequence length range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next token comes from the episode's home set.
    pub repeat_bias: f64,
    pub seen: usize,
    pub unseen: usize,
    /// Draws per training episode of a label stream.
    pub train_len: usize,
    pub test_episodes: usize,
    /// Classes picked per test episode.
    pub picks: usize,
    /// Draws per test episode; each pick appears at least twice.
    pub draws: usize,
    /// Restrict test picks to unseen classes (plain few-shot evaluation).
    pub test_unseen_only: bool,
    pub cluster: ClusterSpec,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_labels: 500,
            episodes: 200,
            min_len: 80,
            max_len: 120,
            repeat_bias: 0.7,
            seen: 25,
            unseen: 10,
            train_len: 20,
            test_episodes: 50,
            picks: 5,
            draws: 10,
            test_unseen_only: false,
            cluster: ClusterSpec::default(),
        }
    }
}

fn token_vocab(v: usize, prefix: &str) -> Vocab {
    Vocab::from_names((0..v).map(|i| format!("{prefix}{i}"))).expect("distinct generated names")
}

/// Repeat-heavy token sequences.
///
/// Each episode draws a private home set of [`HOME_SET_SIZE`] tokens. The
/// first token is a home token; afterwards, with probability `repeat_bias`
/// the next token is a home token drawn with weight `1 + count` (its count so
/// far in this episode), otherwise it is uniform over the vocabulary.
pub fn gen_repeat_markov(spec: &GeneratorSpec) -> Result<EpisodeDataset> {
    let v = spec.num_labels;
    if v < 2 {
        return Err(invalid(format!("vocabulary size {v} < 2")));
    }
    if !(0.0..=1.0).contains(&spec.repeat_bias) {
        return Err(invalid(format!("repeat bias {} outside [0, 1]", spec.repeat_bias)));
    }
    if spec.episodes == 0 || spec.min_len < 2 || spec.max_len < spec.min_len {
        return Err(invalid("need episodes >= 1 and 2 <= min_len <= max_len"));
    }
    let home_size = HOME_SET_SIZE.min(v);
    let mut rng = Prng::new(spec.seed);
    let episodes = (0..spec.episodes)
        .map(|_| {
            let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
            let home = rng.sample_distinct(v, home_size);
            let mut counts = vec![0usize; home_size];
            let mut tokens = Vec::with_capacity(len);
            for t in 0..len {
                let tok = if t == 0 || rng.bernoulli(spec.repeat_bias) {
                    let total: usize = counts.iter().map(|c| c + 1).sum();
                    let mut pick = rng.below(total);
                    let mut k = 0;
                    while pick > counts[k] {
                        pick -= counts[k] + 1;
                        k += 1;
                    }
                    home[k]
                } else {
                    rng.below(v)
                };
                if let Some(k) = home.iter().position(|&h| h == tok) {
                    counts[k] += 1;
                }
                tokens.push(tok);
            }
            Episode::Tokens(tokens)
        })
        .collect();
    EpisodeDataset::new(DatasetKind::TokenSequences, token_vocab(v, "t"), episodes)
}

/// Train/test split of a Gaussian-cluster label stream.
#[derive(Debug, Clone)]
pub struct LabelStream {
    /// Seen classes only.
    pub train: EpisodeDataset,
    /// Mixed seen/unseen test episodes.
    pub test: EpisodeDataset,
    pub centers: Vec<Vec<f64>>,
}

fn check_label_spec(spec: &GeneratorSpec) -> Result<()> {
    let classes = spec.seen + spec.unseen;
    if classes == 0 || classes > spec.num_labels {
        return Err(invalid(format!(
            "seen + unseen = {classes} must be in [1, V={}]",
            spec.num_labels
        )));
    }
    if spec.seen == 0 && spec.episodes > 0 {
        return Err(invalid("training episodes requested with no seen classes"));
    }
    let pool = if spec.test_unseen_only { spec.unseen } else { classes };
    if spec.picks == 0 || spec.picks > pool {
        return Err(invalid(format!(
            "cannot pick {} classes from a pool of {pool}",
            spec.picks
        )));
    }
    if spec.draws < 2 * spec.picks {
        return Err(invalid(format!(
            "{} draws cannot cover {} picks twice",
            spec.draws, spec.picks
        )));
    }
    let c = &spec.cluster;
    if c.dim == 0 || c.spread <= 0.0 || c.center_scale <= 0.0 {
        return Err(invalid("cluster dim, spread and center scale must be positive"));
    }
    if c.min_separation < 4.0 {
        return Err(invalid(format!(
            "cluster separation {} below 4x spread",
            c.min_separation
        )));
    }
    Ok(())
}

fn draw_centers(spec: &GeneratorSpec, rng: &mut Prng) -> Result<Vec<Vec<f64>>> {
    let c = &spec.cluster;
    let min_dist = c.min_separation * c.spread;
    let classes = spec.seen + spec.unseen;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        attempts += 1;
        if attempts > 1000 * classes {
            return Err(invalid(format!(
                "could not place {classes} centers {min_dist} apart; increase center_scale"
            )));
        }
        let cand: Vec<f64> = (0..c.dim).map(|_| c.center_scale * rng.normal()).collect();
        let ok = centers.iter().all(|o| {
            o.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist
        });
        if ok {
            centers.push(cand);
        }
    }
    Ok(centers)
}

fn sample_point(center: &[f64], spread: f64, rng: &mut Prng) -> Vec<f64> {
    center.iter().map(|m| m + spread * rng.normal()).collect()
}

fn mixed_episodes(
    spec: &GeneratorSpec,
    centers: &[Vec<f64>],
    count: usize,
    rng: &mut Prng,
) -> Vec<Episode> {
    let (first, pool) = if spec.test_unseen_only {
        (spec.seen, spec.unseen)
    } else {
        (0, spec.seen + spec.unseen)
    };
    (0..count)
        .map(|_| {
            let picks: Vec<usize> = rng
                .sample_distinct(pool, spec.picks)
                .into_iter()
                .map(|i| first + i)
                .collect();
            let mut labels: Vec<usize> = picks.iter().flat_map(|&p| [p, p]).collect();
            while labels.len() < spec.draws {
                labels.push(picks[rng.below(picks.len())]);
            }
            rng.shuffle(&mut labels);
            Episode::Vectors(
                labels
                    .into_iter()
                    .map(|y| LabeledVector {
                        x: sample_point(&centers[y], spec.cluster.spread, rng),
                        y,
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Seen/unseen Gaussian-cluster streams.
///
/// Classes `0..seen` are seen, `seen..seen+unseen` unseen. Training episodes
/// draw `train_len` points from uniformly chosen seen classes. Each test
/// episode picks `picks` distinct classes uniformly (from all classes, or
/// only unseen ones when `test_unseen_only`), then emits `draws` points in
/// shuffled order with every pick appearing at least twice.
pub fn gen_label_stream(spec: &GeneratorSpec) -> Result<LabelStream> {
    check_label_spec(spec)?;
    let root = Prng::new(spec.seed);
    let centers = draw_centers(spec, &mut root.fork(0))?;
    let mut rng = root.fork(1);
    let train_eps: Vec<Episode> = (0..spec.episodes)
        .map(|_| {
            Episode::Vectors(
                (0..spec.train_len.max(1))
                    .map(|_| {
                        let y = rng.below(spec.seen);
                        LabeledVector {
                            x: sample_point(&centers[y], spec.cluster.spread, &mut rng),
                            y,
                        }
                    })
                    .collect(),
            )
        })
        .collect();
    let test_eps = mixed_episodes(spec, &centers, spec.test_episodes, &mut root.fork(2));
    let unseen: Vec<usize> = (spec.seen..spec.num_labels).collect();
    let vocab = token_vocab(spec.num_labels, "c");
    Ok(LabelStream {
        train: EpisodeDataset::new(DatasetKind::LabeledVectors, vocab.clone(), train_eps)?
            .with_unseen(&unseen)?,
        test: EpisodeDataset::new(DatasetKind::LabeledVectors, vocab, test_eps)?
            .with_unseen(&unseen)?,
        centers,
    })
}

/// Additional test-style episodes over the same classes as
/// [`gen_label_stream`] with the same spec, drawn from an independent stream
/// (e.g. for combiner training or validation).
pub fn gen_label_episodes(spec: &GeneratorSpec, count: usize, stream: u64) -> Result<EpisodeDataset> {
    check_label_spec(spec)?;
    let root = Prng::new(spec.seed);
    let centers = draw_centers(spec, &mut root.fork(0))?;
    let eps = mixed_episodes(spec, &centers, count, &mut root.fork(3 + stream));
    let unseen: Vec<usize> = (spec.seen..spec.num_labels).collect();
    EpisodeDataset::new(
        DatasetKind::LabeledVectors,
        token_vocab(spec.num_labels, "c"),
        eps,
    )?
    .with_unseen(&unseen)
}
