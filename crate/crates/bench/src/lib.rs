//! Shared fixtures for the benchmarks.

use valm_core::augment::{generate_grounded_corpus, GroundedCorpus, GroundedCorpusSpec};
use valm_core::encoder::{EmbeddingTable, SyntheticEncoder};
use valm_core::rng::{rng_for, unit_gaussian};
use valm_core::vindex::{train_index, IndexParams, IvfPqIndex};

/// `n` random unit vectors of width `dim`.
pub fn unit_keys(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = rng_for(seed, &[]);
    (0..n)
        .map(|_| unit_gaussian(&mut rng, dim).into_iter().map(|x| x as f32).collect())
        .collect()
}

/// Desk-scale index over `n` random unit keys.
pub fn desk_index(n: usize, dim: usize) -> (Vec<Vec<f32>>, IvfPqIndex) {
    let keys = unit_keys(n, dim, 1);
    let mut index = train_index(&keys, IndexParams::desk(dim)).expect("index trains");
    index
        .add_keys(keys.iter().enumerate().map(|(i, k)| (i as u64, &k[..])))
        .expect("keys insert");
    (keys, index)
}

pub struct GroundedFixture {
    pub corpus: GroundedCorpus,
    pub encoder: SyntheticEncoder,
    pub keys: EmbeddingTable,
    pub index: IvfPqIndex,
}

/// Default grounded corpus with its encoder, key store and a small index.
pub fn grounded(dim: usize) -> GroundedFixture {
    let corpus = generate_grounded_corpus(GroundedCorpusSpec::default()).expect("corpus");
    let encoder = corpus.encoder(dim, 1).expect("encoder");
    let keys = corpus.key_table(&encoder).expect("keys");
    let sample: Vec<Vec<f32>> = keys.iter().map(|(_, v)| v.to_vec()).collect();
    let params = IndexParams {
        n_centroids: 32,
        ..IndexParams::desk(dim)
    };
    let mut index = train_index(&sample, params).expect("index trains");
    index.add_keys(keys.iter()).expect("keys insert");
    GroundedFixture {
        corpus,
        encoder,
        keys,
        index,
    }
}
