use super::kmeans::{kmeans, nearest_l2};

/// Codewords per subquantizer; one code byte each.
pub const KSUB: usize = 256;

/// Product quantizer over raw (non-residual) vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    dim: usize,
    m: usize,
    dsub: usize,
    /// `m × KSUB × dsub`, row-major.
    codebooks: Vec<f32>,
}

impl ProductQuantizer {
    /// Trains one seeded k-means per subspace. Caller guarantees
    /// `dim % m == 0` and at least `KSUB` sample rows.
    pub fn train(sample: &[f32], dim: usize, m: usize, iters: usize, seed: u64) -> Self {
        let dsub = dim / m;
        let n = sample.len() / dim;
        let mut codebooks = Vec::with_capacity(m * KSUB * dsub);
        for sub in 0..m {
            let subvectors: Vec<f32> = (0..n)
                .flat_map(|row| {
                    let start = row * dim + sub * dsub;
                    sample[start..start + dsub].iter().copied()
                })
                .collect();
            let seed = crate::rng::derive_seed(seed, &[0x7071, sub as u64]);
            codebooks.extend(kmeans(&subvectors, dsub, KSUB, iters, seed));
        }
        Self {
            dim,
            m,
            dsub,
            codebooks,
        }
    }

    pub fn from_codebooks(dim: usize, m: usize, codebooks: Vec<f32>) -> Self {
        Self {
            dim,
            m,
            dsub: dim / m,
            codebooks,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn codebooks(&self) -> &[f32] {
        &self.codebooks
    }

    pub fn codeword(&self, sub: usize, code: u8) -> &[f32] {
        let start = (sub * KSUB + code as usize) * self.dsub;
        &self.codebooks[start..start + self.dsub]
    }

    fn subspace_book(&self, sub: usize) -> &[f32] {
        &self.codebooks[sub * KSUB * self.dsub..(sub + 1) * KSUB * self.dsub]
    }

    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        (0..self.m)
            .map(|sub| {
                let part = &v[sub * self.dsub..(sub + 1) * self.dsub];
                nearest_l2(part, self.subspace_book(sub), self.dsub) as u8
            })
            .collect()
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim);
        for (sub, &c) in code.iter().enumerate() {
            out.extend_from_slice(self.codeword(sub, c));
        }
        out
    }

    /// Inner products of each query subvector with every codeword of its
    /// subspace: `m × KSUB`.
    pub fn lookup_table(&self, query: &[f32]) -> Vec<f32> {
        let mut lut = Vec::with_capacity(self.m * KSUB);
        for sub in 0..self.m {
            let q = &query[sub * self.dsub..(sub + 1) * self.dsub];
            lut.extend(
                self.subspace_book(sub)
                    .chunks(self.dsub)
                    .map(|cw| q.iter().zip(cw).map(|(a, b)| a * b).sum::<f32>()),
            );
        }
        lut
    }

    /// Asymmetric score of one code against a prepared lookup table.
    #[inline]
    pub fn adc(lut: &[f32], code: &[u8]) -> f32 {
        code.iter()
            .enumerate()
            .map(|(sub, &c)| lut[sub * KSUB + c as usize])
            .sum()
    }
}
