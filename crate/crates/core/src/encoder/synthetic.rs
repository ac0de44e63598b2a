use std::collections::BTreeMap;

use super::{EmbeddingVector, EncoderError, ImageRecord, JointEncoder, DEFAULT_CHUNK_CAP};
use crate::io::PutLe;
use crate::rng::{derive_seed, hash_tokens, normalize, rng_for, unit_gaussian};
use crate::tokenizer::TokenId;

// Weight of the object direction in an image key; the attribute direction
// carries the rest, so keys of one object under different attributes have
// dot product OBJECT_WEIGHT².
const OBJECT_WEIGHT: f64 = 0.5;
// Weight of the chunk-specific jitter mixed into text queries.
const CONTEXT_JITTER: f64 = 0.1;

const TAG_ATTRIBUTE: u64 = 1;
const TAG_OBJECT: u64 = 2;
const TAG_CONTEXT: u64 = 3;
const TAG_NULL: u64 = 4;

/// Deterministic dual encoder with a known geometry.
///
/// Attribute directions are orthonormal; object directions are random unit
/// vectors orthogonal to the attribute span. The image key of
/// `(object, attribute)` is `0.5·u_obj + √0.75·v_attr`. A text chunk is
/// encoded from the last object token it contains: the key of that object
/// under its tabled attribute, plus a small chunk-dependent jitter. Chunks
/// without an object token map to a hashed random direction.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    dim: usize,
    seed: u64,
    n_attributes: u32,
    attribute_table: BTreeMap<TokenId, u32>,
    attributes: Vec<Vec<f64>>,
    objects: BTreeMap<TokenId, Vec<f64>>,
}

impl SyntheticEncoder {
    pub fn new(
        dim: usize,
        seed: u64,
        n_attributes: u32,
        attribute_table: BTreeMap<TokenId, u32>,
    ) -> Result<Self, EncoderError> {
        if n_attributes == 0 || n_attributes as usize >= dim {
            return Err(EncoderError::InvalidSpec(format!(
                "need 0 < n_attributes < dim, got {n_attributes} attributes at dim {dim}"
            )));
        }
        if let Some((obj, attr)) = attribute_table.iter().find(|(_, &a)| a >= n_attributes) {
            return Err(EncoderError::InvalidSpec(format!(
                "object {obj} has attribute {attr} outside 0..{n_attributes}"
            )));
        }
        let attributes = orthonormal_attributes(dim, seed, n_attributes as usize);
        let mut enc = Self {
            dim,
            seed,
            n_attributes,
            attribute_table,
            attributes,
            objects: BTreeMap::new(),
        };
        let objects = enc
            .attribute_table
            .keys()
            .map(|&o| (o, enc.object_direction(o)))
            .collect();
        enc.objects = objects;
        Ok(enc)
    }

    pub fn attribute_of(&self, object: TokenId) -> Option<u32> {
        self.attribute_table.get(&object).copied()
    }

    pub fn attribute_table(&self) -> &BTreeMap<TokenId, u32> {
        &self.attribute_table
    }

    pub fn n_attributes(&self) -> u32 {
        self.n_attributes
    }

    fn object_direction(&self, object: TokenId) -> Vec<f64> {
        if let Some(u) = self.objects.get(&object) {
            return u.clone();
        }
        let mut rng = rng_for(self.seed, &[TAG_OBJECT, u64::from(object)]);
        let mut u = unit_gaussian(&mut rng, self.dim);
        for v in &self.attributes {
            let proj: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(v).for_each(|(a, b)| *a -= proj * b);
        }
        normalize(&mut u);
        u
    }

    fn key_direction(&self, object: TokenId, attribute: u32) -> Vec<f64> {
        let u = self.object_direction(object);
        let v = &self.attributes[attribute as usize % self.attributes.len()];
        let attr_weight = (1.0 - OBJECT_WEIGHT * OBJECT_WEIGHT).sqrt();
        let mut key: Vec<f64> = u
            .iter()
            .zip(v)
            .map(|(a, b)| OBJECT_WEIGHT * a + attr_weight * b)
            .collect();
        normalize(&mut key);
        key
    }
}

fn orthonormal_attributes(dim: usize, seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut draw = 0u64;
    while basis.len() < n {
        let mut rng = rng_for(seed, &[TAG_ATTRIBUTE, draw]);
        draw += 1;
        let mut v = unit_gaussian(&mut rng, dim);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn to_f32(v: Vec<f64>) -> EmbeddingVector {
    v.into_iter().map(|x| x as f32).collect()
}

impl JointEncoder for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!(
            "synthetic-d{}-a{}-s{}-t{:016x}",
            self.dim,
            self.n_attributes,
            self.seed,
            crate::io::checksum64(&self.state_bytes())
        )
    }

    fn max_chunk_len(&self) -> usize {
        DEFAULT_CHUNK_CAP
    }

    fn encode_text(&self, tokens: &[TokenId]) -> Result<EmbeddingVector, EncoderError> {
        let context = derive_seed(self.seed, &[TAG_CONTEXT, hash_tokens(tokens)]);
        let jitter = unit_gaussian(&mut rng_for(context, &[]), self.dim);
        let last_object = tokens
            .iter()
            .rev()
            .find_map(|t| self.attribute_table.get(t).map(|&a| (*t, a)));
        let Some((object, attribute)) = last_object else {
            return Ok(to_f32(jitter));
        };
        let key = self.key_direction(object, attribute);
        let mut v: Vec<f64> = key
            .iter()
            .zip(&jitter)
            .map(|(k, j)| k + CONTEXT_JITTER * j)
            .collect();
        normalize(&mut v);
        Ok(to_f32(v))
    }

    fn encode_image(&self, image: &ImageRecord) -> Result<EmbeddingVector, EncoderError> {
        if image.attribute >= self.n_attributes {
            return Err(EncoderError::InvalidSpec(format!(
                "image {} has attribute {} outside 0..{}",
                image.id, image.attribute, self.n_attributes
            )));
        }
        Ok(to_f32(self.key_direction(image.object, image.attribute)))
    }

    fn null_query(&self) -> EmbeddingVector {
        to_f32(unit_gaussian(&mut rng_for(self.seed, &[TAG_NULL]), self.dim))
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.put_str("synthetic");
        out.put_u64(self.dim as u64);
        out.put_u64(self.seed);
        out.put_u32(self.n_attributes);
        out.put_u64(self.attribute_table.len() as u64);
        for (&o, &a) in &self.attribute_table {
            out.put_u32(o);
            out.put_u32(a);
        }
        out
    }
}
