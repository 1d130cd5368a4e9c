//! Daemon toolkit: top-K sparsification, pairwise additive masking and
//! element-wise summation, plus the named transform registry that sync
//! bindings apply on push.
//!
//! Masked values live in the ring of integers mod 2^64. Integer vectors are
//! masked as-is; floats are first encoded as fixed-point with
//! [`FIXED_POINT_BITS`] fractional bits. Pairwise masks cancel exactly in the
//! ring sum, so the unmasked aggregate equals the sum of the encoded inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::object::Value;
use super::FedcoreError;
use crate::identity::{FedId, KeyPair, PublicKey};

pub const FIXED_POINT_BITS: u32 = 40;
const FIXED_SCALE: f64 = (1u64 << FIXED_POINT_BITS) as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub dim: usize,
    /// (index, value) pairs in selection order.
    pub entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

/// Keep the `k` entries of largest magnitude; ties go to the lower index.
pub fn topk_sparsify(v: &[f64], k: usize) -> Result<SparseVector, FedcoreError> {
    if k == 0 || k > v.len() {
        return Err(FedcoreError::InvalidArgument(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    Ok(SparseVector {
        dim: v.len(),
        entries: idx[..k].iter().map(|&i| (i, v[i])).collect(),
    })
}

pub fn encode_fixed(x: f64) -> Result<u64, FedcoreError> {
    let scaled = (x * FIXED_SCALE).round();
    if !scaled.is_finite() || scaled.abs() >= 9.2e18 {
        return Err(FedcoreError::InvalidArgument(format!(
            "{x} does not fit the fixed-point encoding"
        )));
    }
    Ok(scaled as i64 as u64)
}

pub fn decode_fixed(u: u64) -> f64 {
    (u as i64) as f64 / FIXED_SCALE
}

/// Deterministic mask stream for one pair.
pub fn prg_stream(seed: &[u8; 32], len: usize) -> Vec<u64> {
    let mut rng = ChaCha20Rng::from_seed(*seed);
    (0..len).map(|_| rng.next_u64()).collect()
}

/// masked_i = v_i + Σ_{j>i} PRG(s_ij) − Σ_{j<i} PRG(s_ij), ordering by fed id.
pub fn mask(v: &[u64], peer_seeds: &[(FedId, [u8; 32])], self_id: &FedId) -> Vec<u64> {
    let mut out = v.to_vec();
    for (peer, seed) in peer_seeds {
        if peer == self_id {
            continue;
        }
        let stream = prg_stream(seed, v.len());
        for (o, m) in out.iter_mut().zip(stream) {
            *o = if peer > self_id { o.wrapping_add(m) } else { o.wrapping_sub(m) };
        }
    }
    out
}

/// Element-wise ring sum.
pub fn ring_sum(contributions: &[(FedId, Vec<u64>)]) -> Result<Vec<u64>, FedcoreError> {
    let dim = check_dims(contributions.iter().map(|(id, v)| (id, v.len())))?;
    let mut out = vec![0u64; dim];
    for (_, v) in contributions {
        for (o, x) in out.iter_mut().zip(v) {
            *o = o.wrapping_add(*x);
        }
    }
    Ok(out)
}

/// Element-wise sum of float vectors in fed id order.
pub fn aggregate_sum(contributions: &BTreeMap<FedId, Vec<f64>>) -> Result<Vec<f64>, FedcoreError> {
    let dim = check_dims(contributions.iter().map(|(id, v)| (id, v.len())))?;
    let mut out = vec![0.0; dim];
    for v in contributions.values() {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    Ok(out)
}

fn check_dims<'a>(mut dims: impl Iterator<Item = (&'a FedId, usize)>) -> Result<usize, FedcoreError> {
    let Some((_, dim)) = dims.next() else {
        return Err(FedcoreError::InvalidArgument("no contributions to aggregate".into()));
    };
    for (id, d) in dims {
        if d != dim {
            return Err(FedcoreError::InvalidArgument(format!(
                "contribution from {id} has dimension {d}, expected {dim}"
            )));
        }
    }
    Ok(dim)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    Fixed40,
    Int,
}

/// What a push binding actually sends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum Payload {
    Plain { value: Value },
    Sparse { vector: SparseVector },
    Masked { encoding: Encoding, ring: Vec<u64> },
}

impl Payload {
    pub fn dim(&self) -> usize {
        match self {
            Payload::Plain { value } => value.len(),
            Payload::Sparse { vector } => vector.dim,
            Payload::Masked { ring, .. } => ring.len(),
        }
    }

    pub fn is_masked(&self) -> bool {
        matches!(self, Payload::Masked { .. })
    }

    /// Dense floats for unmasked numeric payloads.
    pub fn dense_floats(&self) -> Option<Vec<f64>> {
        match self {
            Payload::Plain { value: Value::Floats(v) } => Some(v.clone()),
            Payload::Plain { value: Value::Ints(v) } => Some(v.iter().map(|&x| x as f64).collect()),
            Payload::Sparse { vector } => Some(vector.densify()),
            _ => None,
        }
    }
}

/// Keys needed to derive pairwise mask seeds for one round attempt.
pub struct MaskParams<'a> {
    pub self_id: &'a FedId,
    pub key: &'a KeyPair,
    pub participants: &'a [(FedId, PublicKey)],
    pub aggregate: &'a str,
    pub round: u64,
    pub attempt: u32,
}

impl MaskParams<'_> {
    pub fn context(&self) -> Vec<u8> {
        format!("comverse-mask-v1|{}|{}|{}", self.aggregate, self.round, self.attempt).into_bytes()
    }

    pub fn peer_seeds(&self) -> Result<Vec<(FedId, [u8; 32])>, FedcoreError> {
        let ctx = self.context();
        self.participants
            .iter()
            .filter(|(id, _)| id != self.self_id)
            .map(|(id, pk)| {
                let seed = self
                    .key
                    .shared_secret(pk, &ctx)
                    .map_err(|e| FedcoreError::InvalidArgument(format!("mask key for {id}: {e}")))?;
                Ok((id.clone(), seed))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl TransformSpec {
    pub fn named(name: &str) -> Self {
        TransformSpec { name: name.into(), k: None }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k {
            Some(k) => write!(f, "{}(k={k})", self.name),
            None => f.write_str(&self.name),
        }
    }
}

pub type TransformFn =
    dyn Fn(&TransformSpec, Payload, Option<&MaskParams<'_>>) -> Result<Payload, FedcoreError> + Send + Sync;

/// Named push transforms.
#[derive(Clone)]
pub struct TransformRegistry {
    transforms: BTreeMap<String, Arc<TransformFn>>,
}

impl fmt::Debug for TransformRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.transforms.keys()).finish()
    }
}

impl Default for TransformRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

pub const MASK: &str = "mask";
pub const TOPK: &str = "topk";

impl TransformRegistry {
    pub fn empty() -> Self {
        TransformRegistry {
            transforms: BTreeMap::new(),
        }
    }

    /// `topk` (optional `k`, all entries when absent) and `mask`.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(TOPK, Arc::new(apply_topk));
        r.register(MASK, Arc::new(apply_mask));
        r
    }

    pub fn register(&mut self, name: &str, f: Arc<TransformFn>) {
        self.transforms.insert(name.to_string(), f);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.transforms.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.transforms.keys().map(String::as_str)
    }

    /// Run `chain` in order.
    pub fn apply(
        &self,
        chain: &[TransformSpec],
        mut payload: Payload,
        mask: Option<&MaskParams<'_>>,
    ) -> Result<Payload, FedcoreError> {
        for spec in chain {
            let f = self
                .transforms
                .get(&spec.name)
                .ok_or_else(|| FedcoreError::InvalidArgument(format!("unknown transform {:?}", spec.name)))?;
            payload = f(spec, payload, mask)?;
        }
        Ok(payload)
    }
}

fn apply_topk(spec: &TransformSpec, payload: Payload, _: Option<&MaskParams<'_>>) -> Result<Payload, FedcoreError> {
    let v = match payload {
        Payload::Plain { value: Value::Floats(v) } => v,
        Payload::Sparse { vector } => vector.densify(),
        _ => return Err(FedcoreError::InvalidArgument("topk needs an unmasked float vector".into())),
    };
    let k = spec.k.unwrap_or(v.len()).min(v.len());
    if v.is_empty() {
        return Err(FedcoreError::InvalidArgument("topk of an empty vector".into()));
    }
    Ok(Payload::Sparse {
        vector: topk_sparsify(&v, k)?,
    })
}

fn apply_mask(_: &TransformSpec, payload: Payload, mask_params: Option<&MaskParams<'_>>) -> Result<Payload, FedcoreError> {
    let params = mask_params
        .ok_or_else(|| FedcoreError::InvalidArgument("mask needs an open aggregation round".into()))?;
    let (encoding, plain) = match payload {
        Payload::Plain { value: Value::Ints(v) } => (Encoding::Int, v.iter().map(|&x| x as u64).collect()),
        Payload::Plain { value: Value::Floats(v) } => (Encoding::Fixed40, encode_all(&v)?),
        Payload::Sparse { vector } => (Encoding::Fixed40, encode_all(&vector.densify())?),
        Payload::Plain { value: Value::Bytes(_) } => {
            return Err(FedcoreError::InvalidArgument("cannot mask bytes".into()))
        }
        Payload::Masked { .. } => return Err(FedcoreError::InvalidArgument("payload already masked".into())),
    };
    let ring = mask(&plain, &params.peer_seeds()?, params.self_id);
    Ok(Payload::Masked { encoding, ring })
}

fn encode_all(v: &[f64]) -> Result<Vec<u64>, FedcoreError> {
    v.iter().map(|&x| encode_fixed(x)).collect()
}

/// Decode an unmasked ring sum.
pub fn decode_ring(encoding: Encoding, ring: &[u64]) -> Value {
    match encoding {
        Encoding::Int => Value::Ints(ring.iter().map(|&x| x as i64).collect()),
        Encoding::Fixed40 => Value::Floats(ring.iter().map(|&x| decode_fixed(x)).collect()),
    }
}
