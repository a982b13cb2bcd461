//! Feature encoding, the embedding layer and the interaction encoder that
//! produces the upper-level user embedding.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, BlockId, DenseCache, DenseLayer, Matrix, Mlp, MlpCache, ParamStore, Role};
use crate::synthcohort::{Dataset, Layout, UserRecord};

/// Normalized dense values are clamped to this many standard deviations.
pub const DENSE_CLAMP: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseFeature {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    /// Number of index slots, including the reserved unknown slot 0.
    pub cardinality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFeature {
    pub name: String,
    /// Number of token slots, including the reserved unknown slot 0.
    pub vocab: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub dense: Vec<DenseFeature>,
    pub categorical: Vec<CategoricalFeature>,
    pub sequence: Vec<SequenceFeature>,
}

/// A user's feature vector: normalized dense block plus index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUser {
    pub dense: Vec<f64>,
    pub categorical: Vec<usize>,
    pub sequences: Vec<Vec<usize>>,
}

impl FeatureSchema {
    /// Fits normalization statistics and vocabularies on a training split.
    pub fn fit(train: &Dataset) -> Result<Self> {
        let layout = train.layout;
        let n = train.len();
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit a feature schema on no records".into()));
        }
        let dense = (0..layout.n_dense)
            .map(|j| {
                let mean = train.records.iter().map(|r| r.dense[j]).sum::<f64>() / n as f64;
                let var = train.records.iter().map(|r| (r.dense[j] - mean).powi(2)).sum::<f64>() / n as f64;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                DenseFeature {
                    name: format!("dense_{j}"),
                    mean,
                    std,
                }
            })
            .collect();
        let categorical = (0..layout.n_categorical)
            .map(|j| {
                let max = train.records.iter().map(|r| r.categorical[j]).max().unwrap_or(0);
                CategoricalFeature {
                    name: format!("cat_{j}"),
                    cardinality: max as usize + 1,
                }
            })
            .collect();
        let sequence = (0..layout.n_sequence)
            .map(|j| {
                let max_tok = train
                    .records
                    .iter()
                    .flat_map(|r| r.sequences[j].iter().copied())
                    .max()
                    .unwrap_or(0);
                let max_len = train.records.iter().map(|r| r.sequences[j].len()).max().unwrap_or(0);
                SequenceFeature {
                    name: format!("seq_{j}"),
                    vocab: max_tok as usize + 1,
                    max_len: max_len.max(1),
                }
            })
            .collect();
        let schema = Self {
            dense,
            categorical,
            sequence,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let all = self
            .dense
            .iter()
            .map(|f| &f.name)
            .chain(self.categorical.iter().map(|f| &f.name))
            .chain(self.sequence.iter().map(|f| &f.name));
        for name in all {
            if !names.insert(name) {
                return Err(Error::InvalidInput(format!("duplicate feature name `{name}`")));
            }
        }
        if let Some(f) = self.dense.iter().find(|f| !(f.std > 0.0 && f.mean.is_finite())) {
            return Err(Error::InvalidInput(format!("bad normalization stats for `{}`", f.name)));
        }
        if let Some(f) = self.categorical.iter().find(|f| f.cardinality < 1) {
            return Err(Error::InvalidInput(format!("`{}` needs cardinality >= 1", f.name)));
        }
        if let Some(f) = self.sequence.iter().find(|f| f.vocab < 1 || f.max_len < 1) {
            return Err(Error::InvalidInput(format!(
                "`{}` needs vocabulary >= 1 and max length >= 1",
                f.name
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            n_dense: self.dense.len(),
            n_categorical: self.categorical.len(),
            n_sequence: self.sequence.len(),
        }
    }

    /// Encodes one record. Out-of-vocabulary values map to index 0; sequences
    /// longer than `max_len` keep their most recent tokens.
    pub fn encode(&self, record: &UserRecord) -> Result<EncodedUser> {
        if let Some(f) = self.dense.get(record.dense.len()) {
            return Err(Error::MissingField(f.name.clone()));
        }
        if let Some(f) = self.categorical.get(record.categorical.len()) {
            return Err(Error::MissingField(f.name.clone()));
        }
        if let Some(f) = self.sequence.get(record.sequences.len()) {
            return Err(Error::MissingField(f.name.clone()));
        }
        let dense = self
            .dense
            .iter()
            .zip(&record.dense)
            .map(|(f, &x)| {
                if !x.is_finite() {
                    return Err(Error::InvalidInput(format!("`{}` is not finite", f.name)));
                }
                Ok(((x - f.mean) / f.std).clamp(-DENSE_CLAMP, DENSE_CLAMP))
            })
            .collect::<Result<_>>()?;
        let categorical = self
            .categorical
            .iter()
            .zip(&record.categorical)
            .map(|(f, &v)| lookup(v, f.cardinality))
            .collect();
        let sequences = self
            .sequence
            .iter()
            .zip(&record.sequences)
            .map(|(f, seq)| {
                // keep the most recent tokens; sorting makes the pooled sum
                // independent of order down to the last bit
                let start = seq.len().saturating_sub(f.max_len);
                let mut tokens: Vec<usize> = seq[start..].iter().map(|&t| lookup(t, f.vocab)).collect();
                tokens.sort_unstable();
                tokens
            })
            .collect();
        Ok(EncodedUser {
            dense,
            categorical,
            sequences,
        })
    }

    pub fn encode_all(&self, dataset: &Dataset) -> Result<Vec<EncodedUser>> {
        dataset.records.iter().map(|r| self.encode(r)).collect()
    }
}

fn lookup(value: u32, slots: usize) -> usize {
    let v = value as usize;
    if v < slots {
        v
    } else {
        0
    }
}

/// Embedding layer: a fully connected map of the dense block plus one lookup
/// table per categorical and sequence feature, all of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub d: usize,
    pub dense: Option<DenseLayer>,
    pub categorical: Vec<BlockId>,
    pub sequence: Vec<BlockId>,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    dense: Option<DenseCache>,
}

impl EmbeddingTables {
    pub fn new<R: Rng>(store: &mut ParamStore, schema: &FeatureSchema, d: usize, rng: &mut R) -> Self {
        let dense = (!schema.dense.is_empty()).then(|| {
            DenseLayer::new(
                store,
                "embed.dense",
                Role::Shared,
                schema.dense.len(),
                d,
                Activation::Identity,
                rng,
            )
        });
        let categorical = schema
            .categorical
            .iter()
            .map(|f| store.add_glorot(format!("embed.{}", f.name), Role::Shared, f.cardinality, d, rng))
            .collect();
        let sequence = schema
            .sequence
            .iter()
            .map(|f| store.add_glorot(format!("embed.{}", f.name), Role::Shared, f.vocab, d, rng))
            .collect();
        Self {
            d,
            dense,
            categorical,
            sequence,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.d * (usize::from(self.dense.is_some()) + self.categorical.len() + self.sequence.len())
    }

    fn check(&self, store: &ParamStore, user: &EncodedUser) -> Result<()> {
        let n_dense = self.dense.as_ref().map_or(0, |l| l.in_dim);
        if user.dense.len() != n_dense {
            return Err(Error::dim("encoded dense block", n_dense, user.dense.len()));
        }
        if user.categorical.len() != self.categorical.len() {
            return Err(Error::dim(
                "categorical features",
                self.categorical.len(),
                user.categorical.len(),
            ));
        }
        if user.sequences.len() != self.sequence.len() {
            return Err(Error::dim(
                "sequence features",
                self.sequence.len(),
                user.sequences.len(),
            ));
        }
        for (&id, &ix) in self.categorical.iter().zip(&user.categorical) {
            if ix >= store.value(id).rows() {
                return Err(Error::InvalidInput(format!("categorical index {ix} out of range")));
            }
        }
        for (&id, seq) in self.sequence.iter().zip(&user.sequences) {
            if seq.iter().any(|&t| t >= store.value(id).rows()) {
                return Err(Error::InvalidInput("sequence token out of range".into()));
            }
        }
        Ok(())
    }

    fn dense_input(&self, users: &[EncodedUser]) -> Result<Matrix> {
        let n_dense = self.dense.as_ref().map_or(0, |l| l.in_dim);
        Matrix::from_vec(
            users.len(),
            n_dense,
            users.iter().flat_map(|u| u.dense.iter().copied()).collect(),
        )
    }

    fn fill_lookups(&self, store: &ParamStore, users: &[EncodedUser], out: &mut Matrix, mut offset: usize) {
        let d = self.d;
        for (k, &id) in self.categorical.iter().enumerate() {
            let table = store.value(id);
            for (r, u) in users.iter().enumerate() {
                out.row_mut(r)[offset..offset + d].copy_from_slice(table.row(u.categorical[k]));
            }
            offset += d;
        }
        for (k, &id) in self.sequence.iter().enumerate() {
            let table = store.value(id);
            for (r, u) in users.iter().enumerate() {
                let seq = &u.sequences[k];
                if seq.is_empty() {
                    continue;
                }
                let inv = 1.0 / seq.len() as f64;
                let dst = &mut out.row_mut(r)[offset..offset + d];
                for &t in seq {
                    for (o, &v) in dst.iter_mut().zip(table.row(t)) {
                        *o += v * inv;
                    }
                }
            }
            offset += d;
        }
    }

    fn forward_impl(&self, store: &ParamStore, users: &[EncodedUser], cached: bool) -> Result<(Matrix, EmbedCache)> {
        for u in users {
            self.check(store, u)?;
        }
        let mut out = Matrix::zeros(users.len(), self.output_dim());
        let mut offset = 0;
        let mut dense_cache = None;
        if let Some(layer) = &self.dense {
            let x = self.dense_input(users)?;
            let dense_out = if cached {
                let c = layer.forward_cached(store, &x)?;
                let o = c.out.clone();
                dense_cache = Some(c);
                o
            } else {
                layer.forward(store, &x)?
            };
            for r in 0..users.len() {
                out.row_mut(r)[..self.d].copy_from_slice(dense_out.row(r));
            }
            offset = self.d;
        }
        self.fill_lookups(store, users, &mut out, offset);
        Ok((out, EmbedCache { dense: dense_cache }))
    }

    /// Lower-level embeddings, one row per user.
    pub fn forward(&self, store: &ParamStore, users: &[EncodedUser]) -> Result<Matrix> {
        Ok(self.forward_impl(store, users, false)?.0)
    }

    pub fn forward_cached(&self, store: &ParamStore, users: &[EncodedUser]) -> Result<(Matrix, EmbedCache)> {
        self.forward_impl(store, users, true)
    }

    /// Accumulates gradients of all tables from `∂L/∂e`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &EmbedCache,
        users: &[EncodedUser],
        d_embed: &Matrix,
    ) -> Result<()> {
        let d = self.d;
        if d_embed.shape() != (users.len(), self.output_dim()) {
            return Err(Error::dim(
                "embedding backward",
                users.len() * self.output_dim(),
                d_embed.len(),
            ));
        }
        let mut offset = 0;
        if let Some(layer) = &self.dense {
            let c = cache
                .dense
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("embedding backward without cached forward".into()))?;
            let upstream = d_embed.columns(0, d);
            layer.backward(store, c, &upstream)?;
            offset = d;
        }
        for (k, &id) in self.categorical.iter().enumerate() {
            let grad = store.grad_mut(id);
            for (r, u) in users.iter().enumerate() {
                let src = &d_embed.row(r)[offset..offset + d];
                for (g, &v) in grad.row_mut(u.categorical[k]).iter_mut().zip(src) {
                    *g += v;
                }
            }
            offset += d;
        }
        for (k, &id) in self.sequence.iter().enumerate() {
            let grad = store.grad_mut(id);
            for (r, u) in users.iter().enumerate() {
                let seq = &u.sequences[k];
                if seq.is_empty() {
                    continue;
                }
                let inv = 1.0 / seq.len() as f64;
                let src = &d_embed.row(r)[offset..offset + d];
                for &t in seq {
                    for (g, &v) in grad.row_mut(t).iter_mut().zip(src) {
                        *g += v * inv;
                    }
                }
            }
            offset += d;
        }
        Ok(())
    }
}

/// Maps lower-level embeddings to the upper-level embedding `e*`.
///
/// Only the concatenate-then-MLP encoder exists today; new encoders slot in as
/// further variants.
#[derive(Debug, Clone, PartialEq)]
pub enum InteractionEncoder {
    /// Two dense layers, ReLU then identity.
    Mlp(Mlp),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    #[default]
    Mlp,
}

#[derive(Debug, Clone)]
pub enum InteractionCache {
    Mlp(MlpCache),
}

impl InteractionEncoder {
    pub fn new<R: Rng>(
        kind: &InteractionKind,
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            InteractionKind::Mlp => InteractionEncoder::Mlp(Mlp::new(
                store,
                "interact",
                Role::Shared,
                in_dim,
                hidden,
                out_dim,
                Activation::Identity,
                rng,
            )),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            InteractionEncoder::Mlp(m) => m.out_dim(),
        }
    }

    pub fn forward(&self, store: &ParamStore, embed: &Matrix) -> Result<Matrix> {
        match self {
            InteractionEncoder::Mlp(m) => m.forward(store, embed),
        }
    }

    pub fn forward_cached(&self, store: &ParamStore, embed: &Matrix) -> Result<(Matrix, InteractionCache)> {
        match self {
            InteractionEncoder::Mlp(m) => {
                let c = m.forward_cached(store, embed)?;
                Ok((c.out().clone(), InteractionCache::Mlp(c)))
            }
        }
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &InteractionCache, d_out: &Matrix) -> Result<Matrix> {
        match (self, cache) {
            (InteractionEncoder::Mlp(m), InteractionCache::Mlp(c)) => m.backward(store, c, d_out),
        }
    }

    pub fn push_pattern(cache: &InteractionCache, pattern: &mut Vec<bool>) {
        match cache {
            InteractionCache::Mlp(c) => c.push_pattern(pattern),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig, Probe};

    fn schema() -> FeatureSchema {
        FeatureSchema {
            dense: vec![
                DenseFeature {
                    name: "dense_0".into(),
                    mean: 2.0,
                    std: 0.5,
                },
                DenseFeature {
                    name: "dense_1".into(),
                    mean: 0.0,
                    std: 1.0,
                },
            ],
            categorical: vec![CategoricalFeature {
                name: "cat_0".into(),
                cardinality: 4,
            }],
            sequence: vec![SequenceFeature {
                name: "seq_0".into(),
                vocab: 6,
                max_len: 3,
            }],
        }
    }

    fn record(dense: Vec<f64>, cat: u32, seq: Vec<u32>) -> UserRecord {
        UserRecord {
            user_id: 0,
            day: 0,
            dense,
            categorical: vec![cat],
            sequences: vec![seq],
            ltv: 0.0,
            purchased: false,
            whale: false,
            gwptr: 0.0,
            segment: None,
        }
    }

    fn build() -> (ParamStore, EmbeddingTables, InteractionEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, &schema(), 4, &mut rng);
        let enc = InteractionEncoder::new(&InteractionKind::Mlp, &mut store, tables.output_dim(), 5, 3, &mut rng);
        (store, tables, enc)
    }

    #[test]
    fn encode_normalizes_and_falls_back() {
        let s = schema();
        let e = s.encode(&record(vec![2.0, 100.0], 9, vec![])).unwrap();
        assert_eq!(e.dense, vec![0.0, DENSE_CLAMP]);
        assert_eq!(e.categorical, vec![0]);
        assert!(e.sequences[0].is_empty());
        let e = s.encode(&record(vec![2.0, 0.0], 3, vec![1, 2, 7, 4, 5])).unwrap();
        assert_eq!(e.categorical, vec![3]);
        // keeps the last three tokens; 7 is out of vocabulary
        assert_eq!(e.sequences[0], vec![0, 4, 5]);
    }

    #[test]
    fn encode_reports_missing_field() {
        let err = schema().encode(&record(vec![1.0], 1, vec![])).unwrap_err();
        assert!(matches!(err, Error::MissingField(ref f) if f == "dense_1"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = schema();
        s.categorical[0].name = "dense_0".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn embedding_pools_sequences_by_mean() {
        let (mut store, tables, _) = build();
        let dense_layer = tables.dense.clone().unwrap();
        store.block_mut(dense_layer.weights).value.fill(0.0);
        let users = vec![
            schema().encode(&record(vec![2.0, 0.0], 1, vec![])).unwrap(),
            schema().encode(&record(vec![2.0, 0.0], 1, vec![3])).unwrap(),
            schema().encode(&record(vec![2.0, 0.0], 1, vec![3, 3])).unwrap(),
        ];
        let e = tables.forward(&store, &users).unwrap();
        assert_eq!(e.cols(), 4 * 3);
        // zero dense block, zero weights and bias -> zero sub-embedding
        assert!(e.row(0)[..4].iter().all(|&x| x == 0.0));
        assert!(e.row(0)[8..].iter().all(|&x| x == 0.0));
        let row3 = store.value(tables.sequence[0]).row(3).to_vec();
        assert_eq!(&e.row(1)[8..], row3.as_slice());
        assert_eq!(e.row(1), e.row(2));
    }

    #[test]
    fn zero_interaction_weights_give_zero_output() {
        let (mut store, tables, enc) = build();
        for block in store.blocks_mut() {
            if block.name.starts_with("interact") {
                block.value.fill(0.0);
            }
        }
        let users = vec![schema().encode(&record(vec![1.0, -2.0], 2, vec![1, 5])).unwrap()];
        let e = tables.forward(&store, &users).unwrap();
        let out = enc.forward(&store, &e).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn interaction_dimension_mismatch() {
        let (store, _, enc) = build();
        assert!(enc.forward(&store, &Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn embed_and_interact_gradients_match_finite_differences() {
        let (mut store, tables, enc) = build();
        let s = schema();
        let users: Vec<EncodedUser> = [
            record(vec![1.3, -0.2], 1, vec![1, 2, 2]),
            record(vec![2.7, 0.9], 3, vec![5]),
            record(vec![1.9, 1.4], 2, vec![]),
        ]
        .iter()
        .map(|r| s.encode(r).unwrap())
        .collect();
        // loss = sum of squares of e* weighted by fixed coefficients
        let coef = [0.7, -1.3, 0.4];
        let eval = |store: &ParamStore| -> Result<(f64, Matrix, Vec<bool>)> {
            let (e, _) = tables.forward_cached(store, &users)?;
            let (out, cache) = enc.forward_cached(store, &e)?;
            let mut pattern = Vec::new();
            InteractionEncoder::push_pattern(&cache, &mut pattern);
            let mut loss = 0.0;
            let mut d = Matrix::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    let v = out.get(r, c);
                    loss += coef[c] * v * v;
                    d.set(r, c, 2.0 * coef[c] * v);
                }
            }
            Ok((loss, d, pattern))
        };
        let (e, ecache) = tables.forward_cached(&store, &users).unwrap();
        let (_, icache) = enc.forward_cached(&store, &e).unwrap();
        let (_, d_out, _) = eval(&store).unwrap();
        let d_e = enc.backward(&mut store, &icache, &d_out).unwrap();
        tables.backward(&mut store, &ecache, &users, &d_e).unwrap();
        let report = grad_check(&mut store, &GradCheckConfig::default(), |s| {
            let (loss, _, pattern) = eval(s)?;
            Ok(Probe { loss, pattern })
        })
        .unwrap();
        assert!(report.passed(), "{report:#?}");
        assert!(report.checked() > 50);
    }
}
