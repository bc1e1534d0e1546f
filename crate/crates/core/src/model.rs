//! The full re-ranker: parameters, configuration, scoring, and the reverse
//! pass through the whole pipeline.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{plan_windows, EncodeCache, EncodeItem, LocalEncoder, TransformerStack, Window};
use crate::error::{Result, TklError};
use crate::kernel::{
    cosine_backward, cosine_matrix, kernel_activations, kernel_backward, region_sums, region_sums_backward,
    CosineMatrix, KernelBank, KernelTensor, RegionSums,
};
use crate::scoring::{
    final_score, saturate, saturate_backward, top_local_max, top_local_max_backward, topography,
    topography_backward, RelevanceTopography, Saturated, SaturationMode, SaturationParameters, ScoredRegions,
};
use crate::text::{EmbeddingTable, SalienceTable, Vocabulary, PAD_ID};

/// Architecture and scoring hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Kept core width of each document window.
    pub window: usize,
    /// Context tokens seen on each side of a window core.
    pub overlap: usize,
    pub region_size: usize,
    pub region_stride: usize,
    /// Number of top-local-max peaks.
    pub top_regions: usize,
    /// Neighbours taken on each side of a peak.
    pub neighbors: usize,
    pub kernels: usize,
    pub kernel_sigma: f64,
    pub saturation: SaturationMode,
    pub positional_encoding: bool,
    /// Documents are truncated to this many tokens before windowing.
    pub max_doc_len: usize,
    pub max_query_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            layers: 2,
            heads: 10,
            ffn_dim: 300,
            window: 40,
            overlap: 10,
            region_size: 30,
            region_stride: 1,
            top_regions: 3,
            neighbors: 2,
            kernels: 11,
            kernel_sigma: 0.1,
            saturation: SaturationMode::Embedding,
            positional_encoding: false,
            max_doc_len: 2000,
            max_query_len: 30,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TklError::Config(m));
        if self.embedding_dim == 0 || self.heads == 0 || !self.embedding_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embedding_dim {} must be a positive multiple of heads {}",
                self.embedding_dim, self.heads
            ));
        }
        if self.window == 0 || self.overlap >= self.window {
            return fail(format!("need 0 <= overlap ({}) < window ({})", self.overlap, self.window));
        }
        if self.region_size == 0 || self.region_stride == 0 || self.top_regions == 0 {
            return fail("region_size, region_stride and top_regions must be positive".into());
        }
        if self.max_doc_len == 0 || self.max_query_len == 0 || self.ffn_dim == 0 {
            return fail("max_doc_len, max_query_len and ffn_dim must be positive".into());
        }
        KernelBank::evenly_spaced(self.kernels, self.kernel_sigma)?;
        Ok(())
    }

    pub fn kernel_bank(&self) -> Result<KernelBank> {
        KernelBank::evenly_spaced(self.kernels, self.kernel_sigma)
    }

    /// Length of the feature vector fed to the region weights.
    pub fn region_features(&self) -> usize {
        self.top_regions * (2 * self.neighbors + 1)
    }
}

/// Which optimizer learning rate a tensor uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Embeddings and salience.
    Representation,
    Other,
}

/// Coarse parameter family, used for gradient-check reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embeddings,
    Salience,
    Encoder,
    Gate,
    Saturation,
    KernelWeights,
    RegionWeights,
}

impl Component {
    pub fn group(self) -> ParamGroup {
        match self {
            Component::Embeddings | Component::Salience => ParamGroup::Representation,
            _ => ParamGroup::Other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Embeddings => "embeddings",
            Component::Salience => "salience",
            Component::Encoder => "encoder",
            Component::Gate => "gate",
            Component::Saturation => "saturation",
            Component::KernelWeights => "kernel_weights",
            Component::RegionWeights => "region_weights",
        }
    }
}

/// A read-only view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamTensor<'a> {
    pub name: String,
    pub component: Component,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Every learned weight. The same struct doubles as the gradient
/// accumulator and as optimizer moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    /// `V × e`; row [`PAD_ID`] stays zero.
    pub embeddings: Array2<f64>,
    /// `V`; entry [`PAD_ID`] stays zero.
    pub salience: Array1<f64>,
    pub encoder: TransformerStack,
    /// Highway gate logits, one per model dimension.
    pub gate: Array1<f64>,
    pub saturation: SaturationParameters,
    /// `W_k`, one weight per kernel.
    pub kernel_weights: Array1<f64>,
    /// `W_s`, one weight per top-local-max feature.
    pub region_weights: Array1<f64>,
}

impl ModelParameters {
    pub fn zeros_like(&self) -> Self {
        ModelParameters {
            embeddings: Array2::zeros(self.embeddings.raw_dim()),
            salience: Array1::zeros(self.salience.len()),
            encoder: self.encoder.zeros_like(),
            gate: Array1::zeros(self.gate.len()),
            saturation: SaturationParameters::zeros(),
            kernel_weights: Array1::zeros(self.kernel_weights.len()),
            region_weights: Array1::zeros(self.region_weights.len()),
        }
    }

    /// All tensors in a fixed order with names and shapes.
    pub fn tensors(&self) -> Vec<ParamTensor<'_>> {
        let mut out = vec![
            ParamTensor {
                name: "embeddings".into(),
                component: Component::Embeddings,
                shape: self.embeddings.shape().to_vec(),
                data: self.embeddings.as_slice().expect("standard layout"),
            },
            ParamTensor {
                name: "salience".into(),
                component: Component::Salience,
                shape: vec![self.salience.len()],
                data: self.salience.as_slice().expect("standard layout"),
            },
        ];
        for (li, layer) in self.encoder.layers.iter().enumerate() {
            let mut seen = std::collections::HashMap::new();
            for (name, data) in layer.tensors() {
                let idx = seen.entry(name).or_insert(0usize);
                let suffix = if *idx == 0 { "weight" } else { "bias" };
                *idx += 1;
                let shape = match (name, suffix) {
                    (_, "bias") => vec![data.len()],
                    ("norm1" | "norm2", _) => vec![data.len()],
                    _ => {
                        let lin = match name {
                            "query" => &layer.query,
                            "key" => &layer.key,
                            "value" => &layer.value,
                            "output" => &layer.output,
                            "ff_in" => &layer.ff_in,
                            _ => &layer.ff_out,
                        };
                        lin.weight.shape().to_vec()
                    }
                };
                let suffix = match (name, suffix) {
                    ("norm1" | "norm2", "weight") => "gain",
                    (_, s) => s,
                };
                out.push(ParamTensor {
                    name: format!("encoder.{li}.{name}.{suffix}"),
                    component: Component::Encoder,
                    shape,
                    data,
                });
            }
        }
        out.push(ParamTensor {
            name: "gate".into(),
            component: Component::Gate,
            shape: vec![self.gate.len()],
            data: self.gate.as_slice().expect("standard layout"),
        });
        out.push(ParamTensor {
            name: "saturation.weights".into(),
            component: Component::Saturation,
            shape: vec![3, 2],
            data: self.saturation.weights.as_slice().expect("standard layout"),
        });
        out.push(ParamTensor {
            name: "saturation.biases".into(),
            component: Component::Saturation,
            shape: vec![3],
            data: self.saturation.biases.as_slice().expect("standard layout"),
        });
        out.push(ParamTensor {
            name: "kernel_weights".into(),
            component: Component::KernelWeights,
            shape: vec![self.kernel_weights.len()],
            data: self.kernel_weights.as_slice().expect("standard layout"),
        });
        out.push(ParamTensor {
            name: "region_weights".into(),
            component: Component::RegionWeights,
            shape: vec![self.region_weights.len()],
            data: self.region_weights.as_slice().expect("standard layout"),
        });
        out
    }

    /// Mutable slices in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.embeddings.as_slice_mut().expect("standard layout"),
            self.salience.as_slice_mut().expect("standard layout"),
        ];
        for layer in &mut self.encoder.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(self.gate.as_slice_mut().expect("standard layout"));
        out.push(self.saturation.weights.as_slice_mut().expect("standard layout"));
        out.push(self.saturation.biases.as_slice_mut().expect("standard layout"));
        out.push(self.kernel_weights.as_slice_mut().expect("standard layout"));
        out.push(self.region_weights.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParameters, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    /// Zeroes the padding row and padding salience.
    pub fn clear_padding(&mut self) {
        self.embeddings.row_mut(PAD_ID as usize).fill(0.0);
        if !self.salience.is_empty() {
            self.salience[PAD_ID as usize] = 0.0;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// A contextualized query or document.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub vectors: Array2<f64>,
}

/// Intermediate values of the scoring head kept for the reverse pass.
pub struct HeadCache {
    cosine: CosineMatrix,
    kernels: KernelTensor,
    regions: RegionSums,
    salience: Vec<f64>,
    saturated: Saturated,
    topography: RelevanceTopography,
}

/// Trained (or freshly initialised) re-ranker.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParameters,
    bank: KernelBank,
}

impl Model {
    /// Random initialisation. `embeddings` and `salience` are used as given
    /// when present; otherwise embeddings are drawn from `N(0, 1)` and
    /// salience is zero.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        embeddings: Option<EmbeddingTable>,
        salience: Option<SalienceTable>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let e = config.embedding_dim;
        let embeddings = match embeddings {
            Some(table) => {
                if table.vectors.dim() != (v, e) {
                    return Err(TklError::Config(format!(
                        "embedding table is {:?} but vocabulary × embedding_dim is ({v}, {e})",
                        table.vectors.dim()
                    )));
                }
                table.vectors
            }
            None => Array2::from_shape_simple_fn((v, e), || StandardNormal.sample(&mut rng)),
        };
        let salience = match salience {
            Some(s) if s.values.len() == v => s.values,
            Some(s) => {
                return Err(TklError::Config(format!(
                    "salience table has {} entries for a vocabulary of {v}",
                    s.values.len()
                )))
            }
            None => Array1::zeros(v),
        };
        let encoder = TransformerStack::init(e, config.ffn_dim, config.layers, config.heads, &mut rng);
        let k = config.kernels;
        let kernel_limit = 1.0 / (k as f64).sqrt();
        let kernel_dist = Uniform::new_inclusive(-kernel_limit, kernel_limit).expect("finite");
        let feats = config.region_features();
        let region_limit = 1.0 / (feats as f64).sqrt();
        let region_dist = Uniform::new_inclusive(-region_limit, region_limit).expect("finite");
        let mut params = ModelParameters {
            embeddings,
            salience,
            encoder,
            gate: Array1::zeros(e),
            saturation: SaturationParameters::default(),
            kernel_weights: Array1::from_shape_simple_fn(k, || kernel_dist.sample(&mut rng)),
            region_weights: Array1::from_shape_simple_fn(feats, || region_dist.sample(&mut rng)),
        };
        params.clear_padding();
        Ok(Model {
            bank: config.kernel_bank()?,
            config,
            vocab,
            params,
        })
    }

    /// Reassembles a model from stored parts, checking shapes.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        let mut reference = Model::new(config.clone(), vocab.clone(), None, None, 0)?;
        let expected: Vec<Vec<usize>> = reference.params.tensors().iter().map(|t| t.shape.clone()).collect();
        let found: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape.clone()).collect();
        if expected != found {
            return Err(TklError::Checkpoint("parameter shapes do not match the configuration".into()));
        }
        reference.params = params;
        Ok(reference)
    }

    pub fn kernel_bank(&self) -> &KernelBank {
        &self.bank
    }

    pub fn encoder(&self) -> LocalEncoder<'_> {
        LocalEncoder {
            stack: &self.params.encoder,
            gate: &self.params.gate,
            positional: self.config.positional_encoding,
        }
    }

    fn lookup(&self, ids: &[u32]) -> (Array2<f64>, Vec<bool>) {
        let mut emb = Array2::zeros((ids.len(), self.config.embedding_dim));
        for (row, &id) in ids.iter().enumerate() {
            emb.row_mut(row).assign(&self.params.embeddings.row(id as usize));
        }
        (emb, ids.iter().map(|&id| id != PAD_ID).collect())
    }

    fn windows_for(&self, len: usize, mask: &[bool], whole: bool) -> Vec<Window> {
        if whole {
            return vec![Window::whole(len)];
        }
        let plan = plan_windows(len, self.config.window, self.config.overlap).expect("validated geometry");
        plan.packable(mask).0
    }

    fn clean_ids(&self, ids: &[u32], limit: usize) -> Vec<u32> {
        let mut out: Vec<u32> = ids
            .iter()
            .take(limit)
            .map(|&id| if (id as usize) < self.vocab.len() { id } else { crate::text::OOV_ID })
            .collect();
        if out.is_empty() {
            out.push(PAD_ID);
        }
        out
    }

    fn encode_with_cache(&self, ids: Vec<u32>, whole: bool) -> (Encoded, EncodeCache) {
        let (emb, mask) = self.lookup(&ids);
        let windows = self.windows_for(ids.len(), &mask, whole);
        let item = EncodeItem {
            embeddings: emb.view(),
            mask: &mask,
            windows,
        };
        let (mut out, cache, _) = self.encoder().encode(&[item]);
        (
            Encoded {
                ids,
                mask,
                vectors: out.pop().expect("one item"),
            },
            cache,
        )
    }

    /// Contextualizes a query (truncated to `max_query_len`) in one window.
    pub fn encode_query(&self, ids: &[u32]) -> Encoded {
        self.encode_with_cache(self.clean_ids(ids, self.config.max_query_len), true).0
    }

    /// Contextualizes a document truncated to `max_len` tokens.
    pub fn encode_document(&self, ids: &[u32], max_len: usize) -> Encoded {
        self.encode_with_cache(self.clean_ids(ids, max_len), false).0
    }

    pub fn forward_query(&self, ids: &[u32]) -> (Encoded, EncodeCache) {
        self.encode_with_cache(self.clean_ids(ids, self.config.max_query_len), true)
    }

    pub fn forward_document(&self, ids: &[u32], max_len: usize) -> (Encoded, EncodeCache) {
        self.encode_with_cache(self.clean_ids(ids, max_len), false)
    }

    /// Scores an encoded pair and returns the selected regions.
    pub fn score_encoded(&self, query: &Encoded, doc: &Encoded) -> ScoredRegions {
        self.head_forward(query, doc).0
    }

    /// End-to-end score of `doc_ids` for `query_ids`, with the regions that
    /// produced it.
    pub fn score_document(&self, query_ids: &[u32], doc_ids: &[u32]) -> Result<ScoredRegions> {
        if query_ids.is_empty() || doc_ids.is_empty() {
            return Err(TklError::Argument("query and document must be non-empty".into()));
        }
        let q = self.encode_query(query_ids);
        let d = self.encode_document(doc_ids, self.config.max_doc_len);
        Ok(self.score_encoded(&q, &d))
    }

    pub fn head_forward(&self, query: &Encoded, doc: &Encoded) -> (ScoredRegions, HeadCache) {
        let cfg = &self.config;
        let cosine = cosine_matrix(&query.vectors, &doc.vectors, &query.mask, &doc.mask);
        let kernels = kernel_activations(&cosine.values, &self.bank, &query.mask, &doc.mask);
        let regions = region_sums(&kernels, cfg.region_size, cfg.region_stride).expect("validated geometry");
        let salience: Vec<f64> = query.ids.iter().map(|&id| self.params.salience[id as usize]).collect();
        let saturated = saturate(&regions, &salience, &self.params.saturation, cfg.saturation);
        let topo = topography(&saturated.values, &self.params.kernel_weights, &query.mask, &regions);
        let mut scored = top_local_max(&topo, cfg.top_regions, cfg.neighbors, cfg.region_size);
        scored.score = final_score(&scored, &self.params.region_weights);
        (
            scored,
            HeadCache {
                cosine,
                kernels,
                regions,
                salience,
                saturated,
                topography: topo,
            },
        )
    }

    /// Reverse pass of [`head_forward`](Self::head_forward) for
    /// `dL/dscore = d_score`. Returns gradients for the query and document
    /// vectors.
    pub fn head_backward(
        &self,
        query: &Encoded,
        cache: &HeadCache,
        scored: &ScoredRegions,
        d_score: f64,
        grads: &mut ModelParameters,
    ) -> (Array2<f64>, Array2<f64>) {
        let d_topo = top_local_max_backward(
            scored,
            &self.params.region_weights,
            d_score,
            cache.topography.values.len(),
            &mut grads.region_weights,
        );
        let d_sat = topography_backward(
            &cache.saturated.values,
            &self.params.kernel_weights,
            &query.mask,
            &d_topo,
            &mut grads.kernel_weights,
        );
        let (d_sums, d_salience) = saturate_backward(
            &cache.regions,
            &cache.salience,
            &self.params.saturation,
            &cache.saturated,
            &d_sat,
            &mut grads.saturation,
        );
        for (&id, d) in query.ids.iter().zip(d_salience) {
            if id != PAD_ID {
                grads.salience[id as usize] += d;
            }
        }
        let d_kernels = region_sums_backward(&cache.regions, &d_sums);
        let d_cos = kernel_backward(&cache.cosine.values, &self.bank, &cache.kernels, &d_kernels);
        cosine_backward(&cache.cosine, &d_cos)
    }

    /// Pushes `d_vectors` back through the encoder into the embedding table.
    pub fn encoder_backward(&self, encoded: &Encoded, cache: &EncodeCache, d_vectors: Array2<f64>, grads: &mut ModelParameters) {
        let d_emb = self
            .encoder()
            .backward(cache, &[d_vectors], &mut grads.encoder, &mut grads.gate);
        for (row, &id) in encoded.ids.iter().enumerate() {
            if id != PAD_ID {
                let mut target = grads.embeddings.row_mut(id as usize);
                target += &d_emb[0].row(row);
            }
        }
    }

    /// Score of one pair plus `d_score · ∂score/∂θ` accumulated into `grads`.
    pub fn score_with_gradient(
        &self,
        query_ids: &[u32],
        doc_ids: &[u32],
        d_score: f64,
        grads: &mut ModelParameters,
    ) -> ScoredRegions {
        let (q, q_cache) = self.forward_query(query_ids);
        let (d, d_cache) = self.forward_document(doc_ids, self.config.max_doc_len);
        let (scored, head) = self.head_forward(&q, &d);
        let (dq, dd) = self.head_backward(&q, &head, &scored, d_score, grads);
        self.encoder_backward(&d, &d_cache, dd, grads);
        self.encoder_backward(&q, &q_cache, dq, grads);
        scored
    }
}
