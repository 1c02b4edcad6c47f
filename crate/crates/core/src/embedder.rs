//! Backbone contract, the default desk-scale convolutional backbone,
//! embedding extraction and checkpoint persistence.
//!
//! The default backbone is `blocks` stages of 3x3 convolutions (the first of
//! each stage with stride 2, then `depth` stride-1 convolutions), ReLU after
//! every convolution, global average pooling and a linear map to `embed_dim`.
//! Forward and backward passes run over fixed-size chunks of the batch so the
//! floating point reduction order never depends on the thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{JointLabelMap, Modality};
use crate::error::{Error, Result};
use crate::heads::ClassifierWeights;

/// Samples per forward/backward work unit.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    /// Channels of the first stage; every stage doubles it.
    pub width: usize,
    /// Extra stride-1 convolutions per stage.
    pub depth: usize,
    /// Number of stride-2 stages.
    pub blocks: usize,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 64,
            width: 16,
            depth: 0,
            blocks: 3,
            input_size: 112,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        if self.width == 0 || self.blocks == 0 {
            return Err(Error::Config("width and blocks must be positive".into()));
        }
        if self.input_size < 1 << self.blocks {
            return Err(Error::Config(format!(
                "input_size {} too small for {} stride-2 stages",
                self.input_size, self.blocks
            )));
        }
        Ok(())
    }

    fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::new();
        let mut cin = 3;
        for b in 0..self.blocks {
            let cout = self.width << b;
            specs.push(ConvSpec {
                name: format!("block{b}.conv0"),
                cin,
                cout,
                stride: 2,
            });
            for i in 0..self.depth {
                specs.push(ConvSpec {
                    name: format!("block{b}.conv{}", i + 1),
                    cin: cout,
                    cout,
                    stride: 1,
                });
            }
            cin = cout;
        }
        specs
    }

    fn feature_channels(&self) -> usize {
        self.width << (self.blocks - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    stride: usize,
}

/// Ordered collection of named f32 tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f32>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f32>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, i: usize) -> &ArrayD<f32> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut ArrayD<f32> {
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), ArrayD::zeros(t.raw_dim())))
                .collect(),
        }
    }

    /// Checks names and shapes agree entry by entry.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.entries.iter().zip(&other.entries) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {a}{:?} vs {b}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f32, other: &ParamStore) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Little-endian serialization, see `weights.bin` in the README.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.num_scalars() * 4);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err("bad magic".into());
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let data = r.take(n * 4)?;
            let values: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| e.to_string())?;
            store.insert(name, tensor);
        }
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(store)
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"NVW1";
const CLASSIFIERS_MAGIC: &[u8; 4] = b"NVC1";

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.data.len() {
            return Err("unexpected end of data".into());
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Normalized or raw embeddings with optional row-aligned metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vectors: Array2<f64>,
    pub normalized: bool,
    pub identities: Vec<String>,
    pub modalities: Vec<Modality>,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Row-wise L2 normalization; errors on an all-zero row.
pub fn l2_normalize_rows(m: &mut Array2<f64>) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(m.nrows());
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormEmbedding(i));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok(norms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    convs: Vec<ConvSpec>,
}

/// Activations of one chunk kept for the backward pass.
struct ChunkCache {
    n: usize,
    /// Per conv: im2col matrix of its input and input spatial size.
    cols: Vec<Array2<f32>>,
    in_hw: Vec<(usize, usize)>,
    /// Per conv: post-ReLU output, `(cout, n * h * w)`.
    outputs: Vec<Array2<f32>>,
    /// `(channels, n)` pooled features.
    pooled: Array2<f32>,
}

/// Result of a training forward pass; consumed by [`Backbone::backward`].
pub struct ForwardPass {
    /// `(B, d)` unit-norm embeddings.
    pub embeddings: Array2<f64>,
    raw_norms: Vec<f64>,
    chunks: Vec<ChunkCache>,
}

fn out_size(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

/// `x` is `(cin, n, h, w)` flattened as `(cin, n*h*w)`.
fn im2col(x: &Array2<f32>, n: usize, h: usize, w: usize, stride: usize) -> Array2<f32> {
    let cin = x.nrows();
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let mut cols = Array2::<f32>::zeros((cin * 9, n * ho * wo));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    let plane = n * h * w;
    let ncols = n * ho * wo;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * ncols;
                for s in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base_in = c * plane + s * h * w + iy as usize * w;
                        let base_out = row + (s * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[base_out + ox] = src[base_in + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f32>, cin: usize, n: usize, h: usize, w: usize, stride: usize) -> Array2<f32> {
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let mut x = Array2::<f32>::zeros((cin, n * h * w));
    let src = cols.as_slice().expect("standard layout");
    let dst = x.as_slice_mut().expect("standard layout");
    let plane = n * h * w;
    let ncols = n * ho * wo;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * ncols;
                for s in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base_in = c * plane + s * h * w + iy as usize * w;
                        let base_out = row + (s * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[base_in + ix as usize] += src[base_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn matrix_view<'a>(t: &'a ArrayD<f32>, rows: usize, cols: usize) -> ArrayView2<'a, f32> {
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous parameter")
}

impl Backbone {
    /// Deterministic He-normal initialization from `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let convs = config.conv_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in &convs {
            let fan_in = (spec.cin * 9) as f32;
            let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
            let w = ArrayD::from_shape_simple_fn(IxDyn(&[spec.cout, spec.cin, 3, 3]), || normal.sample(&mut rng));
            params.insert(format!("{}.weight", spec.name), w);
            params.insert(format!("{}.bias", spec.name), ArrayD::zeros(IxDyn(&[spec.cout])));
        }
        let c = config.feature_channels();
        let normal = Normal::new(0.0f32, (1.0 / c as f32).sqrt()).expect("valid std");
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[config.embed_dim, c]), || normal.sample(&mut rng));
        params.insert("head.weight", w);
        let bias_normal = Normal::new(0.0f32, 0.01).expect("valid std");
        let b = ArrayD::from_shape_simple_fn(IxDyn(&[config.embed_dim]), || bias_normal.sample(&mut rng));
        params.insert("head.bias", b);
        Ok(Backbone { config, params, convs })
    }

    /// Rebuilds a backbone around stored parameters, checking their layout.
    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        let template = Backbone::new(config.clone(), 0)?;
        template.params.check_compatible(&params)?;
        Ok(Backbone {
            convs: template.convs,
            config,
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Channel-major chunk input `(3, n*h*w)`.
    fn stack_chunk(images: &[Array3<f32>]) -> Result<(Array2<f32>, usize, usize)> {
        let (c, h, w) = images[0].dim();
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let n = images.len();
        let mut x = Array2::<f32>::zeros((3, n * h * w));
        for (s, img) in images.iter().enumerate() {
            if img.dim() != (c, h, w) {
                return Err(Error::Dimension(format!(
                    "image {s} has shape {:?}, expected {:?}",
                    img.dim(),
                    (c, h, w)
                )));
            }
            for ch in 0..3 {
                let plane = img.index_axis(Axis(0), ch);
                let mut dst = x.slice_mut(ndarray::s![ch, s * h * w..(s + 1) * h * w]);
                for (d, v) in dst.iter_mut().zip(plane.iter()) {
                    *d = *v;
                }
            }
        }
        Ok((x, h, w))
    }

    fn forward_chunk(&self, images: &[Array3<f32>], keep: bool) -> Result<(Array2<f32>, Option<ChunkCache>)> {
        let n = images.len();
        let (mut x, mut h, mut w) = Self::stack_chunk(images)?;
        let mut cache = ChunkCache {
            n,
            cols: Vec::new(),
            in_hw: Vec::new(),
            outputs: Vec::new(),
            pooled: Array2::zeros((0, 0)),
        };
        for (i, spec) in self.convs.iter().enumerate() {
            let cols = im2col(&x, n, h, w, spec.stride);
            let weight = matrix_view(self.params.tensor(2 * i), spec.cout, spec.cin * 9);
            let bias = self.params.tensor(2 * i + 1);
            let mut out = weight.dot(&cols);
            for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                row.mapv_inplace(|v| (v + b).max(0.0));
            }
            if keep {
                cache.cols.push(cols);
                cache.in_hw.push((h, w));
            }
            h = out_size(h, spec.stride);
            w = out_size(w, spec.stride);
            x = out;
            if keep {
                cache.outputs.push(x.clone());
            }
        }
        let c = x.nrows();
        let hw = h * w;
        let pooled = Array2::from_shape_fn((c, n), |(ch, s)| {
            x.slice(ndarray::s![ch, s * hw..(s + 1) * hw]).sum() / hw as f32
        });
        let k = self.params.len();
        let head_w = matrix_view(self.params.tensor(k - 2), self.config.embed_dim, c);
        let head_b = self.params.tensor(k - 1);
        let mut feats = head_w.dot(&pooled);
        for (mut row, &b) in feats.axis_iter_mut(Axis(0)).zip(head_b.iter()) {
            row += b;
        }
        if keep {
            cache.pooled = pooled;
        }
        Ok((feats.reversed_axes(), keep.then_some(cache)))
    }

    fn check_batch(&self, images: &[Array3<f32>]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        if images.iter().any(|img| img.iter().any(|v| !v.is_finite())) {
            return Err(Error::Dimension("batch contains non-finite values".into()));
        }
        Ok(())
    }

    /// Raw (unnormalized) features, `(B, d)`.
    pub fn forward(&self, images: &[Array3<f32>]) -> Result<Array2<f64>> {
        self.check_batch(images)?;
        let parts: Vec<Array2<f32>> = images
            .par_chunks(CHUNK)
            .map(|chunk| self.forward_chunk(chunk, false).map(|(f, _)| f))
            .collect::<Result<_>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views)
            .expect("consistent feature width")
            .mapv(f64::from))
    }

    /// Forward pass keeping activations; embeddings are L2-normalized.
    pub fn forward_train(&self, images: &[Array3<f32>]) -> Result<ForwardPass> {
        self.check_batch(images)?;
        let parts: Vec<(Array2<f32>, Option<ChunkCache>)> = images
            .par_chunks(CHUNK)
            .map(|chunk| self.forward_chunk(chunk, true))
            .collect::<Result<_>>()?;
        let views: Vec<_> = parts.iter().map(|(f, _)| f.view()).collect();
        let mut embeddings = ndarray::concatenate(Axis(0), &views)
            .expect("consistent feature width")
            .mapv(f64::from);
        let raw_norms = l2_normalize_rows(&mut embeddings)?;
        let chunks = parts.into_iter().map(|(_, c)| c.expect("cache kept")).collect();
        Ok(ForwardPass {
            embeddings,
            raw_norms,
            chunks,
        })
    }

    fn backward_chunk(&self, cache: &ChunkCache, grad_feats: Array2<f32>) -> ParamStore {
        // grad_feats: (d, n)
        let mut grads = self.params.zeros_like();
        let k = self.params.len();
        let c = cache.pooled.nrows();
        let n = cache.n;
        grads
            .tensor_mut(k - 2)
            .assign(&grad_feats.dot(&cache.pooled.t()).into_dyn());
        grads.tensor_mut(k - 1).assign(&grad_feats.sum_axis(Axis(1)).into_dyn());
        let head_w = matrix_view(self.params.tensor(k - 2), self.config.embed_dim, c);
        let grad_pooled = head_w.t().dot(&grad_feats);

        let last = cache.outputs.last().expect("at least one conv");
        let hw = last.ncols() / n;
        let mut grad = Array2::from_shape_fn(last.raw_dim(), |(ch, col)| grad_pooled[[ch, col / hw]] / hw as f32);

        for (i, spec) in self.convs.iter().enumerate().rev() {
            let out = &cache.outputs[i];
            ndarray::Zip::from(&mut grad).and(out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            let gw = grad.dot(&cache.cols[i].t());
            grads
                .tensor_mut(2 * i)
                .assign(&gw.into_shape_with_order((spec.cout, spec.cin, 3, 3)).expect("shape").into_dyn());
            grads.tensor_mut(2 * i + 1).assign(&grad.sum_axis(Axis(1)).into_dyn());
            if i > 0 {
                let weight = matrix_view(self.params.tensor(2 * i), spec.cout, spec.cin * 9);
                let grad_cols = weight.t().dot(&grad);
                let (h, w) = cache.in_hw[i];
                grad = col2im(&grad_cols, spec.cin, n, h, w, spec.stride);
            }
        }
        grads
    }

    /// Parameter gradients given `dL/d(embedding)` for the normalized
    /// embeddings of `pass`.
    pub fn backward(&self, pass: &ForwardPass, grad_embeddings: &Array2<f64>) -> ParamStore {
        let e = &pass.embeddings;
        // through the L2 normalization: (g - e (e·g)) / |f|
        let mut grad_raw = grad_embeddings.clone();
        for ((mut g, row), &norm) in grad_raw.axis_iter_mut(Axis(0)).zip(e.axis_iter(Axis(0))).zip(&pass.raw_norms) {
            let dot = g.dot(&row);
            g.zip_mut_with(&row, |gi, &ei| *gi = (*gi - ei * dot) / norm);
        }
        let mut offsets = Vec::with_capacity(pass.chunks.len());
        let mut start = 0;
        for c in &pass.chunks {
            offsets.push(start);
            start += c.n;
        }
        let parts: Vec<ParamStore> = pass
            .chunks
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(cache, &off)| {
                let g = grad_raw
                    .slice(ndarray::s![off..off + cache.n, ..])
                    .t()
                    .mapv(|v| v as f32);
                self.backward_chunk(cache, g)
            })
            .collect();
        let mut total = self.params.zeros_like();
        for p in &parts {
            total.add_scaled(1.0, p);
        }
        total
    }
}

/// Embeds a batch; with `normalize` every row has unit L2 norm.
pub fn embed(backbone: &Backbone, images: &[Array3<f32>], normalize: bool) -> Result<EmbeddingMatrix> {
    let mut vectors = backbone.forward(images)?;
    if normalize {
        l2_normalize_rows(&mut vectors)?;
    }
    Ok(EmbeddingMatrix {
        vectors,
        normalized: normalize,
        identities: Vec::new(),
        modalities: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierRole {
    Source,
    Target,
    Joint,
}

impl fmt::Display for ClassifierRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierRole::Source => "source",
            ClassifierRole::Target => "target",
            ClassifierRole::Joint => "joint",
        })
    }
}

impl std::str::FromStr for ClassifierRole {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(ClassifierRole::Source),
            "target" => Ok(ClassifierRole::Target),
            "joint" => Ok(ClassifierRole::Joint),
            other => Err(format!("unknown classifier role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub phase: Phase,
    pub epoch: usize,
    /// Snapshot of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub config_hash: Option<String>,
    /// Identity order of every classifier block, keyed by role.
    pub identity_maps: BTreeMap<ClassifierRole, Vec<String>>,
    pub frozen: BTreeMap<ClassifierRole, bool>,
    pub joint_map: Option<JointLabelMap>,
    /// SHA-256 of `weights.bin`.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub classifiers: BTreeMap<ClassifierRole, ClassifierWeights>,
    pub phase: Phase,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub config_hash: Option<String>,
    pub joint_map: Option<JointLabelMap>,
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CLASSIFIERS_FILE: &str = "classifiers.bin";
pub const META_FILE: &str = "meta.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn classifiers_to_bytes(classifiers: &BTreeMap<ClassifierRole, ClassifierWeights>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CLASSIFIERS_MAGIC);
    out.extend_from_slice(&(classifiers.len() as u32).to_le_bytes());
    for (role, c) in classifiers {
        let role = role.to_string();
        out.extend_from_slice(&(role.len() as u32).to_le_bytes());
        out.extend_from_slice(role.as_bytes());
        let (d, n) = c.matrix.dim();
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for v in c.matrix.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn classifiers_from_bytes(bytes: &[u8]) -> std::result::Result<Vec<(ClassifierRole, Array2<f64>)>, String> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CLASSIFIERS_MAGIC {
        return Err("bad magic".into());
    }
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let role: ClassifierRole = std::str::from_utf8(r.take(len)?)
            .map_err(|e| e.to_string())?
            .parse()?;
        let d = r.u32()? as usize;
        let n = r.u32()? as usize;
        let values: Vec<f64> = r
            .take(d * n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((role, Array2::from_shape_vec((d, n), values).map_err(|e| e.to_string())?));
    }
    if !r.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(backbone: Backbone, phase: Phase) -> Self {
        Checkpoint {
            backbone,
            classifiers: BTreeMap::new(),
            phase,
            epoch: 0,
            config: serde_json::Value::Null,
            config_hash: None,
            joint_map: None,
        }
    }

    pub fn classifier(&self, role: ClassifierRole) -> Option<&ClassifierWeights> {
        self.classifiers.get(&role)
    }

    /// Every classifier block must match the backbone dimension.
    pub fn validate(&self) -> Result<()> {
        let d = self.backbone.embed_dim();
        for (role, c) in &self.classifiers {
            if c.matrix.nrows() != d {
                return Err(Error::Dimension(format!(
                    "{role} classifier has dimension {} but backbone embeds into {d}",
                    c.matrix.nrows()
                )));
            }
            if c.identity_map.len() != c.matrix.ncols() {
                return Err(Error::Dimension(format!(
                    "{role} classifier has {} columns but {} identities",
                    c.matrix.ncols(),
                    c.identity_map.len()
                )));
            }
        }
        Ok(())
    }

    pub fn ensure_compatible(&self, config: &BackboneConfig) -> Result<()> {
        if self.backbone.config().embed_dim != config.embed_dim {
            return Err(Error::Dimension(format!(
                "checkpoint embed_dim {} vs configured {}",
                self.backbone.config().embed_dim,
                config.embed_dim
            )));
        }
        Ok(())
    }

    pub fn meta(&self) -> CheckpointMeta {
        let weights = self.backbone.params().to_bytes();
        CheckpointMeta {
            backbone: self.backbone.config().clone(),
            phase: self.phase,
            epoch: self.epoch,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            identity_maps: self
                .classifiers
                .iter()
                .map(|(r, c)| (*r, c.identity_map.iter().map(str::to_string).collect()))
                .collect(),
            frozen: self.classifiers.iter().map(|(r, c)| (*r, c.frozen)).collect(),
            joint_map: self.joint_map.clone(),
            checksum: sha256_hex(&weights),
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ckpt.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights = ckpt.backbone.params().to_bytes();
    write_atomic(&dir.join(WEIGHTS_FILE), &weights)?;
    let classifiers_path = dir.join(CLASSIFIERS_FILE);
    if ckpt.classifiers.is_empty() {
        if classifiers_path.exists() {
            std::fs::remove_file(&classifiers_path).map_err(|e| Error::io(&classifiers_path, e))?;
        }
    } else {
        write_atomic(&classifiers_path, &classifiers_to_bytes(&ckpt.classifiers))?;
    }
    let meta = serde_json::to_vec_pretty(&ckpt.meta())?;
    write_atomic(&dir.join(META_FILE), &meta)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let read = |name: &str| -> Result<(PathBuf, Vec<u8>)> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, bytes))
    };
    let (meta_path, meta_bytes) = read(META_FILE)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Checkpoint {
        file: meta_path.clone(),
        message: e.to_string(),
    })?;
    let (weights_path, weights) = read(WEIGHTS_FILE)?;
    let actual = sha256_hex(&weights);
    if actual != meta.checksum {
        return Err(Error::Checkpoint {
            file: weights_path,
            message: format!("checksum mismatch: meta says {}, file hashes to {actual}", meta.checksum),
        });
    }
    let params = ParamStore::from_bytes(&weights).map_err(|message| Error::Checkpoint {
        file: weights_path.clone(),
        message,
    })?;
    let backbone = Backbone::from_params(meta.backbone.clone(), params)?;

    let mut classifiers = BTreeMap::new();
    if !meta.identity_maps.is_empty() {
        let (path, bytes) = read(CLASSIFIERS_FILE)?;
        let blocks = classifiers_from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            file: path.clone(),
            message,
        })?;
        for (role, matrix) in blocks {
            let ids = meta.identity_maps.get(&role).ok_or_else(|| Error::Checkpoint {
                file: meta_path.clone(),
                message: format!("no identity map for {role} classifier"),
            })?;
            let frozen = meta.frozen.get(&role).copied().unwrap_or(false);
            classifiers.insert(role, ClassifierWeights::from_parts(matrix, ids.iter().map(String::as_str), frozen)?);
        }
    }
    let ckpt = Checkpoint {
        backbone,
        classifiers,
        phase: meta.phase,
        epoch: meta.epoch,
        config: meta.config,
        config_hash: meta.config_hash,
        joint_map: meta.joint_map,
    };
    ckpt.validate()?;
    Ok(ckpt)
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            embed_dim: 8,
            width: 4,
            depth: 1,
            blocks: 2,
            input_size: 8,
        }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<Array3<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Array3::from_shape_fn((3, size, size), |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Backbone::new(tiny(), 7).unwrap();
        let b = Backbone::new(tiny(), 7).unwrap();
        assert_eq!(a.params().to_bytes(), b.params().to_bytes());
        let c = Backbone::new(tiny(), 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn output_shape_and_normalization() {
        let net = Backbone::new(tiny(), 1).unwrap();
        let zeros = vec![Array3::zeros((3, 8, 8)); 5];
        let out = embed(&net, &zeros, false).unwrap();
        assert_eq!(out.vectors.dim(), (5, 8));
        let imgs = random_images(11, 8, 2);
        let out = embed(&net, &imgs, true).unwrap();
        for row in out.vectors.axis_iter(Axis(0)) {
            assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn duplicate_rows_and_batch_splitting() {
        let net = Backbone::new(tiny(), 3).unwrap();
        let mut imgs = random_images(13, 8, 4);
        imgs.push(imgs[2].clone());
        let full = embed(&net, &imgs, true).unwrap().vectors;
        assert_eq!(full.row(2), full.row(13));
        let first = embed(&net, &imgs[..5], true).unwrap().vectors;
        let second = embed(&net, &imgs[5..], true).unwrap().vectors;
        let joined = ndarray::concatenate(Axis(0), &[first.view(), second.view()]).unwrap();
        assert_eq!(full, joined);
    }

    #[test]
    fn wider_backbones_have_more_parameters() {
        let mut cfg = tiny();
        let mut last = Backbone::new(cfg.clone(), 0).unwrap().num_parameters();
        for _ in 0..3 {
            cfg.width *= 2;
            let count = Backbone::new(cfg.clone(), 0).unwrap().num_parameters();
            assert!(count > last);
            last = count;
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = BackboneConfig {
            embed_dim: 1,
            ..tiny()
        };
        assert!(Backbone::new(cfg, 0).is_err());
        let cfg = BackboneConfig {
            input_size: 2,
            ..tiny()
        };
        assert!(Backbone::new(cfg, 0).is_err());
    }

    /// Scalar objective L = Σ_ij c_ij e_ij on normalized embeddings.
    fn objective(net: &Backbone, imgs: &[Array3<f32>], coef: &Array2<f64>) -> f64 {
        let e = embed(net, imgs, true).unwrap().vectors;
        (&e * coef).sum()
    }

    fn relu_pattern(net: &Backbone, imgs: &[Array3<f32>]) -> Vec<bool> {
        let pass = net.forward_train(imgs).unwrap();
        pass.chunks
            .iter()
            .flat_map(|c| c.outputs.iter().flat_map(|o| o.iter().map(|&v| v > 0.0)))
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = Backbone::new(tiny(), 5).unwrap();
        let imgs = random_images(10, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coef = Array2::from_shape_fn((10, 8), |_| rng.random_range(-1.0..1.0));
        let pass = net.forward_train(&imgs).unwrap();
        let grads = net.backward(&pass, &coef);
        assert!(grads.all_finite());
        let base_pattern = relu_pattern(&net, &imgs);

        // Central differences are only valid where no ReLU flips inside [-eps, eps].
        let eps = 1e-3f32;
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for p in 0..net.params().len() {
            let len = net.params().tensor(p).len();
            for idx in [0, len / 3, len / 2, len - 1] {
                let orig = net.params().tensor(p).as_slice().unwrap()[idx];
                net.params_mut().tensor_mut(p).as_slice_mut().unwrap()[idx] = orig + eps;
                let plus = objective(&net, &imgs, &coef);
                let smooth_plus = relu_pattern(&net, &imgs) == base_pattern;
                net.params_mut().tensor_mut(p).as_slice_mut().unwrap()[idx] = orig - eps;
                let minus = objective(&net, &imgs, &coef);
                let smooth_minus = relu_pattern(&net, &imgs) == base_pattern;
                net.params_mut().tensor_mut(p).as_slice_mut().unwrap()[idx] = orig;
                if !(smooth_plus && smooth_minus) {
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * eps as f64);
                let analytic = grads.tensor(p).as_slice().unwrap()[idx] as f64;
                let err = (numeric - analytic).abs() / (numeric.abs().max(analytic.abs()).max(1e-2));
                worst = worst.max(err);
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} smooth coordinates");
        assert!(worst < 1e-2, "worst relative error {worst}");
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let net = Backbone::new(tiny(), 9).unwrap();
        let imgs = random_images(4, 8, 10);
        let pass = net.forward_train(&imgs).unwrap();
        let g = Array2::from_elem((4, 8), 0.3);
        let grads = net.backward(&pass, &g);
        for (name, t) in grads.iter() {
            assert!(t.iter().all(|v| v.is_finite()), "{name}");
        }
        assert!(grads.iter().any(|(_, t)| t.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn param_store_bytes_round_trip() {
        let net = Backbone::new(tiny(), 12).unwrap();
        let bytes = net.params().to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(&back, net.params());
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
