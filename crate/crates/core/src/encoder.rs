//! Desk-scale token encoder.
//!
//! Each token is represented by the concatenation of the embeddings of the
//! surfaces in a `±window` neighbourhood (zero-padded at sentence edges),
//! passed through a two-layer tanh MLP to give `h`, then through a one-hidden-
//! layer projection and L2 normalization to give `z`.
//!
//! Embedding rows are keyed by a 64-bit FNV-1a hash of the surface. Rows that
//! were never materialized are generated on demand from the init seed and the
//! hash, so a surface's initial embedding does not depend on which other
//! surfaces exist.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lexicon, Sentence};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;
const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub window: usize,
    pub hidden_dim: usize,
    /// Dimension of `h`.
    pub rep_dim: usize,
    pub proj_hidden_dim: usize,
    /// Dimension of `z`.
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            window: 1,
            hidden_dim: 64,
            rep_dim: 64,
            proj_hidden_dim: 32,
            proj_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.embedding_dim * (2 * self.window + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.proj_hidden_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.rep_dim < 2 || self.proj_dim < 2 {
            return Err(Error::Config("rep_dim and proj_dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// Fully connected layer, weights row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn uniform(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut d = Self::zeros(in_dim, out_dim);
        d.weights
            .iter_mut()
            .chain(d.bias.iter_mut())
            .for_each(|w| *w = rng.random_range(-INIT_RANGE..INIT_RANGE));
        d
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grad` and returns `Wᵀ dy`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// 64-bit FNV-1a.
pub fn surface_key(surface: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in surface.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub init_seed: u64,
    pub embeddings: BTreeMap<u64, Vec<f64>>,
    pub hidden: Dense,
    pub output: Dense,
    pub proj_hidden: Dense,
    pub proj_out: Dense,
}

impl EncoderParams {
    /// Seeded uniform initialization; lexicon vectors, when given, become the
    /// initial embedding rows of their surfaces.
    pub fn new(config: EncoderConfig, init_seed: u64, lexicon: Option<&Lexicon>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let hidden = Dense::uniform(config.input_dim(), config.hidden_dim, &mut rng);
        let output = Dense::uniform(config.hidden_dim, config.rep_dim, &mut rng);
        let proj_hidden = Dense::uniform(config.rep_dim, config.proj_hidden_dim, &mut rng);
        let proj_out = Dense::uniform(config.proj_hidden_dim, config.proj_dim, &mut rng);
        let mut embeddings = BTreeMap::new();
        if let Some(lex) = lexicon {
            if lex.dim != config.embedding_dim {
                return Err(Error::Config(format!(
                    "lexicon dimension {} does not match embedding_dim {}",
                    lex.dim, config.embedding_dim
                )));
            }
            for (surface, v) in &lex.vectors {
                embeddings.insert(surface_key(surface), v.clone());
            }
        }
        Ok(Self {
            config,
            init_seed,
            embeddings,
            hidden,
            output,
            proj_hidden,
            proj_out,
        })
    }

    fn fallback_row(&self, key: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed ^ key.rotate_left(23));
        (0..self.config.embedding_dim)
            .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
            .collect()
    }

    pub fn embedding(&self, surface: &str) -> Cow<'_, [f64]> {
        let key = surface_key(surface);
        match self.embeddings.get(&key) {
            Some(v) => Cow::Borrowed(v),
            None => Cow::Owned(self.fallback_row(key)),
        }
    }

    /// Materializes embedding rows for every surface so they can be trained.
    pub fn register_surfaces<'a>(&mut self, surfaces: impl IntoIterator<Item = &'a str>) {
        for s in surfaces {
            let key = surface_key(s);
            if !self.embeddings.contains_key(&key) {
                let row = self.fallback_row(key);
                self.embeddings.insert(key, row);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.flatten().len()
    }

    /// All scalars in a fixed order: embeddings by key, then the four layers.
    pub fn flatten(&self) -> Vec<f64> {
        self.embeddings
            .values()
            .flat_map(|v| v.iter())
            .chain(self.hidden.values())
            .chain(self.output.values())
            .chain(self.proj_hidden.values())
            .chain(self.proj_out.values())
            .copied()
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.parameter_count();
        if flat.len() != n {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} entries, expected {n}",
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for v in self
            .embeddings
            .values_mut()
            .flat_map(|v| v.iter_mut())
            .chain(self.hidden.values_mut())
            .chain(self.output.values_mut())
            .chain(self.proj_hidden.values_mut())
            .chain(self.proj_out.values_mut())
        {
            *v = *it.next().expect("length checked");
        }
        Ok(())
    }

    /// Human-readable name of each flattened scalar.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.parameter_count());
        for (key, row) in &self.embeddings {
            names.extend((0..row.len()).map(|i| format!("embedding[{key:016x}][{i}]")));
        }
        for (label, layer) in self.layers() {
            names.extend((0..layer.weights.len()).map(|i| format!("{label}.weights[{i}]")));
            names.extend((0..layer.bias.len()).map(|i| format!("{label}.bias[{i}]")));
        }
        names
    }

    fn layers(&self) -> [(&'static str, &Dense); 4] {
        [
            ("hidden", &self.hidden),
            ("output", &self.output),
            ("proj_hidden", &self.proj_hidden),
            ("proj_out", &self.proj_out),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Frozen parameters of the model at the end of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSnapshot {
    params: Arc<EncoderParams>,
    step: usize,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format_version: u32,
    step: usize,
    params: EncoderParams,
}

impl EncoderSnapshot {
    pub fn new(params: &EncoderParams, step: usize) -> Self {
        Self {
            params: Arc::new(params.clone()),
            step,
        }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SnapshotFile {
            format_version: SNAPSHOT_FORMAT_VERSION,
            step: self.step,
            params: (*self.params).clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SnapshotFile = serde_json::from_str(text)?;
        if file.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported snapshot format version {}",
                file.format_version
            )));
        }
        Ok(Self {
            params: Arc::new(file.params),
            step: file.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Encoder output for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRep {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub sentence_id: String,
    pub position: usize,
    pub label: String,
}

/// Cached activations of one token, needed for backprop.
#[derive(Debug, Clone)]
pub struct TokenTrace {
    keys: Vec<Option<u64>>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    pub h: Vec<f64>,
    proj_hidden: Vec<f64>,
    raw_norm: f64,
    pub z: Vec<f64>,
}

/// Forward pass over one sentence, keeping activations.
pub fn forward_sentence(params: &EncoderParams, sentence: &Sentence) -> Vec<TokenTrace> {
    let cfg = &params.config;
    let rows: Vec<Cow<'_, [f64]>> = sentence
        .tokens
        .iter()
        .map(|t| params.embedding(&t.surface))
        .collect();
    let keys: Vec<u64> = sentence.tokens.iter().map(|t| surface_key(&t.surface)).collect();
    let n = sentence.len() as isize;
    let w = cfg.window as isize;
    (0..n)
        .map(|pos| {
            let mut input = Vec::with_capacity(cfg.input_dim());
            let mut window_keys = Vec::with_capacity(2 * cfg.window + 1);
            for off in -w..=w {
                let j = pos + off;
                if (0..n).contains(&j) {
                    input.extend_from_slice(&rows[j as usize]);
                    window_keys.push(Some(keys[j as usize]));
                } else {
                    input.extend(std::iter::repeat_n(0.0, cfg.embedding_dim));
                    window_keys.push(None);
                }
            }
            let hidden: Vec<f64> = params.hidden.forward(&input).into_iter().map(f64::tanh).collect();
            let h = params.output.forward(&hidden);
            let proj_hidden: Vec<f64> = params
                .proj_hidden
                .forward(&h)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let raw = params.proj_out.forward(&proj_hidden);
            let raw_norm = norm(&raw).max(f64::MIN_POSITIVE);
            let z = raw.iter().map(|x| x / raw_norm).collect();
            TokenTrace {
                keys: window_keys,
                input,
                hidden,
                h,
                proj_hidden,
                raw_norm,
                z,
            }
        })
        .collect()
}

pub fn encode(params: &EncoderParams, sentence: &Sentence) -> Vec<TokenRep> {
    forward_sentence(params, sentence)
        .into_iter()
        .zip(&sentence.tokens)
        .enumerate()
        .map(|(position, (trace, token))| TokenRep {
            h: trace.h,
            z: trace.z,
            sentence_id: sentence.id.clone(),
            position,
            label: token.label.clone(),
        })
        .collect()
}

/// Only the `h` representation of one token.
pub fn encode_h(params: &EncoderParams, sentence: &Sentence, position: usize) -> Result<Vec<f64>> {
    if position >= sentence.len() {
        return Err(Error::Contract(format!(
            "position {position} outside sentence `{}` of length {}",
            sentence.id,
            sentence.len()
        )));
    }
    Ok(forward_sentence(params, sentence).swap_remove(position).h)
}

/// Parameter gradients, shaped like [`EncoderParams`]; embedding rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embeddings: BTreeMap<u64, Vec<f64>>,
    pub hidden: Dense,
    pub output: Dense,
    pub proj_hidden: Dense,
    pub proj_out: Dense,
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let z = |d: &Dense| Dense::zeros(d.in_dim, d.out_dim);
        Self {
            embeddings: BTreeMap::new(),
            hidden: z(&params.hidden),
            output: z(&params.output),
            proj_hidden: z(&params.proj_hidden),
            proj_out: z(&params.proj_out),
        }
    }

    /// Gradient entries aligned with [`EncoderParams::flatten`].
    pub fn flatten_like(&self, params: &EncoderParams) -> Vec<f64> {
        let dim = params.config.embedding_dim;
        let mut out = Vec::with_capacity(params.parameter_count());
        for key in params.embeddings.keys() {
            match self.embeddings.get(key) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        for layer in [&self.hidden, &self.output, &self.proj_hidden, &self.proj_out] {
            out.extend(layer.values());
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.embeddings
            .values_mut()
            .flat_map(|v| v.iter_mut())
            .chain(self.hidden.values_mut())
            .chain(self.output.values_mut())
            .chain(self.proj_hidden.values_mut())
            .chain(self.proj_out.values_mut())
            .for_each(|g| *g *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.embeddings.values().flatten().all(|g| *g == 0.0)
            && [&self.hidden, &self.output, &self.proj_hidden, &self.proj_out]
                .iter()
                .all(|d| d.values().all(|g| *g == 0.0))
    }
}

/// Upstream loss gradients for one token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpstreamGrad {
    /// ∂L/∂z, or empty when the loss does not touch z.
    pub dz: Vec<f64>,
    /// ∂L/∂h, or empty when the loss does not touch h.
    pub dh: Vec<f64>,
}

/// Exact gradients of `Σ_tokens (⟨dz, z⟩ + ⟨dh, h⟩)` with respect to every
/// parameter, including the normalization Jacobian of `z`. Contributions are
/// summed over tokens.
pub fn backprop(
    params: &EncoderParams,
    traces: &[TokenTrace],
    upstream: &[UpstreamGrad],
) -> Result<Gradients> {
    if traces.len() != upstream.len() {
        return Err(Error::Contract(format!(
            "{} token traces but {} upstream gradients",
            traces.len(),
            upstream.len()
        )));
    }
    let cfg = &params.config;
    let mut grads = Gradients::zeros_like(params);
    for (trace, up) in traces.iter().zip(upstream) {
        if !(up.dz.is_empty() || up.dz.len() == cfg.proj_dim) {
            return Err(Error::Contract(format!(
                "dz has {} entries, expected {}",
                up.dz.len(),
                cfg.proj_dim
            )));
        }
        if !(up.dh.is_empty() || up.dh.len() == cfg.rep_dim) {
            return Err(Error::Contract(format!(
                "dh has {} entries, expected {}",
                up.dh.len(),
                cfg.rep_dim
            )));
        }

        let mut dh = if up.dh.is_empty() {
            vec![0.0; cfg.rep_dim]
        } else {
            up.dh.clone()
        };
        if !up.dz.is_empty() {
            // z = r/‖r‖  ⇒  ∂L/∂r = (dz − z⟨z, dz⟩)/‖r‖
            let zd = dot(&trace.z, &up.dz);
            let draw: Vec<f64> = up
                .dz
                .iter()
                .zip(&trace.z)
                .map(|(g, z)| (g - z * zd) / trace.raw_norm)
                .collect();
            let du = params
                .proj_out
                .backward(&trace.proj_hidden, &draw, &mut grads.proj_out);
            let da: Vec<f64> = du
                .iter()
                .zip(&trace.proj_hidden)
                .map(|(g, u)| g * (1.0 - u * u))
                .collect();
            let dh_proj = params.proj_hidden.backward(&trace.h, &da, &mut grads.proj_hidden);
            for (a, b) in dh.iter_mut().zip(dh_proj) {
                *a += b;
            }
        }
        if dh.iter().all(|g| *g == 0.0) {
            continue;
        }
        let du = params.output.backward(&trace.hidden, &dh, &mut grads.output);
        let da: Vec<f64> = du
            .iter()
            .zip(&trace.hidden)
            .map(|(g, u)| g * (1.0 - u * u))
            .collect();
        let dx = params.hidden.backward(&trace.input, &da, &mut grads.hidden);
        for (slot, key) in trace.keys.iter().enumerate() {
            let Some(key) = key else { continue };
            let chunk = &dx[slot * cfg.embedding_dim..(slot + 1) * cfg.embedding_dim];
            let row = grads
                .embeddings
                .entry(*key)
                .or_insert_with(|| vec![0.0; cfg.embedding_dim]);
            for (r, g) in row.iter_mut().zip(chunk) {
                *r += g;
            }
        }
    }
    Ok(grads)
}

/// `params ← params − lr·grads`. Embedding gradients for rows that were never
/// materialized start from the row's on-demand initial value.
pub fn sgd_step(params: &mut EncoderParams, grads: &Gradients, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::Config(format!("learning rate must be > 0, got {learning_rate}")));
    }
    for (key, row) in &grads.embeddings {
        if let Some(i) = row.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at embedding[{key:016x}][{i}]"
            )));
        }
    }
    let layer_grads = [
        ("hidden", &grads.hidden),
        ("output", &grads.output),
        ("proj_hidden", &grads.proj_hidden),
        ("proj_out", &grads.proj_out),
    ];
    for (label, d) in layer_grads {
        if let Some(i) = d.weights.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient at {label}.weights[{i}]")));
        }
        if let Some(i) = d.bias.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient at {label}.bias[{i}]")));
        }
    }

    for (key, g) in &grads.embeddings {
        if !params.embeddings.contains_key(key) {
            let row = params.fallback_row(*key);
            params.embeddings.insert(*key, row);
        }
        let row = params.embeddings.get_mut(key).expect("inserted above");
        for (p, d) in row.iter_mut().zip(g) {
            *p -= learning_rate * d;
        }
    }
    let pairs = [
        (&mut params.hidden, &grads.hidden),
        (&mut params.output, &grads.output),
        (&mut params.proj_hidden, &grads.proj_hidden),
        (&mut params.proj_out, &grads.proj_out),
    ];
    for (p, g) in pairs {
        for (w, d) in p.values_mut().zip(g.values()) {
            *w -= learning_rate * d;
        }
    }
    Ok(())
}
