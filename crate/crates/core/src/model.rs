//! Joint source-target self-attention network.
//!
//! A single stack of pre-norm self-attention blocks runs over the
//! concatenated `source ++ target` sequence. Each layer gets its own band
//! mask from [`crate::masking`], so the receptive field can grow with depth.
//! Inputs are token embeddings scaled by `√d`, fixed sinusoidal positions
//! (restarting at zero in each block) and learned language embeddings.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::JointBatch;
use crate::masking::{BandMaskSet, BoundaryPolicy, MaskCache, MaskError, Window};
use crate::tensor::{Mask, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("position {position} exceeds the positional table ({max} entries); raise max_positions")]
    PositionOverflow { position: usize, max: usize },
    #[error("masks do not fit batch: {0}")]
    MaskMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub windows: Vec<Window>,
    pub dropout: f64,
    pub max_positions: usize,
    pub tie_embeddings: bool,
    pub boundary_policy: BoundaryPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    ToyMini,
    Iwslt,
    WmtBig,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Toy, Preset::ToyMini, Preset::Iwslt, Preset::WmtBig];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::ToyMini => "toy-mini",
            Preset::Iwslt => "iwslt",
            Preset::WmtBig => "wmt-big",
        }
    }

    /// Vocabulary size used when no corpus dictates one.
    pub fn default_vocab_size(self) -> usize {
        match self {
            Preset::Toy => 14,
            Preset::ToyMini => 13,
            Preset::Iwslt => 31_000,
            Preset::WmtBig => 32_000,
        }
    }

    pub fn config(self, vocab_size: usize) -> ModelConfig {
        let w = |ws: &[usize]| ws.iter().map(|&x| Window::Finite(x)).collect::<Vec<_>>();
        let (n_layers, d_model, d_ff, n_heads, windows, max_positions) = match self {
            Preset::Toy => (4, 64, 256, 4, w(&[3, 5, 7, 9]), 256),
            Preset::ToyMini => (2, 8, 16, 2, w(&[3, 5]), 64),
            Preset::Iwslt => (
                14,
                256,
                1024,
                4,
                w(&[3, 5, 7, 9, 11, 13, 15, 17, 21, 25, 29, 33, 37, 41]),
                1024,
            ),
            Preset::WmtBig => {
                let mut ws = vec![7, 15, 31];
                ws.extend([63; 11]);
                (14, 1024, 4096, 16, w(&ws), 1024)
            }
        };
        ModelConfig {
            n_layers,
            d_model,
            d_ff,
            n_heads,
            vocab_size,
            windows,
            dropout: 0.1,
            max_positions,
            tie_embeddings: true,
            boundary_policy: BoundaryPolicy::Cross,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown preset {s:?}")))
    }
}

impl ModelConfig {
    /// Checks hard constraints and returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return err("layer count, widths and head count must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.windows.len() != self.n_layers {
            return err(format!(
                "window list has {} entries but the model has {} layers",
                self.windows.len(),
                self.n_layers
            ));
        }
        for w in &self.windows {
            w.validate()?;
        }
        if self.vocab_size < 5 {
            return err(format!("vocab_size must be at least 5, got {}", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_positions == 0 {
            return err("max_positions must be positive".into());
        }
        let mut warnings = Vec::new();
        if self.windows.windows(2).any(|p| p[1] < p[0]) {
            warnings.push(format!(
                "window schedule {} is not nondecreasing",
                self.windows.iter().map(Window::to_string).collect::<Vec<_>>().join(",")
            ));
        }
        Ok(warnings)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, d, ff, l) = (self.vocab_size, self.d_model, self.d_ff, self.n_layers);
        let per_layer = 4 * (d * d + d) + 2 * d * ff + ff + d + 4 * d;
        let untied = if self.tie_embeddings { 0 } else { v * d };
        v * d + 2 * d + l * per_layer + 2 * d + untied
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `[in, out]`; applied as `x · weight + bias`.
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub attn_norm: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ffn_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

/// Every trainable array of the network, generic over what is stored per
/// slot: tensors, tape handles, shapes, optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    pub token_embedding: T,
    pub lang_embedding: T,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Norm<T>,
    /// `[V, d]`; `None` when tied to the token embedding.
    pub output_projection: Option<T>,
}

pub type Parameters = ParamSet<Tensor>;

impl<T> ParamSet<T> {
    /// Maps every slot in canonical order, passing its dotted name.
    pub fn try_map<U, E>(&self, f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>) -> std::result::Result<ParamSet<U>, E> {
        let lin = |f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>, p: &str, l: &Linear<T>| {
            Ok(Linear {
                weight: f(&format!("{p}.weight"), &l.weight)?,
                bias: f(&format!("{p}.bias"), &l.bias)?,
            })
        };
        let norm = |f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>, p: &str, n: &Norm<T>| {
            Ok(Norm {
                gain: f(&format!("{p}.gain"), &n.gain)?,
                bias: f(&format!("{p}.bias"), &n.bias)?,
            })
        };
        let token_embedding = f("token_embedding", &self.token_embedding)?;
        let lang_embedding = f("lang_embedding", &self.lang_embedding)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            layers.push(Layer {
                attn_norm: norm(f, &format!("{p}.attn_norm"), &l.attn_norm)?,
                query: lin(f, &format!("{p}.attn.query"), &l.query)?,
                key: lin(f, &format!("{p}.attn.key"), &l.key)?,
                value: lin(f, &format!("{p}.attn.value"), &l.value)?,
                output: lin(f, &format!("{p}.attn.output"), &l.output)?,
                ffn_norm: norm(f, &format!("{p}.ffn_norm"), &l.ffn_norm)?,
                ffn_in: lin(f, &format!("{p}.ffn.in"), &l.ffn_in)?,
                ffn_out: lin(f, &format!("{p}.ffn.out"), &l.ffn_out)?,
            });
        }
        let final_norm = norm(f, "final_norm", &self.final_norm)?;
        let output_projection = match &self.output_projection {
            Some(t) => Some(f("output_projection", t)?),
            None => None,
        };
        Ok(ParamSet {
            token_embedding,
            lang_embedding,
            layers,
            final_norm,
            output_projection,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ParamSet<U> {
        self.try_map::<U, std::convert::Infallible>(&mut |n, t| Ok(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|n, t| f(n, t));
    }

    /// Slots in canonical order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.push(&self.token_embedding);
        out.push(&self.lang_embedding);
        for l in &self.layers {
            out.extend([&l.attn_norm.gain, &l.attn_norm.bias]);
            for lin in [&l.query, &l.key, &l.value, &l.output] {
                out.extend([&lin.weight, &lin.bias]);
            }
            out.extend([&l.ffn_norm.gain, &l.ffn_norm.bias]);
            out.extend([&l.ffn_in.weight, &l.ffn_in.bias, &l.ffn_out.weight, &l.ffn_out.bias]);
        }
        out.extend([&self.final_norm.gain, &self.final_norm.bias]);
        if let Some(p) = &self.output_projection {
            out.push(p);
        }
    }

    /// Mutable slots in canonical order.
    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.token_embedding, &mut self.lang_embedding];
        for l in &mut self.layers {
            out.extend([&mut l.attn_norm.gain, &mut l.attn_norm.bias]);
            for lin in [&mut l.query, &mut l.key, &mut l.value, &mut l.output] {
                out.extend([&mut lin.weight, &mut lin.bias]);
            }
            out.extend([&mut l.ffn_norm.gain, &mut l.ffn_norm.bias]);
            out.extend([
                &mut l.ffn_in.weight,
                &mut l.ffn_in.bias,
                &mut l.ffn_out.weight,
                &mut l.ffn_out.bias,
            ]);
        }
        out.extend([&mut self.final_norm.gain, &mut self.final_norm.bias]);
        if let Some(p) = &mut self.output_projection {
            out.push(p);
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSet<SlotSpec> {
    /// Shapes and initializers for `config`, without allocating storage.
    pub fn layout(config: &ModelConfig) -> Self {
        let (v, d, ff) = (config.vocab_size, config.d_model, config.d_ff);
        let spec = |shape: Vec<usize>, init| SlotSpec { shape, init };
        let lin = |i: usize, o: usize| Linear {
            weight: spec(vec![i, o], Init::Xavier),
            bias: spec(vec![o], Init::Zeros),
        };
        let norm = || Norm {
            gain: spec(vec![d], Init::Ones),
            bias: spec(vec![d], Init::Zeros),
        };
        ParamSet {
            token_embedding: spec(vec![v, d], Init::Embedding),
            lang_embedding: spec(vec![2, d], Init::Embedding),
            layers: (0..config.n_layers)
                .map(|_| Layer {
                    attn_norm: norm(),
                    query: lin(d, d),
                    key: lin(d, d),
                    value: lin(d, d),
                    output: lin(d, d),
                    ffn_norm: norm(),
                    ffn_in: lin(d, ff),
                    ffn_out: lin(ff, d),
                })
                .collect(),
            final_norm: norm(),
            output_projection: (!config.tie_embeddings).then(|| spec(vec![v, d], Init::Embedding)),
        }
    }

    /// Parameter count by walking the layout.
    pub fn count(&self) -> usize {
        self.iter().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        ParamSet::layout(config).map(|_, s| Tensor::zeros(&s.shape))
    }

    /// Embeddings ~ N(0, d^-1/2), linear weights Xavier-uniform, biases 0,
    /// norm gains 1.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (config.d_model as f64).powf(-0.5)).expect("valid std");
        ParamSet::layout(config).map(|_, s| {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Embedding => (0..n).map(|_| normal.sample(rng)).collect(),
                Init::Xavier => {
                    let a = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..=a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Tensor::new(&s.shape, data).expect("layout shape")
        })
    }

    /// Parameter count by walking stored arrays.
    pub fn count(&self) -> usize {
        self.iter().iter().map(|t| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.iter_mut().into_iter().for_each(|t| t.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.iter_mut().into_iter().for_each(Tensor::zero_grad);
    }
}

/// Fixed sinusoidal position table, `max_positions × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidalTable {
    max_positions: usize,
    d: usize,
    data: Vec<f64>,
}

impl SinusoidalTable {
    pub fn new(max_positions: usize, d: usize) -> Self {
        let mut data = vec![0.0; max_positions * d];
        for pos in 0..max_positions {
            for j in 0..d {
                let i2 = (j - j % 2) as f64;
                let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
                data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        Self {
            max_positions,
            d,
            data,
        }
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.d..(pos + 1) * self.d]
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }
}

/// Dropout state for a forward pass; `None` is evaluation mode.
pub struct Mode<'r> {
    rng: Option<&'r mut dyn rand::RngCore>,
}

impl<'r> Mode<'r> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'r mut dyn rand::RngCore) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
    table: SinusoidalTable,
}

/// Result of recording a forward pass on a tape.
pub struct Forward {
    /// `B × (S+T) × V`
    pub logits: Var,
    pub params: ParamSet<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(&config, &mut rng);
        Ok(Self::from_parts(config, params))
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Self {
        let table = SinusoidalTable::new(config.max_positions, config.d_model);
        Self {
            config,
            params,
            table,
        }
    }

    pub fn table(&self) -> &SinusoidalTable {
        &self.table
    }

    /// Masks for `batch` under this model's window schedule.
    pub fn masks(&self, cache: &mut MaskCache, batch: &JointBatch) -> Result<BandMaskSet> {
        Ok(cache.layer_masks(
            &self.config.windows,
            self.config.boundary_policy,
            &batch.src_lengths,
            &batch.tgt_lengths,
            batch.source_len,
            batch.target_len,
            batch.source_pad,
        )?)
    }

    /// `token_emb[tokens]·√d + table[positions] + lang_emb[lang]`, with
    /// dropout in training mode. Shape `B × (S+T) × d`.
    pub fn embed(&self, tape: &mut Tape, batch: &JointBatch, vars: &ParamSet<Var>, mode: &mut Mode) -> Result<Var> {
        let d = self.config.d_model;
        let (b, n) = (batch.batch_size, batch.seq_len());
        if let Some(&p) = batch.positions.iter().find(|&&p| p >= self.table.max_positions) {
            return Err(ModelError::PositionOverflow {
                position: p,
                max: self.table.max_positions,
            });
        }
        let tok = tape.embedding(vars.token_embedding, &batch.tokens, &[b, n])?;
        let tok = tape.scale(tok, (d as f64).sqrt());
        let mut pos = Vec::with_capacity(b * n * d);
        for &p in &batch.positions {
            pos.extend_from_slice(self.table.row(p));
        }
        let pos = tape.constant(&[b, n, d], pos)?;
        let lang = tape.embedding(vars.lang_embedding, &batch.lang, &[b, n])?;
        let x = tape.add(tok, pos)?;
        let x = tape.add(x, lang)?;
        self.dropout(tape, x, mode)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode) -> Result<Var> {
        match mode.rng.as_deref_mut() {
            Some(rng) => Ok(tape.dropout(x, self.config.dropout, rng)?),
            None => Ok(x),
        }
    }

    /// Pre-norm block: `x + Drop(MHA(LN(x)))`, then `x + Drop(FFN(LN(x)))`.
    pub fn attention_block(
        &self,
        tape: &mut Tape,
        x: Var,
        mask: &Mask,
        layer: &Layer<Var>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.n_heads;
        let dh = self.config.head_dim();

        let normed = tape.layer_norm(x, layer.attn_norm.gain, layer.attn_norm.bias, LAYER_NORM_EPS)?;
        let q = linear(tape, normed, &layer.query)?;
        let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
        let q = tape.reshape(q, &[b, n, h, dh])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let k = linear(tape, normed, &layer.key)?;
        let k = tape.reshape(k, &[b, n, h, dh])?;
        let k_t = tape.permute(k, &[0, 2, 3, 1])?;
        let v = linear(tape, normed, &layer.value)?;
        let v = tape.reshape(v, &[b, n, h, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;

        let scores = tape.matmul(q, k_t)?;
        let attn = tape.masked_softmax(scores, mask)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        let out = linear(tape, ctx, &layer.output)?;
        let out = self.dropout(tape, out, mode)?;
        let x = tape.add(x, out)?;

        let normed = tape.layer_norm(x, layer.ffn_norm.gain, layer.ffn_norm.bias, LAYER_NORM_EPS)?;
        let f = linear(tape, normed, &layer.ffn_in)?;
        let f = tape.relu(f);
        let f = linear(tape, f, &layer.ffn_out)?;
        let f = self.dropout(tape, f, mode)?;
        Ok(tape.add(x, f)?)
    }

    /// Records the full network on `tape`. Parameters become leaves that
    /// require gradients iff the stored tensors do.
    pub fn forward(&self, tape: &mut Tape, batch: &JointBatch, masks: &BandMaskSet, mode: &mut Mode) -> Result<Forward> {
        if masks.source_len != batch.source_len
            || masks.target_len != batch.target_len
            || masks.batch != batch.batch_size
        {
            return Err(ModelError::MaskMismatch(format!(
                "masks are for B={} S={} T={}, batch is B={} S={} T={}",
                masks.batch, masks.source_len, masks.target_len, batch.batch_size, batch.source_len, batch.target_len
            )));
        }
        if masks.layers.len() != self.config.n_layers {
            return Err(ModelError::MaskMismatch(format!(
                "{} layer masks for {} layers",
                masks.layers.len(),
                self.config.n_layers
            )));
        }
        let vars = self.params.map(|_, t| tape.leaf(t));
        let mut x = self.embed(tape, batch, &vars, mode)?;
        for (layer, mask) in vars.layers.iter().zip(&masks.layers) {
            x = self.attention_block(tape, x, mask, layer, mode)?;
        }
        let x = tape.layer_norm(x, vars.final_norm.gain, vars.final_norm.bias, LAYER_NORM_EPS)?;
        let proj = vars.output_projection.unwrap_or(vars.token_embedding);
        let proj_t = tape.transpose(proj, 0, 1)?;
        let logits = tape.matmul(x, proj_t)?;
        Ok(Forward { logits, params: vars })
    }

    /// Evaluation-mode logits as an owned tensor.
    pub fn logits(&self, cache: &mut MaskCache, batch: &JointBatch) -> Result<Tensor> {
        let masks = self.masks(cache, batch)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, &masks, &mut Mode::eval())?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Moves tape gradients of the parameter leaves into the stored tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ParamSet<Var>) -> Result<()> {
        for (t, v) in self.params.iter_mut().into_iter().zip(vars.iter()) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn linear(tape: &mut Tape, x: Var, p: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, p.weight)?;
    Ok(tape.add(y, p.bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::JointBatch;

    fn tiny(windows: &[Window]) -> ModelConfig {
        ModelConfig {
            n_layers: windows.len(),
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 11,
            windows: windows.to_vec(),
            dropout: 0.0,
            max_positions: 32,
            tie_embeddings: true,
            boundary_policy: BoundaryPolicy::Cross,
        }
    }

    #[test]
    fn presets_carry_schedules() {
        let iw = Preset::Iwslt.config(31_000);
        assert_eq!(
            iw.windows.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            "3,5,7,9,11,13,15,17,21,25,29,33,37,41"
        );
        assert_eq!((iw.n_layers, iw.d_model, iw.d_ff, iw.n_heads), (14, 256, 1024, 4));
        let wmt = Preset::WmtBig.config(32_000);
        assert_eq!(wmt.windows.len(), 14);
        assert_eq!(&wmt.windows[..4], &[Window::Finite(7), Window::Finite(15), Window::Finite(31), Window::Finite(63)]);
        assert!(wmt.windows[3..].iter().all(|&w| w == Window::Finite(63)));
        assert_eq!((wmt.d_model, wmt.d_ff, wmt.n_heads), (1024, 4096, 16));
        for p in Preset::ALL {
            assert!(p.config(p.default_vocab_size()).validate().unwrap().is_empty());
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn validation() {
        let mut c = tiny(&[Window::Finite(3)]);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = Preset::Iwslt.config(100);
        c.n_layers = 13;
        assert!(matches!(c.validate(), Err(ModelError::Config(m)) if m.contains("14 entries")));
        let c = tiny(&[Window::Finite(5), Window::Finite(3)]);
        assert_eq!(c.validate().unwrap().len(), 1);
    }

    #[test]
    fn layout_count_matches_formula() {
        for p in Preset::ALL {
            let c = p.config(p.default_vocab_size());
            assert_eq!(ParamSet::layout(&c).count(), c.parameter_count(), "{p}");
        }
        let mut c = tiny(&[Window::Finite(3)]);
        c.tie_embeddings = false;
        let params = Parameters::zeros(&c);
        assert_eq!(params.count(), c.parameter_count());
        assert!(params.output_projection.is_some());
        assert_eq!(params.names().len(), params.iter().len());
    }

    #[test]
    fn sinusoid_values() {
        let t = SinusoidalTable::new(10, 6);
        for j in 0..6 {
            assert_eq!(t.row(0)[j], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        let angle = 3.0 / 10000f64.powf(2.0 / 6.0);
        assert!((t.row(3)[2] - angle.sin()).abs() < 1e-15);
        assert!((t.row(3)[3] - angle.cos()).abs() < 1e-15);
    }

    fn batch(rows: &[(Vec<usize>, Vec<usize>)]) -> JointBatch {
        JointBatch::from_ids(rows).unwrap()
    }

    #[test]
    fn logits_shape() {
        let m = Model::new(tiny(&[Window::Finite(3), Window::Finite(5)]), 1).unwrap();
        let b = batch(&[(vec![4, 5], vec![6]), (vec![7], vec![8])]);
        let mut cache = MaskCache::new();
        let logits = m.logits(&mut cache, &b).unwrap();
        assert_eq!(logits.shape(), &[2, 5, 11]);
    }

    #[test]
    fn embedding_restarts_positions() {
        let m = Model::new(tiny(&[Window::Inf]), 2).unwrap();
        let b = batch(&[(vec![4, 5], vec![6]), (vec![4, 5], vec![6])]);
        let mut tape = Tape::new();
        let vars = m.params.map(|_, t| tape.leaf(t));
        let x = m.embed(&mut tape, &b, &vars, &mut Mode::eval()).unwrap();
        let v = tape.value(x);
        let (n, d) = (5, 8);
        assert_eq!(&v[..n * d], &v[n * d..]);
        assert_eq!(m.table().row(b.positions[3]), m.table().row(b.positions[0]));
    }

    #[test]
    fn position_overflow_is_reported() {
        let mut c = tiny(&[Window::Inf]);
        c.max_positions = 2;
        let m = Model::new(c, 0).unwrap();
        let b = batch(&[(vec![4, 5], vec![6])]);
        let mut cache = MaskCache::new();
        assert!(matches!(
            m.logits(&mut cache, &b),
            Err(ModelError::PositionOverflow { position: 2, max: 2 })
        ));
    }

    #[test]
    fn mask_mismatch_rejected() {
        let m = Model::new(tiny(&[Window::Inf]), 0).unwrap();
        let b1 = batch(&[(vec![4, 5], vec![6])]);
        let b2 = batch(&[(vec![4], vec![6])]);
        let mut cache = MaskCache::new();
        let masks = m.masks(&mut cache, &b1).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward(&mut tape, &b2, &masks, &mut Mode::eval()),
            Err(ModelError::MaskMismatch(_))
        ));
    }

    #[test]
    fn zero_output_weights_make_block_identity() {
        let mut m = Model::new(tiny(&[Window::Finite(3)]), 3).unwrap();
        let l = &mut m.params.layers[0];
        for t in [&mut l.output.weight, &mut l.output.bias, &mut l.ffn_out.weight, &mut l.ffn_out.bias] {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let b = batch(&[(vec![4, 5, 6], vec![7, 8])]);
        let mut cache = MaskCache::new();
        let masks = m.masks(&mut cache, &b).unwrap();
        let mut tape = Tape::new();
        let vars = m.params.map(|_, t| tape.leaf(t));
        let x = m.embed(&mut tape, &b, &vars, &mut Mode::eval()).unwrap();
        let y = m
            .attention_block(&mut tape, x, &masks.layers[0], &vars.layers[0], &mut Mode::eval())
            .unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn single_key_attention_closed_form() {
        // One position and window 1: softmax over one key is 1, so the
        // attention path reduces to (LN(x)·Wv + bv)·Wo + bo.
        let mut m = Model::new(tiny(&[Window::Finite(1)]), 5).unwrap();
        let l = &mut m.params.layers[0];
        for t in [&mut l.ffn_out.weight, &mut l.ffn_out.bias] {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let l = &m.params.layers[0];
        let d = 8;
        let xs: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin() + 0.1 * i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 1, d], xs.clone()).unwrap();
        let vars = m.params.map(|_, t| tape.leaf(t));
        let mask = Mask::all(&[1, 1, 1, 1], true);
        let y = m.attention_block(&mut tape, x, &mask, &vars.layers[0], &mut Mode::eval()).unwrap();

        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let ln: Vec<f64> = xs.iter().map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt()).collect();
        let affine = |x: &[f64], lin: &Linear<Tensor>| -> Vec<f64> {
            let (i, o) = (lin.weight.shape()[0], lin.weight.shape()[1]);
            (0..o)
                .map(|c| lin.bias.data()[c] + (0..i).map(|r| x[r] * lin.weight.data()[r * o + c]).sum::<f64>())
                .collect()
        };
        let v = affine(&ln, &l.value);
        let o = affine(&v, &l.output);
        for j in 0..d {
            assert!((tape.value(y)[j] - (xs[j] + o[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_key_does_not_affect_query() {
        let m = Model::new(tiny(&[Window::Finite(3)]), 7).unwrap();
        let run = |tok: usize| {
            let b = batch(&[(vec![4, 5, 6, 7, tok], vec![8])]);
            let mut cache = MaskCache::new();
            let masks = m.masks(&mut cache, &b).unwrap();
            let mut tape = Tape::new();
            let vars = m.params.map(|_, t| tape.leaf(t));
            let x = m.embed(&mut tape, &b, &vars, &mut Mode::eval()).unwrap();
            let y = m
                .attention_block(&mut tape, x, &masks.layers[0], &vars.layers[0], &mut Mode::eval())
                .unwrap();
            tape.value(y)[..8].to_vec()
        };
        // Query 0 sees keys {0, 1}; key 4 is outside its band.
        assert_eq!(run(9), run(10));
    }
}
