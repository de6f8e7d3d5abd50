//! Autoregressive answer model conditioned on an image and a question.
//!
//! The image is cut into one patch per grid cell; a linear projection plus
//! learned row and column embeddings turns the patches into prefix embeddings.
//! The question and answer tokens follow the prefix, and a stack of pre-norm
//! causal attention blocks predicts every answer token from the prefix, the
//! question and the earlier answer tokens. A slot-wise projection of the
//! question tokens is also added to every text position, so that the first
//! block can already address image cells by the question's arguments:
//!
//! ```text
//! [cell_0 .. cell_63] <bos> q_1 .. q_k <sep> y_1 .. y_{L-1}  ->  y_1 .. y_L
//! ```
//!
//! Prefix positions see the whole prefix and are not updated by the blocks,
//! so every block reads the same prefix states; text positions attend to the
//! prefix and to earlier text positions only. This keeps the per-token cost
//! independent of the 64-cell prefix, which dominates the sequence.

pub mod batch;
mod checkpoint;
mod generate;
mod lora;
mod sft;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::GradMap;
use crate::rng::{derive_seed, rng};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::tokenizer::{TokenId, TokenSequence, Tokenizer, TokenizerError, BOS, PAD, SEP};
use crate::world::{Question, ToyImage};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StoredTensor, CHECKPOINT_FORMAT};
pub use generate::{generate, AnswerModel};
pub use lora::{LoraAdapter, LoraConfig};
pub use sft::{scheduled_rate, sft_train, SftConfig, SftReport};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: TokenId, size: usize },
    #[error("image is {got:?} cells at cell size {got_cell}, policy expects {want:?} at {want_cell}")]
    ImageShape {
        got: (usize, usize),
        got_cell: usize,
        want: (usize, usize),
        want_cell: usize,
    },
    #[error("text of {len} tokens exceeds the {max}-token context")]
    ContextOverflow { len: usize, max: usize },
    #[error("lora rank {rank} exceeds min(d_out, d_in) = {limit} for {weight}")]
    LoraRank { rank: usize, limit: usize, weight: String },
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss}); config: {config}")]
    Diverged { step: usize, loss: f64, config: String },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of each block's MLP as a multiple of `d_model`.
    pub mlp_ratio: usize,
    /// Longest text (prompt + answer) the model accepts.
    pub max_text_len: usize,
    /// Question slots seen by the question projection.
    pub max_question_len: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub cell_size: usize,
    pub glyphs: usize,
    pub init_seed: u64,
    /// Rescale diffusion rasters by their recorded (min, max) before
    /// patching. Off by default: raw noisy pixels degrade answers gradually
    /// with the diffusion step, while rescaling flattens contrast so much
    /// that even small steps erase the grid.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub renormalize_noisy: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            max_text_len: 24,
            max_question_len: 6,
            grid_width: 8,
            grid_height: 8,
            cell_size: 4,
            glyphs: 12,
            init_seed: 0,
            renormalize_noisy: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.mlp_ratio == 0 {
            return Err(PolicyError::Config("dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(PolicyError::Config("d_model must be divisible by n_heads".into()));
        }
        if self.max_question_len == 0 || self.max_question_len + 3 > self.max_text_len {
            return Err(PolicyError::Config(
                "max_question_len must be in 1..=max_text_len - 3".into(),
            ));
        }
        if self.max_text_len < 4 {
            return Err(PolicyError::Config("max_text_len must be at least 4".into()));
        }
        if self.grid_width == 0 || self.grid_height == 0 || self.cell_size == 0 {
            return Err(PolicyError::Config("grid dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.cell_size * self.cell_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_width * self.grid_height
    }
}

/// Weights that low-rank adapters may wrap, by parameter-name suffix.
pub(crate) const ADAPTABLE: [&str; 7] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2", "head.w"];

/// The model: config, vocabulary, base weights and optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    tokenizer: Tokenizer,
    params: BTreeMap<String, Tensor>,
    lora: Option<LoraAdapter>,
}

struct LayerVars {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Parameters registered on one graph, adapters already merged.
pub struct BoundParams {
    enc_w: Var,
    enc_b: Var,
    enc_row: Var,
    enc_col: Var,
    tok_emb: Var,
    text_pos: Var,
    q_proj: Var,
    layers: Vec<LayerVars>,
    ln_f: (Var, Var),
    head_w: Var,
    head_b: Var,
    trainable: Vec<(String, Var)>,
}

impl BoundParams {
    /// Named gradients of the trainable leaves.
    pub fn collect_grads(&self, grads: &crate::tensor::Gradients, store: &Policy) -> GradMap {
        self.trainable
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(*var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.trainable_len(name)]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Per-block prefix keys and values for one image, plus the projected
/// question added to every text position.
pub struct PrefixState {
    keys: Vec<Var>,
    values: Vec<Var>,
    len: usize,
    question: Var,
}

fn init_tensor(shape: Vec<usize>, std: f64, seed: u64) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut r = rng(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..numel).map(|_| normal.sample(&mut r)).collect();
    Tensor::new(shape, data).expect("finite init")
}

impl Policy {
    /// Fresh randomly initialized policy.
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(config.glyphs)?;
        let v = tokenizer.vocab_size();
        let d = config.d_model;
        let hidden = d * config.mlp_ratio;
        let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut specs: Vec<(String, Vec<usize>, Option<f64>)> = vec![
            (
                "enc.w".into(),
                vec![config.patch_dim(), d],
                Some(1.0 / (config.patch_dim() as f64).sqrt()),
            ),
            ("enc.b".into(), vec![d], None),
            ("enc.row".into(), vec![config.grid_height, d], Some(0.5)),
            ("enc.col".into(), vec![config.grid_width, d], Some(0.5)),
            ("tok_emb".into(), vec![v, d], Some(0.5)),
            ("text_pos".into(), vec![config.max_text_len, d], Some(0.5)),
            (
                "q_proj".into(),
                vec![config.max_question_len * d, d],
                Some(1.0 / ((config.max_question_len * d) as f64).sqrt()),
            ),
            ("ln_f.g".into(), vec![d], None),
            ("ln_f.b".into(), vec![d], None),
            ("head.w".into(), vec![d, v], Some(1.0 / (d as f64).sqrt())),
            ("head.b".into(), vec![v], None),
        ];
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let s = 1.0 / (d as f64).sqrt();
            specs.extend([
                (p("ln1.g"), vec![d], None),
                (p("ln1.b"), vec![d], None),
                (p("attn.wq"), vec![d, d], Some(s)),
                (p("attn.wk"), vec![d, d], Some(s)),
                (p("attn.wv"), vec![d, d], Some(s)),
                (p("attn.wo"), vec![d, d], Some(s * depth_scale)),
                (p("ln2.g"), vec![d], None),
                (p("ln2.b"), vec![d], None),
                (p("mlp.w1"), vec![d, hidden], Some(s)),
                (p("mlp.b1"), vec![hidden], None),
                (p("mlp.w2"), vec![hidden, d], Some(depth_scale / (hidden as f64).sqrt())),
                (p("mlp.b2"), vec![d], None),
            ]);
        }
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut params = BTreeMap::new();
        for (i, (name, shape, std)) in specs.into_iter().enumerate() {
            let t = match std {
                Some(std) => init_tensor(shape, std, derive_seed(config.init_seed, i as u64)),
                None if name.ends_with(".g") => {
                    let n = shape.iter().product();
                    Tensor::new(shape, vec![1.0; n]).expect("ones")
                }
                None => Tensor::zeros(shape),
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            tokenizer,
            params,
            lora: None,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn lora(&self) -> Option<&LoraAdapter> {
        self.lora.as_ref()
    }

    pub fn lora_mut(&mut self) -> Option<&mut LoraAdapter> {
        self.lora.as_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters updated by training: adapter factors when adapters are
    /// attached, otherwise every base weight.
    pub fn trainable_names(&self) -> Vec<String> {
        match &self.lora {
            Some(l) => l.param_names(),
            None => self.params.keys().cloned().collect(),
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        match &self.lora {
            Some(l) => l.param_count(),
            None => self.param_count(),
        }
    }

    fn trainable_len(&self, name: &str) -> usize {
        match &self.lora {
            Some(l) => l.tensor(name).map_or(0, Tensor::numel),
            None => self.params.get(name).map_or(0, Tensor::numel),
        }
    }

    /// Mutable view of the trainable tensors, keyed like the gradients.
    pub fn trainable_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        match &mut self.lora {
            Some(l) => l.tensors_mut(),
            None => &mut self.params,
        }
    }

    /// Base weights with adapters folded in; the result has no adapters.
    pub fn merged(&self) -> Result<Policy> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let mut params = self.params.clone();
        if self.lora.is_some() {
            for l in 0..self.config.n_layers {
                let lv = &bound.layers[l];
                for (suffix, var) in [
                    ("attn.wq", lv.wq),
                    ("attn.wk", lv.wk),
                    ("attn.wv", lv.wv),
                    ("attn.wo", lv.wo),
                    ("mlp.w1", lv.w1),
                    ("mlp.w2", lv.w2),
                ] {
                    params.insert(format!("layer{l}.{suffix}"), g.to_tensor(var));
                }
            }
            params.insert("head.w".into(), g.to_tensor(bound.head_w));
        }
        Ok(Policy {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            params,
            lora: None,
        })
    }

    /// Registers every parameter on `g`. With `with_grad`, the trainable set
    /// is marked `requires_grad`.
    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> Result<BoundParams> {
        let base_trainable = with_grad && self.lora.is_none();
        let mut trainable = Vec::new();
        let mut leaf = |g: &mut Graph, name: &str| -> Var {
            let t = self.params[name].clone().with_requires_grad(base_trainable);
            let var = g.leaf(&t);
            if base_trainable {
                trainable.push((name.to_string(), var));
            }
            var
        };
        let enc_w = leaf(g, "enc.w");
        let enc_b = leaf(g, "enc.b");
        let enc_row = leaf(g, "enc.row");
        let enc_col = leaf(g, "enc.col");
        let tok_emb = leaf(g, "tok_emb");
        let text_pos = leaf(g, "text_pos");
        let q_proj = leaf(g, "q_proj");
        let ln_f = (leaf(g, "ln_f.g"), leaf(g, "ln_f.b"));
        let head_b = leaf(g, "head.b");
        let head_w = leaf(g, "head.w");
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let mut p = |s: &str| leaf(g, &format!("layer{l}.{s}"));
            layers.push(LayerVars {
                ln1: (p("ln1.g"), p("ln1.b")),
                wq: p("attn.wq"),
                wk: p("attn.wk"),
                wv: p("attn.wv"),
                wo: p("attn.wo"),
                ln2: (p("ln2.g"), p("ln2.b")),
                w1: p("mlp.w1"),
                b1: p("mlp.b1"),
                w2: p("mlp.w2"),
                b2: p("mlp.b2"),
            });
        }
        let mut bound = BoundParams {
            enc_w,
            enc_b,
            enc_row,
            enc_col,
            tok_emb,
            text_pos,
            q_proj,
            layers,
            ln_f,
            head_w,
            head_b,
            trainable,
        };
        if let Some(lora) = &self.lora {
            let scale = lora.scale();
            let mut adapter_leaves = Vec::new();
            let mut merge = |g: &mut Graph, base: Var, name: &str| -> Result<Var> {
                let Some((a, b)) = lora.factors(name) else {
                    return Ok(base);
                };
                let (a, b) = (
                    a.clone().with_requires_grad(with_grad),
                    b.clone().with_requires_grad(with_grad),
                );
                let (av, bv) = (g.leaf(&a), g.leaf(&b));
                if with_grad {
                    adapter_leaves.push((LoraAdapter::a_name(name), av));
                    adapter_leaves.push((LoraAdapter::b_name(name), bv));
                }
                let delta = g.matmul(av, bv)?;
                let delta = g.scale(delta, scale)?;
                Ok(g.add(base, delta)?)
            };
            for l in 0..self.config.n_layers {
                let lv = &bound.layers[l];
                let (wq, wk, wv, wo, w1, w2) = (lv.wq, lv.wk, lv.wv, lv.wo, lv.w1, lv.w2);
                let n = |s: &str| format!("layer{l}.{s}");
                let merged = [
                    merge(g, wq, &n("attn.wq"))?,
                    merge(g, wk, &n("attn.wk"))?,
                    merge(g, wv, &n("attn.wv"))?,
                    merge(g, wo, &n("attn.wo"))?,
                    merge(g, w1, &n("mlp.w1"))?,
                    merge(g, w2, &n("mlp.w2"))?,
                ];
                let lv = &mut bound.layers[l];
                [lv.wq, lv.wk, lv.wv, lv.wo, lv.w1, lv.w2] = merged;
            }
            let hw = bound.head_w;
            bound.head_w = merge(g, hw, "head.w")?;
            adapter_leaves.sort_by(|a, b| a.0.cmp(&b.0));
            bound.trainable = adapter_leaves;
        }
        Ok(bound)
    }

    fn check_image(&self, image: &ToyImage) -> Result<()> {
        let c = &self.config;
        if image.width() != c.grid_width || image.height() != c.grid_height || image.cell_size() != c.cell_size {
            return Err(PolicyError::ImageShape {
                got: (image.width(), image.height()),
                got_cell: image.cell_size(),
                want: (c.grid_width, c.grid_height),
                want_cell: c.cell_size,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let size = self.tokenizer.vocab_size();
        match tokens.iter().find(|&&t| t as usize >= size) {
            Some(&id) => Err(PolicyError::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    /// `[n_patches, cell_size^2]` patch matrix, one row per cell in row-major
    /// cell order. With `renormalize_noisy` set, a raster that carries a
    /// recorded value range (diffusion output) is first rescaled onto
    /// `[0, 1]`, the range every clean raster lives in.
    fn patches(&self, image: &ToyImage) -> Vec<f64> {
        let s = image.cell_size();
        let rw = image.raster_width();
        let rescaled: Vec<f64>;
        let px = match image.pixel_range() {
            Some((lo, hi)) if self.config.renormalize_noisy && hi > lo => {
                rescaled = image.pixels().iter().map(|p| (p - lo) / (hi - lo)).collect();
                &rescaled[..]
            }
            _ => image.pixels(),
        };
        let mut out = Vec::with_capacity(image.width() * image.height() * s * s);
        for r in 0..image.height() {
            for c in 0..image.width() {
                for y in 0..s {
                    let start = (r * s + y) * rw + c * s;
                    out.extend_from_slice(&px[start..start + s]);
                }
            }
        }
        out
    }

    /// Image prefix (per-block keys and values) and question projection.
    pub fn encode_context(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        image: &ToyImage,
        question: &Question,
    ) -> Result<PrefixState> {
        self.check_image(image)?;
        let qt = &question.text_tokens;
        self.check_tokens(qt)?;
        let slots = self.config.max_question_len;
        if qt.len() > slots {
            return Err(PolicyError::ContextOverflow {
                len: qt.len(),
                max: slots,
            });
        }
        let mut ids: Vec<usize> = qt.iter().map(|&t| t as usize).collect();
        ids.resize(slots, PAD as usize);
        let emb = g.embedding(p.tok_emb, ids)?;
        let flat = g.reshape(emb, vec![1, slots * self.config.d_model])?;
        let qv = g.matmul(flat, p.q_proj)?;
        let question = g.reshape(qv, vec![self.config.d_model])?;
        let n = self.config.n_patches();
        let patches = g.constant(vec![n, self.config.patch_dim()], self.patches(image))?;
        let h = g.matmul(patches, p.enc_w)?;
        let h = g.add_bias(h, p.enc_b)?;
        let w = self.config.grid_width;
        let rows = g.embedding(p.enc_row, (0..n).map(|i| i / w).collect())?;
        let cols = g.embedding(p.enc_col, (0..n).map(|i| i % w).collect())?;
        let h = g.add(h, rows)?;
        let h = g.add(h, cols)?;
        let mut keys = Vec::with_capacity(p.layers.len());
        let mut values = Vec::with_capacity(p.layers.len());
        for lv in &p.layers {
            let hn = g.layer_norm(h, lv.ln1.0, lv.ln1.1)?;
            keys.push(g.matmul(hn, lv.wk)?);
            values.push(g.matmul(hn, lv.wv)?);
        }
        Ok(PrefixState {
            keys,
            values,
            len: n,
            question,
        })
    }

    /// Next-token logits `[text.len(), V]` for every text position.
    pub fn decode(&self, g: &mut Graph, p: &BoundParams, prefix: &PrefixState, text: &[TokenId]) -> Result<Var> {
        self.check_tokens(text)?;
        if text.len() > self.config.max_text_len {
            return Err(PolicyError::ContextOverflow {
                len: text.len(),
                max: self.config.max_text_len,
            });
        }
        let n = text.len();
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let ids: Vec<usize> = text.iter().map(|&t| t as usize).collect();
        let tok = g.embedding(p.tok_emb, ids)?;
        let pos = g.slice_rows(p.text_pos, 0, n)?;
        let x = g.add(tok, pos)?;
        let mut x = g.add_bias(x, prefix.question)?;
        let visible: Vec<usize> = (0..n).map(|i| prefix.len + i + 1).collect();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for (l, lv) in p.layers.iter().enumerate() {
            let xn = g.layer_norm(x, lv.ln1.0, lv.ln1.1)?;
            let q = g.matmul(xn, lv.wq)?;
            let k_text = g.matmul(xn, lv.wk)?;
            let v_text = g.matmul(xn, lv.wv)?;
            let k = g.concat_rows(&[prefix.keys[l], k_text])?;
            let v = g.concat_rows(&[prefix.values[l], v_text])?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_cols(q, h * dh, (h + 1) * dh)?,
                        g.slice_cols(k, h * dh, (h + 1) * dh)?,
                        g.slice_cols(v, h * dh, (h + 1) * dh)?,
                    )
                };
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let attn = g.masked_softmax(scores, visible.clone())?;
                outs.push(g.matmul(attn, vh)?);
            }
            let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let proj = g.matmul(joined, lv.wo)?;
            x = g.add(x, proj)?;
            let xn = g.layer_norm(x, lv.ln2.0, lv.ln2.1)?;
            let hdn = g.matmul(xn, lv.w1)?;
            let hdn = g.add_bias(hdn, lv.b1)?;
            let hdn = g.gelu(hdn)?;
            let out = g.matmul(hdn, lv.w2)?;
            let out = g.add_bias(out, lv.b2)?;
            x = g.add(x, out)?;
        }
        let xn = g.layer_norm(x, p.ln_f.0, p.ln_f.1)?;
        let logits = g.matmul(xn, p.head_w)?;
        Ok(g.add_bias(logits, p.head_b)?)
    }

    /// `<bos> question <sep>`
    pub fn prompt_tokens(&self, question: &Question) -> Vec<TokenId> {
        let mut t = Vec::with_capacity(question.text_tokens.len() + 2);
        t.push(BOS);
        t.extend_from_slice(&question.text_tokens);
        t.push(SEP);
        t
    }

    /// `sum_i log pi(y_i | y_<i, x)` of `answer` as a scalar node.
    pub fn score_answer(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        prefix: &PrefixState,
        question: &Question,
        answer: &TokenSequence,
    ) -> Result<Var> {
        let mut text = self.prompt_tokens(question);
        let first = text.len() - 1;
        let y = answer.tokens();
        self.check_tokens(y)?;
        text.extend_from_slice(&y[..y.len() - 1]);
        let logits = self.decode(g, p, prefix, &text)?;
        let rows = g.slice_rows(logits, first, first + y.len())?;
        let logp = g.log_softmax(rows)?;
        let picked = g.gather(logp, y.iter().map(|&t| t as usize).collect())?;
        Ok(g.sum(picked)?)
    }

    /// Log-probabilities of several answers to one (image, question),
    /// sharing the image encoding.
    pub fn score_answers(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        image: &ToyImage,
        question: &Question,
        answers: &[&TokenSequence],
    ) -> Result<Vec<Var>> {
        let prefix = self.encode_context(g, p, image, question)?;
        answers
            .iter()
            .map(|a| self.score_answer(g, p, &prefix, question, a))
            .collect()
    }

    /// Plain value of `log pi(answer | image, question)`.
    pub fn sequence_logprob(&self, image: &ToyImage, question: &Question, answer: &TokenSequence) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let v = self.score_answers(&mut g, &p, image, question, &[answer])?[0];
        Ok(g.scalar(v))
    }

    /// Log-probabilities of `answers` given one (image, question).
    pub fn sequence_logprobs(
        &self,
        image: &ToyImage,
        question: &Question,
        answers: &[&TokenSequence],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let vars = self.score_answers(&mut g, &p, image, question, answers)?;
        Ok(vars.into_iter().map(|v| g.scalar(v)).collect())
    }

    /// Next-token distribution logits after `answer_prefix`.
    pub fn next_token_logits(
        &self,
        image: &ToyImage,
        question: &Question,
        answer_prefix: &[TokenId],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let prefix = self.encode_context(&mut g, &p, image, question)?;
        let mut text = self.prompt_tokens(question);
        text.extend_from_slice(answer_prefix);
        let logits = self.decode(&mut g, &p, &prefix, &text)?;
        let v = self.tokenizer.vocab_size();
        let vals = g.value(logits);
        Ok(vals[(text.len() - 1) * v..].to_vec())
    }

    /// Logits `[len, V]` at every text position of `prompt ++ answer_tokens`.
    pub fn all_logits(
        &self,
        image: &ToyImage,
        question: &Question,
        answer_tokens: &[TokenId],
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let prefix = self.encode_context(&mut g, &p, image, question)?;
        let mut text = self.prompt_tokens(question);
        text.extend_from_slice(answer_tokens);
        let logits = self.decode(&mut g, &p, &prefix, &text)?;
        let v = self.tokenizer.vocab_size();
        Ok(g.value(logits).chunks(v).map(<[f64]>::to_vec).collect())
    }
}

#[cfg(test)]
mod tests;
