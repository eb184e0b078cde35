//! Micro decoder-only transformer with a two-way classification head.
//!
//! Pre-norm blocks (layernorm → causal multi-head attention → residual;
//! layernorm → GELU feed-forward → residual), learned positional
//! embeddings, and a head applied to the last non-pad position's hidden
//! state. "micro" and "mini" configs stand in for a small/large model
//! pair at desk scale.

pub mod checkpoint;
pub mod tokenizer;

pub use tokenizer::Batch;

use crate::adapt::LoraAdapter;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng, Stream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

fn default_n_classes() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small default config (stands in for the smaller pretrained model).
    pub fn micro(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq_len: 128,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 256,
            n_classes: 2,
            seed,
        }
    }

    /// Larger default config (stands in for the bigger pretrained model).
    pub fn mini(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq_len: 128,
            d_model: 128,
            n_heads: 8,
            n_layers: 8,
            d_ff: 512,
            n_classes: 2,
            seed,
        }
    }

    pub fn by_name(name: &str, seed: u64) -> Result<ModelConfig> {
        match name {
            "micro" => Ok(ModelConfig::micro(seed)),
            "mini" => Ok(ModelConfig::mini(seed)),
            other => Err(Error::Config(format!(
                "unknown model config '{other}' (expected micro or mini)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes != 2 {
            return Err(Error::Config(format!(
                "n_classes must be 2, got {}",
                self.n_classes
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One named weight of the model, sharing storage with it.
#[derive(Debug, Clone)]
pub struct NamedParameter {
    pub path: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Dense layer `[in, out]` with optional bias and optional LoRA adapter.
pub struct Linear {
    pub(crate) weight: Tensor,
    pub(crate) bias: Option<Tensor>,
    pub(crate) adapter: Option<LoraAdapter>,
}

impl Linear {
    fn init(d_in: usize, d_out: usize, with_bias: bool, rng: &mut Rng) -> Linear {
        let weight = Tensor::randn(&[d_in, d_out], INIT_STD, rng);
        weight.set_requires_grad(true);
        let bias = with_bias.then(|| {
            let b = Tensor::zeros(&[d_out]);
            b.set_requires_grad(true);
            b
        });
        Linear {
            weight,
            bias,
            adapter: None,
        }
    }

    pub(crate) fn forward(
        &self,
        x: &Tensor,
        train_mode: bool,
        dropout_rng: &mut Option<&mut Rng>,
    ) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        if let Some(adapter) = &self.adapter {
            let inner = if train_mode && adapter.dropout_p > 0.0 {
                let rng = dropout_rng.as_deref_mut().ok_or_else(|| {
                    Error::Contract("train-mode forward with LoRA dropout needs an RNG".into())
                })?;
                x.dropout(adapter.dropout_p, rng)?
            } else {
                x.clone()
            };
            let delta = inner
                .matmul(&adapter.a)?
                .matmul(&adapter.b)?
                .scale(adapter.scaling())?;
            y = y.add(&delta)?;
        }
        match &self.bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }
}

pub(crate) struct LayerNormParams {
    pub(crate) gain: Tensor,
    pub(crate) bias: Tensor,
}

impl LayerNormParams {
    fn init(dim: usize) -> LayerNormParams {
        let gain = Tensor::from_vec(&[dim], vec![1.0; dim]).expect("layernorm gain");
        gain.set_requires_grad(true);
        let bias = Tensor::zeros(&[dim]);
        bias.set_requires_grad(true);
        LayerNormParams { gain, bias }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

pub(crate) struct Block {
    pub(crate) ln1: LayerNormParams,
    pub(crate) wq: Linear,
    pub(crate) wk: Linear,
    pub(crate) wv: Linear,
    pub(crate) wo: Linear,
    pub(crate) ln2: LayerNormParams,
    pub(crate) w1: Linear,
    pub(crate) w2: Linear,
}

pub struct Model {
    pub config: ModelConfig,
    pub(crate) tok_embed: Tensor,
    pub(crate) pos_embed: Tensor,
    pub(crate) blocks: Vec<Block>,
    pub(crate) final_ln: LayerNormParams,
    pub(crate) head: Linear,
}

/// Seeded model construction: weights from normal(0, 0.02), biases zero,
/// layernorm gain one. Identical seeds give bitwise-identical weights.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = rng_for(config.seed, Stream::Init, 0);
    let d = config.d_model;

    let tok_embed = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
    tok_embed.set_requires_grad(true);
    let pos_embed = Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng);
    pos_embed.set_requires_grad(true);

    let blocks = (0..config.n_layers)
        .map(|_| Block {
            ln1: LayerNormParams::init(d),
            wq: Linear::init(d, d, true, &mut rng),
            wk: Linear::init(d, d, true, &mut rng),
            wv: Linear::init(d, d, true, &mut rng),
            wo: Linear::init(d, d, true, &mut rng),
            ln2: LayerNormParams::init(d),
            w1: Linear::init(d, config.d_ff, true, &mut rng),
            w2: Linear::init(config.d_ff, d, true, &mut rng),
        })
        .collect();

    Ok(Model {
        config: config.clone(),
        tok_embed,
        pos_embed,
        blocks,
        final_ln: LayerNormParams::init(d),
        head: Linear::init(d, config.n_classes, true, &mut rng),
    })
}

impl Model {
    /// Class logits `[b, 2]` for a right-padded token batch. Padded
    /// positions are masked out of attention and the head reads the last
    /// non-pad position of each row.
    pub fn forward_classify(
        &self,
        batch: &Batch,
        train_mode: bool,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Tensor> {
        self.forward_inner(batch, train_mode, &mut dropout_rng, None)
    }

    /// Hidden states `[b*t, d]` after block `k`; a probe for causality and
    /// diagnostics, always in eval mode.
    pub fn hidden_after_block(&self, batch: &Batch, k: usize) -> Result<Tensor> {
        if k >= self.blocks.len() {
            return Err(Error::Config(format!(
                "block index {k} out of range for {} layers",
                self.blocks.len()
            )));
        }
        let mut no_rng: Option<&mut Rng> = None;
        self.forward_inner(batch, false, &mut no_rng, Some(k))
    }

    fn forward_inner(
        &self,
        batch: &Batch,
        train_mode: bool,
        dropout_rng: &mut Option<&mut Rng>,
        probe_block: Option<usize>,
    ) -> Result<Tensor> {
        let (b, t) = (batch.batch, batch.seq_len);
        if b == 0 || batch.token_ids.len() != b * t || batch.mask.len() != b * t {
            return Err(Error::Input(format!(
                "batch layout inconsistent: {b} x {t} vs {} ids, {} mask bits",
                batch.token_ids.len(),
                batch.mask.len()
            )));
        }
        if t > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = batch
            .token_ids
            .iter()
            .find(|&&id| id >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        let mut last_idx = Vec::with_capacity(b);
        for row in 0..b {
            let row_mask = &batch.mask[row * t..(row + 1) * t];
            match row_mask.iter().rposition(|&m| m) {
                Some(pos) => last_idx.push(row * t + pos),
                None => {
                    return Err(Error::Input(format!("row {row} has no non-pad token")));
                }
            }
        }

        let pos_ids: Vec<usize> = (0..b * t).map(|i| i % t).collect();
        let mut h = self
            .tok_embed
            .embedding(&batch.token_ids)?
            .add(&self.pos_embed.embedding(&pos_ids)?)?;

        for (i, block) in self.blocks.iter().enumerate() {
            let normed = block.ln1.forward(&h)?;
            let q = block.wq.forward(&normed, train_mode, dropout_rng)?;
            let k = block.wk.forward(&normed, train_mode, dropout_rng)?;
            let v = block.wv.forward(&normed, train_mode, dropout_rng)?;
            let attn =
                Tensor::causal_attention(&q, &k, &v, self.config.n_heads, t, &batch.mask)?;
            let proj = block.wo.forward(&attn, train_mode, dropout_rng)?;
            h = h.add(&proj)?;

            let normed = block.ln2.forward(&h)?;
            let ff = block
                .w2
                .forward(&block.w1.forward(&normed, train_mode, dropout_rng)?.gelu()?, train_mode, dropout_rng)?;
            h = h.add(&ff)?;

            if probe_block == Some(i) {
                return Ok(h);
            }
        }

        let normed = self.final_ln.forward(&h)?;
        let pooled = normed.gather_rows(&last_idx)?;
        self.head.forward(&pooled, train_mode, dropout_rng)
    }

    /// All weights with stable dotted paths, in a fixed traversal order.
    /// Tensors share storage with the model; `trainable` mirrors each
    /// tensor's requires-grad flag.
    pub fn named_parameters(&self) -> Vec<NamedParameter> {
        let mut out = Vec::new();
        let mut push = |path: String, tensor: &Tensor| {
            out.push(NamedParameter {
                path,
                tensor: tensor.clone(),
                trainable: tensor.requires_grad(),
            });
        };
        push("embed.tok".into(), &self.tok_embed);
        push("embed.pos".into(), &self.pos_embed);
        for (i, block) in self.blocks.iter().enumerate() {
            push(format!("layers.{i}.ln1.gain"), &block.ln1.gain);
            push(format!("layers.{i}.ln1.bias"), &block.ln1.bias);
            for (name, lin) in [
                ("attn.wq", &block.wq),
                ("attn.wk", &block.wk),
                ("attn.wv", &block.wv),
                ("attn.wo", &block.wo),
                ("ff.w1", &block.w1),
                ("ff.w2", &block.w2),
            ] {
                push(format!("layers.{i}.{name}.weight"), &lin.weight);
                if let Some(bias) = &lin.bias {
                    push(format!("layers.{i}.{name}.bias"), bias);
                }
                if let Some(ad) = &lin.adapter {
                    push(format!("layers.{i}.{name}.weight.lora_a"), &ad.a);
                    push(format!("layers.{i}.{name}.weight.lora_b"), &ad.b);
                }
            }
            push(format!("layers.{i}.ln2.gain"), &block.ln2.gain);
            push(format!("layers.{i}.ln2.bias"), &block.ln2.bias);
        }
        push("final_ln.gain".into(), &self.final_ln.gain);
        push("final_ln.bias".into(), &self.final_ln.bias);
        push("head.weight".into(), &self.head.weight);
        if let Some(bias) = &self.head.bias {
            push("head.bias".into(), bias);
        }
        if let Some(ad) = &self.head.adapter {
            push("head.weight.lora_a".into(), &ad.a);
            push("head.weight.lora_b".into(), &ad.b);
        }
        out
    }

    /// Total (or trainable-only) parameter element count.
    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.named_parameters()
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Every dense layer with its path, for adapter targeting and freezing.
    pub(crate) fn linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out: Vec<(String, &mut Linear)> = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn.wq.weight"), &mut block.wq));
            out.push((format!("layers.{i}.attn.wk.weight"), &mut block.wk));
            out.push((format!("layers.{i}.attn.wv.weight"), &mut block.wv));
            out.push((format!("layers.{i}.attn.wo.weight"), &mut block.wo));
            out.push((format!("layers.{i}.ff.w1.weight"), &mut block.w1));
            out.push((format!("layers.{i}.ff.w2.weight"), &mut block.w2));
        }
        out.push(("head.weight".into(), &mut self.head));
        out
    }
}

#[cfg(test)]
mod tests;
