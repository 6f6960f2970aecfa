//! Velocity-prediction transformer over paired image sequences.
//!
//! The model consumes a token sequence built from three (or four) segments:
//! noisy target patches, clean source patches, one instruction token, and,
//! for the concatenation baseline, appended prompt tokens. Every segment
//! carries a learned segment embedding; spatial patches share one grid
//! positional encoding (the same tensor node for noisy and source rows, so
//! aligned patches get bit-identical positions) while non-spatial tokens
//! get a learned sentinel position.
//!
//! Three conditioning variants share identical backbone weights for a
//! given seed because each weight group draws from its own seeded stream:
//!
//! * `Plain`: no prompt pair, text-only conditioning.
//! * `Adapter`: decoupled prompt attention with per-block extra key/value
//!   projections, fused as `z_self + alpha * z_prompt`.
//! * `Concat`: prompt tokens appended to the sequence, attended jointly.

pub mod attention;
pub mod block;
pub mod linear;
pub mod patch;
pub mod prompt;

use serde::{Deserialize, Serialize};

use crate::dataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive_seed, tag, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use block::{AdapterCtx, Block, WEIGHT_STD};
use linear::{Linear, Lora};
use patch::{grid_positional, patch_coords, timestep_features};
use prompt::PromptEncoder;

/// LoRA scaling factor applied to the low-rank update.
pub const LORA_SCALE: f64 = 1.0;

/// Row indices into the segment embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Noisy = 0,
    Cond = 1,
    Text = 2,
    Prompt = 3,
}

/// How the prompt pair is wired into the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Text instruction only.
    Plain,
    /// Decoupled prompt attention with shared queries.
    Adapter,
    /// Prompt tokens appended to the sequence (joint attention baseline).
    Concat,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "adapter" => Ok(Variant::Adapter),
            "concat" => Ok(Variant::Concat),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected plain, adapter, or concat)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Plain => "plain",
            Variant::Adapter => "adapter",
            Variant::Concat => "concat",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    pub resolution: usize,
    /// Prompt tokens per image; a pair contributes twice this many.
    pub n_adapter: usize,
    /// Instruction vocabulary size, excluding the trailing empty slot.
    pub text_vocab: usize,
    /// LoRA rank for attention projections; zero disables LoRA.
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            blocks: 4,
            heads: 4,
            patch: 4,
            resolution: 16,
            n_adapter: 8,
            text_vocab: dataset::op_count(),
            lora_rank: 0,
        }
    }
}

impl ModelConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn n_patches(&self) -> usize {
        let side = self.resolution / self.patch;
        side * side
    }

    /// Index of the empty-instruction row in the text table.
    pub fn empty_text_id(&self) -> usize {
        self.text_vocab
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.blocks == 0 || self.heads == 0 || self.n_adapter == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!("heads {} must divide width {}", self.heads, self.d_model));
        }
        if self.d_model % 4 != 0 {
            return fail(format!("width {} must be a multiple of 4 for grid positions", self.d_model));
        }
        if self.patch == 0 || self.resolution == 0 || self.resolution % self.patch != 0 {
            return fail(format!(
                "patch {} must divide resolution {}",
                self.patch, self.resolution
            ));
        }
        if self.text_vocab == 0 {
            return fail("text vocabulary must be non-empty".into());
        }
        Ok(())
    }
}

pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub variant: Variant,
    /// Prompt-attention fusion weight. Zero disables the decoupled path
    /// entirely (no arithmetic against the backbone output).
    pub alpha: f64,
    pub patch_embed: Linear<F>,
    pub time_fc1: Linear<F>,
    pub time_fc2: Linear<F>,
    pub blocks: Vec<Block<F>>,
    pub final_adaln: Linear<F>,
    pub final_proj: Linear<F>,
    /// `[4, d]` rows indexed by [`Segment`].
    pub segment_table: Tensor<F>,
    /// `[text_vocab + 1, d]`; last row is the empty instruction.
    pub text_table: Tensor<F>,
    /// Learned position for non-spatial tokens, `[1, d]`.
    pub pos_sentinel: Tensor<F>,
    /// Constant grid positions, `[n_patches, d]`; shared by the noisy and
    /// source segments.
    grid_pos: Tensor<F>,
    pub prompt: Option<PromptEncoder<F>>,
    /// Learned stand-in for a dropped prompt pair, `[2 * n_adapter, d]`.
    pub null_prompt: Option<Tensor<F>>,
    /// Per-block extra (key, value) projections for the decoupled path.
    pub adapter: Vec<(Tensor<F>, Tensor<F>)>,
}

fn gaussian_param<F: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::of(rng.normal() * std)).collect();
    Tensor::param(data, shape)
}

impl<F: Scalar> Model<F> {
    /// Build a model with freshly initialized weights. Each weight group
    /// (backbone, prompt encoder, decoupled projections, LoRA factors)
    /// draws from its own stream derived from `seed`, so enabling one
    /// group never shifts another group's values.
    pub fn new(cfg: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let pd = cfg.patch_dim();

        let mut base = Rng::seed(derive_seed(seed, &[tag::INIT_BASE]));
        let patch_embed = Linear::gaussian(&mut base, pd, d, WEIGHT_STD);
        let time_fc1 = Linear::gaussian(&mut base, d, d, WEIGHT_STD);
        let time_fc2 = Linear::gaussian(&mut base, d, d, WEIGHT_STD);
        let blocks: Vec<Block<F>> = (0..cfg.blocks).map(|_| Block::new(&mut base, d, cfg.heads)).collect();
        let final_adaln = Linear::zeros(d, 2 * d);
        let final_proj = Linear::zeros(d, pd);
        let segment_table = gaussian_param(&mut base, &[4, d], WEIGHT_STD);
        let text_table = gaussian_param(&mut base, &[cfg.text_vocab + 1, d], WEIGHT_STD);
        let pos_sentinel = gaussian_param(&mut base, &[1, d], WEIGHT_STD);

        let coords = patch_coords(cfg.resolution, cfg.patch);
        let grid_pos = Tensor::new(grid_positional::<F>(&coords, d), &[coords.len(), d]);

        let (prompt, null_prompt) = if variant == Variant::Plain {
            (None, None)
        } else {
            let mut prng = Rng::seed(derive_seed(seed, &[tag::INIT_PROMPT]));
            let enc = PromptEncoder::new(&mut prng, d, cfg.patch, cfg.resolution, cfg.n_adapter);
            let null = gaussian_param(&mut prng, &[2 * cfg.n_adapter, d], WEIGHT_STD);
            (Some(enc), Some(null))
        };

        let adapter = if variant == Variant::Adapter {
            let mut arng = Rng::seed(derive_seed(seed, &[tag::INIT_ADAPTER]));
            (0..cfg.blocks)
                .map(|_| {
                    let k_prime = gaussian_param(&mut arng, &[d, d], WEIGHT_STD);
                    let v_prime = Tensor::param(vec![F::zero(); d * d], &[d, d]);
                    (k_prime, v_prime)
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut model = Model {
            cfg,
            variant,
            alpha: 1.0,
            patch_embed,
            time_fc1,
            time_fc2,
            blocks,
            final_adaln,
            final_proj,
            segment_table,
            text_table,
            pos_sentinel,
            grid_pos,
            prompt,
            null_prompt,
            adapter,
        };
        if model.cfg.lora_rank > 0 {
            let rank = model.cfg.lora_rank;
            let mut lrng = Rng::seed(derive_seed(seed, &[tag::INIT_LORA]));
            for b in model.blocks.iter_mut() {
                for lin in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                    lin.lora = Some(Lora::new(&mut lrng, d, d, rank, LORA_SCALE));
                }
            }
        }
        Ok(model)
    }

    /// Timestep embedding `[1, d]`: sinusoidal features through a two-layer
    /// MLP. Blocks apply their own GELU before modulation.
    pub fn time_embedding(&self, t: f64) -> Tensor<F> {
        let feats = Tensor::new(timestep_features::<F>(t, self.cfg.d_model), &[1, self.cfg.d_model]);
        self.time_fc2.forward(&self.time_fc1.forward(&feats).gelu())
    }

    fn segment_row(&self, s: Segment) -> Tensor<F> {
        self.segment_table.slice(0, s as usize, 1)
    }

    /// Positional rows applied to spatial tokens, one per patch. The noisy
    /// and condition segments both receive exactly these rows, which is
    /// what lets attention align each noisy token with its clean
    /// counterpart; the text row gets `pos_sentinel` instead.
    pub fn grid_positions(&self) -> &Tensor<F> {
        &self.grid_pos
    }

    /// Embed clean source patches into condition tokens. The sampler feeds
    /// the same payload every step, so these rows stay constant along a
    /// trajectory.
    pub fn embed_condition(&self, source: &Tensor<F>) -> Tensor<F> {
        self.patch_embed
            .forward(source)
            .add(&self.grid_pos)
            .add_row(&self.segment_row(Segment::Cond))
    }

    /// Predict velocity for the noisy rows.
    ///
    /// `noisy` and `source` are raw patch payloads `[n_patches, patch_dim]`;
    /// `instruction_id` indexes the text table (the trailing row is the
    /// empty instruction); `c_v` carries prompt tokens `[2 * n_adapter, d]`
    /// when the variant uses them. Output is `[n_patches, patch_dim]`.
    pub fn forward_sequence(
        &self,
        noisy: &Tensor<F>,
        source: &Tensor<F>,
        instruction_id: usize,
        c_v: Option<&Tensor<F>>,
        t: f64,
    ) -> Tensor<F> {
        let n = self.cfg.n_patches();
        let pd = self.cfg.patch_dim();
        let d = self.cfg.d_model;
        assert!(noisy.rows() > 0, "noisy segment is empty");
        assert_eq!(noisy.shape(), &[n, pd], "noisy payload shape");
        assert_eq!(source.shape(), &[n, pd], "source payload shape");
        assert!(
            instruction_id < self.text_table.rows(),
            "instruction id {instruction_id} out of range"
        );

        let z = self
            .patch_embed
            .forward(noisy)
            .add(&self.grid_pos)
            .add_row(&self.segment_row(Segment::Noisy));
        let cond = self.embed_condition(source);
        let text = self
            .text_table
            .slice(0, instruction_id, 1)
            .add(&self.pos_sentinel)
            .add_row(&self.segment_row(Segment::Text));

        let mut parts = vec![z, cond, text];
        if self.variant == Variant::Concat {
            if let Some(cv) = c_v {
                assert_eq!(cv.cols(), d, "prompt token width");
                parts.push(
                    cv.add_row(&self.pos_sentinel.reshape(&[d]))
                        .add_row(&self.segment_row(Segment::Prompt)),
                );
            }
        }
        let mut x = Tensor::concat(&parts, 0);

        let t_emb = self.time_embedding(t);
        let use_adapter = self.variant == Variant::Adapter && self.alpha != 0.0;
        for (i, b) in self.blocks.iter().enumerate() {
            let ctx = if use_adapter {
                c_v.map(|cv| AdapterCtx {
                    c_v: cv,
                    k_prime: &self.adapter[i].0,
                    v_prime: &self.adapter[i].1,
                    alpha: self.alpha,
                })
            } else {
                None
            };
            x = b.forward(&x, &t_emb, ctx);
        }

        let m = self.final_adaln.forward(&t_emb.gelu());
        let h = x
            .layer_norm()
            .mul_row(&m.slice(1, d, d).add_scalar(F::one()))
            .add_row(&m.slice(1, 0, d));
        self.final_proj.forward(&h).slice(0, 0, n)
    }

    /// Encode a prompt pair with this model's encoder.
    pub fn encode_prompt(&self, source: &Image, target: &Image) -> Result<Tensor<F>> {
        match &self.prompt {
            Some(enc) => enc.encode_pair(source, target),
            None => Err(Error::Config(format!(
                "variant '{}' has no prompt encoder",
                self.variant
            ))),
        }
    }

    /// Learned stand-in tokens for a dropped prompt pair.
    pub fn null_prompt_tokens(&self) -> Result<Tensor<F>> {
        self.null_prompt
            .clone()
            .ok_or_else(|| Error::Config(format!("variant '{}' has no prompt path", self.variant)))
    }

    /// All named parameters in a stable order. Names are dotted paths;
    /// LoRA factors live under their wrapped projection.
    pub fn params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out: Vec<(String, Tensor<F>)> = Vec::new();
        let lin = |out: &mut Vec<(String, Tensor<F>)>, name: String, l: &Linear<F>| {
            out.push((format!("{name}.weight"), l.weight.clone()));
            out.push((format!("{name}.bias"), l.bias.clone()));
            if let Some(lora) = &l.lora {
                out.push((format!("{name}.lora.down"), lora.down.clone()));
                out.push((format!("{name}.lora.up"), lora.up.clone()));
            }
        };
        lin(&mut out, "patch_embed".into(), &self.patch_embed);
        lin(&mut out, "time.fc1".into(), &self.time_fc1);
        lin(&mut out, "time.fc2".into(), &self.time_fc2);
        for (i, b) in self.blocks.iter().enumerate() {
            lin(&mut out, format!("block{i}.attn.q"), &b.q);
            lin(&mut out, format!("block{i}.attn.k"), &b.k);
            lin(&mut out, format!("block{i}.attn.v"), &b.v);
            lin(&mut out, format!("block{i}.attn.o"), &b.o);
            lin(&mut out, format!("block{i}.mlp.fc1"), &b.fc1);
            lin(&mut out, format!("block{i}.mlp.fc2"), &b.fc2);
            lin(&mut out, format!("block{i}.adaln"), &b.adaln);
        }
        lin(&mut out, "final.adaln".into(), &self.final_adaln);
        lin(&mut out, "final.proj".into(), &self.final_proj);
        out.push(("segment.table".into(), self.segment_table.clone()));
        out.push(("text.table".into(), self.text_table.clone()));
        out.push(("pos.sentinel".into(), self.pos_sentinel.clone()));
        if let Some(enc) = &self.prompt {
            out.extend(enc.params());
        }
        if let Some(null) = &self.null_prompt {
            out.push(("prompt.null".into(), null.clone()));
        }
        for (i, (k, v)) in self.adapter.iter().enumerate() {
            out.push((format!("adapter.block{i}.k_prime"), k.clone()));
            out.push((format!("adapter.block{i}.v_prime"), v.clone()));
        }
        out
    }

    /// Look up one parameter by its dotted name.
    pub fn param(&self, name: &str) -> Option<Tensor<F>> {
        self.params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fold every LoRA update into its wrapped weight and drop the factors.
    pub fn merge_lora(&mut self) {
        for b in self.blocks.iter_mut() {
            for lin in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                lin.merge_lora();
            }
        }
    }
}
