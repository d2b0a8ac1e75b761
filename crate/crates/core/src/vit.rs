//! Vision transformer built on the tape: patch embedding with a class token,
//! pre-norm attention/MLP blocks, and a linear head on the class token.
//!
//! Forward passes for embedding, blocks, head, and stitch layers are free
//! functions over bound variables. Model, pool path, and descendant walks all
//! call the same functions, which is what makes "assembled descendant equals
//! pool path" an exact bitwise statement rather than an approximation.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Layer norm epsilon, shared by every normalization in the stack.
pub const LN_EPS: f64 = 1e-6;
/// Gaussian init scale for projection weights and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Architecture of one transformer. Square images, square patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid("config", format!("{} must be positive", name)));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(
                "config",
                format!(
                    "patch size {} does not divide image size {}",
                    self.patch_size, self.image_size
                ),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(
                "config",
                format!(
                    "{} heads do not divide embed dim {}",
                    self.num_heads, self.embed_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// Same architecture at a different depth.
    pub fn with_depth(&self, depth: usize) -> Self {
        ModelConfig { depth, ..self.clone() }
    }

    /// Same architecture at a different width. Head count must be adjusted by
    /// the caller when the default no longer divides.
    pub fn with_width(&self, embed_dim: usize, num_heads: usize) -> Self {
        ModelConfig {
            embed_dim,
            num_heads,
            ..self.clone()
        }
    }
}

/// Desk-scale profile used by the integration tests and examples: 32x32
/// images, 65 tokens, width 64.
pub fn mini_ancestry() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 4,
        in_channels: 3,
        embed_dim: 64,
        depth: 6,
        num_heads: 4,
        mlp_ratio: 4,
        num_classes: 10,
    }
}

/// Full-scale profile matching the published configuration: 224x224 images,
/// 197 tokens, width 768, depth 12. Used for accounting, not training.
pub fn base_ancestry() -> ModelConfig {
    ModelConfig {
        image_size: 224,
        patch_size: 16,
        in_channels: 3,
        embed_dim: 768,
        depth: 12,
        num_heads: 12,
        mlp_ratio: 4,
        num_classes: 1000,
    }
}

// ── parameters ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PatchEmbed<F> {
    /// `[patch_dim, d]`, applied to flattened patches.
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    /// `[1, tokens, d]`, learned position table including the class slot.
    pub pos: Tensor<F>,
    /// `[1, 1, d]` class token.
    pub cls: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct BlockParams<F> {
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    /// Keys carry no bias: softmax rows are invariant to a uniform score
    /// shift, so a key bias could never receive gradient.
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct HeadParams<F> {
    pub ln_gamma: Tensor<F>,
    pub ln_beta: Tensor<F>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct VitModel<F> {
    pub config: ModelConfig,
    pub embed: PatchEmbed<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub head: HeadParams<F>,
}

impl<F: Real> PatchEmbed<F> {
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
            (format!("{prefix}.pos"), &self.pos),
            (format!("{prefix}.cls"), &self.cls),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
            (format!("{prefix}.pos"), &mut self.pos),
            (format!("{prefix}.cls"), &mut self.cls),
        ]
    }
}

impl<F: Real> HeadParams<F> {
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        vec![
            (format!("{prefix}.ln.gamma"), &self.ln_gamma),
            (format!("{prefix}.ln.beta"), &self.ln_beta),
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{prefix}.ln.gamma"), &mut self.ln_gamma),
            (format!("{prefix}.ln.beta"), &mut self.ln_beta),
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }
}

impl<F: Real> BlockParams<F> {
    pub fn init(d: usize, mlp: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            ln1_gamma: Tensor::full(&[d], F::one()),
            ln1_beta: Tensor::zeros(&[d]),
            wq: Tensor::randn(rng, &[d, d], INIT_STD),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(rng, &[d, d], INIT_STD),
            wv: Tensor::randn(rng, &[d, d], INIT_STD),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(rng, &[d, d], INIT_STD),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], F::one()),
            ln2_beta: Tensor::zeros(&[d]),
            w1: Tensor::randn(rng, &[d, mlp], INIT_STD),
            b1: Tensor::zeros(&[mlp]),
            w2: Tensor::randn(rng, &[mlp, d], INIT_STD),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        vec![
            (format!("{prefix}.ln1.gamma"), &self.ln1_gamma),
            (format!("{prefix}.ln1.beta"), &self.ln1_beta),
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.bq"), &self.bq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.bv"), &self.bv),
            (format!("{prefix}.wo"), &self.wo),
            (format!("{prefix}.bo"), &self.bo),
            (format!("{prefix}.ln2.gamma"), &self.ln2_gamma),
            (format!("{prefix}.ln2.beta"), &self.ln2_beta),
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{prefix}.ln1.gamma"), &mut self.ln1_gamma),
            (format!("{prefix}.ln1.beta"), &mut self.ln1_beta),
            (format!("{prefix}.wq"), &mut self.wq),
            (format!("{prefix}.bq"), &mut self.bq),
            (format!("{prefix}.wk"), &mut self.wk),
            (format!("{prefix}.wv"), &mut self.wv),
            (format!("{prefix}.bv"), &mut self.bv),
            (format!("{prefix}.wo"), &mut self.wo),
            (format!("{prefix}.bo"), &mut self.bo),
            (format!("{prefix}.ln2.gamma"), &mut self.ln2_gamma),
            (format!("{prefix}.ln2.beta"), &mut self.ln2_beta),
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.b1"), &mut self.b1),
            (format!("{prefix}.w2"), &mut self.w2),
            (format!("{prefix}.b2"), &mut self.b2),
        ]
    }
}

impl<F: Real> VitModel<F> {
    /// Fresh model with seed-deterministic Gaussian projections, zero biases,
    /// unit norms.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let embed = PatchEmbed {
            weight: Tensor::randn(&mut rng, &[config.patch_dim(), d], INIT_STD),
            bias: Tensor::zeros(&[d]),
            pos: Tensor::randn(&mut rng, &[1, config.num_tokens(), d], INIT_STD),
            cls: Tensor::randn(&mut rng, &[1, 1, d], INIT_STD),
        };
        let blocks = (0..config.depth)
            .map(|_| BlockParams::init(d, config.mlp_dim(), &mut rng))
            .collect();
        let head = HeadParams {
            ln_gamma: Tensor::full(&[d], F::one()),
            ln_beta: Tensor::zeros(&[d]),
            weight: Tensor::randn(&mut rng, &[d, config.num_classes], INIT_STD),
            bias: Tensor::zeros(&[config.num_classes]),
        };
        Ok(VitModel {
            config,
            embed,
            blocks,
            head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = self.embed.named("embed");
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("block.{i}")));
        }
        out.extend(self.head.named("head"));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = self.embed.named_mut("embed");
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("block.{i}")));
        }
        out.extend(self.head.named_mut("head"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &Tape<F>, trainable: bool) -> Result<VitVars<F>> {
        Ok(VitVars {
            config: self.config.clone(),
            embed: EmbedVars::bind(&self.embed, tape, trainable)?,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars::bind(b, tape, trainable))
                .collect::<Result<Vec<_>>>()?,
            head: HeadVars::bind(&self.head, tape, trainable)?,
        })
    }

    /// Logits for pre-patchified inputs, off the training tape.
    pub fn logits(&self, patches: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::eval();
        let vars = self.bind(&tape, false)?;
        let x = tape.constant(patches.clone())?;
        let (logits, _) = model_forward(&x, &vars)?;
        Ok(logits.value())
    }
}

// ── bound variables ─────────────────────────────────────────────────

#[derive(Clone)]
pub struct EmbedVars<F: Real> {
    pub weight: Var<F>,
    pub bias: Var<F>,
    pub pos: Var<F>,
    pub cls: Var<F>,
}

#[derive(Clone)]
pub struct BlockVars<F: Real> {
    pub ln1_gamma: Var<F>,
    pub ln1_beta: Var<F>,
    pub wq: Var<F>,
    pub bq: Var<F>,
    pub wk: Var<F>,
    pub wv: Var<F>,
    pub bv: Var<F>,
    pub wo: Var<F>,
    pub bo: Var<F>,
    pub ln2_gamma: Var<F>,
    pub ln2_beta: Var<F>,
    pub w1: Var<F>,
    pub b1: Var<F>,
    pub w2: Var<F>,
    pub b2: Var<F>,
}

#[derive(Clone)]
pub struct HeadVars<F: Real> {
    pub ln_gamma: Var<F>,
    pub ln_beta: Var<F>,
    pub weight: Var<F>,
    pub bias: Var<F>,
}

pub struct VitVars<F: Real> {
    pub config: ModelConfig,
    pub embed: EmbedVars<F>,
    pub blocks: Vec<BlockVars<F>>,
    pub head: HeadVars<F>,
}

impl<F: Real> EmbedVars<F> {
    pub fn bind(p: &PatchEmbed<F>, tape: &Tape<F>, trainable: bool) -> Result<Self> {
        Ok(EmbedVars {
            weight: tape.leaf(p.weight.clone(), trainable)?,
            bias: tape.leaf(p.bias.clone(), trainable)?,
            pos: tape.leaf(p.pos.clone(), trainable)?,
            cls: tape.leaf(p.cls.clone(), trainable)?,
        })
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var<F>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
            (format!("{prefix}.pos"), self.pos.clone()),
            (format!("{prefix}.cls"), self.cls.clone()),
        ]
    }
}

impl<F: Real> HeadVars<F> {
    pub fn bind(p: &HeadParams<F>, tape: &Tape<F>, trainable: bool) -> Result<Self> {
        Ok(HeadVars {
            ln_gamma: tape.leaf(p.ln_gamma.clone(), trainable)?,
            ln_beta: tape.leaf(p.ln_beta.clone(), trainable)?,
            weight: tape.leaf(p.weight.clone(), trainable)?,
            bias: tape.leaf(p.bias.clone(), trainable)?,
        })
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var<F>)> {
        vec![
            (format!("{prefix}.ln.gamma"), self.ln_gamma.clone()),
            (format!("{prefix}.ln.beta"), self.ln_beta.clone()),
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

impl<F: Real> BlockVars<F> {
    pub fn bind(p: &BlockParams<F>, tape: &Tape<F>, trainable: bool) -> Result<Self> {
        Ok(BlockVars {
            ln1_gamma: tape.leaf(p.ln1_gamma.clone(), trainable)?,
            ln1_beta: tape.leaf(p.ln1_beta.clone(), trainable)?,
            wq: tape.leaf(p.wq.clone(), trainable)?,
            bq: tape.leaf(p.bq.clone(), trainable)?,
            wk: tape.leaf(p.wk.clone(), trainable)?,
            wv: tape.leaf(p.wv.clone(), trainable)?,
            bv: tape.leaf(p.bv.clone(), trainable)?,
            wo: tape.leaf(p.wo.clone(), trainable)?,
            bo: tape.leaf(p.bo.clone(), trainable)?,
            ln2_gamma: tape.leaf(p.ln2_gamma.clone(), trainable)?,
            ln2_beta: tape.leaf(p.ln2_beta.clone(), trainable)?,
            w1: tape.leaf(p.w1.clone(), trainable)?,
            b1: tape.leaf(p.b1.clone(), trainable)?,
            w2: tape.leaf(p.w2.clone(), trainable)?,
            b2: tape.leaf(p.b2.clone(), trainable)?,
        })
    }

    pub fn vars_in_order(&self) -> Vec<&Var<F>> {
        vec![
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    /// Names aligned with [`BlockParams::named`] under the same prefix.
    pub fn named(&self, prefix: &str) -> Vec<(String, Var<F>)> {
        const LABELS: [&str; 15] = [
            "ln1.gamma", "ln1.beta", "wq", "bq", "wk", "wv", "bv", "wo", "bo",
            "ln2.gamma", "ln2.beta", "w1", "b1", "w2", "b2",
        ];
        LABELS
            .iter()
            .zip(self.vars_in_order())
            .map(|(label, var)| (format!("{prefix}.{label}"), var.clone()))
            .collect()
    }
}

impl<F: Real> VitVars<F> {
    /// Variables aligned with [`VitModel::named_params`] order.
    pub fn named_vars(&self) -> Vec<(String, Var<F>)> {
        let mut out = self.embed.named("embed");
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("block.{i}")));
        }
        out.extend(self.head.named("head"));
        out
    }
}

// ── forward ─────────────────────────────────────────────────────────

/// Patch projection, class token, position table: `[B, Np, patch_dim]` to
/// `[B, N, d]`.
pub fn embed_forward<F: Real>(x: &Var<F>, e: &EmbedVars<F>) -> Result<Var<F>> {
    let batch = x.shape()[0];
    let tokens = x.matmul(&e.weight)?.add_bias_row(&e.bias)?;
    let cls = e.cls.repeat_first(batch)?;
    let with_cls = cls.concat(&tokens, 1)?;
    let pos = e.pos.repeat_first(batch)?;
    with_cls.add(&pos)
}

/// One pre-norm block. Returns `(attention_output, block_output)`: the first
/// is the attention branch after output projection and before the residual
/// add, the second is the full block output. Both are the taps distillation
/// matches against.
pub fn block_forward<F: Real>(x: &Var<F>, b: &BlockVars<F>, num_heads: usize) -> Result<(Var<F>, Var<F>)> {
    let shape = x.shape();
    let (batch, n, d) = (shape[0], shape[1], shape[2]);
    if d % num_heads != 0 {
        return Err(Error::invalid(
            "block_forward",
            format!("{num_heads} heads do not divide width {d}"),
        ));
    }
    let dh = d / num_heads;

    let h = x.layer_norm(&b.ln1_gamma, &b.ln1_beta, LN_EPS)?;
    let heads = |y: Var<F>| -> Result<Var<F>> {
        y.reshape(vec![batch, n, num_heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![batch * num_heads, n, dh])
    };
    let q = heads(h.matmul(&b.wq)?.add_bias_row(&b.bq)?)?;
    let k = heads(h.matmul(&b.wk)?)?;
    let v = heads(h.matmul(&b.wv)?.add_bias_row(&b.bv)?)?;

    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let attn = q.matmul_nt(&k)?.scale(scale)?.softmax()?;
    let ctx = attn
        .matmul(&v)?
        .reshape(vec![batch, num_heads, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![batch, n, d])?;
    let attn_out = ctx.matmul(&b.wo)?.add_bias_row(&b.bo)?;

    let x1 = x.add(&attn_out)?;
    let h2 = x1.layer_norm(&b.ln2_gamma, &b.ln2_beta, LN_EPS)?;
    let m = h2
        .matmul(&b.w1)?
        .add_bias_row(&b.b1)?
        .gelu()?
        .matmul(&b.w2)?
        .add_bias_row(&b.b2)?;
    let out = x1.add(&m)?;
    Ok((attn_out, out))
}

/// Final norm and linear classifier on the class token.
pub fn head_forward<F: Real>(x: &Var<F>, h: &HeadVars<F>) -> Result<Var<F>> {
    let shape = x.shape();
    let (batch, d) = (shape[0], shape[2]);
    let normed = x.layer_norm(&h.ln_gamma, &h.ln_beta, LN_EPS)?;
    let cls = normed.narrow(1, 0, 1)?.reshape(vec![batch, d])?;
    cls.matmul(&h.weight)?.add_bias_row(&h.bias)
}

/// Tokenwise width adapter between rows of different dimension.
pub fn stitch_forward<F: Real>(x: &Var<F>, weight: &Var<F>, bias: &Var<F>) -> Result<Var<F>> {
    x.matmul(weight)?.add_bias_row(bias)
}

/// Intermediate activations recorded during a forward pass, indexed by block
/// position (0-based).
pub struct TapRecord<F: Real> {
    /// Attention branch output of each block, pre-residual.
    pub attn: Vec<Var<F>>,
    /// Output of each block.
    pub block: Vec<Var<F>>,
}

/// Full forward returning logits and per-block taps.
pub fn model_forward<F: Real>(patches: &Var<F>, m: &VitVars<F>) -> Result<(Var<F>, TapRecord<F>)> {
    let mut x = embed_forward(patches, &m.embed)?;
    let mut taps = TapRecord {
        attn: Vec::with_capacity(m.blocks.len()),
        block: Vec::with_capacity(m.blocks.len()),
    };
    for b in &m.blocks {
        let (a, out) = block_forward(&x, b, m.config.num_heads)?;
        taps.attn.push(a);
        taps.block.push(out.clone());
        x = out;
    }
    let logits = head_forward(&x, &m.head)?;
    Ok((logits, taps))
}

/// Flattens `[B, C, H, W]` images into `[B, Np, C*P*P]` patch rows. Patches
/// scan left-to-right, top-to-bottom; within a patch the layout is channel,
/// then row, then column, matching the embedding weight layout.
pub fn patchify<F: Real>(images: &Tensor<F>, cfg: &ModelConfig) -> Result<Tensor<F>> {
    let expect = [
        images.shape().first().copied().unwrap_or(0),
        cfg.in_channels,
        cfg.image_size,
        cfg.image_size,
    ];
    if images.rank() != 4 || images.shape()[1..] != expect[1..] {
        return Err(Error::invalid(
            "patchify",
            format!("expected [B, {}, {}, {}], got {:?}", expect[1], expect[2], expect[3], images.shape()),
        ));
    }
    let b = images.shape()[0];
    let p = cfg.patch_size;
    let side = cfg.image_size / p;
    let c = cfg.in_channels;
    let hw = cfg.image_size;
    let mut out = Vec::with_capacity(b * cfg.num_patches() * cfg.patch_dim());
    for bi in 0..b {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for iy in 0..p {
                        let row = py * p + iy;
                        let base = ((bi * c + ch) * hw + row) * hw + px * p;
                        out.extend_from_slice(&images.data()[base..base + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cfg.num_patches(), cfg.patch_dim()], out)
}

// ── accounting ──────────────────────────────────────────────────────

/// Multiply-accumulate convention: one MAC counts as one FLOP; biases,
/// norms, softmax, and activations are omitted as sub-percent noise.
pub fn embed_flops(cfg: &ModelConfig) -> u64 {
    (cfg.num_patches() * cfg.patch_dim() * cfg.embed_dim) as u64
}

pub fn block_flops(tokens: usize, d: usize, mlp_ratio: usize) -> u64 {
    let n = tokens as u64;
    let d = d as u64;
    let r = mlp_ratio as u64;
    (4 + 2 * r) * n * d * d + 2 * n * n * d
}

pub fn head_flops(d: usize, classes: usize) -> u64 {
    (d * classes) as u64
}

pub fn stitch_flops(tokens: usize, d_low: usize, d_high: usize) -> u64 {
    (tokens * d_low * d_high) as u64
}

pub fn embed_param_count(cfg: &ModelConfig) -> usize {
    // projection + bias + position table + class token
    cfg.patch_dim() * cfg.embed_dim + cfg.embed_dim + cfg.num_tokens() * cfg.embed_dim + cfg.embed_dim
}

pub fn block_param_count(d: usize, mlp_ratio: usize) -> usize {
    // norms 4d, qkv+proj 4d^2+3d (keys are biasless), mlp 2rd^2+(r+1)d
    (4 + 2 * mlp_ratio) * d * d + (8 + mlp_ratio) * d
}

pub fn head_param_count(d: usize, classes: usize) -> usize {
    2 * d + d * classes + classes
}

pub fn stitch_param_count(d_low: usize, d_high: usize) -> usize {
    d_low * d_high + d_high
}

/// Closed-form parameter count of a standalone model.
pub fn model_param_count(cfg: &ModelConfig) -> usize {
    embed_param_count(cfg)
        + cfg.depth * block_param_count(cfg.embed_dim, cfg.mlp_ratio)
        + head_param_count(cfg.embed_dim, cfg.num_classes)
}

/// Closed-form forward FLOPs of a standalone model for one image.
pub fn model_flops(cfg: &ModelConfig) -> u64 {
    embed_flops(cfg)
        + cfg.depth as u64 * block_flops(cfg.num_tokens(), cfg.embed_dim, cfg.mlp_ratio)
        + head_flops(cfg.embed_dim, cfg.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_param_count_matches_tensors() {
        for cfg in [mini_ancestry(), mini_ancestry().with_width(16, 4).with_depth(3)] {
            let m = VitModel::<f32>::init(cfg.clone(), 1).unwrap();
            assert_eq!(m.param_count(), model_param_count(&cfg), "{:?}", cfg);
        }
    }

    #[test]
    fn base_profile_matches_published_sizes() {
        // 86.56M parameters, 17.6G MACs for the 12-block width-768 model.
        let cfg = base_ancestry();
        assert_eq!(model_param_count(&cfg), 86_558_440);
        assert_eq!(block_param_count(768, 4), 7_087_104);
        assert_eq!(model_flops(&cfg), 17_563_828_224);
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut cfg = mini_ancestry();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = mini_ancestry();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = mini_ancestry();
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = mini_ancestry().with_depth(2);
        let m = VitModel::<f32>::init(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let images = Tensor::<f32>::randn(&mut rng, &[2, 3, 32, 32], 1.0);
        let patches = patchify(&images, &cfg).unwrap();
        assert_eq!(patches.shape(), &[2, 64, 48]);
        let l1 = m.logits(&patches).unwrap();
        let l2 = m.logits(&patches).unwrap();
        assert_eq!(l1.shape(), &[2, 10]);
        assert_eq!(l1, l2);
    }

    #[test]
    fn taps_expose_every_block_and_head_matches_last_tap() {
        let cfg = mini_ancestry().with_depth(3);
        let m = VitModel::<f32>::init(cfg.clone(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = Tensor::<f32>::randn(&mut rng, &[1, cfg.num_patches(), cfg.patch_dim()], 1.0);

        let tape = Tape::eval();
        let vars = m.bind(&tape, false).unwrap();
        let x = tape.constant(patches).unwrap();
        let (logits, taps) = model_forward(&x, &vars).unwrap();
        assert_eq!(taps.attn.len(), 3);
        assert_eq!(taps.block.len(), 3);
        // applying the head to the last tap reproduces the logits bit for bit
        let again = head_forward(&taps.block[2], &vars.head).unwrap();
        assert_eq!(again.value(), logits.value());
    }

    #[test]
    fn patch_permutation_with_matching_pos_rows_is_invariant() {
        // Attention treats tokens as a set; only the position table orders
        // them. Swapping two patches and their position rows must not change
        // the logits beyond f64 roundoff.
        let cfg = mini_ancestry().with_depth(2);
        let mut m = VitModel::<f64>::init(cfg.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let patches = Tensor::<f64>::randn(&mut rng, &[1, cfg.num_patches(), cfg.patch_dim()], 1.0);
        let base = m.logits(&patches).unwrap();

        // swap patches 3 and 40 plus position rows 4 and 41 (offset by cls)
        let pd = cfg.patch_dim();
        let mut swapped = patches.clone();
        let (a, b) = (3, 40);
        for j in 0..pd {
            swapped.data_mut().swap(a * pd + j, b * pd + j);
        }
        let d = cfg.embed_dim;
        for j in 0..d {
            m.embed.pos.data_mut().swap((a + 1) * d + j, (b + 1) * d + j);
        }
        let permuted = m.logits(&swapped).unwrap();
        assert!(base.max_abs_diff(&permuted) < 1e-9);
    }

    #[test]
    fn named_params_align_with_bound_vars() {
        let cfg = mini_ancestry().with_depth(2);
        let m = VitModel::<f32>::init(cfg, 3).unwrap();
        let tape = Tape::new();
        let vars = m.bind(&tape, true).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let var_names: Vec<String> = vars.named_vars().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, var_names);
        for ((_, t), (_, v)) in m.named_params().iter().zip(vars.named_vars()) {
            assert_eq!(t.shape(), v.shape().as_slice());
        }
    }

    #[test]
    fn patchify_recovers_pixels_in_patch_layout() {
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 2,
            in_channels: 1,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 4,
            num_classes: 2,
        };
        let img = Tensor::<f32>::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        // patch (0,0) is rows 0-1, cols 0-1
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // patch (0,1) is rows 0-1, cols 2-3
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        // patch (1,0) is rows 2-3, cols 0-1
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }
}
