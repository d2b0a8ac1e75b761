//! Descendant models: one pool path materialized as a standalone network,
//! with cost accounting, budget-driven path selection, and evaluation.
//!
//! Assembly copies weights out of the pool, so editing a descendant never
//! mutates its source. Accounting works on configurations alone and agrees
//! exactly with the parameter count of a materialized model.

use crate::checkpoint::{Archive, Manifest, ManifestKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pool::{enumerate_paths, validate_rows, LearngenePool, Path, PathMode, PathVars};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::vit::{
    block_flops, block_param_count, embed_flops, embed_param_count, head_flops, head_param_count,
    patchify, stitch_flops, stitch_param_count, BlockParams, BlockVars, EmbedVars, HeadParams,
    HeadVars, ModelConfig, PatchEmbed,
};
use serde::{Deserialize, Serialize};

/// One path through a pool, flattened into an ordinary feed-forward model.
#[derive(Clone, Debug)]
pub struct DescendantModel<F> {
    pub path: Path,
    pub low_config: ModelConfig,
    pub high_config: ModelConfig,
    pub embed: PatchEmbed<F>,
    pub low_blocks: Vec<BlockParams<F>>,
    /// Weight and bias, present iff the path crosses the stitch.
    pub stitch: Option<(Tensor<F>, Tensor<F>)>,
    pub high_blocks: Vec<BlockParams<F>>,
    pub head: HeadParams<F>,
    /// Fingerprint of the pool this was assembled from.
    pub pool_checksum: u64,
}

impl<F: Real> DescendantModel<F> {
    /// Copies the path's weights out of the pool. The stitch must be
    /// initialized if the path crosses it.
    pub fn assemble(pool: &LearngenePool<F>, path: Path) -> Result<Self> {
        let l = pool.depth();
        path.validate(l)?;
        let stitch = if path.uses_stitch(l) {
            let st = &pool.stitches[path.k - 1];
            if st.init.is_none() {
                return Err(Error::invalid(
                    "descendant",
                    format!("path {} needs stitch {}, which is uninitialized", path.id(), path.k),
                ));
            }
            Some((st.weight.clone(), st.bias.clone()))
        } else {
            None
        };
        let embed = if path.k >= 1 {
            pool.low_embed.clone()
        } else {
            pool.high_embed.clone()
        };
        let head = if path.m <= l {
            pool.high_head.clone()
        } else {
            pool.low_head.clone()
        };
        Ok(DescendantModel {
            path,
            low_config: pool.low_config.clone(),
            high_config: pool.high_config.clone(),
            embed,
            low_blocks: pool.low_row[..path.k].iter().map(|i| i.params.clone()).collect(),
            stitch,
            high_blocks: pool.high_row[path.m - 1..].iter().map(|i| i.params.clone()).collect(),
            head,
            pool_checksum: pool.fingerprint(),
        })
    }

    pub fn pool_depth(&self) -> usize {
        self.low_config.depth
    }

    pub fn depth(&self) -> usize {
        self.path.depth(self.pool_depth())
    }

    fn embed_is_low(&self) -> bool {
        self.path.k >= 1
    }

    fn head_is_high(&self) -> bool {
        self.path.m <= self.pool_depth()
    }

    /// Parameters in serialization order; block names keep their pool row
    /// indices for provenance.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = self.embed.named("embed");
        for (i, b) in self.low_blocks.iter().enumerate() {
            out.extend(b.named(&format!("low.block.{i}")));
        }
        if let Some((w, b)) = &self.stitch {
            out.push((format!("stitch.{}.weight", self.path.k), w));
            out.push((format!("stitch.{}.bias", self.path.k), b));
        }
        for (i, b) in self.high_blocks.iter().enumerate() {
            out.extend(b.named(&format!("high.block.{}", self.path.m - 1 + i)));
        }
        out.extend(self.head.named("head"));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = self.embed.named_mut("embed");
        for (i, b) in self.low_blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("low.block.{i}")));
        }
        if let Some((w, b)) = &mut self.stitch {
            out.push((format!("stitch.{}.weight", self.path.k), w));
            out.push((format!("stitch.{}.bias", self.path.k), b));
        }
        for (i, b) in self.high_blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("high.block.{}", self.path.m - 1 + i)));
        }
        out.extend(self.head.named_mut("head"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds all weights onto a tape in path layout.
    pub fn bind(&self, tape: &Tape<F>, trainable: bool) -> Result<PathVars<F>> {
        let stitch = match &self.stitch {
            Some((w, b)) => Some((
                tape.leaf(w.clone(), trainable)?,
                tape.leaf(b.clone(), trainable)?,
            )),
            None => None,
        };
        Ok(PathVars {
            path: self.path,
            low_heads: self.low_config.num_heads,
            high_heads: self.high_config.num_heads,
            embed_is_low: self.embed_is_low(),
            head_is_high: self.head_is_high(),
            embed: EmbedVars::bind(&self.embed, tape, trainable)?,
            low_blocks: self
                .low_blocks
                .iter()
                .map(|b| BlockVars::bind(b, tape, trainable))
                .collect::<Result<Vec<_>>>()?,
            stitch,
            high_blocks: self
                .high_blocks
                .iter()
                .map(|b| BlockVars::bind(b, tape, trainable))
                .collect::<Result<Vec<_>>>()?,
            head: HeadVars::bind(&self.head, tape, trainable)?,
        })
    }

    /// Logits for pre-patchified inputs, off the training tape.
    pub fn logits(&self, patches: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::<F>::eval();
        let x = tape.constant(patches.clone())?;
        let pv = self.bind(&tape, false)?;
        Ok(crate::pool::path_forward(&x, &pv)?.value())
    }
}

// ── accounting ──────────────────────────────────────────────────────

/// Multiply-accumulate and parameter cost of one path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
}

/// Closed-form cost of a path over two row configurations; no weights are
/// materialized. Agrees exactly with `param_count` of the assembled model.
pub fn account(low: &ModelConfig, high: &ModelConfig, path: &Path) -> Result<CostReport> {
    validate_rows(low, high)?;
    let l = low.depth;
    path.validate(l)?;
    let tokens = low.num_tokens();
    let embed_cfg = if path.k >= 1 { low } else { high };
    let head_d = if path.m <= l { high.embed_dim } else { low.embed_dim };
    let high_count = (l + 1 - path.m) as u64;

    let mut params = embed_param_count(embed_cfg) as u64
        + path.k as u64 * block_param_count(low.embed_dim, low.mlp_ratio) as u64
        + high_count * block_param_count(high.embed_dim, high.mlp_ratio) as u64
        + head_param_count(head_d, low.num_classes) as u64;
    let mut flops = embed_flops(embed_cfg)
        + path.k as u64 * block_flops(tokens, low.embed_dim, low.mlp_ratio)
        + high_count * block_flops(tokens, high.embed_dim, high.mlp_ratio)
        + head_flops(head_d, low.num_classes);
    if path.uses_stitch(l) {
        params += stitch_param_count(low.embed_dim, high.embed_dim) as u64;
        flops += stitch_flops(tokens, low.embed_dim, high.embed_dim);
    }
    Ok(CostReport { params, flops })
}

/// Resource ceiling for path selection. At least one bound must be present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_params: Option<u64>,
    pub max_flops: Option<u64>,
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if self.max_params.is_none() && self.max_flops.is_none() {
            return Err(Error::invalid("budget", "no bound given"));
        }
        Ok(())
    }

    pub fn admits(&self, cost: &CostReport) -> bool {
        self.max_params.map_or(true, |b| cost.params <= b)
            && self.max_flops.map_or(true, |b| cost.flops <= b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathCost {
    pub path: Path,
    pub cost: CostReport,
}

/// Feasible paths ranked largest first. When nothing fits, `fallback` names
/// the cheapest path so the caller can report the gap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BudgetPlan {
    pub feasible: Vec<PathCost>,
    pub fallback: Option<PathCost>,
}

/// Ranks every path under the budget by parameter count, descending; ties
/// prefer stitch-free paths, then smaller low prefixes.
pub fn plan_under_budget(
    low: &ModelConfig,
    high: &ModelConfig,
    budget: &Budget,
    mode: PathMode,
) -> Result<BudgetPlan> {
    budget.validate()?;
    validate_rows(low, high)?;
    let l = low.depth;
    let costed = enumerate_paths(l, mode)
        .into_iter()
        .map(|path| Ok(PathCost { path, cost: account(low, high, &path)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut feasible: Vec<PathCost> =
        costed.iter().copied().filter(|pc| budget.admits(&pc.cost)).collect();
    feasible.sort_by(|a, b| {
        b.cost
            .params
            .cmp(&a.cost.params)
            .then_with(|| a.path.uses_stitch(l).cmp(&b.path.uses_stitch(l)))
            .then_with(|| a.path.k.cmp(&b.path.k))
    });
    let fallback = if feasible.is_empty() {
        costed
            .into_iter()
            .min_by(|a, b| {
                a.cost
                    .params
                    .cmp(&b.cost.params)
                    .then_with(|| a.cost.flops.cmp(&b.cost.flops))
                    .then_with(|| a.path.k.cmp(&b.path.k))
            })
    } else {
        None
    };
    Ok(BudgetPlan { feasible, fallback })
}

// ── evaluation ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Fraction of argmax-correct predictions; ties resolve to the first
    /// class index.
    pub accuracy: f64,
    /// Mean cross-entropy of the true label.
    pub mean_loss: f64,
    pub samples: usize,
}

/// Deterministic full-dataset evaluation in fixed batches.
pub fn evaluate<F: Real>(
    model: &DescendantModel<F>,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("evaluate", "batch size must be positive"));
    }
    let cfg = &model.low_config;
    if data.channels != cfg.in_channels
        || data.height != cfg.image_size
        || data.width != cfg.image_size
        || data.num_classes as usize != cfg.num_classes
    {
        return Err(Error::invalid("evaluate", "dataset does not match model geometry"));
    }
    let classes = cfg.num_classes;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for rows in indices.chunks(batch_size) {
        let (images, labels) = data.batch::<F>(rows)?;
        let patches = patchify(&images, cfg)?;
        let logits = model.logits(&patches)?;
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            let mut best = 0usize;
            let mut max = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > max {
                    max = v;
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
            let lse: f64 = row
                .iter()
                .map(|&v| (v - max).into_f64().exp())
                .sum::<f64>()
                .ln()
                + max.into_f64();
            loss_sum += lse - row[label].into_f64();
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss_sum / data.len() as f64,
        samples: data.len(),
    })
}

// ── serialization ───────────────────────────────────────────────────

const CHECKSUM_KEY: &str = "pool_checksum";

/// Serializes the descendant with its path and pool fingerprint.
pub fn descendant_to_archive(model: &DescendantModel<f32>, seed: u64) -> Result<Archive> {
    let mut manifest = Manifest::new(
        ManifestKind::Descendant {
            low: model.low_config.clone(),
            high: model.high_config.clone(),
            path_k: model.path.k,
            path_m: model.path.m,
        },
        seed,
    );
    manifest
        .metadata
        .insert(CHECKSUM_KEY.into(), format!("{:016x}", model.pool_checksum));
    let mut ar = Archive::new(manifest);
    for (name, t) in model.named_params() {
        ar.push(name, t.clone())?;
    }
    Ok(ar)
}

/// Rebuilds a descendant, validating every tensor shape by name.
pub fn descendant_from_archive(ar: &Archive) -> Result<DescendantModel<f32>> {
    let (low, high, path) = match &ar.manifest.kind {
        ManifestKind::Descendant { low, high, path_k, path_m } => {
            (low.clone(), high.clone(), Path { k: *path_k, m: *path_m })
        }
        _ => return Err(Error::invalid("archive", "expected a descendant archive")),
    };
    let pool_checksum = match ar.manifest.metadata.get(CHECKSUM_KEY) {
        Some(s) => u64::from_str_radix(s, 16)
            .map_err(|_| Error::invalid(CHECKSUM_KEY, format!("not a hex checksum: {s:?}")))?,
        None => 0,
    };
    validate_rows(&low, &high)?;
    path.validate(low.depth)?;
    // shape skeleton, then overwrite every slot from the archive
    let aux_low = crate::vit::VitModel::<f32>::init(low, 0)?;
    let aux_high = crate::vit::VitModel::<f32>::init(high, 0)?;
    let mut pool = LearngenePool::build(&aux_low, &aux_high)?;
    for st in &mut pool.stitches {
        st.init = Some(crate::pool::StitchInit::Random);
    }
    let mut model = DescendantModel::assemble(&pool, path)?;
    for (name, slot) in model.named_params_mut() {
        *slot = ar.tensor_expect(&name, slot.shape())?.clone();
    }
    model.pool_checksum = pool_checksum;
    Ok(model)
}
