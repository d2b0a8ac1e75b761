//! Distillation of an ancestry transformer into a compact auxiliary model.
//!
//! Three terms drive the student: soft cross-entropy between temperature
//! scaled logits, block-output matching, and attention-output matching. The
//! activation terms compare through learned transformation matrices because
//! student and teacher widths differ; those matrices are trained jointly
//! with the student and are later reused to seed stitch layers.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::vit::TapRecord;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which ancestry block feeds which auxiliary block, both 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistillPlan {
    pub pairs: Vec<(usize, usize)>,
}

impl DistillPlan {
    pub fn validate(&self, anc_depth: usize, aux_depth: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("plan", "no block pairs"));
        }
        let mut prev = (0usize, 0usize);
        for &(a, x) in &self.pairs {
            if a == 0 || a > anc_depth || x == 0 || x > aux_depth {
                return Err(Error::invalid(
                    "plan",
                    format!("pair ({a},{x}) outside depths ({anc_depth},{aux_depth})"),
                ));
            }
            if a <= prev.0 || x <= prev.1 {
                return Err(Error::invalid(
                    "plan",
                    format!("pairs must be strictly increasing, got ({a},{x}) after {prev:?}"),
                ));
            }
            prev = (a, x);
        }
        Ok(())
    }
}

fn round_div(num: usize, den: usize) -> usize {
    // round half up
    (2 * num + den) / (2 * den)
}

/// Block pairing for distillation. Matching widths pair only the final
/// blocks; differing widths pair evenly spaced blocks at up to three levels
/// (fewer for very shallow students), deepest blocks always included.
/// Depths (12,6) give (4,2),(8,4),(12,6).
pub fn make_dense_plan(anc_depth: usize, aux_depth: usize, dims_match: bool) -> Result<DistillPlan> {
    if anc_depth == 0 || aux_depth == 0 || aux_depth > anc_depth {
        return Err(Error::invalid(
            "plan",
            format!("bad depths: ancestry {anc_depth}, auxiliary {aux_depth}"),
        ));
    }
    if dims_match {
        return Ok(DistillPlan { pairs: vec![(anc_depth, aux_depth)] });
    }
    let levels = aux_depth.min(3);
    let pairs = (1..=levels)
        .map(|j| {
            (
                round_div(j * anc_depth, levels),
                round_div(j * aux_depth, levels),
            )
        })
        .collect();
    let plan = DistillPlan { pairs };
    plan.validate(anc_depth, aux_depth)?;
    Ok(plan)
}

/// Checkpoint tensor name of a block transformation matrix.
pub fn tm_block_name(anc: usize, aux: usize) -> String {
    format!("W.{anc}.{aux}")
}

/// Checkpoint tensor name of an attention transformation matrix.
pub fn tm_attn_name(anc: usize, aux: usize) -> String {
    format!("M.{anc}.{aux}")
}

/// Learned maps from one ancestry block's activations to one auxiliary
/// block's: `block` aligns block outputs, `attn` aligns attention outputs.
/// Both are `[d_ancestry, d_auxiliary]`.
#[derive(Clone, Debug)]
pub struct TransformationMatrix<F> {
    pub anc_idx: usize,
    pub aux_idx: usize,
    pub block: Tensor<F>,
    pub attn: Tensor<F>,
}

impl<F: Real> TransformationMatrix<F> {
    /// Matching widths fix both maps to the identity; differing widths draw
    /// small random entries scaled by the input width.
    pub fn init(anc_idx: usize, aux_idx: usize, d_anc: usize, d_aux: usize, rng: &mut ChaCha8Rng) -> Self {
        let (block, attn) = if d_anc == d_aux {
            (Tensor::eye(d_anc), Tensor::eye(d_anc))
        } else {
            let std = 1.0 / (d_anc as f64).sqrt();
            (
                Tensor::randn(rng, &[d_anc, d_aux], std),
                Tensor::randn(rng, &[d_anc, d_aux], std),
            )
        };
        TransformationMatrix { anc_idx, aux_idx, block, attn }
    }

    /// Square maps stay pinned to the identity and never receive gradients.
    pub fn is_fixed_identity(&self) -> bool {
        self.block.shape()[0] == self.block.shape()[1]
    }
}

/// Fresh matrices for every plan pair, on a dedicated rng stream.
pub fn init_transformation_matrices<F: Real>(
    plan: &DistillPlan,
    d_anc: usize,
    d_aux: usize,
    seed: u64,
) -> Vec<TransformationMatrix<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746D_5F73_6565_6421);
    plan.pairs
        .iter()
        .map(|&(a, x)| TransformationMatrix::init(a, x, d_anc, d_aux, &mut rng))
        .collect()
}

pub struct TmVars<F: Real> {
    pub block: Var<F>,
    pub attn: Var<F>,
}

pub fn bind_tms<F: Real>(
    tms: &[TransformationMatrix<F>],
    tape: &Tape<F>,
    trainable: bool,
) -> Result<Vec<TmVars<F>>> {
    tms.iter()
        .map(|tm| {
            let rg = trainable && !tm.is_fixed_identity();
            Ok(TmVars {
                block: tape.leaf(tm.block.clone(), rg)?,
                attn: tape.leaf(tm.attn.clone(), rg)?,
            })
        })
        .collect()
}

/// Distillation mixing knobs. `alpha` weights the supervised term against
/// the distillation term; `tau` softens both logit distributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { alpha: 0.5, tau: 1.0 }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau", "must be positive and finite"));
        }
        Ok(())
    }
}

/// The three distillation terms, kept separate for tracing.
pub struct DistillLosses<F: Real> {
    pub pred: Var<F>,
    pub blk: Var<F>,
    pub att: Var<F>,
}

impl<F: Real> DistillLosses<F> {
    /// Unit-weight sum of the three terms.
    pub fn combined(&self) -> Result<Var<F>> {
        self.att.add(&self.blk)?.add(&self.pred)
    }
}

/// All distillation terms for one batch. Teacher activations come in through
/// `anc`; they are constants on the tape, so nothing here trains the teacher.
pub fn distill_losses<F: Real>(
    anc_logits: &Var<F>,
    anc_taps: &TapRecord<F>,
    aux_logits: &Var<F>,
    aux_taps: &TapRecord<F>,
    tms: &[TmVars<F>],
    plan: &DistillPlan,
    tau: F,
) -> Result<DistillLosses<F>> {
    if tms.len() != plan.pairs.len() {
        return Err(Error::invalid(
            "distill_losses",
            format!("{} matrices for {} plan pairs", tms.len(), plan.pairs.len()),
        ));
    }
    let pred = anc_logits.soft_cross_entropy(aux_logits, tau)?;

    let inv = F::from_f64(1.0 / plan.pairs.len() as f64);
    let mut blk: Option<Var<F>> = None;
    let mut att: Option<Var<F>> = None;
    for (tm, &(a, x)) in tms.iter().zip(&plan.pairs) {
        let anc_blk = anc_taps.block.get(a - 1).ok_or_else(|| {
            Error::invalid("distill_losses", format!("ancestry has no block {a}"))
        })?;
        let aux_blk = aux_taps.block.get(x - 1).ok_or_else(|| {
            Error::invalid("distill_losses", format!("auxiliary has no block {x}"))
        })?;
        let blk_term = anc_blk.matmul(&tm.block)?.mse(aux_blk)?;
        blk = Some(match blk {
            Some(acc) => acc.add(&blk_term)?,
            None => blk_term,
        });
        let att_term = anc_taps.attn[a - 1].matmul(&tm.attn)?.mse(&aux_taps.attn[x - 1])?;
        att = Some(match att {
            Some(acc) => acc.add(&att_term)?,
            None => att_term,
        });
    }
    Ok(DistillLosses {
        pred,
        blk: blk.expect("plan validated non-empty").scale(inv)?,
        att: att.expect("plan validated non-empty").scale(inv)?,
    })
}

/// `alpha * supervised + (1 - alpha) * distillation`. The endpoints return
/// the respective term's node itself, so an `alpha = 1` run is bitwise the
/// supervised run: backward never even visits the other subgraph.
pub fn total_training_loss<F: Real>(cls: &Var<F>, dis: &Var<F>, alpha: f64) -> Result<Var<F>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", "must lie in [0, 1]"));
    }
    if alpha == 1.0 {
        return Ok(cls.clone());
    }
    if alpha == 0.0 {
        return Ok(dis.clone());
    }
    let a = F::from_f64(alpha);
    cls.scale(a)?.add(&dis.scale(F::one() - a)?)
}
