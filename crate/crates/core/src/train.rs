//! Auxiliary model training: supervised or distilled from a frozen ancestry
//! model, with per-epoch loss traces.
//!
//! The teacher binds to the tape as constants, so no gradient can reach it
//! by construction. Transformation matrices train jointly with the student
//! except at `alpha = 1`, where the loss is the bare supervised term and the
//! run is bitwise identical to training without a teacher.

use crate::data::{epoch_order, Dataset};
use crate::distill::{
    bind_tms, distill_losses, init_transformation_matrices, tm_attn_name, tm_block_name,
    total_training_loss, DistillPlan, Hyper, TransformationMatrix,
};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam, AdamParams};
use crate::tape::Tape;
use crate::tensor::Real;
use crate::vit::{model_forward, patchify, VitModel};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub hyper: Hyper,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train", "epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("train", "learning rate must be positive and finite"));
        }
        self.hyper.validate()
    }
}

/// Per-epoch mean of each loss component over batches. Supervised runs
/// report zero for the distillation terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub cls: f64,
    pub pred: f64,
    pub blk: f64,
    pub att: f64,
    pub total: f64,
}

fn same_geometry<F: Real>(a: &VitModel<F>, b: &VitModel<F>) -> bool {
    let (ca, cb) = (&a.config, &b.config);
    ca.image_size == cb.image_size
        && ca.patch_size == cb.patch_size
        && ca.in_channels == cb.in_channels
        && ca.num_classes == cb.num_classes
}

/// Trains `student` on `data`, distilling from `teacher` when given.
/// Returns the per-epoch trace and the trained transformation matrices
/// (empty without a teacher).
pub fn train_auxiliary<F: Real>(
    student: &mut VitModel<F>,
    teacher: Option<(&VitModel<F>, &DistillPlan)>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Vec<EpochTrace>, Vec<TransformationMatrix<F>>)> {
    cfg.validate()?;
    student.config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    if data.channels != student.config.in_channels
        || data.height != student.config.image_size
        || data.width != student.config.image_size
    {
        return Err(Error::invalid(
            "train",
            format!(
                "dataset {}x{}x{} does not match model input {}x{}x{}",
                data.channels,
                data.height,
                data.width,
                student.config.in_channels,
                student.config.image_size,
                student.config.image_size
            ),
        ));
    }
    let mut tms: Vec<TransformationMatrix<F>> = match teacher {
        Some((t, plan)) => {
            t.config.validate()?;
            if !same_geometry(student, t) {
                return Err(Error::invalid(
                    "train",
                    "teacher and student must share image, patch, channel, and class geometry",
                ));
            }
            plan.validate(t.config.depth, student.config.depth)?;
            init_transformation_matrices(
                plan,
                t.config.embed_dim,
                student.config.embed_dim,
                cfg.seed,
            )
        }
        None => Vec::new(),
    };

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut adam = Adam::<F>::new(AdamParams::default());
    let mut global_step = 0u64;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sums = [0f64; 5];
        let mut batches = 0usize;
        for (batch_idx, rows) in order.chunks(cfg.batch_size).enumerate() {
            let lr_now = cosine_lr(cfg.lr, global_step, total_steps);
            step_batch(student, teacher, &mut tms, data, rows, cfg, lr_now, &mut adam, &mut sums)
                .map_err(|e| Error::TrainAbort {
                    epoch,
                    batch: batch_idx,
                    source: Box::new(e),
                })?;
            global_step += 1;
            batches += 1;
        }
        let n = batches as f64;
        trace.push(EpochTrace {
            epoch,
            cls: sums[0] / n,
            pred: sums[1] / n,
            blk: sums[2] / n,
            att: sums[3] / n,
            total: sums[4] / n,
        });
    }
    Ok((trace, tms))
}

#[allow(clippy::too_many_arguments)]
fn step_batch<F: Real>(
    student: &mut VitModel<F>,
    teacher: Option<(&VitModel<F>, &DistillPlan)>,
    tms: &mut [TransformationMatrix<F>],
    data: &Dataset,
    rows: &[usize],
    cfg: &TrainConfig,
    lr_now: f64,
    adam: &mut Adam<F>,
    sums: &mut [f64; 5],
) -> Result<()> {
    let (images, labels) = data.batch::<F>(rows)?;
    let patches = patchify(&images, &student.config)?;

    let tape = Tape::<F>::new();
    let x = tape.constant(patches)?;
    let svars = student.bind(&tape, true)?;
    let (logits, staps) = model_forward(&x, &svars)?;
    let cls = logits.cross_entropy(&labels)?;

    let mut tm_vars = None;
    let total = match teacher {
        Some((t, plan)) => {
            let tvars = t.bind(&tape, false)?;
            let (t_logits, t_taps) = model_forward(&x, &tvars)?;
            let bound = bind_tms(tms, &tape, true)?;
            let losses = distill_losses(
                &t_logits,
                &t_taps,
                &logits,
                &staps,
                &bound,
                plan,
                F::from_f64(cfg.hyper.tau),
            )?;
            sums[1] += losses.pred.item()?.into_f64();
            sums[2] += losses.blk.item()?.into_f64();
            sums[3] += losses.att.item()?.into_f64();
            let dis = losses.combined()?;
            tm_vars = Some(bound);
            total_training_loss(&cls, &dis, cfg.hyper.alpha)?
        }
        None => cls.clone(),
    };
    sums[0] += cls.item()?.into_f64();
    sums[4] += total.item()?.into_f64();

    total.backward()?;

    let named_vars = svars.named_vars();
    for ((name, param), (var_name, var)) in
        student.named_params_mut().into_iter().zip(named_vars)
    {
        debug_assert_eq!(name, var_name);
        let grad = var.grad().expect("student leaves require gradients");
        adam.step(&name, lr_now, param, &grad)?;
    }
    // At alpha = 1 the matrices are outside the loss; leave their state
    // untouched rather than pushing zero gradients through Adam. Fixed
    // identity matrices carry no gradient and are skipped the same way.
    if cfg.hyper.alpha < 1.0 {
        if let Some(bound) = tm_vars {
            for (tm, v) in tms.iter_mut().zip(bound) {
                if let Some(g) = v.block.grad() {
                    adam.step(&tm_block_name(tm.anc_idx, tm.aux_idx), lr_now, &mut tm.block, &g)?;
                }
                if let Some(g) = v.attn.grad() {
                    adam.step(&tm_attn_name(tm.anc_idx, tm.aux_idx), lr_now, &mut tm.attn, &g)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::distill::make_dense_plan;
    use crate::vit::{mini_ancestry, ModelConfig};

    fn low_student() -> ModelConfig {
        mini_ancestry().with_width(16, 4).with_depth(3)
    }

    fn quick_cfg(alpha: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr: 1e-3,
            seed: 123,
            hyper: Hyper { alpha, tau: 1.0 },
        }
    }

    #[test]
    fn supervised_loss_decreases() {
        let data = gen_synthetic(48, 3, 32, 32, 10, 500).unwrap();
        let mut student = VitModel::<f32>::init(low_student(), 7).unwrap();
        let (trace, tms) = train_auxiliary(&mut student, None, &data, &quick_cfg(1.0, 3)).unwrap();
        assert!(tms.is_empty());
        assert_eq!(trace.len(), 3);
        assert!(
            trace.last().unwrap().cls < trace[0].cls,
            "cls went {} -> {}",
            trace[0].cls,
            trace.last().unwrap().cls
        );
        for t in &trace {
            assert_eq!(t.pred, 0.0);
            assert_eq!(t.cls, t.total);
        }
    }

    #[test]
    fn alpha_one_with_teacher_is_bitwise_supervised() {
        let data = gen_synthetic(16, 3, 32, 32, 10, 901).unwrap();
        let teacher = VitModel::<f32>::init(mini_ancestry(), 11).unwrap();
        let plan = make_dense_plan(6, 3, false).unwrap();

        let mut plain = VitModel::<f32>::init(low_student(), 7).unwrap();
        train_auxiliary(&mut plain, None, &data, &quick_cfg(1.0, 1)).unwrap();

        let mut distilled = VitModel::<f32>::init(low_student(), 7).unwrap();
        let (_, tms) =
            train_auxiliary(&mut distilled, Some((&teacher, &plan)), &data, &quick_cfg(1.0, 1))
                .unwrap();

        for ((name, a), (_, b)) in plain.named_params().into_iter().zip(distilled.named_params()) {
            assert_eq!(a, b, "{name} diverged under alpha = 1");
        }
        // matrices exist but stayed at their init
        let init = init_transformation_matrices::<f32>(&plan, 64, 16, 123);
        for (got, want) in tms.iter().zip(&init) {
            assert_eq!(got.block, want.block);
            assert_eq!(got.attn, want.attn);
        }
    }

    #[test]
    fn distillation_terms_decrease_at_alpha_zero() {
        let data = gen_synthetic(32, 3, 32, 32, 10, 77).unwrap();
        let teacher = VitModel::<f32>::init(mini_ancestry(), 3).unwrap();
        let plan = make_dense_plan(6, 3, false).unwrap();
        let mut student = VitModel::<f32>::init(low_student(), 8).unwrap();
        let (trace, tms) =
            train_auxiliary(&mut student, Some((&teacher, &plan)), &data, &quick_cfg(0.0, 3))
                .unwrap();
        let (first, last) = (&trace[0], trace.last().unwrap());
        assert!(last.pred < first.pred, "pred {} -> {}", first.pred, last.pred);
        assert!(last.blk < first.blk, "blk {} -> {}", first.blk, last.blk);
        assert!(last.total < first.total, "total {} -> {}", first.total, last.total);
        // att starts near its floor at random init (both sides ~0.02 scale);
        // it only needs to stay there while pred dominates the objective
        assert!(last.att < 1e-3, "att {}", last.att);
        // matrices moved away from their init
        let init = init_transformation_matrices::<f32>(&plan, 64, 16, 123);
        assert!(tms[0].block != init[0].block);
    }

    #[test]
    fn runs_are_seed_reproducible() {
        let data = gen_synthetic(24, 3, 32, 32, 10, 55).unwrap();
        let run = |seed: u64| {
            let mut m = VitModel::<f32>::init(low_student(), 4).unwrap();
            let mut cfg = quick_cfg(1.0, 2);
            cfg.seed = seed;
            let (trace, _) = train_auxiliary(&mut m, None, &data, &cfg).unwrap();
            (trace, m)
        };
        let (ta, ma) = run(9);
        let (tb, mb) = run(9);
        let (tc, _) = run(10);
        assert_eq!(ta, tb);
        for ((_, a), (_, b)) in ma.named_params().into_iter().zip(mb.named_params()) {
            assert_eq!(a, b);
        }
        assert_ne!(ta, tc);
    }

    #[test]
    fn numeric_failure_carries_epoch_and_batch_context() {
        let data = gen_synthetic(8, 3, 32, 32, 10, 1).unwrap();
        let mut student = VitModel::<f32>::init(low_student(), 2).unwrap();
        student.head.weight.data_mut()[0] = f32::NAN;
        let err = train_auxiliary(&mut student, None, &data, &quick_cfg(1.0, 1)).unwrap_err();
        assert!(err.is_numeric(), "{err}");
        match err {
            Error::TrainAbort { epoch, batch, .. } => {
                assert_eq!(epoch, 0);
                assert_eq!(batch, 0);
            }
            other => panic!("expected TrainAbort, got {other}"),
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = quick_cfg(1.0, 1);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg(1.0, 1);
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
        let cfg = quick_cfg(1.2, 1);
        assert!(cfg.validate().is_err());
    }
}
