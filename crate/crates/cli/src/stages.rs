//! Pipeline stages behind the subcommands. Every stage that produces an
//! artifact stamps it with the resolved configuration and drops a JSON
//! reproducibility manifest next to it, so reruns can be checked for
//! bitwise agreement.

use std::fs;
use std::path::{Path, PathBuf};

use learngene_core::checkpoint::{
    fnv1a64, model_from_archive, model_to_archive, Archive, ARCHIVE_VERSION,
};
use learngene_core::data::{gen_synthetic, Dataset};
use learngene_core::descendant::{
    account, descendant_from_archive, descendant_to_archive, evaluate, plan_under_budget, Budget,
    CostReport, DescendantModel,
};
use learngene_core::distill::{make_dense_plan, tm_attn_name, tm_block_name, Hyper};
use learngene_core::gradcheck::{op_gradient_checks, FD_REL_TOL};
use learngene_core::pool::{
    enumerate_paths, finetune_pool, pool_from_archive, pool_to_archive, FinetuneConfig,
    LearngenePool, Path as PoolPath,
};
use learngene_core::tensor::Tensor;
use learngene_core::train::{train_auxiliary, EpochTrace, TrainConfig};
use learngene_core::vit::VitModel;
use serde::Serialize;

use crate::config::{AuxKind, PathModeArg, RunConfig, StitchInitMode};
use crate::error::CliError;

// Disjoint init streams per trained model. Data order and transformation
// matrix init derive their own streams inside the trainer.
const ANCESTRY_SEED: u64 = 0x616e_6365_7374_7279; // "ancestry"
const LOW_SEED: u64 = 0x6c6f_77; // "low"
const HIGH_SEED: u64 = 0x6869_6768; // "high"

// ── artifact plumbing ───────────────────────────────────────────────

fn require_training(cfg: &RunConfig, stage: &str) -> Result<(), CliError> {
    if !cfg.profile.training_allowed() {
        return Err(CliError::Validation(format!(
            "profile deit-scale-accounting-only supports only enumerate, account, and gradcheck; \
             {stage} needs --profile mini"
        )));
    }
    Ok(())
}

fn require_file(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "missing prerequisite {}: run `learngene {produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn write_archive(ar: &Archive, path: &Path) -> Result<(), CliError> {
    write_bytes(path, &ar.to_bytes()?)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut out = String::with_capacity(header.len() + 1 + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Embeds the resolved configuration into a checkpoint's own manifest.
fn stamp(ar: &mut Archive, cfg: &RunConfig, command: &str) {
    let toml = cfg.to_toml();
    let meta = &mut ar.manifest.metadata;
    meta.insert("command".into(), command.into());
    meta.insert("config_hash".into(), format!("{:016x}", fnv1a64(toml.as_bytes())));
    meta.insert("config".into(), toml);
    meta.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
}

/// Sidecar `<artifact>.manifest.json`. No timestamps: reruns with the same
/// configuration and seed must reproduce it byte for byte.
#[derive(Serialize)]
struct Sidecar<'a> {
    artifact: String,
    command: &'a str,
    seed: u64,
    config_hash: String,
    format_version: u32,
    tool_version: &'a str,
    config: &'a str,
}

fn write_sidecar(cfg: &RunConfig, artifact: &Path, command: &str) -> Result<(), CliError> {
    let toml = cfg.to_toml();
    let side = Sidecar {
        artifact: artifact
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        command,
        seed: cfg.hyper.seed,
        config_hash: format!("{:016x}", fnv1a64(toml.as_bytes())),
        format_version: ARCHIVE_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        config: &toml,
    };
    let mut json = serde_json::to_string_pretty(&side)
        .map_err(|e| CliError::Validation(format!("manifest serialization: {e}")))?;
    json.push('\n');
    let mut name = artifact.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    write_bytes(&artifact.with_file_name(name), json.as_bytes())
}

/// Writes a CSV artifact and mirrors it to stdout.
fn emit_csv(
    path: &Path,
    header: &str,
    rows: &[String],
    cfg: &RunConfig,
    command: &str,
) -> Result<(), CliError> {
    println!("{header}");
    for r in rows {
        println!("{r}");
    }
    write_csv(path, header, rows)?;
    write_sidecar(cfg, path, command)
}

fn resolve_pool_depth(cfg: &RunConfig, pool: Option<usize>) -> Result<usize, CliError> {
    match pool {
        None => Ok(cfg.model.aux_depth),
        Some(n) if n >= 2 && n % 2 == 0 => Ok(n / 2),
        Some(n) => Err(CliError::Validation(format!(
            "--pool {n}: the pool counts both rows, so the size must be even and at least 2"
        ))),
    }
}

fn trace_rows(trace: &[EpochTrace]) -> Vec<String> {
    trace
        .iter()
        .map(|t| {
            format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                t.epoch, t.cls, t.pred, t.blk, t.att, t.total
            )
        })
        .collect()
}

// ── stages ──────────────────────────────────────────────────────────

pub fn run_gen_data(cfg: &RunConfig, count: usize) -> Result<(), CliError> {
    require_training(cfg, "gen-data")?;
    let m = &cfg.model;
    let data = gen_synthetic(
        count,
        m.in_channels,
        m.image_size,
        m.image_size,
        m.classes as u32,
        cfg.hyper.seed,
    )?;
    let out = cfg.paths.data_file();
    ensure_parent(&out)?;
    data.save(&out)?;
    write_sidecar(cfg, &out, "gen-data")?;
    println!(
        "wrote {} ({} samples, {} classes)",
        out.display(),
        data.len(),
        data.num_classes
    );
    Ok(())
}

pub fn run_distill_aux(cfg: &RunConfig, which: AuxKind) -> Result<(), CliError> {
    require_training(cfg, "distill-aux")?;
    let data_path = cfg.paths.data_file();
    require_file(&data_path, "gen-data")?;
    let data = Dataset::load(&data_path)?;
    let command = format!("distill-aux --aux {}", which.name());
    let (model_cfg, seed_tag, epochs, out, csv_name) = match which {
        AuxKind::Ancestry => (
            cfg.model.ancestry(),
            ANCESTRY_SEED,
            cfg.hyper.pretrain_epochs,
            cfg.paths.ancestry_file(),
            "distill_ancestry.csv",
        ),
        AuxKind::Low => (
            cfg.model.aux_low(),
            LOW_SEED,
            cfg.hyper.distill_epochs,
            cfg.paths.aux_low_file(),
            "distill_low.csv",
        ),
        AuxKind::High => (
            cfg.model.aux_high(),
            HIGH_SEED,
            cfg.hyper.distill_epochs,
            cfg.paths.aux_high_file(),
            "distill_high.csv",
        ),
    };
    let mut model = VitModel::<f32>::init(model_cfg, cfg.hyper.seed ^ seed_tag)?;
    let tc = TrainConfig {
        epochs,
        batch_size: cfg.hyper.batch,
        lr: cfg.hyper.lr,
        seed: cfg.hyper.seed,
        hyper: Hyper { alpha: cfg.hyper.alpha, tau: cfg.hyper.tau },
    };
    // The ancestry model is the teacher, so it always trains supervised.
    let use_teacher = cfg.pipeline.teacher && !matches!(which, AuxKind::Ancestry);
    let (trace, tms) = if use_teacher {
        let anc_path = cfg.paths.ancestry_file();
        require_file(&anc_path, "distill-aux --aux ancestry")?;
        let teacher = model_from_archive(&Archive::load(&anc_path)?)?;
        let dims_match = matches!(which, AuxKind::High);
        let plan = make_dense_plan(teacher.config.depth, model.config.depth, dims_match)?;
        train_auxiliary(&mut model, Some((&teacher, &plan)), &data, &tc)?
    } else {
        train_auxiliary(&mut model, None, &data, &tc)?
    };
    for t in &trace {
        println!("epoch {}: cls {:.4} total {:.4}", t.epoch, t.cls, t.total);
    }
    let mut ar = model_to_archive(&model, cfg.hyper.seed)?;
    // Learned maps ride along in the checkpoint so pool construction can
    // average them later. Fixed identities carry no information.
    for tm in &tms {
        if tm.is_fixed_identity() {
            continue;
        }
        ar.push(tm_block_name(tm.anc_idx, tm.aux_idx), tm.block.clone())?;
        ar.push(tm_attn_name(tm.anc_idx, tm.aux_idx), tm.attn.clone())?;
    }
    stamp(&mut ar, cfg, &command);
    write_archive(&ar, &out)?;
    write_sidecar(cfg, &out, &command)?;
    let csv = cfg.paths.join(csv_name);
    write_csv(&csv, "epoch,cls,pred,blk,att,total", &trace_rows(&trace))?;
    write_sidecar(cfg, &csv, &command)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn run_build_pool(cfg: &RunConfig) -> Result<(), CliError> {
    require_training(cfg, "build-pool")?;
    let low_path = cfg.paths.aux_low_file();
    let high_path = cfg.paths.aux_high_file();
    require_file(&low_path, "distill-aux --aux low")?;
    require_file(&high_path, "distill-aux --aux high")?;
    let low_ar = Archive::load(&low_path)?;
    let aux_low = model_from_archive(&low_ar)?;
    let aux_high = model_from_archive(&Archive::load(&high_path)?)?;
    let mut pool = LearngenePool::build(&aux_low, &aux_high)?;
    match cfg.stitch.init {
        StitchInitMode::Tm => {
            // Only the block maps feed the stitches; the attention maps
            // align a different activation.
            let names: Vec<String> = low_ar
                .names()
                .filter(|n| n.starts_with("W."))
                .map(String::from)
                .collect();
            if names.is_empty() {
                return Err(CliError::Validation(format!(
                    "{} holds no transformation matrices; re-run `learngene distill-aux --aux low` \
                     with the teacher enabled, or pick --stitch-init ls or random",
                    low_path.display()
                )));
            }
            let mut ws: Vec<Tensor<f32>> = Vec::with_capacity(names.len());
            for n in &names {
                ws.push(low_ar.tensor(n)?.clone());
            }
            pool.init_stitch_tm(&ws, cfg.stitch.orientation.to_core())?;
        }
        StitchInitMode::Ls => {
            let data_path = cfg.paths.data_file();
            require_file(&data_path, "gen-data")?;
            let data = Dataset::load(&data_path)?;
            let rows: Vec<usize> = (0..cfg.stitch.ls_samples.min(data.len())).collect();
            let (images, _) = data.batch::<f32>(&rows)?;
            for r in pool.init_stitch_ls(&images)? {
                println!(
                    "stitch {}: rank {}{}",
                    r.position,
                    r.rank,
                    if r.rank_deficient { " (deficient)" } else { "" }
                );
            }
        }
        StitchInitMode::Random => pool.init_stitch_random(cfg.hyper.seed),
    }
    let mut ar = pool_to_archive(&pool, cfg.hyper.seed)?;
    stamp(&mut ar, cfg, "build-pool");
    let out = cfg.paths.pool_file();
    write_archive(&ar, &out)?;
    write_sidecar(cfg, &out, "build-pool")?;
    println!(
        "wrote {} ({} instances per row, {} stitches)",
        out.display(),
        pool.depth(),
        pool.depth()
    );
    Ok(())
}

pub fn run_finetune(cfg: &RunConfig) -> Result<(), CliError> {
    require_training(cfg, "finetune-pool")?;
    let pool_path = cfg.paths.pool_file();
    require_file(&pool_path, "build-pool")?;
    let data_path = cfg.paths.data_file();
    require_file(&data_path, "gen-data")?;
    let data = Dataset::load(&data_path)?;
    let mut pool = pool_from_archive(&Archive::load(&pool_path)?)?;
    let teacher = if cfg.pipeline.teacher {
        let anc_path = cfg.paths.ancestry_file();
        require_file(&anc_path, "distill-aux --aux ancestry")?;
        Some(model_from_archive(&Archive::load(&anc_path)?)?)
    } else {
        None
    };
    let fc = FinetuneConfig {
        epochs: cfg.hyper.finetune_epochs,
        batch_size: cfg.hyper.batch,
        lr: cfg.hyper.lr,
        seed: cfg.hyper.seed,
        mode: cfg.pipeline.path_mode.to_core(),
        freeze_instances: cfg.pipeline.freeze_instances,
        tau: cfg.hyper.tau,
    };
    let steps = finetune_pool(&mut pool, teacher.as_ref(), &data, &fc)?;
    match (steps.first(), steps.last()) {
        (Some(a), Some(b)) => {
            println!("{} steps: total {:.4} -> {:.4}", steps.len(), a.total, b.total)
        }
        _ => println!("0 steps (finetune_epochs = 0)"),
    }
    let rows: Vec<String> = steps
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{:.6},{:.6},{:.6}",
                s.epoch,
                s.step,
                s.path.id(),
                s.cls,
                s.pred,
                s.total
            )
        })
        .collect();
    let csv = cfg.paths.join("finetune.csv");
    write_csv(&csv, "epoch,step,path,cls,pred,total", &rows)?;
    write_sidecar(cfg, &csv, "finetune-pool")?;
    let mut ar = pool_to_archive(&pool, cfg.hyper.seed)?;
    stamp(&mut ar, cfg, "finetune-pool");
    let out = cfg.paths.pool_tuned_file();
    write_archive(&ar, &out)?;
    write_sidecar(cfg, &out, "finetune-pool")?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn run_enumerate(
    cfg: &RunConfig,
    mode: Option<PathModeArg>,
    pool: Option<usize>,
) -> Result<(), CliError> {
    let depth = resolve_pool_depth(cfg, pool)?;
    let mode = mode.unwrap_or(cfg.pipeline.path_mode);
    let rows: Vec<String> = enumerate_paths(depth, mode.to_core())
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{},{}",
                p.id(),
                p.k,
                p.m,
                p.depth(depth),
                p.uses_stitch(depth)
            )
        })
        .collect();
    emit_csv(&cfg.paths.join("paths.csv"), "path,k,m,depth,stitch", &rows, cfg, "enumerate")
}

pub fn run_account(
    cfg: &RunConfig,
    mode: Option<PathModeArg>,
    pool: Option<usize>,
    max_params: Option<u64>,
    max_flops: Option<u64>,
) -> Result<(), CliError> {
    let depth = resolve_pool_depth(cfg, pool)?;
    let low = cfg.model.aux_low().with_depth(depth);
    let high = cfg.model.aux_high().with_depth(depth);
    let mode = mode.unwrap_or(cfg.pipeline.path_mode).to_core();
    let row = |p: &PoolPath, c: &CostReport| {
        format!("{},{},{},{},{}", p.id(), p.k, p.m, c.params, c.flops)
    };
    let rows: Vec<String> = if max_params.is_some() || max_flops.is_some() {
        let budget = Budget { max_params, max_flops };
        let plan = plan_under_budget(&low, &high, &budget, mode)?;
        if plan.feasible.is_empty() {
            if let Some(fb) = plan.fallback {
                eprintln!(
                    "no path fits the budget; cheapest is {} at {} params, {} flops",
                    fb.path.id(),
                    fb.cost.params,
                    fb.cost.flops
                );
            }
        }
        plan.feasible.iter().map(|pc| row(&pc.path, &pc.cost)).collect()
    } else {
        let mut out = Vec::new();
        for p in enumerate_paths(depth, mode) {
            out.push(row(&p, &account(&low, &high, &p)?));
        }
        out
    };
    emit_csv(&cfg.paths.join("account.csv"), "path,k,m,params,flops", &rows, cfg, "account")
}

pub fn run_assemble(cfg: &RunConfig, path_str: &str, from: Option<PathBuf>) -> Result<(), CliError> {
    require_training(cfg, "assemble")?;
    let path = PoolPath::parse(path_str)?;
    let from = from.unwrap_or_else(|| cfg.paths.pool_tuned_file());
    require_file(&from, "finetune-pool")?;
    let pool = pool_from_archive(&Archive::load(&from)?)?;
    let model = DescendantModel::assemble(&pool, path)?;
    let command = format!("assemble --path {}", path.id());
    let mut ar = descendant_to_archive(&model, cfg.hyper.seed)?;
    stamp(&mut ar, cfg, &command);
    let out = cfg.paths.descendant_file(&path.id());
    write_archive(&ar, &out)?;
    write_sidecar(cfg, &out, &command)?;
    println!(
        "wrote {} (depth {}, {} params)",
        out.display(),
        model.depth(),
        model.param_count()
    );
    Ok(())
}

pub fn run_eval(
    cfg: &RunConfig,
    path_arg: Option<&str>,
    model_file: Option<PathBuf>,
) -> Result<(), CliError> {
    require_training(cfg, "eval")?;
    let file = match (&model_file, path_arg) {
        (Some(f), _) => f.clone(),
        (None, Some(p)) => cfg.paths.descendant_file(&PoolPath::parse(p)?.id()),
        (None, None) => {
            return Err(CliError::Validation(
                "eval needs --path or --model to locate a descendant checkpoint".into(),
            ))
        }
    };
    require_file(&file, "assemble")?;
    let data_path = cfg.paths.data_file();
    require_file(&data_path, "gen-data")?;
    let data = Dataset::load(&data_path)?;
    let model = descendant_from_archive(&Archive::load(&file)?)?;
    let report = evaluate(&model, &data, cfg.hyper.batch)?;
    let rows = vec![format!(
        "{},{},{:.6},{:.6}",
        model.path.id(),
        report.samples,
        report.accuracy,
        report.mean_loss
    )];
    emit_csv(&cfg.paths.join("eval.csv"), "path,samples,accuracy,mean_loss", &rows, cfg, "eval")
}

pub fn run_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let checks = op_gradient_checks(cfg.hyper.seed)?;
    let rows: Vec<String> = checks
        .iter()
        .map(|c| format!("{},{:.3e}", c.name, c.max_rel_err))
        .collect();
    emit_csv(&cfg.paths.join("gradcheck.csv"), "op,max_rel_err", &rows, cfg, "gradcheck")?;
    let worst = checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    if let Some(w) = worst {
        if w.max_rel_err >= FD_REL_TOL {
            return Err(CliError::Numeric(format!(
                "gradient check failed: {} at relative error {:.3e}, tolerance {:.0e}",
                w.name, w.max_rel_err, FD_REL_TOL
            )));
        }
    }
    println!("all {} ops within {:.0e}", checks.len(), FD_REL_TOL);
    Ok(())
}
