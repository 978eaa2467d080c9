use std::path::{Path, PathBuf};

use serde_json::json;
use subskill_vae::evaluation::{additivity_errors, compare_runs, eval_composite};
use subskill_vae::io::{self, Checkpoint, ManifestDoc, RunMetadata, FORMAT_VERSION, RUN_META_FILE};
use subskill_vae::model::{ModelConfig, Trajectory};
use subskill_vae::objectives::{CompositeEmbedding, ObjectiveConfig};
use subskill_vae::synthdata::{generate_dataset, PointMassConfig, Task, DEFAULT_DEMOS_PER_SKILL};
use subskill_vae::training::{train_seed, TrainConfig};
use subskill_vae::{Error, Result};

use crate::args::{CompareArgs, EvalArgs, GenDataArgs, TrainArgs};
use crate::plot;

fn write_meta(dir: &Path, command: &str, seed: Option<u64>, seeds: Vec<u64>, config: serde_json::Value) -> Result<()> {
    let meta = RunMetadata {
        command: command.to_string(),
        format_version: FORMAT_VERSION,
        seed,
        seeds,
        config,
    };
    io::write_json(&dir.join(RUN_META_FILE), &meta)
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut doc = match &a.manifest {
        Some(path) => io::read_manifest(path)?,
        None => ManifestDoc {
            manifest: Task::from(a.task).manifest(a.demos_per_skill.unwrap_or(DEFAULT_DEMOS_PER_SKILL), 0),
            point_mass: PointMassConfig::default(),
        },
    };
    if let Some(seed) = a.seed {
        doc.manifest.seed = seed;
    }
    let dataset = generate_dataset(&doc.manifest, &doc.point_mass)?;
    io::write_dataset_dir(&a.out, &doc, &dataset)?;
    let config: serde_json::Value = serde_json::from_str(&io::manifest_to_json(&doc)?)?;
    write_meta(&a.out, "gen-data", Some(doc.manifest.seed), vec![doc.manifest.seed], config)?;
    println!(
        "wrote {} trajectories ({} skills) to {}",
        dataset.trajectories.len(),
        dataset.skill_counts().len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_train(a: &TrainArgs, d_state: usize, d_action: usize) -> (TrainConfig, ModelConfig) {
    let defaults = TrainConfig::default();
    let od = ObjectiveConfig::default();
    let objective = a.objective.into();
    let objective_config = ObjectiveConfig {
        objective,
        lambda: a.lambda.unwrap_or(od.lambda),
        n_mc: a.n_mc.unwrap_or(od.n_mc),
        mi_sampling: a.mi_sampling.map_or(od.mi_sampling, Into::into),
        composite_embedding: a.composite_embedding.map_or(od.composite_embedding, Into::into),
        rollout_t: a.rollout_t.or(od.rollout_t),
        composite_rollouts: a.composite_rollouts.unwrap_or(od.composite_rollouts),
    };
    let train = TrainConfig {
        objective_config,
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        seeds: a.seeds.clone().unwrap_or(defaults.seeds),
        eval_every: a.eval_every.unwrap_or(defaults.eval_every),
        grad_clip: defaults.grad_clip,
    };
    let md = ModelConfig::default();
    let model = ModelConfig {
        d_state,
        d_action,
        d_latent: a.d_latent.unwrap_or(md.d_latent),
        encoder_hidden: a.encoder_hidden.unwrap_or(md.encoder_hidden),
        attention_dim: a.attention_dim.unwrap_or(md.attention_dim),
        decoder_hidden: a.decoder_hidden.unwrap_or(md.decoder_hidden),
        dynamics_arch: a.dynamics_arch.map_or(md.dynamics_arch, Into::into),
        mixture_components: a.mixture_components.unwrap_or(md.mixture_components),
        aux_posterior: objective == subskill_vae::Objective::RegVariational,
        ..md
    };
    (train, model)
}

fn widths(trajectories: &[Trajectory]) -> Result<(usize, usize)> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Validation("dataset is empty".into()))?;
    let w = (first.states.cols(), first.actions.cols());
    if trajectories.iter().any(|t| (t.states.cols(), t.actions.cols()) != w) {
        return Err(Error::Validation("trajectories have inconsistent widths".into()));
    }
    Ok(w)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (_, dataset) = io::read_dataset_dir(&a.data)?;
    let (d_state, d_action) = widths(&dataset.trajectories)?;
    let (cfg, model) = resolve_train(&a, d_state, d_action);
    cfg.validate()?;
    model.validate()?;
    std::fs::create_dir_all(&a.out)?;
    write_meta(
        &a.out,
        "train",
        None,
        cfg.seeds.clone(),
        json!({
            "data": a.data,
            "train_config": cfg,
            "model_config": model,
            "evaluation": {"latent": "posterior_mean", "rollout": "mean"},
        }),
    )?;
    for &seed in &cfg.seeds {
        let run = train_seed(&dataset, &cfg, &model, seed)?;
        io::save_checkpoint(
            &a.out.join(format!("{}.ckpt", run.run_id)),
            &Checkpoint {
                bundle: run.bundle,
                seed,
            },
        )?;
        io::write_metrics_csv(&a.out.join(format!("{}.metrics.csv", run.run_id)), &run.metrics.rows)?;
        if let Some(last) = run.metrics.last() {
            println!(
                "{} epoch {}: train_loss {:.6} eval_mse_sum_embedding {:.6} additivity_error {:.6}",
                run.run_id,
                last.epoch,
                last.train_loss,
                last.eval_mse_sum_embedding.unwrap_or(f64::NAN),
                last.additivity_error.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&a.checkpoint)?;
    let (_, dataset) = io::read_dataset_dir(&a.data)?;
    let (d_state, d_action) = widths(&dataset.trajectories)?;
    let cfg = &ckpt.bundle.config;
    if (cfg.d_state, cfg.d_action) != (d_state, d_action) {
        return Err(Error::Validation(format!(
            "checkpoint expects state/action widths {}/{}, dataset has {d_state}/{d_action}",
            cfg.d_state, cfg.d_action
        )));
    }
    let mode: CompositeEmbedding = a.mode.into();
    let mut per_comp = Vec::new();
    let (mut mse_total, mut add_total, mut n) = (0.0, 0.0, 0usize);
    for comp in &dataset.compositions {
        let subs: Vec<&Trajectory> = dataset
            .trajectories
            .iter()
            .filter(|t| comp.subskill_ids.contains(&t.skill_id))
            .collect();
        let comps = dataset.by_skill(&comp.composite_id);
        let e = eval_composite(&ckpt.bundle, comp, &subs, &comps, mode)?;
        let add = additivity_errors(&ckpt.bundle, comp, &subs, &comps)?;
        let add_mean = add.iter().sum::<f64>() / add.len() as f64;
        mse_total += e.mse_mean * comps.len() as f64;
        add_total += add.iter().sum::<f64>();
        n += comps.len();
        per_comp.push(json!({
            "composite": comp.composite_id,
            "n_demos": comps.len(),
            "eval_mse": e.mse_mean,
            "eval_mse_std": e.mse_std,
            "additivity_error": add_mean,
        }));
    }
    if n == 0 {
        return Err(Error::Validation("dataset has no composite demonstrations".into()));
    }
    let eval_mse = mse_total / n as f64;
    let (sum_col, enc_col) = match mode {
        CompositeEmbedding::Sum => (Some(eval_mse), None),
        CompositeEmbedding::Encode => (None, Some(eval_mse)),
    };
    let mode_name = match mode {
        CompositeEmbedding::Sum => "sum",
        CompositeEmbedding::Encode => "encode",
    };
    let report = json!({
        "checkpoint": a.checkpoint,
        "seed": ckpt.seed,
        "mode": mode_name,
        "eval_mse": eval_mse,
        "eval_mse_sum_embedding": sum_col,
        "eval_mse_encoded": enc_col,
        "additivity_error": add_total / n as f64,
        "compositions": per_comp,
    });
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("eval"), |p| p.join("eval"))
    });
    std::fs::create_dir_all(&out)?;
    let stem = a
        .checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".to_string(), |s| s.to_string_lossy().into_owned());
    io::write_json(&out.join(format!("{stem}.{mode_name}.eval.json")), &report)?;
    write_meta(
        &out,
        "eval",
        Some(ckpt.seed),
        vec![ckpt.seed],
        json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "mode": mode_name,
            "model_config": ckpt.bundle.config,
            "evaluation": {"latent": "posterior_mean", "rollout": "mean"},
        }),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Metrics files named on the command line: directories contribute their
/// `*.metrics.csv` entries in name order; plain files are taken as given.
fn metrics_files(runs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for r in runs {
        if r.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(r)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".metrics.csv")))
                .collect();
            found.sort();
            files.extend(found);
        } else if r.is_file() {
            files.push(r.clone());
        } else {
            return Err(Error::InvalidInput(format!("{} does not exist", r.display())));
        }
    }
    if files.is_empty() {
        return Err(Error::InvalidInput("no metrics files found in the given runs".into()));
    }
    Ok(files)
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let files = metrics_files(&a.runs)?;
    let rows = compare_runs(&files)?;
    std::fs::create_dir_all(&a.out)?;
    io::write_aggregate_csv(&a.out.join("aggregate.csv"), &rows)?;
    if a.plot {
        plot::write_metric_charts(&a.out, &rows)?;
    }
    write_meta(
        &a.out,
        "compare",
        None,
        vec![],
        json!({"runs": a.runs, "metrics_files": files, "plot": a.plot}),
    )?;
    println!("aggregated {} files into {}", files.len(), a.out.join("aggregate.csv").display());
    Ok(())
}
