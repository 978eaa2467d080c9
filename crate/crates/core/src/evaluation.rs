//! Composite-generation MSE, latent additivity, and multi-seed aggregation.
//!
//! All evaluation is deterministic: posterior means condition mean-mode
//! rollouts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ctx, GeneratedTrajectory, ModelBundle, RolloutMode, Trajectory, ENCODER};
use crate::noise::NoiseSource;
use crate::objectives::{CompositeEmbedding, CompositionSpec};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;
use crate::training::{MetricsRow, METRIC_COLUMNS};

/// Mean squared difference over all `T · d_state` entries.
pub fn state_mse(generated: &GeneratedTrajectory, demo: &Trajectory) -> Result<f64> {
    tensor_mse(&generated.states, &demo.states)
}

fn tensor_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "state shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeEval {
    pub mse_mean: f64,
    /// Sample standard deviation over demonstrations (0 for a single demo).
    pub mse_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Subskill demonstrations grouped in composition order. Composite demo `k`
/// is paired with demo `k mod n_i` of subskill `i`.
fn group_subskills<'t>(comp: &CompositionSpec, subskill_demos: &[&'t Trajectory]) -> Result<Vec<Vec<&'t Trajectory>>> {
    comp.subskill_ids
        .iter()
        .map(|id| {
            let g: Vec<&Trajectory> = subskill_demos.iter().copied().filter(|t| &t.skill_id == id).collect();
            if g.is_empty() {
                Err(Error::InvalidInput(format!(
                    "no demonstration of subskill '{id}' for '{}'",
                    comp.composite_id
                )))
            } else {
                Ok(g)
            }
        })
        .collect()
}

/// Posterior means of `demos`, one row each.
fn posterior_means(bundle: &ModelBundle, demos: &[&Trajectory]) -> Result<Vec<Vec<f64>>> {
    let mut ctx = Ctx::new(bundle, false);
    let states: Vec<&Tensor> = demos.iter().map(|t| &t.states).collect();
    let enc = ctx.encode_states(ENCODER, &states)?;
    Ok(ctx.g.value(enc.mean).to_rows())
}

/// Mean-mode rollouts from each demo's `s₁` for its length, conditioned on
/// the matching row of `latents`; returns the per-demo state MSE.
fn rollout_mse(bundle: &ModelBundle, latents: &[Vec<f64>], demos: &[&Trajectory]) -> Result<Vec<f64>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in demos.iter().enumerate() {
        by_len.entry(d.len()).or_default().push(i);
    }
    let mut out = vec![0.0; demos.len()];
    // Mean mode consumes no noise.
    let mut noise = NoiseSource::new(0);
    for (t_len, idx) in by_len {
        let mut ctx = Ctx::new(bundle, false);
        let z = ctx.constant(Tensor::from_rows(&idx.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>()));
        let s1 = ctx.constant(Tensor::from_rows(
            &idx.iter().map(|&i| demos[i].first_state().to_vec()).collect::<Vec<_>>(),
        ));
        let r = ctx.rollout(z, s1, t_len, RolloutMode::Mean, &mut noise)?;
        for (row, &i) in idx.iter().enumerate() {
            let gen = ctx.read_rollout(&r, row, latents[i].clone());
            out[i] = state_mse(&gen, demos[i])?;
        }
    }
    Ok(out)
}

fn check_demos(bundle: &ModelBundle, demos: &[&Trajectory]) -> Result<()> {
    for d in demos {
        d.validate()?;
        if d.states.cols() != bundle.config.d_state {
            return Err(Error::InvalidInput(format!(
                "demo '{}' has state width {}, model expects {}",
                d.skill_id,
                d.states.cols(),
                bundle.config.d_state
            )));
        }
    }
    Ok(())
}

/// Per-demo state MSE of mean-mode composite generations.
pub fn composite_mse_per_demo(
    bundle: &ModelBundle,
    comp: &CompositionSpec,
    subskill_demos: &[&Trajectory],
    composite_demos: &[&Trajectory],
    mode: CompositeEmbedding,
) -> Result<Vec<f64>> {
    comp.validate()?;
    if composite_demos.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no demonstrations of composite '{}'",
            comp.composite_id
        )));
    }
    check_demos(bundle, subskill_demos)?;
    check_demos(bundle, composite_demos)?;
    let latents = match mode {
        CompositeEmbedding::Sum => {
            let groups = group_subskills(comp, subskill_demos)?;
            let flat: Vec<&Trajectory> = groups.iter().flatten().copied().collect();
            let means = posterior_means(bundle, &flat)?;
            let mut offsets = Vec::with_capacity(groups.len());
            let mut o = 0;
            for g in &groups {
                offsets.push(o);
                o += g.len();
            }
            (0..composite_demos.len())
                .map(|k| {
                    let mut z = vec![0.0; bundle.config.d_latent];
                    for (g, off) in groups.iter().zip(&offsets) {
                        let row = &means[off + k % g.len()];
                        z.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    z
                })
                .collect::<Vec<_>>()
        }
        CompositeEmbedding::Encode => posterior_means(bundle, composite_demos)?,
    };
    rollout_mse(bundle, &latents, composite_demos)
}

pub fn eval_composite(
    bundle: &ModelBundle,
    comp: &CompositionSpec,
    subskill_demos: &[&Trajectory],
    composite_demos: &[&Trajectory],
    mode: CompositeEmbedding,
) -> Result<CompositeEval> {
    let mses = composite_mse_per_demo(bundle, comp, subskill_demos, composite_demos, mode)?;
    let (mse_mean, mse_std) = mean_std(&mses);
    Ok(CompositeEval { mse_mean, mse_std })
}

fn l2_error(composite: &[f64], parts: &[&Vec<f64>]) -> f64 {
    composite
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let s: f64 = parts.iter().map(|p| p[j]).sum();
            (c - s) * (c - s)
        })
        .sum::<f64>()
        .sqrt()
}

/// `‖mean(q(z | composite)) − Σ_i mean(q(z | subskill_i))‖₂`.
pub fn additivity_error(
    bundle: &ModelBundle,
    comp: &CompositionSpec,
    subskill_demos: &[&Trajectory],
    composite_demo: &Trajectory,
) -> Result<f64> {
    comp.validate()?;
    if subskill_demos.len() != comp.m() {
        return Err(Error::InvalidInput(format!(
            "'{}' needs {} subskill demonstrations, got {}",
            comp.composite_id,
            comp.m(),
            subskill_demos.len()
        )));
    }
    check_demos(bundle, subskill_demos)?;
    check_demos(bundle, &[composite_demo])?;
    let mut all = subskill_demos.to_vec();
    all.push(composite_demo);
    let means = posterior_means(bundle, &all)?;
    let parts: Vec<&Vec<f64>> = means[..comp.m()].iter().collect();
    Ok(l2_error(&means[comp.m()], &parts))
}

/// Additivity error per composite demo, pairing as in [`eval_composite`].
pub fn additivity_errors(
    bundle: &ModelBundle,
    comp: &CompositionSpec,
    subskill_demos: &[&Trajectory],
    composite_demos: &[&Trajectory],
) -> Result<Vec<f64>> {
    comp.validate()?;
    if composite_demos.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no demonstrations of composite '{}'",
            comp.composite_id
        )));
    }
    check_demos(bundle, subskill_demos)?;
    check_demos(bundle, composite_demos)?;
    let groups = group_subskills(comp, subskill_demos)?;
    let mut flat: Vec<&Trajectory> = groups.iter().flatten().copied().collect();
    let n_sub = flat.len();
    flat.extend_from_slice(composite_demos);
    let means = posterior_means(bundle, &flat)?;
    let mut out = Vec::with_capacity(composite_demos.len());
    for k in 0..composite_demos.len() {
        let mut parts = Vec::with_capacity(groups.len());
        let mut off = 0;
        for g in &groups {
            parts.push(&means[off + k % g.len()]);
            off += g.len();
        }
        out.push(l2_error(&means[n_sub + k], &parts));
    }
    Ok(out)
}

/// Dataset-level evaluation: averages over every composite demonstration of
/// every composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mse_sum_embedding: f64,
    pub mse_encoded: f64,
    pub additivity_error: f64,
}

pub fn evaluate_dataset(bundle: &ModelBundle, dataset: &Dataset) -> Result<EvalSummary> {
    let (mut sum, mut enc, mut add, mut n) = (0.0, 0.0, 0.0, 0usize);
    for comp in &dataset.compositions {
        let subs: Vec<&Trajectory> = dataset
            .trajectories
            .iter()
            .filter(|t| comp.subskill_ids.contains(&t.skill_id))
            .collect();
        let comps = dataset.by_skill(&comp.composite_id);
        let s = composite_mse_per_demo(bundle, comp, &subs, &comps, CompositeEmbedding::Sum)?;
        let e = composite_mse_per_demo(bundle, comp, &subs, &comps, CompositeEmbedding::Encode)?;
        let a = additivity_errors(bundle, comp, &subs, &comps)?;
        sum += s.iter().sum::<f64>();
        enc += e.iter().sum::<f64>();
        add += a.iter().sum::<f64>();
        n += comps.len();
    }
    if n == 0 {
        return Err(Error::Validation("dataset has no composite demonstrations to evaluate".into()));
    }
    let n = n as f64;
    Ok(EvalSummary {
        mse_sum_embedding: sum / n,
        mse_encoded: enc / n,
        additivity_error: add / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub objective: String,
    pub epoch: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// Groups rows by `(objective, epoch)` and reports mean and sample standard
/// deviation of each metric over runs. Values are summed in `(run_id, seed)`
/// order so the result does not depend on input order.
pub fn aggregate_rows(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.objective.clone(), r.epoch)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((objective, epoch), mut members) in groups {
        members.sort_by(|a, b| (&a.run_id, a.seed).cmp(&(&b.run_id, b.seed)));
        for metric in METRIC_COLUMNS {
            let values: Vec<f64> = members.iter().filter_map(|r| r.metric(metric)).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            out.push(AggregateRow {
                objective: objective.clone(),
                epoch,
                metric: metric.to_string(),
                mean,
                std,
                n_seeds: values.len(),
            });
        }
    }
    out
}

/// Reads every metrics file and aggregates them.
pub fn compare_runs<P: AsRef<Path>>(metrics_files: &[P]) -> Result<Vec<AggregateRow>> {
    if metrics_files.is_empty() {
        return Err(Error::InvalidInput("no metrics files to compare".into()));
    }
    let mut rows = Vec::new();
    for f in metrics_files {
        rows.extend(crate::io::read_metrics_csv(f.as_ref())?);
    }
    Ok(aggregate_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DynamicsArch, ModelConfig};
    use proptest::prelude::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_latent: 3,
            encoder_hidden: 4,
            attention_dim: 3,
            decoder_hidden: 5,
            dynamics_arch: DynamicsArch::Mlp,
            ..ModelConfig::default()
        }
    }

    fn demo(t: usize, seed: u64, skill: &str) -> Trajectory {
        let mut rng = NoiseSource::new(seed);
        Trajectory::new(rng.normal_tensor(t, 2), rng.normal_tensor(t, 2), skill).unwrap()
    }

    fn as_generated(t: &Trajectory) -> GeneratedTrajectory {
        GeneratedTrajectory {
            states: t.states.clone(),
            actions: t.actions.clone(),
            conditioning_latent: vec![],
        }
    }

    fn zero_params(b: &mut ModelBundle, prefix: &str) {
        for i in 0..b.params.len() {
            if b.params.name(i).starts_with(prefix) {
                b.params.value_mut(i).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    #[test]
    fn mse_cases() {
        let d = demo(3, 1, "a");
        assert_eq!(state_mse(&as_generated(&d), &d).unwrap(), 0.0);
        let mut shifted = as_generated(&d);
        shifted.states = d.states.map(|x| x + 0.3);
        assert!((state_mse(&shifted, &d).unwrap() - 0.09).abs() < 1e-12);

        let other = demo(3, 2, "a");
        let mut hand = 0.0;
        for t in 0..3 {
            for j in 0..2 {
                let diff = other.states.get(t, j) - d.states.get(t, j);
                hand += diff * diff;
            }
        }
        assert!((state_mse(&as_generated(&other), &d).unwrap() - hand / 6.0).abs() < 1e-12);
        assert!(matches!(state_mse(&as_generated(&demo(4, 1, "a")), &d), Err(Error::InvalidInput(_))));
    }

    /// A bundle whose mean rollout stays at `s₁` for any latent.
    fn still_bundle() -> ModelBundle {
        let mut b = ModelBundle::init(&tiny(), 0).unwrap();
        zero_params(&mut b, "dyn.mean");
        b
    }

    #[test]
    fn exact_reproduction_gives_zero_mse() {
        let b = still_bundle();
        let comp = CompositionSpec::new("c", vec!["a".into(), "b".into()]).unwrap();
        let still = |s: u64, id: &str| {
            let mut t = demo(5, s, id);
            let first = t.states.row(0).to_vec();
            for r in 0..5 {
                for j in 0..2 {
                    t.states.set(r, j, first[j]);
                }
            }
            t
        };
        let subs = [still(1, "a"), still(2, "b")];
        let comps = [still(3, "c"), still(4, "c")];
        let sub_refs: Vec<&Trajectory> = subs.iter().collect();
        let comp_refs: Vec<&Trajectory> = comps.iter().collect();
        for mode in [CompositeEmbedding::Sum, CompositeEmbedding::Encode] {
            let e = eval_composite(&b, &comp, &sub_refs, &comp_refs, mode).unwrap();
            assert_eq!(e.mse_mean, 0.0);
            assert_eq!(e.mse_std, 0.0);
        }
    }

    #[test]
    fn identical_demos_have_zero_spread() {
        let b = ModelBundle::init(&tiny(), 2).unwrap();
        let comp = CompositionSpec::new("c", vec!["a".into()]).unwrap();
        let sub = demo(4, 1, "a");
        let c = demo(4, 9, "c");
        let e = eval_composite(&b, &comp, &[&sub], &[&c, &c, &c], CompositeEmbedding::Sum).unwrap();
        assert!(e.mse_mean > 0.0);
        assert_eq!(e.mse_std, 0.0);
    }

    #[test]
    fn batched_eval_matches_single_rollouts() {
        let b = ModelBundle::init(&tiny(), 2).unwrap();
        let comp = CompositionSpec::new("c", vec!["a".into(), "b".into()]).unwrap();
        let subs = [demo(4, 1, "a"), demo(6, 2, "b"), demo(5, 3, "a")];
        let comps = [demo(5, 4, "c"), demo(7, 5, "c"), demo(5, 6, "c")];
        let sub_refs: Vec<&Trajectory> = subs.iter().collect();
        let comp_refs: Vec<&Trajectory> = comps.iter().collect();
        let got = composite_mse_per_demo(&b, &comp, &sub_refs, &comp_refs, CompositeEmbedding::Sum).unwrap();
        let a = [&subs[0], &subs[2]];
        for (k, c) in comps.iter().enumerate() {
            let za = crate::model::encode(&b, &a[k % 2].states).unwrap();
            let zb = crate::model::encode(&b, &subs[1].states).unwrap();
            let z: Vec<f64> = za.mean().iter().zip(zb.mean()).map(|(x, y)| x + y).collect();
            let gen = crate::model::rollout(&b, &z, c.first_state(), c.len(), RolloutMode::Mean, &mut NoiseSource::new(0)).unwrap();
            let want = state_mse(&gen, c).unwrap();
            assert!((got[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn additivity_cases() {
        let mut b = ModelBundle::init(&tiny(), 3).unwrap();
        let comp = CompositionSpec::new("c", vec!["a".into(), "b".into()]).unwrap();
        let (x, y, c) = (demo(4, 1, "a"), demo(5, 2, "b"), demo(6, 3, "c"));
        let e = additivity_error(&b, &comp, &[&x, &y], &c).unwrap();
        assert!(e > 0.0);
        assert_eq!(e, additivity_error(&b, &comp, &[&y, &x], &c).unwrap());
        assert!(matches!(additivity_error(&b, &comp, &[&x], &c), Err(Error::InvalidInput(_))));

        let single = CompositionSpec::new("c", vec!["a".into()]).unwrap();
        assert_eq!(additivity_error(&b, &single, &[&x], &x).unwrap(), 0.0);

        zero_params(&mut b, "enc.mean");
        assert_eq!(additivity_error(&b, &comp, &[&x, &y], &c).unwrap(), 0.0);
    }

    fn row(objective: &str, seed: u64, epoch: usize, mse: f64) -> MetricsRow {
        MetricsRow {
            run_id: format!("{objective}-seed{seed}"),
            objective: objective.into(),
            seed,
            epoch,
            train_loss: 1.0,
            action_nll: 0.5,
            state_nll: 0.25,
            kl: 0.25,
            mi_term: 0.0,
            eval_mse_sum_embedding: Some(mse),
            eval_mse_encoded: Some(mse * 2.0),
            additivity_error: Some(0.1),
        }
    }

    #[test]
    fn aggregation_cases() {
        let single = vec![row("original", 0, 0, 2.5), row("original", 0, 5, 1.5)];
        let agg = aggregate_rows(&single);
        let find = |agg: &[AggregateRow], e: usize, m: &str| agg.iter().find(|r| r.epoch == e && r.metric == m).unwrap().clone();
        let r = find(&agg, 5, "eval_mse_sum_embedding");
        assert_eq!((r.mean, r.std, r.n_seeds), (1.5, 0.0, 1));
        assert_eq!(find(&agg, 0, "train_loss").mean, 1.0);

        // Sample standard deviation: sqrt(((1-2)² + (3-2)²) / (2-1)).
        let two = vec![row("original", 0, 5, 1.0), row("original", 1, 5, 3.0)];
        let r = find(&aggregate_rows(&two), 5, "eval_mse_sum_embedding");
        assert_eq!((r.mean, r.n_seeds), (2.0, 2));
        assert!((r.std - 2f64.sqrt()).abs() < 1e-15);

        // Unpopulated columns are skipped.
        let mut partial = row("original", 0, 5, 1.0);
        partial.eval_mse_encoded = None;
        assert!(aggregate_rows(&[partial]).iter().all(|r| r.metric != "eval_mse_encoded"));
    }

    proptest! {
        #[test]
        fn mse_symmetric_and_zero_iff_equal(seed in 0u64..500, shift in -1.0f64..1.0) {
            let a = demo(3, seed, "a");
            let mut b = a.clone();
            b.states.data_mut()[seed as usize % 6] += shift;
            let ab = state_mse(&as_generated(&a), &b).unwrap();
            let ba = state_mse(&as_generated(&b), &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(ab == 0.0, shift == 0.0);
        }

        #[test]
        fn aggregation_ignores_input_order(values in proptest::collection::vec(0.0f64..10.0, 2..6), rot in 0usize..6) {
            let rows: Vec<MetricsRow> = values.iter().enumerate().map(|(s, &v)| row("reg_variational", s as u64, 5, v)).collect();
            let mut rotated = rows.clone();
            let k = rot % rows.len();
            rotated.rotate_left(k);
            rotated.reverse();
            prop_assert_eq!(aggregate_rows(&rows), aggregate_rows(&rotated));
        }

        #[test]
        fn additivity_permutation_invariant(seed in 0u64..200) {
            let b = ModelBundle::init(&tiny(), seed).unwrap();
            let comp = CompositionSpec::new("c", vec!["a".into(), "b".into(), "d".into()]).unwrap();
            let ds = [demo(3, seed, "a"), demo(4, seed + 1, "b"), demo(5, seed + 2, "d")];
            let c = demo(4, seed + 3, "c");
            let e1 = additivity_error(&b, &comp, &[&ds[0], &ds[1], &ds[2]], &c).unwrap();
            let e2 = additivity_error(&b, &comp, &[&ds[2], &ds[0], &ds[1]], &c).unwrap();
            prop_assert!((e1 - e2).abs() < 1e-12);
        }
    }
}
