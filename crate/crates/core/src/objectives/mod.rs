//! Training losses: the trajectory ELBO, and the ELBO regularized by a lower
//! bound on `I(V; τ̃)` between the summed subskill embedding `V` and a
//! trajectory `τ̃` generated from a composite latent.
//!
//! Two bound estimators are provided. The variational one scores `V` under an
//! auxiliary recognition network `Q_α(V | τ̃)`. The sample-based one replaces
//! `H(V | τ̃)` by `Σ_i H(z_i | τ̃)` evaluated with the trajectory encoder, so it
//! needs no extra network.
//!
//! The minimized loss is `Σ ELBO-loss − λ · Σ_compositions bound`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::latent_math::{sum_gaussians, DiagGaussian, LN_2PI};
use crate::model::{Ctx, EncodedVars, GeneratedTrajectory, ModelBundle, RolloutMode, Trajectory, AUX_POSTERIOR, ENCODER};
use crate::noise::NoiseSource;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Original,
    RegVariational,
    RegNonvariational,
}

impl Objective {
    pub const ALL: [Objective; 3] = [
        Objective::Original,
        Objective::RegVariational,
        Objective::RegNonvariational,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Original => "original",
            Objective::RegVariational => "reg_variational",
            Objective::RegNonvariational => "reg_nonvariational",
        }
    }

    pub fn is_regularized(self) -> bool {
        self != Objective::Original
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown objective '{s}'")))
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the samples `z_{n,i}` of the sample-based bound come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiSampling {
    /// From the encoder applied to the generated trajectory.
    AsWritten,
    /// From subskill posterior `i`, scored under the encoder applied to the
    /// generated trajectory.
    Cross,
}

/// How the latent that conditions a composite rollout is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeEmbedding {
    /// Sum of sampled subskill embeddings.
    Sum,
    /// Sample from the posterior of a composite demonstration.
    Encode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub n_mc: usize,
    pub mi_sampling: MiSampling,
    pub composite_embedding: CompositeEmbedding,
    /// Length of generated composite trajectories; `None` uses the length of
    /// the first subskill demonstration.
    pub rollout_t: Option<usize>,
    /// Composite rollouts per composition per loss evaluation; the bound is
    /// averaged over them.
    pub composite_rollouts: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            objective: Objective::Original,
            lambda: 0.1,
            n_mc: 8,
            mi_sampling: MiSampling::AsWritten,
            composite_embedding: CompositeEmbedding::Sum,
            rollout_t: None,
            composite_rollouts: 4,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be at least 1".into()));
        }
        if self.rollout_t == Some(0) {
            return Err(Error::Config("rollout_t must be at least 1".into()));
        }
        if self.composite_rollouts == 0 {
            return Err(Error::Config("composite_rollouts must be at least 1".into()));
        }
        Ok(())
    }
}

/// A composite skill and the subskills it is made of.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub composite_id: String,
    pub subskill_ids: Vec<String>,
}

impl CompositionSpec {
    pub fn new(composite_id: impl Into<String>, subskill_ids: Vec<String>) -> Result<Self> {
        let spec = CompositionSpec {
            composite_id: composite_id.into(),
            subskill_ids,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subskill_ids.is_empty() {
            return Err(Error::Validation(format!(
                "composition '{}' has no subskills",
                self.composite_id
            )));
        }
        for (i, id) in self.subskill_ids.iter().enumerate() {
            if self.subskill_ids[..i].contains(id) {
                return Err(Error::Validation(format!(
                    "composition '{}' lists subskill '{id}' twice",
                    self.composite_id
                )));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.subskill_ids.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub loss: f64,
    pub action_nll: f64,
    pub state_nll: f64,
    pub kl: f64,
    /// Sum over compositions of the mutual-information bound (0 for the
    /// baseline objective).
    pub mi_term: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.loss, self.action_nll, self.state_nll, self.kl, self.mi_term]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Graph handles for the ELBO over a batch.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub enc: EncodedVars,
    pub action_nll: Var,
    pub state_nll: Option<Var>,
    pub kl: Var,
    pub loss: Var,
}

/// Graph handles for a regularized loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub elbo: ElboVars,
    pub mi_term: Option<Var>,
    pub loss: Var,
}

/// `Σ_j ½(σ_j² + μ_j² − 1 − 2 ln σ_j)`, summed over rows.
fn kl_vars(ctx: &mut Ctx, enc: &EncodedVars) -> Var {
    let g = &mut ctx.g;
    let var = g.square(enc.std);
    let m2 = g.square(enc.mean);
    let s = g.add(var, m2);
    let ls2 = g.scale(enc.log_std, 2.0);
    let s = g.sub(s, ls2);
    let s = g.add_scalar(s, -1.0);
    let s = g.sum(s);
    g.scale(s, 0.5)
}

fn check_trajectories(bundle: &ModelBundle, trajs: &[&Trajectory]) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let cfg = &bundle.config;
    for t in trajs {
        t.validate()?;
        if t.states.cols() != cfg.d_state || t.actions.cols() != cfg.d_action {
            return Err(Error::InvalidInput(format!(
                "trajectory '{}' has state/action widths {}/{}, model expects {}/{}",
                t.skill_id,
                t.states.cols(),
                t.actions.cols(),
                cfg.d_state,
                cfg.d_action
            )));
        }
    }
    Ok(())
}

/// Single-sample ELBO loss summed over `trajs`. Dynamics transitions run over
/// `t = 1..T-1`, teacher-forced on the demonstration states.
pub fn elbo_vars(ctx: &mut Ctx, trajs: &[&Trajectory], noise: &mut NoiseSource) -> Result<ElboVars> {
    check_trajectories(ctx.bundle(), trajs)?;
    let dz = ctx.config().d_latent;
    let states: Vec<&Tensor> = trajs.iter().map(|t| &t.states).collect();
    let enc = ctx.encode_states(ENCODER, &states)?;
    let z = ctx.sample_latent(&enc, noise.normal_tensor(trajs.len(), dz));

    let mut owner = Vec::new();
    let mut s_all = Vec::new();
    let mut a_all = Vec::new();
    for (b, t) in trajs.iter().enumerate() {
        owner.extend(std::iter::repeat_n(b, t.len()));
        s_all.extend_from_slice(t.states.data());
        a_all.extend_from_slice(t.actions.data());
    }
    let n = owner.len();
    let cfg = ctx.config();
    let s = ctx.constant(Tensor::from_vec(n, cfg.d_state, s_all));
    let a = ctx.constant(Tensor::from_vec(n, cfg.d_action, a_all));
    let z_rows = ctx.g.gather_rows(z, owner);
    let lp = ctx.policy_logprob_rows(s, z_rows, a);
    let lp = ctx.g.sum(lp);
    let action_nll = ctx.g.neg(lp);

    let state_nll = ctx
        .dynamics_teacher_logprob(&states, z)
        .map(|lp| ctx.g.neg(lp));
    let kl = kl_vars(ctx, &enc);
    let mut loss = ctx.g.add(action_nll, kl);
    if let Some(s) = state_nll {
        loss = ctx.g.add(loss, s);
    }
    Ok(ElboVars {
        enc,
        action_nll,
        state_nll,
        kl,
        loss,
    })
}

fn elbo_components(ctx: &Ctx, e: &ElboVars) -> LossComponents {
    LossComponents {
        loss: ctx.g.scalar(e.loss),
        action_nll: ctx.g.scalar(e.action_nll),
        state_nll: e.state_nll.map_or(0.0, |v| ctx.g.scalar(v)),
        kl: ctx.g.scalar(e.kl),
        mi_term: 0.0,
    }
}

/// ELBO loss of one trajectory with its components.
pub fn elbo_loss(bundle: &ModelBundle, traj: &Trajectory, noise: &mut NoiseSource) -> Result<LossComponents> {
    let mut ctx = Ctx::new(bundle, false);
    let e = elbo_vars(&mut ctx, &[traj], noise)?;
    Ok(elbo_components(&ctx, &e))
}

/// Distribution of `V = Σ_i z_i` with `z_i ~ q(z | demo_i)` independent.
pub fn build_v(bundle: &ModelBundle, subskill_demos: &[Trajectory]) -> Result<DiagGaussian> {
    if subskill_demos.is_empty() {
        return Err(Error::InvalidInput("no subskill demonstrations".into()));
    }
    let mut ctx = Ctx::new(bundle, false);
    let states: Vec<&Tensor> = subskill_demos.iter().map(|t| &t.states).collect();
    let enc = ctx.encode_states(ENCODER, &states)?;
    let parts = (0..subskill_demos.len())
        .map(|i| ctx.read_gaussian(&enc, i))
        .collect::<Result<Vec<_>>>()?;
    sum_gaussians(&parts)
}

/// Latent that conditions a composite rollout.
pub fn make_composite_latent(
    bundle: &ModelBundle,
    comp: &CompositionSpec,
    subskill_demos: &[Trajectory],
    composite_demo: Option<&Trajectory>,
    mode: CompositeEmbedding,
    noise: &mut NoiseSource,
) -> Result<Vec<f64>> {
    let dz = bundle.config.d_latent;
    match mode {
        CompositeEmbedding::Sum => {
            if subskill_demos.len() != comp.m() {
                return Err(Error::InvalidInput(format!(
                    "composition '{}' has {} subskills but {} demonstrations were given",
                    comp.composite_id,
                    comp.m(),
                    subskill_demos.len()
                )));
            }
            let mut z = vec![0.0; dz];
            for demo in subskill_demos {
                let post = crate::model::encode(bundle, &demo.states)?;
                let sample = post.sample_with(&noise.normal_vec(dz))?;
                z.iter_mut().zip(sample).for_each(|(a, b)| *a += b);
            }
            Ok(z)
        }
        CompositeEmbedding::Encode => {
            let demo = composite_demo.ok_or_else(|| {
                Error::Config(format!(
                    "composite '{}' needs a composite demonstration in encode mode",
                    comp.composite_id
                ))
            })?;
            let post = crate::model::encode(bundle, &demo.states)?;
            post.sample_with(&noise.normal_vec(dz))
        }
    }
}

/// Per-row `Σ_j ½(1 + ln 2π + ln var_j)`, `R × 1`.
fn entropy_from_var(ctx: &mut Ctx, var: Var) -> Var {
    let g = &mut ctx.g;
    let ln_var = g.ln(var);
    let rows = g.sum_cols(ln_var);
    let d = g.value(var).cols() as f64;
    let rows = g.scale(rows, 0.5);
    g.add_scalar(rows, 0.5 * d * (1.0 + LN_2PI))
}

fn mean_rows(ctx: &mut Ctx, col: Var) -> Var {
    let n = ctx.g.value(col).rows() as f64;
    let s = ctx.g.sum(col);
    ctx.g.scale(s, 1.0 / n)
}

/// Variational bound averaged over `R` rollouts:
/// `mean_r [log Q_α(v_sample_r | τ̃_r) + H(V_r)]`.
pub fn mi_variational_vars(ctx: &mut Ctx, v_var: Var, v_sample: Var, gen_states: &[Var]) -> Result<Var> {
    if !ctx.bundle().has_aux_posterior() {
        return Err(Error::Config(
            "the variational bound needs auxiliary posterior parameters".into(),
        ));
    }
    let q = ctx.encode_steps(AUX_POSTERIOR, gen_states);
    let log_q = ctx.gaussian_logpdf_rows(v_sample, q.mean, q.log_std);
    let h = entropy_from_var(ctx, v_var);
    let total = ctx.g.add(log_q, h);
    Ok(mean_rows(ctx, total))
}

/// Sample-based bound averaged over `R` rollouts:
/// `H(V_r) + (1/N) Σ_n Σ_i log q(z_{n,i} | τ̃_r)`.
///
/// `cross` carries the subskill posteriors as `(mean, log_std)` rows indexed
/// by `cross_rows[r][i]`; required for [`MiSampling::Cross`].
#[allow(clippy::too_many_arguments)]
pub fn mi_sample_vars(
    ctx: &mut Ctx,
    v_var: Var,
    gen_states: &[Var],
    m: usize,
    n_mc: usize,
    sampling: MiSampling,
    cross: Option<(&EncodedVars, &[Vec<usize>])>,
    noise: &mut NoiseSource,
) -> Result<Var> {
    if n_mc == 0 {
        return Err(Error::InvalidInput("n_mc must be at least 1".into()));
    }
    let dz = ctx.config().d_latent;
    let q = ctx.encode_steps(ENCODER, gen_states);
    let r_count = ctx.g.value(q.mean).rows();

    // Rows ordered (n, i, r) with r fastest.
    let mut gen_idx = Vec::with_capacity(n_mc * m * r_count);
    let mut src_idx = Vec::with_capacity(n_mc * m * r_count);
    for _ in 0..n_mc {
        for i in 0..m {
            for r in 0..r_count {
                gen_idx.push(r);
                if let Some((_, rows)) = cross {
                    src_idx.push(rows[r][i]);
                }
            }
        }
    }
    let rows = gen_idx.len();
    let eps = ctx.constant(noise.normal_tensor(rows, dz));
    let q_mean = ctx.g.gather_rows(q.mean, gen_idx.clone());
    let q_log_std = ctx.g.gather_rows(q.log_std, gen_idx);
    let (src_mean, src_std) = match sampling {
        MiSampling::AsWritten => {
            let std = ctx.g.exp(q_log_std);
            (q_mean, std)
        }
        MiSampling::Cross => {
            let (post, _) = cross.ok_or_else(|| {
                Error::Config("cross sampling needs the subskill posteriors".into())
            })?;
            let mean = ctx.g.gather_rows(post.mean, src_idx.clone());
            let std = ctx.g.gather_rows(post.std, src_idx);
            (mean, std)
        }
    };
    let scaled = ctx.g.mul(src_std, eps);
    let z = ctx.g.add(src_mean, scaled);
    let lp = ctx.gaussian_logpdf_rows(z, q_mean, q_log_std);
    let lp = ctx.g.sum(lp);
    // (1/N) Σ_n Σ_i, then mean over rollouts.
    let lp = ctx.g.scale(lp, 1.0 / (n_mc * r_count) as f64);
    let h = entropy_from_var(ctx, v_var);
    let h = mean_rows(ctx, h);
    Ok(ctx.g.add(h, lp))
}

/// Single-sample variational bound for one generated trajectory.
pub fn mi_variational_bound(
    bundle: &ModelBundle,
    v_dist: &DiagGaussian,
    gen: &GeneratedTrajectory,
    noise: &mut NoiseSource,
) -> Result<f64> {
    let v_sample = v_dist.sample(noise);
    mi_variational_bound_at(bundle, v_dist, gen, &v_sample)
}

/// Variational bound with an explicit draw of `V`.
pub fn mi_variational_bound_at(
    bundle: &ModelBundle,
    v_dist: &DiagGaussian,
    gen: &GeneratedTrajectory,
    v_sample: &[f64],
) -> Result<f64> {
    let mut ctx = Ctx::new(bundle, false);
    let var = ctx.constant(Tensor::row_vector(v_dist.variance()));
    let sample = ctx.constant(Tensor::row_vector(v_sample.to_vec()));
    let steps = const_steps(&mut ctx, &gen.states);
    let b = mi_variational_vars(&mut ctx, var, sample, &steps)?;
    Ok(ctx.g.scalar(b))
}

fn const_steps(ctx: &mut Ctx, states: &Tensor) -> Vec<Var> {
    (0..states.rows())
        .map(|t| ctx.constant(Tensor::row_vector(states.row(t).to_vec())))
        .collect()
}

/// Sample-based bound for one generated trajectory.
#[allow(clippy::too_many_arguments)]
pub fn mi_sample_bound(
    bundle: &ModelBundle,
    v_dist: &DiagGaussian,
    gen: &GeneratedTrajectory,
    m: usize,
    n_mc: usize,
    sampling: MiSampling,
    noise: &mut NoiseSource,
    subskill_posteriors: Option<&[DiagGaussian]>,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidInput("M must be at least 1".into()));
    }
    let mut ctx = Ctx::new(bundle, false);
    let var = ctx.constant(Tensor::row_vector(v_dist.variance()));
    let steps = const_steps(&mut ctx, &gen.states);
    let cross_enc = match (sampling, subskill_posteriors) {
        (MiSampling::Cross, None) => {
            return Err(Error::Config(
                "cross sampling needs the subskill posteriors".into(),
            ))
        }
        (MiSampling::Cross, Some(posts)) => {
            if posts.len() != m {
                return Err(Error::InvalidInput(format!(
                    "expected {m} subskill posteriors, got {}",
                    posts.len()
                )));
            }
            let means: Vec<Vec<f64>> = posts.iter().map(|p| p.mean().to_vec()).collect();
            let stds: Vec<Vec<f64>> = posts.iter().map(|p| p.std().to_vec()).collect();
            let log_stds: Vec<Vec<f64>> = stds.iter().map(|s| s.iter().map(|v| v.ln()).collect()).collect();
            let mean = ctx.constant(Tensor::from_rows(&means));
            let std = ctx.constant(Tensor::from_rows(&stds));
            let log_std = ctx.constant(Tensor::from_rows(&log_stds));
            let weights = ctx.constant(Tensor::zeros(m, 1));
            Some(EncodedVars {
                mean,
                log_std,
                std,
                weights,
            })
        }
        (MiSampling::AsWritten, _) => None,
    };
    let rows = vec![(0..m).collect::<Vec<_>>()];
    let cross = cross_enc.as_ref().map(|e| (e, rows.as_slice()));
    let b = mi_sample_vars(&mut ctx, var, &steps, m, n_mc, sampling, cross, noise)?;
    Ok(ctx.g.scalar(b))
}

/// Indices of batch trajectories by skill label, in batch order.
fn index_by_skill<'t>(batch: &[&'t Trajectory]) -> BTreeMap<&'t str, Vec<usize>> {
    let mut by_skill: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in batch.iter().enumerate() {
        by_skill.entry(t.skill_id.as_str()).or_default().push(i);
    }
    by_skill
}

fn pick(noise: &mut NoiseSource, candidates: &[usize]) -> usize {
    let k = (noise.uniform() * candidates.len() as f64) as usize;
    candidates[k.min(candidates.len() - 1)]
}

/// Regularized loss graph for a batch. For [`Objective::Original`] only the
/// ELBO is built.
///
/// For every composition, `composite_rollouts` composite latents are formed
/// from demonstrations in the batch (one randomly chosen demo per subskill),
/// decoded by a stochastic rollout, and scored by the selected bound. In sum
/// mode the composite latent is itself the draw of `V` scored by the
/// variational bound.
pub fn loss_vars(
    ctx: &mut Ctx,
    batch: &[&Trajectory],
    compositions: &[CompositionSpec],
    cfg: &ObjectiveConfig,
    noise: &mut NoiseSource,
) -> Result<LossVars> {
    cfg.validate()?;
    let elbo = elbo_vars(ctx, batch, noise)?;
    if !cfg.objective.is_regularized() {
        return Ok(LossVars {
            elbo,
            mi_term: None,
            loss: elbo.loss,
        });
    }

    let dz = ctx.config().d_latent;
    let by_skill = index_by_skill(batch);
    let mut mi_total: Option<Var> = None;
    for comp in compositions {
        comp.validate()?;
        let mut candidates = Vec::with_capacity(comp.m());
        for id in &comp.subskill_ids {
            let c = by_skill.get(id.as_str()).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "batch has no demonstration of subskill '{id}' needed by '{}'",
                    comp.composite_id
                ))
            })?;
            candidates.push(c.as_slice());
        }
        let r_count = cfg.composite_rollouts;
        let picks: Vec<Vec<usize>> = (0..r_count)
            .map(|_| candidates.iter().map(|c| pick(noise, c)).collect())
            .collect();

        // V per rollout: means and variances of the picked posteriors add.
        let std2 = ctx.g.square(elbo.enc.std);
        let mut v_mean = None;
        let mut v_var = None;
        for i in 0..comp.m() {
            let idx: Vec<usize> = picks.iter().map(|p| p[i]).collect();
            let m_i = ctx.g.gather_rows(elbo.enc.mean, idx.clone());
            let v_i = ctx.g.gather_rows(std2, idx);
            v_mean = Some(v_mean.map_or(m_i, |acc| ctx.g.add(acc, m_i)));
            v_var = Some(v_var.map_or(v_i, |acc| ctx.g.add(acc, v_i)));
        }
        let (v_mean, v_var) = (v_mean.unwrap(), v_var.unwrap());

        let (z_tilde, s1, v_sample) = match cfg.composite_embedding {
            CompositeEmbedding::Sum => {
                let mut z = None;
                for i in 0..comp.m() {
                    let idx: Vec<usize> = picks.iter().map(|p| p[i]).collect();
                    let m_i = ctx.g.gather_rows(elbo.enc.mean, idx.clone());
                    let s_i = ctx.g.gather_rows(elbo.enc.std, idx);
                    let eps = ctx.constant(noise.normal_tensor(r_count, dz));
                    let scaled = ctx.g.mul(s_i, eps);
                    let z_i = ctx.g.add(m_i, scaled);
                    z = Some(z.map_or(z_i, |acc| ctx.g.add(acc, z_i)));
                }
                let s1: Vec<Vec<f64>> = picks.iter().map(|p| batch[p[0]].first_state().to_vec()).collect();
                let z = z.unwrap();
                (z, s1, z)
            }
            CompositeEmbedding::Encode => {
                let demos = by_skill.get(comp.composite_id.as_str()).ok_or_else(|| {
                    Error::Config(format!(
                        "encode mode needs a demonstration of composite '{}' in the batch",
                        comp.composite_id
                    ))
                })?;
                let chosen: Vec<usize> = (0..r_count).map(|_| pick(noise, demos)).collect();
                let m_c = ctx.g.gather_rows(elbo.enc.mean, chosen.clone());
                let s_c = ctx.g.gather_rows(elbo.enc.std, chosen.clone());
                let eps = ctx.constant(noise.normal_tensor(r_count, dz));
                let scaled = ctx.g.mul(s_c, eps);
                let z = ctx.g.add(m_c, scaled);
                let v_std = ctx.g.ln(v_var);
                let v_std = ctx.g.scale(v_std, 0.5);
                let v_std = ctx.g.exp(v_std);
                let eps_v = ctx.constant(noise.normal_tensor(r_count, dz));
                let scaled_v = ctx.g.mul(v_std, eps_v);
                let v = ctx.g.add(v_mean, scaled_v);
                let s1 = chosen.iter().map(|&c| batch[c].first_state().to_vec()).collect();
                (z, s1, v)
            }
        };

        let steps = cfg.rollout_t.unwrap_or_else(|| batch[picks[0][0]].len());
        let s1 = ctx.constant(Tensor::from_rows(&s1));
        let gen = ctx.rollout(z_tilde, s1, steps, RolloutMode::Stochastic, noise)?;
        let bound = match cfg.objective {
            Objective::RegVariational => mi_variational_vars(ctx, v_var, v_sample, &gen.states)?,
            Objective::RegNonvariational => {
                let cross = (cfg.mi_sampling == MiSampling::Cross).then_some((&elbo.enc, picks.as_slice()));
                mi_sample_vars(ctx, v_var, &gen.states, comp.m(), cfg.n_mc, cfg.mi_sampling, cross, noise)?
            }
            Objective::Original => unreachable!(),
        };
        mi_total = Some(mi_total.map_or(bound, |acc| ctx.g.add(acc, bound)));
    }

    let loss = match mi_total {
        Some(mi) => {
            let reg = ctx.g.scale(mi, -cfg.lambda);
            ctx.g.add(elbo.loss, reg)
        }
        None => elbo.loss,
    };
    Ok(LossVars {
        elbo,
        mi_term: mi_total,
        loss,
    })
}

fn components(ctx: &Ctx, v: &LossVars) -> LossComponents {
    LossComponents {
        loss: ctx.g.scalar(v.loss),
        mi_term: v.mi_term.map_or(0.0, |m| ctx.g.scalar(m)),
        ..elbo_components(ctx, &v.elbo)
    }
}

/// Loss value and components for a batch under `cfg`.
pub fn regularized_loss(
    bundle: &ModelBundle,
    batch: &[Trajectory],
    compositions: &[CompositionSpec],
    cfg: &ObjectiveConfig,
    noise: &mut NoiseSource,
) -> Result<LossComponents> {
    let refs: Vec<&Trajectory> = batch.iter().collect();
    let mut ctx = Ctx::new(bundle, false);
    let v = loss_vars(&mut ctx, &refs, compositions, cfg, noise)?;
    Ok(components(&ctx, &v))
}

/// Loss components plus parameter gradients (in parameter-store order).
pub fn loss_and_gradients(
    bundle: &ModelBundle,
    batch: &[&Trajectory],
    compositions: &[CompositionSpec],
    cfg: &ObjectiveConfig,
    noise: &mut NoiseSource,
) -> Result<(LossComponents, Vec<Tensor>)> {
    let mut ctx = Ctx::new(bundle, true);
    let v = loss_vars(&mut ctx, batch, compositions, cfg, noise)?;
    let c = components(&ctx, &v);
    let grads = ctx.gradients(v.loss);
    Ok((c, grads))
}
