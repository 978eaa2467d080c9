//! The conditional trajectory VAE: a bidirectional-LSTM state-sequence
//! encoder with attention pooling, a latent-conditioned Gaussian policy, a
//! latent-conditioned autoregressive dynamics model emitting a Gaussian
//! mixture, and an optional auxiliary posterior network over `V`.
//!
//! Every network is expressed on an [`autodiff::Graph`](crate::autodiff::Graph)
//! through [`Ctx`]. The free functions in this module are convenience
//! wrappers that build a throwaway graph and read plain values back.

mod decoders;
mod encoder;
mod params;
mod rollout;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::latent_math::DiagGaussian;
use crate::noise::NoiseSource;
use crate::tensor::Tensor;

pub use decoders::{DynHistory, Mixture};
pub use encoder::EncodedVars;
pub use params::{ParamStore, NamedParam};
pub use rollout::{RolloutMode, RolloutVars};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Prefix of the trajectory encoder's parameters.
pub const ENCODER: &str = "enc";
/// Prefix of the auxiliary posterior's parameters.
pub const AUX_POSTERIOR: &str = "aux";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsArch {
    Mlp,
    CausalConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_state: usize,
    pub d_action: usize,
    pub d_latent: usize,
    pub encoder_hidden: usize,
    pub attention_dim: usize,
    /// Width of the policy and dynamics hidden layers.
    pub decoder_hidden: usize,
    pub dynamics_arch: DynamicsArch,
    pub mixture_components: usize,
    /// Number of dilated layers when `dynamics_arch` is `causal_conv`;
    /// layer `l` has dilation `2^l`.
    pub conv_layers: usize,
    pub log_std_clamp: [f64; 2],
    /// Allocate the auxiliary posterior network.
    pub aux_posterior: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_state: 2,
            d_action: 2,
            d_latent: 4,
            encoder_hidden: 16,
            attention_dim: 16,
            decoder_hidden: 32,
            dynamics_arch: DynamicsArch::Mlp,
            mixture_components: 1,
            conv_layers: 2,
            log_std_clamp: [-5.0, 2.0],
            aux_posterior: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_state", self.d_state),
            ("d_action", self.d_action),
            ("d_latent", self.d_latent),
            ("encoder_hidden", self.encoder_hidden),
            ("attention_dim", self.attention_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("mixture_components", self.mixture_components),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.dynamics_arch == DynamicsArch::CausalConv && self.conv_layers == 0 {
            return Err(Error::Config("conv_layers must be at least 1".into()));
        }
        let [lo, hi] = self.log_std_clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!(
                "log_std_clamp must satisfy low < high, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Demonstration trajectory: `T` states and `T` actions with a skill label.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Tensor,
    pub actions: Tensor,
    pub skill_id: String,
}

impl Trajectory {
    pub fn new(states: Tensor, actions: Tensor, skill_id: impl Into<String>) -> Result<Self> {
        let t = Trajectory {
            states,
            actions,
            skill_id: skill_id.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.rows() == 0 {
            return Err(Error::InvalidInput("trajectory has no steps".into()));
        }
        if self.states.rows() != self.actions.rows() {
            return Err(Error::InvalidInput(format!(
                "trajectory has {} states but {} actions",
                self.states.rows(),
                self.actions.rows()
            )));
        }
        if !self.states.is_finite() || !self.actions.is_finite() {
            return Err(Error::InvalidInput("trajectory has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    pub fn first_state(&self) -> &[f64] {
        self.states.row(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTrajectory {
    pub states: Tensor,
    pub actions: Tensor,
    pub conditioning_latent: Vec<f64>,
}

/// Parameters of every network plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub format_version: u32,
}

impl ModelBundle {
    /// Deterministic initialization from `seed`.
    ///
    /// The encoder's log-std head starts at zero and its mean head is small,
    /// so fresh posteriors are close to the standard normal prior. The
    /// dynamics mean head starts at zero, which makes the residual dynamics
    /// an identity map.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = NoiseSource::new(seed);
        let mut params = ParamStore::default();
        encoder::init_params(&mut params, ENCODER, config, &mut rng);
        decoders::init_params(&mut params, config, &mut rng);
        if config.aux_posterior {
            encoder::init_params(&mut params, AUX_POSTERIOR, config, &mut rng);
        }
        Ok(ModelBundle {
            config: config.clone(),
            params,
            format_version: CHECKPOINT_FORMAT_VERSION,
        })
    }

    pub fn has_aux_posterior(&self) -> bool {
        self.params.index_of(&format!("{AUX_POSTERIOR}.mean.w")).is_some()
    }

    /// Checks that every parameter the configuration implies exists with the
    /// right shape.
    pub fn validate(&self) -> Result<()> {
        let reference = ModelBundle::init(&self.config, 0)?;
        for p in reference.params.iter() {
            match self.params.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => {
                    return Err(Error::Validation(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => {
                    return Err(Error::Validation(format!("missing parameter {}", p.name)))
                }
            }
        }
        if self.params.len() != reference.params.len() {
            return Err(Error::Validation(format!(
                "bundle has {} parameters, configuration implies {}",
                self.params.len(),
                reference.params.len()
            )));
        }
        Ok(())
    }
}

/// A graph bound to one [`ModelBundle`]. Parameters are inserted lazily the
/// first time a network touches them.
pub struct Ctx<'a> {
    pub g: Graph,
    bundle: &'a ModelBundle,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Ctx<'a> {
    /// `track = false` inserts parameters as constants, skipping the
    /// bookkeeping needed for gradients.
    pub fn new(bundle: &'a ModelBundle, track: bool) -> Self {
        Ctx {
            g: Graph::new(),
            bundle,
            bound: vec![None; bundle.params.len()],
            track,
        }
    }

    pub fn bundle(&self) -> &'a ModelBundle {
        self.bundle
    }

    pub fn config(&self) -> &'a ModelConfig {
        &self.bundle.config
    }

    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .bundle
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let value = self.bundle.params.value(idx).clone();
        let v = if self.track {
            self.g.param(idx, value)
        } else {
            self.g.constant(value)
        };
        self.bound[idx] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Parameter gradients of a scalar output, in store order. Untouched
    /// parameters get zeros.
    pub fn gradients(&self, output: Var) -> Vec<Tensor> {
        let grads = self.g.backward(output, self.bundle.params.len());
        grads
            .grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| {
                    let (r, c) = self.bundle.params.value(i).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }

    /// `mean + std ⊙ noise`, row-wise.
    pub fn sample_latent(&mut self, enc: &EncodedVars, noise: Tensor) -> Var {
        let eps = self.g.constant(noise);
        let scaled = self.g.mul(enc.std, eps);
        self.g.add(enc.mean, scaled)
    }

    /// Reads row `row` of an encoder output back as a [`DiagGaussian`].
    pub fn read_gaussian(&self, enc: &EncodedVars, row: usize) -> Result<DiagGaussian> {
        DiagGaussian::new(
            self.g.value(enc.mean).row(row).to_vec(),
            self.g.value(enc.std).row(row).to_vec(),
        )
    }
}

fn check_cols(t: &Tensor, expected: usize, what: &str) -> Result<()> {
    if t.cols() != expected {
        return Err(Error::InvalidInput(format!(
            "{what} has {} columns, expected {expected}",
            t.cols()
        )));
    }
    Ok(())
}

fn check_len(v: &[f64], expected: usize, what: &str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::InvalidInput(format!(
            "{what} has length {}, expected {expected}",
            v.len()
        )));
    }
    Ok(())
}

/// Posterior `q(z | s_{1:T})` for one state sequence.
pub fn encode(bundle: &ModelBundle, states: &Tensor) -> Result<DiagGaussian> {
    Ok(encode_with_attention(bundle, states)?.0)
}

/// Posterior plus the attention weights over timesteps.
pub fn encode_with_attention(
    bundle: &ModelBundle,
    states: &Tensor,
) -> Result<(DiagGaussian, Vec<f64>)> {
    let mut ctx = Ctx::new(bundle, false);
    let enc = ctx.encode_states(ENCODER, &[states])?;
    let weights = ctx.g.value(enc.weights).row(0).to_vec();
    Ok((ctx.read_gaussian(&enc, 0)?, weights))
}

/// Attention pooling of precomputed per-step features (`T × 2·encoder_hidden`)
/// with the encoder's attention parameters. Returns `(pooled, weights)`.
pub fn attention_pool(bundle: &ModelBundle, step_features: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    check_cols(step_features, 2 * bundle.config.encoder_hidden, "step features")?;
    if step_features.rows() == 0 {
        return Err(Error::InvalidInput("no step features".into()));
    }
    let mut ctx = Ctx::new(bundle, false);
    let steps: Vec<Var> = (0..step_features.rows())
        .map(|t| ctx.constant(Tensor::row_vector(step_features.row(t).to_vec())))
        .collect();
    let (pooled, weights) = ctx.attention_pool(ENCODER, &steps);
    Ok((
        ctx.g.value(pooled).data().to_vec(),
        ctx.g.value(weights).data().to_vec(),
    ))
}

/// `mean + std ⊙ noise`.
pub fn sample_latent(g: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    g.sample_with(noise)
}

/// `log π(a_t | s_t, z)`.
pub fn policy_logprob(bundle: &ModelBundle, z: &[f64], state: &[f64], action: &[f64]) -> Result<f64> {
    let cfg = &bundle.config;
    check_len(z, cfg.d_latent, "latent")?;
    check_len(state, cfg.d_state, "state")?;
    check_len(action, cfg.d_action, "action")?;
    let mut ctx = Ctx::new(bundle, false);
    let s = ctx.constant(Tensor::row_vector(state.to_vec()));
    let zv = ctx.constant(Tensor::row_vector(z.to_vec()));
    let a = ctx.constant(Tensor::row_vector(action.to_vec()));
    let lp = ctx.policy_logprob_rows(s, zv, a);
    Ok(ctx.g.value(lp).item())
}

/// Policy action distribution at `(s_t, z)`.
pub fn policy_distribution(bundle: &ModelBundle, z: &[f64], state: &[f64]) -> Result<DiagGaussian> {
    let cfg = &bundle.config;
    check_len(z, cfg.d_latent, "latent")?;
    check_len(state, cfg.d_state, "state")?;
    let mut ctx = Ctx::new(bundle, false);
    let s = ctx.constant(Tensor::row_vector(state.to_vec()));
    let zv = ctx.constant(Tensor::row_vector(z.to_vec()));
    let (mean, log_std) = ctx.policy_head(s, zv);
    DiagGaussian::new(
        ctx.g.value(mean).data().to_vec(),
        ctx.g.value(log_std).data().iter().map(|v| v.exp()).collect(),
    )
}

/// `log P(s_{t+1} | s_t, z)`, exact under the mixture.
///
/// With the causal-convolution architecture the state history is taken to be
/// `s_t` alone (earlier taps are padded with `s_t`).
pub fn dynamics_logprob(bundle: &ModelBundle, z: &[f64], state: &[f64], next_state: &[f64]) -> Result<f64> {
    let cfg = &bundle.config;
    check_len(z, cfg.d_latent, "latent")?;
    check_len(state, cfg.d_state, "state")?;
    check_len(next_state, cfg.d_state, "next state")?;
    let mut ctx = Ctx::new(bundle, false);
    let s = ctx.constant(Tensor::row_vector(state.to_vec()));
    let zv = ctx.constant(Tensor::row_vector(z.to_vec()));
    let target = ctx.constant(Tensor::row_vector(next_state.to_vec()));
    let mut hist = DynHistory::new(s);
    let mix = ctx.dynamics_step(&mut hist, zv);
    let lp = ctx.mixture_logprob(&mix, target);
    Ok(ctx.g.value(lp).item())
}

/// Dynamics mixture at `(s_t, z)`: component means, stds and weights.
pub fn dynamics_distribution(
    bundle: &ModelBundle,
    z: &[f64],
    state: &[f64],
) -> Result<Vec<(f64, DiagGaussian)>> {
    let cfg = &bundle.config;
    check_len(z, cfg.d_latent, "latent")?;
    check_len(state, cfg.d_state, "state")?;
    let mut ctx = Ctx::new(bundle, false);
    let s = ctx.constant(Tensor::row_vector(state.to_vec()));
    let zv = ctx.constant(Tensor::row_vector(z.to_vec()));
    let mut hist = DynHistory::new(s);
    let mix = ctx.dynamics_step(&mut hist, zv);
    let log_w = ctx.g.value(mix.log_weights).data().to_vec();
    mix.means
        .iter()
        .zip(&mix.log_stds)
        .zip(log_w)
        .map(|((&m, &ls), lw)| {
            let g = DiagGaussian::new(
                ctx.g.value(m).data().to_vec(),
                ctx.g.value(ls).data().iter().map(|v| v.exp()).collect(),
            )?;
            Ok((lw.exp(), g))
        })
        .collect()
}

/// Free-running generation of `steps` states and actions from `z`,
/// starting at `s1`.
pub fn rollout(
    bundle: &ModelBundle,
    z: &[f64],
    s1: &[f64],
    steps: usize,
    mode: RolloutMode,
    noise: &mut NoiseSource,
) -> Result<GeneratedTrajectory> {
    let cfg = &bundle.config;
    check_len(z, cfg.d_latent, "latent")?;
    check_len(s1, cfg.d_state, "initial state")?;
    let mut ctx = Ctx::new(bundle, false);
    let zv = ctx.constant(Tensor::row_vector(z.to_vec()));
    let sv = ctx.constant(Tensor::row_vector(s1.to_vec()));
    let out = ctx.rollout(zv, sv, steps, mode, noise)?;
    Ok(ctx.read_rollout(&out, 0, z.to_vec()))
}

/// `Q_α(V | τ̃)` from the generated trajectory's states.
pub fn aux_posterior(bundle: &ModelBundle, traj: &GeneratedTrajectory) -> Result<DiagGaussian> {
    if !bundle.has_aux_posterior() {
        return Err(Error::Config(
            "bundle has no auxiliary posterior parameters".into(),
        ));
    }
    let mut ctx = Ctx::new(bundle, false);
    let enc = ctx.encode_states(AUX_POSTERIOR, &[&traj.states])?;
    ctx.read_gaussian(&enc, 0)
}

#[cfg(test)]
mod tests;
