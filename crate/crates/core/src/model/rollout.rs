use serde::{Deserialize, Serialize};

use super::decoders::DynHistory;
use super::{Ctx, GeneratedTrajectory};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::noise::NoiseSource;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Reparameterized samples from the policy and dynamics heads.
    Stochastic,
    /// Distribution means; no noise is consumed.
    Mean,
}

/// Per-step generated states and actions for a batch of rollouts.
#[derive(Clone, Debug)]
pub struct RolloutVars {
    pub states: Vec<Var>,
    pub actions: Vec<Var>,
}

impl Ctx<'_> {
    /// Free-running generation for `B` rollouts at once: `z` is `B × d_latent`
    /// and `s1` is `B × d_state`.
    ///
    /// In stochastic mode every sample is `mean + std ⊙ ε`, so the result is
    /// differentiable in the parameters and in `z`. Mixture components are
    /// picked by a categorical draw that is not differentiated.
    pub fn rollout(
        &mut self,
        z: Var,
        s1: Var,
        steps: usize,
        mode: RolloutMode,
        noise: &mut NoiseSource,
    ) -> Result<RolloutVars> {
        if steps == 0 {
            return Err(Error::InvalidInput("rollout length must be at least 1".into()));
        }
        let cfg = self.config();
        let batch = self.g.value(z).rows();
        let mut hist = DynHistory::new(s1);
        let mut states = Vec::with_capacity(steps);
        let mut actions = Vec::with_capacity(steps);
        let mut s = s1;
        for t in 0..steps {
            states.push(s);
            let (a_mean, a_log_std) = self.policy_head(s, z);
            let a = match mode {
                RolloutMode::Mean => a_mean,
                RolloutMode::Stochastic => {
                    let eps = self.constant(noise.normal_tensor(batch, cfg.d_action));
                    self.reparam(a_mean, a_log_std, eps)
                }
            };
            actions.push(a);
            if t + 1 == steps {
                break;
            }

            let mix = self.dynamics_step(&mut hist, z);
            let next = match mode {
                RolloutMode::Mean => self.mixture_mean(&mix),
                RolloutMode::Stochastic if mix.means.len() == 1 => {
                    let eps = self.constant(noise.normal_tensor(batch, cfg.d_state));
                    self.reparam(mix.means[0], mix.log_stds[0], eps)
                }
                RolloutMode::Stochastic => {
                    let log_w = self.g.value(mix.log_weights).clone();
                    let k = mix.means.len();
                    let mut picks = vec![k - 1; batch];
                    for (b, pick) in picks.iter_mut().enumerate() {
                        let u = noise.uniform();
                        let mut acc = 0.0;
                        for c in 0..k {
                            acc += log_w.get(b, c).exp();
                            if u < acc {
                                *pick = c;
                                break;
                            }
                        }
                    }
                    let eps = noise.normal_tensor(batch, cfg.d_state);
                    let mut acc = None;
                    for c in 0..k {
                        let mask: Vec<f64> = picks.iter().map(|&p| f64::from(p == c)).collect();
                        if mask.iter().all(|&m| m == 0.0) {
                            continue;
                        }
                        let e = self.constant(eps.clone());
                        let sample = self.reparam(mix.means[c], mix.log_stds[c], e);
                        let m = self.constant(Tensor::from_vec(batch, 1, mask));
                        let term = self.g.mul_col(sample, m);
                        acc = Some(match acc {
                            None => term,
                            Some(prev) => self.g.add(prev, term),
                        });
                    }
                    acc.expect("every row picks a component")
                }
            };
            if !self.g.value(next).is_finite() {
                return Err(Error::RolloutDivergence { step: t + 1 });
            }
            hist.push_state(next);
            s = next;
        }
        Ok(RolloutVars { states, actions })
    }

    fn reparam(&mut self, mean: Var, log_std: Var, eps: Var) -> Var {
        let std = self.g.exp(log_std);
        let scaled = self.g.mul(std, eps);
        self.g.add(mean, scaled)
    }

    /// Row `row` of a batched rollout as a [`GeneratedTrajectory`].
    pub fn read_rollout(&self, out: &RolloutVars, row: usize, latent: Vec<f64>) -> GeneratedTrajectory {
        let gather = |vars: &[Var]| {
            let rows: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| self.g.value(v).row(row).to_vec())
                .collect();
            Tensor::from_rows(&rows)
        };
        GeneratedTrajectory {
            states: gather(&out.states),
            actions: gather(&out.actions),
            conditioning_latent: latent,
        }
    }
}
