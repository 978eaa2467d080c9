//! Latent-conditioned decoders: the Gaussian policy `π(a_t | s_t, z)` and the
//! autoregressive dynamics model `P(s_{t+1} | s_{≤t}, z)`.
//!
//! The dynamics model predicts a residual: every mixture component mean is
//! `s_t + δ_k`. Its feature extractor is either a one-hidden-layer MLP on
//! `(s_t, z)` or a stack of dilated causal convolutions (kernel 2, dilation
//! `2^l`) over the state history, conditioned on `z` at every layer.

use super::params::{dense, ParamStore};
use super::{Ctx, DynamicsArch, ModelConfig};
use crate::autodiff::Var;
use crate::latent_math::LN_2PI;
use crate::noise::NoiseSource;
use crate::tensor::Tensor;

/// A `K`-component diagonal Gaussian mixture over next states, for `N` rows.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub base: Var,
    pub deltas: Vec<Var>,
    pub means: Vec<Var>,
    pub log_stds: Vec<Var>,
    /// `N × K` log mixing weights.
    pub log_weights: Var,
}

/// Per-layer feature history used by the causal-convolution dynamics during
/// free-running generation. `layers[0]` holds the states themselves.
#[derive(Clone, Debug)]
pub struct DynHistory {
    layers: Vec<Vec<Var>>,
}

impl DynHistory {
    pub fn new(first_state: Var) -> Self {
        DynHistory {
            layers: vec![vec![first_state]],
        }
    }

    pub fn push_state(&mut self, s: Var) {
        self.layers[0].push(s);
    }

    pub fn current_state(&self) -> Var {
        *self.layers[0].last().expect("history holds at least one state")
    }
}

pub(super) fn init_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut NoiseSource) {
    let p = cfg.decoder_hidden;
    let (ds, da, dz, k) = (cfg.d_state, cfg.d_action, cfg.d_latent, cfg.mixture_components);

    store.push("pol.l1.w", dense(ds + dz, p, 1.0, rng));
    store.push("pol.l1.b", Tensor::zeros(1, p));
    store.push("pol.mean.w", dense(p, da, 1.0, rng));
    store.push("pol.mean.b", Tensor::zeros(1, da));
    store.push("pol.logstd.w", dense(p, da, 0.1, rng));
    store.push("pol.logstd.b", Tensor::zeros(1, da));

    match cfg.dynamics_arch {
        DynamicsArch::Mlp => {
            store.push("dyn.l1.w", dense(ds + dz, p, 1.0, rng));
            store.push("dyn.l1.b", Tensor::zeros(1, p));
        }
        DynamicsArch::CausalConv => {
            for l in 0..cfg.conv_layers {
                let c_in = if l == 0 { ds } else { p };
                store.push(format!("dyn.conv{l}.wp"), dense(c_in, p, 0.7, rng));
                store.push(format!("dyn.conv{l}.wc"), dense(c_in, p, 0.7, rng));
                store.push(format!("dyn.conv{l}.wz"), dense(dz, p, 0.7, rng));
                store.push(format!("dyn.conv{l}.b"), Tensor::zeros(1, p));
            }
        }
    }
    store.push("dyn.mean.w", Tensor::zeros(p, k * ds));
    store.push("dyn.mean.b", Tensor::zeros(1, k * ds));
    store.push("dyn.logstd.w", dense(p, k * ds, 0.1, rng));
    // Distinct per-component scales break the symmetry between components
    // without moving their means.
    let mut ls_b = Tensor::zeros(1, k * ds);
    for c in 0..k {
        for j in 0..ds {
            ls_b.set(0, c * ds + j, -0.5 * c as f64);
        }
    }
    store.push("dyn.logstd.b", ls_b);
    store.push("dyn.logits.w", Tensor::zeros(p, k));
    store.push("dyn.logits.b", Tensor::zeros(1, k));
}

impl Ctx<'_> {
    fn affine(&mut self, x: Var, w: &str, b: &str) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    /// Row-wise diagonal Gaussian log-density, `N × 1`.
    pub fn gaussian_logpdf_rows(&mut self, x: Var, mean: Var, log_std: Var) -> Var {
        let d = self.g.value(x).cols();
        let diff = self.g.sub(x, mean);
        let neg = self.g.neg(log_std);
        let inv_std = self.g.exp(neg);
        let u = self.g.mul(diff, inv_std);
        let u2 = self.g.square(u);
        let quad = self.g.scale(u2, -0.5);
        let terms = self.g.sub(quad, log_std);
        let rows = self.g.sum_cols(terms);
        self.g.add_scalar(rows, -0.5 * d as f64 * LN_2PI)
    }

    /// Policy action distribution `(mean, clamped log-std)` for `N` rows of
    /// states and latents.
    pub fn policy_head(&mut self, states: Var, z: Var) -> (Var, Var) {
        let [lo, hi] = self.config().log_std_clamp;
        let input = self.g.concat_cols(&[states, z]);
        let h = self.affine(input, "pol.l1.w", "pol.l1.b");
        let h = self.g.tanh(h);
        let mean = self.affine(h, "pol.mean.w", "pol.mean.b");
        let raw = self.affine(h, "pol.logstd.w", "pol.logstd.b");
        let log_std = self.g.clamp(raw, lo, hi);
        (mean, log_std)
    }

    /// `log π(a | s, z)` per row, `N × 1`.
    pub fn policy_logprob_rows(&mut self, states: Var, z: Var, actions: Var) -> Var {
        let (mean, log_std) = self.policy_head(states, z);
        self.gaussian_logpdf_rows(actions, mean, log_std)
    }

    fn mixture_head(&mut self, features: Var, base: Var) -> Mixture {
        let cfg = self.config();
        let (k, ds) = (cfg.mixture_components, cfg.d_state);
        let [lo, hi] = cfg.log_std_clamp;
        let delta_all = self.affine(features, "dyn.mean.w", "dyn.mean.b");
        let ls_raw = self.affine(features, "dyn.logstd.w", "dyn.logstd.b");
        let ls_all = self.g.clamp(ls_raw, lo, hi);
        let logits = self.affine(features, "dyn.logits.w", "dyn.logits.b");
        let log_weights = self.g.log_softmax_rows(logits);
        let mut deltas = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut log_stds = Vec::with_capacity(k);
        for c in 0..k {
            let delta = self.g.slice_cols(delta_all, c * ds, ds);
            deltas.push(delta);
            means.push(self.g.add(base, delta));
            log_stds.push(self.g.slice_cols(ls_all, c * ds, ds));
        }
        Mixture {
            base,
            deltas,
            means,
            log_stds,
            log_weights,
        }
    }

    /// Exact mixture log-density of `target` per row, `N × 1`.
    pub fn mixture_logprob(&mut self, mix: &Mixture, target: Var) -> Var {
        let comps: Vec<Var> = mix
            .means
            .iter()
            .zip(&mix.log_stds)
            .map(|(&m, &ls)| self.gaussian_logpdf_rows(target, m, ls))
            .collect();
        let comps = self.g.concat_cols(&comps);
        let joint = self.g.add(comps, mix.log_weights);
        self.g.log_sum_exp_rows(joint)
    }

    /// Mixture mean `s_t + Σ_k w_k δ_k`.
    pub fn mixture_mean(&mut self, mix: &Mixture) -> Var {
        let weights = self.g.exp(mix.log_weights);
        let mut acc = mix.base;
        for (c, &delta) in mix.deltas.iter().enumerate() {
            let w = self.g.slice_cols(weights, c, 1);
            let term = self.g.mul_col(delta, w);
            acc = self.g.add(acc, term);
        }
        acc
    }

    fn conv_layer(&mut self, l: usize, prev: Var, cur: Var, z: Var) -> Var {
        let wp = self.param(&format!("dyn.conv{l}.wp"));
        let wc = self.param(&format!("dyn.conv{l}.wc"));
        let wz = self.param(&format!("dyn.conv{l}.wz"));
        let b = self.param(&format!("dyn.conv{l}.b"));
        let a = self.g.matmul(prev, wp);
        let c = self.g.matmul(cur, wc);
        let zz = self.g.matmul(z, wz);
        let s = self.g.add(a, c);
        let s = self.g.add(s, zz);
        let s = self.g.add_row(s, b);
        let out = self.g.tanh(s);
        if l == 0 {
            out
        } else {
            self.g.add(out, cur)
        }
    }

    /// One generation step: the mixture over `s_{t+1}` given the history
    /// (whose newest state is `s_t`). Extends the per-layer history.
    pub fn dynamics_step(&mut self, hist: &mut DynHistory, z: Var) -> Mixture {
        let cfg = self.config();
        let base = hist.current_state();
        let features = match cfg.dynamics_arch {
            DynamicsArch::Mlp => {
                let input = self.g.concat_cols(&[base, z]);
                let h = self.affine(input, "dyn.l1.w", "dyn.l1.b");
                self.g.tanh(h)
            }
            DynamicsArch::CausalConv => {
                let t = hist.layers[0].len() - 1;
                for l in 0..cfg.conv_layers {
                    let dilation = 1usize << l;
                    let cur = hist.layers[l][t];
                    let prev = hist.layers[l][t.saturating_sub(dilation)];
                    let out = self.conv_layer(l, prev, cur, z);
                    if hist.layers.len() <= l + 1 {
                        hist.layers.push(Vec::new());
                    }
                    hist.layers[l + 1].push(out);
                }
                hist.layers[cfg.conv_layers][t]
            }
        };
        self.mixture_head(features, base)
    }

    /// Teacher-forced `Σ log P(s_{t+1} | s_{≤t}, z)` over transitions
    /// `t = 1..T-1` of every sequence; `z` has one row per sequence.
    /// Returns `None` when no sequence has a transition.
    pub fn dynamics_teacher_logprob(&mut self, states: &[&Tensor], z: Var) -> Option<Var> {
        let cfg = self.config();
        let mut all = Vec::new();
        let mut owner = Vec::new();
        let mut cur_rows = Vec::new();
        let mut offsets = Vec::new();
        let mut offset = 0;
        for (b, s) in states.iter().enumerate() {
            offsets.push(offset);
            all.extend_from_slice(s.data());
            for t in 0..s.rows() {
                owner.push(b);
                if t + 1 < s.rows() {
                    cur_rows.push(offset + t);
                }
            }
            offset += s.rows();
        }
        if cur_rows.is_empty() {
            return None;
        }
        let x = self.constant(Tensor::from_vec(offset, cfg.d_state, all));
        let z_rows = self.g.gather_rows(z, owner.clone());

        let features = match cfg.dynamics_arch {
            DynamicsArch::Mlp => {
                let xs = self.g.gather_rows(x, cur_rows.clone());
                let zs = self.g.gather_rows(z_rows, cur_rows.clone());
                let input = self.g.concat_cols(&[xs, zs]);
                let h = self.affine(input, "dyn.l1.w", "dyn.l1.b");
                self.g.tanh(h)
            }
            DynamicsArch::CausalConv => {
                let mut h = x;
                for l in 0..cfg.conv_layers {
                    let dilation = 1usize << l;
                    let shifted: Vec<usize> = (0..offset)
                        .map(|r| {
                            let start = offsets[owner[r]];
                            start + (r - start).saturating_sub(dilation)
                        })
                        .collect();
                    let prev = self.g.gather_rows(h, shifted);
                    h = self.conv_layer(l, prev, h, z_rows);
                }
                self.g.gather_rows(h, cur_rows.clone())
            }
        };
        let base = self.g.gather_rows(x, cur_rows.clone());
        let next_rows: Vec<usize> = cur_rows.iter().map(|r| r + 1).collect();
        let target = self.g.gather_rows(x, next_rows);
        let mix = self.mixture_head(features, base);
        let lp = self.mixture_logprob(&mix, target);
        Some(self.g.sum(lp))
    }
}
