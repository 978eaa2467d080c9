//! Bidirectional LSTM over the state sequence, additive attention pooling,
//! and the Gaussian parameter heads. The same architecture backs the
//! trajectory encoder and the auxiliary posterior under different prefixes.

use std::collections::BTreeMap;

use super::params::{dense, ParamStore};
use super::{check_cols, Ctx, ModelConfig};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::noise::NoiseSource;
use crate::tensor::Tensor;

/// Encoder outputs for a batch of `B` sequences; every field has `B` rows.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub mean: Var,
    pub log_std: Var,
    pub std: Var,
    /// `B × T` attention weights (only meaningful when all sequences in the
    /// batch had length `T`).
    pub weights: Var,
}

pub(super) fn init_params(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut NoiseSource) {
    let h = cfg.encoder_hidden;
    for dir in ["fwd", "bwd"] {
        store.push(format!("{prefix}.{dir}.wx"), dense(cfg.d_state, 4 * h, 1.0, rng));
        store.push(format!("{prefix}.{dir}.wh"), dense(h, 4 * h, 1.0, rng));
        // Forget-gate bias starts at 1.
        let mut b = Tensor::zeros(1, 4 * h);
        for j in h..2 * h {
            b.set(0, j, 1.0);
        }
        store.push(format!("{prefix}.{dir}.b"), b);
    }
    store.push(format!("{prefix}.att.w"), dense(2 * h, cfg.attention_dim, 1.0, rng));
    store.push(format!("{prefix}.att.b"), Tensor::zeros(1, cfg.attention_dim));
    store.push(format!("{prefix}.att.v"), dense(cfg.attention_dim, 1, 1.0, rng));
    store.push(format!("{prefix}.mean.w"), dense(2 * h, cfg.d_latent, 0.1, rng));
    store.push(format!("{prefix}.mean.b"), Tensor::zeros(1, cfg.d_latent));
    store.push(format!("{prefix}.logstd.w"), Tensor::zeros(2 * h, cfg.d_latent));
    store.push(format!("{prefix}.logstd.b"), Tensor::zeros(1, cfg.d_latent));
}

impl Ctx<'_> {
    fn lstm_pass(&mut self, prefix: &str, dir: &str, xs: &[Var], reverse: bool) -> Vec<Var> {
        let h = self.config().encoder_hidden;
        let wx = self.param(&format!("{prefix}.{dir}.wx"));
        let wh = self.param(&format!("{prefix}.{dir}.wh"));
        let b = self.param(&format!("{prefix}.{dir}.b"));
        let batch = self.g.value(xs[0]).rows();
        let mut hid = self.constant(Tensor::zeros(batch, h));
        let mut cell = self.constant(Tensor::zeros(batch, h));
        let mut out = vec![hid; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let a = self.g.matmul(xs[t], wx);
            let r = self.g.matmul(hid, wh);
            let pre = self.g.add(a, r);
            let pre = self.g.add_row(pre, b);
            let i_pre = self.g.slice_cols(pre, 0, h);
            let f_pre = self.g.slice_cols(pre, h, h);
            let c_pre = self.g.slice_cols(pre, 2 * h, h);
            let o_pre = self.g.slice_cols(pre, 3 * h, h);
            let i = self.g.sigmoid(i_pre);
            let f = self.g.sigmoid(f_pre);
            let c_new = self.g.tanh(c_pre);
            let o = self.g.sigmoid(o_pre);
            let keep = self.g.mul(f, cell);
            let write = self.g.mul(i, c_new);
            cell = self.g.add(keep, write);
            let squashed = self.g.tanh(cell);
            hid = self.g.mul(o, squashed);
            out[t] = hid;
        }
        out
    }

    /// Per-step bidirectional features, each `B × 2h`.
    pub fn bilstm_features(&mut self, prefix: &str, xs: &[Var]) -> Vec<Var> {
        let fwd = self.lstm_pass(prefix, "fwd", xs, false);
        let bwd = self.lstm_pass(prefix, "bwd", xs, true);
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| self.g.concat_cols(&[f, b]))
            .collect()
    }

    /// Additive attention: `score_t = vᵀ tanh(W f_t + b)`, softmax over `t`.
    /// Returns the pooled `B × 2h` features and `B × T` weights.
    pub fn attention_pool(&mut self, prefix: &str, steps: &[Var]) -> (Var, Var) {
        let w = self.param(&format!("{prefix}.att.w"));
        let b = self.param(&format!("{prefix}.att.b"));
        let v = self.param(&format!("{prefix}.att.v"));
        let scores: Vec<Var> = steps
            .iter()
            .map(|&f| {
                let a = self.g.matmul(f, w);
                let a = self.g.add_row(a, b);
                let a = self.g.tanh(a);
                self.g.matmul(a, v)
            })
            .collect();
        let scores = self.g.concat_cols(&scores);
        let weights = self.g.softmax_rows(scores);
        let mut pooled = None;
        for (t, &f) in steps.iter().enumerate() {
            let wt = self.g.slice_cols(weights, t, 1);
            let term = self.g.mul_col(f, wt);
            pooled = Some(match pooled {
                None => term,
                Some(acc) => self.g.add(acc, term),
            });
        }
        (pooled.expect("at least one step"), weights)
    }

    /// Encodes `B` equal-length sequences given as per-step `B × d_state`
    /// inputs.
    pub fn encode_steps(&mut self, prefix: &str, xs: &[Var]) -> EncodedVars {
        assert!(!xs.is_empty(), "encode_steps needs at least one step");
        let [lo, hi] = self.config().log_std_clamp;
        let feats = self.bilstm_features(prefix, xs);
        let (pooled, weights) = self.attention_pool(prefix, &feats);
        let mw = self.param(&format!("{prefix}.mean.w"));
        let mb = self.param(&format!("{prefix}.mean.b"));
        let sw = self.param(&format!("{prefix}.logstd.w"));
        let sb = self.param(&format!("{prefix}.logstd.b"));
        let mean = self.g.matmul(pooled, mw);
        let mean = self.g.add_row(mean, mb);
        let raw = self.g.matmul(pooled, sw);
        let raw = self.g.add_row(raw, sb);
        let log_std = self.g.clamp(raw, lo, hi);
        let std = self.g.exp(log_std);
        EncodedVars {
            mean,
            log_std,
            std,
            weights,
        }
    }

    /// Encodes constant state sequences of any lengths. Rows of the result
    /// follow the order of `states`. Sequences of equal length share one
    /// batched pass.
    pub fn encode_states(&mut self, prefix: &str, states: &[&Tensor]) -> Result<EncodedVars> {
        if states.is_empty() {
            return Err(Error::InvalidInput("no sequences to encode".into()));
        }
        let d = self.config().d_state;
        for s in states {
            check_cols(s, d, "states")?;
            if s.rows() == 0 {
                return Err(Error::InvalidInput("cannot encode an empty sequence".into()));
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in states.iter().enumerate() {
            groups.entry(s.rows()).or_default().push(i);
        }
        if groups.len() == 1 {
            let xs = self.step_inputs(states);
            return Ok(self.encode_steps(prefix, &xs));
        }

        let mut parts = Vec::new();
        let mut position = vec![0; states.len()];
        let mut offset = 0;
        for members in groups.values() {
            let group: Vec<&Tensor> = members.iter().map(|&i| states[i]).collect();
            let xs = self.step_inputs(&group);
            parts.push(self.encode_steps(prefix, &xs));
            for (k, &i) in members.iter().enumerate() {
                position[i] = offset + k;
            }
            offset += members.len();
        }
        let cat = |ctx: &mut Self, pick: fn(&EncodedVars) -> Var| {
            let vars: Vec<Var> = parts.iter().map(pick).collect();
            let all = ctx.g.concat_rows(&vars);
            ctx.g.gather_rows(all, position.clone())
        };
        let mean = cat(self, |e| e.mean);
        let log_std = cat(self, |e| e.log_std);
        let std = cat(self, |e| e.std);
        // Ragged weights cannot be stacked; expose a placeholder.
        let weights = self.constant(Tensor::zeros(states.len(), 1));
        Ok(EncodedVars {
            mean,
            log_std,
            std,
            weights,
        })
    }

    /// Splits equal-length sequences into per-step `B × d` constants.
    fn step_inputs(&mut self, states: &[&Tensor]) -> Vec<Var> {
        let t_len = states[0].rows();
        let d = states[0].cols();
        (0..t_len)
            .map(|t| {
                let mut data = Vec::with_capacity(states.len() * d);
                for s in states {
                    data.extend_from_slice(s.row(t));
                }
                self.constant(Tensor::from_vec(states.len(), d, data))
            })
            .collect()
    }
}
