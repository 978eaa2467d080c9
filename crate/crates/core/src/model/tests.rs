use super::*;
use crate::latent_math::{log_density, LN_2PI};

fn tiny(arch: DynamicsArch, k: usize) -> ModelConfig {
    ModelConfig {
        d_state: 2,
        d_action: 2,
        d_latent: 3,
        encoder_hidden: 4,
        attention_dim: 3,
        decoder_hidden: 5,
        dynamics_arch: arch,
        mixture_components: k,
        conv_layers: 2,
        log_std_clamp: [-5.0, 2.0],
        aux_posterior: true,
    }
}

fn states(t: usize, seed: u64) -> Tensor {
    let mut rng = NoiseSource::new(seed);
    rng.normal_tensor(t, 2)
}

fn set(bundle: &mut ModelBundle, name: &str, value: f64) {
    let idx = bundle.params.index_of(name).unwrap();
    bundle
        .params
        .value_mut(idx)
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = value);
}

#[test]
fn encode_single_step() {
    let bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 1).unwrap();
    let (g, w) = encode_with_attention(&bundle, &states(1, 2)).unwrap();
    assert_eq!(g.dim(), 3);
    assert_eq!(w, vec![1.0]);
}

#[test]
fn encode_is_deterministic_and_rejects_bad_shapes() {
    let bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 1).unwrap();
    let s = states(7, 3);
    assert_eq!(encode(&bundle, &s).unwrap(), encode(&bundle, &s).unwrap());
    assert!(encode(&bundle, &Tensor::zeros(4, 3)).is_err());
    assert!(encode(&bundle, &Tensor::zeros(0, 2)).is_err());
}

#[test]
fn encoder_std_respects_clamp() {
    let mut bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 1).unwrap();
    set(&mut bundle, "enc.logstd.b", 50.0);
    let g = encode(&bundle, &states(5, 1)).unwrap();
    assert!(g.std().iter().all(|&s| (s - 2f64.exp()).abs() < 1e-12));
    set(&mut bundle, "enc.logstd.b", -50.0);
    let g = encode(&bundle, &states(5, 1)).unwrap();
    assert!(g.std().iter().all(|&s| (s - (-5f64).exp()).abs() < 1e-15));
}

#[test]
fn fresh_encoder_is_close_to_prior() {
    let bundle = ModelBundle::init(&ModelConfig::default(), 4).unwrap();
    for seed in 0..5 {
        let g = encode(&bundle, &states(50, seed)).unwrap();
        assert!(crate::latent_math::kl_to_standard_normal(&g) < 0.5);
    }
}

#[test]
fn attention_pool_contracts() {
    let bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 1).unwrap();
    let row = vec![0.3, -0.2, 0.9, 0.1, 0.0, 0.5, -0.7, 0.2];
    let (pooled, w) = attention_pool(&bundle, &Tensor::row_vector(row.clone())).unwrap();
    assert_eq!(w, vec![1.0]);
    assert_eq!(pooled, row);

    let same = Tensor::from_rows(&vec![row.clone(); 6]);
    let (pooled, _) = attention_pool(&bundle, &same).unwrap();
    for (p, r) in pooled.iter().zip(&row) {
        assert!((p - r).abs() < 1e-12);
    }

    let mut rng = NoiseSource::new(9);
    for t in [2, 5, 40] {
        let (_, w) = attention_pool(&bundle, &rng.normal_tensor(t, 8)).unwrap();
        assert_eq!(w.len(), t);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(attention_pool(&bundle, &Tensor::zeros(3, 5)).is_err());
}

#[test]
fn sample_latent_cases() {
    let g = DiagGaussian::new(vec![1.0, -2.0], vec![0.5, 3.0]).unwrap();
    assert_eq!(sample_latent(&g, &[0.0, 0.0]).unwrap(), g.mean());
    let std = DiagGaussian::standard(2);
    assert_eq!(sample_latent(&std, &[0.3, -1.2]).unwrap(), vec![0.3, -1.2]);
    assert!(sample_latent(&g, &[0.0]).is_err());

    let mut rng = NoiseSource::new(1);
    let n = 100_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    let mut cross = 0.0;
    for _ in 0..n {
        let z = sample_latent(&g, &rng.normal_vec(2)).unwrap();
        for j in 0..2 {
            sum[j] += z[j];
            sq[j] += z[j] * z[j];
        }
        cross += z[0] * z[1];
    }
    let nf = n as f64;
    let m = [sum[0] / nf, sum[1] / nf];
    for j in 0..2 {
        let var = sq[j] / nf - m[j] * m[j];
        let expected = g.std()[j].powi(2);
        assert!((var - expected).abs() / expected < 0.02);
    }
    let cov = cross / nf - m[0] * m[1];
    assert!(cov.abs() < 0.02 * g.std()[0] * g.std()[1]);
}

#[test]
fn policy_logprob_at_mean_with_unit_std() {
    let mut bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 2).unwrap();
    set(&mut bundle, "pol.logstd.w", 0.0);
    set(&mut bundle, "pol.logstd.b", 0.0);
    let z = [0.1, -0.4, 0.7];
    let s = [0.5, 1.5];
    let dist = policy_distribution(&bundle, &z, &s).unwrap();
    let lp = policy_logprob(&bundle, &z, &s, dist.mean()).unwrap();
    assert!((lp + LN_2PI).abs() < 1e-12);
    assert!(policy_logprob(&bundle, &z, &s, &[0.0]).is_err());
}

#[test]
fn policy_batched_matches_per_item() {
    let bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 3).unwrap();
    let mut rng = NoiseSource::new(4);
    let s = rng.normal_tensor(6, 2);
    let z = rng.normal_tensor(6, 3);
    let a = rng.normal_tensor(6, 2);
    let mut ctx = Ctx::new(&bundle, false);
    let (sv, zv, av) = (ctx.constant(s.clone()), ctx.constant(z.clone()), ctx.constant(a.clone()));
    let lp = ctx.policy_logprob_rows(sv, zv, av);
    for r in 0..6 {
        let single = policy_logprob(&bundle, z.row(r), s.row(r), a.row(r)).unwrap();
        assert!((ctx.g.value(lp).get(r, 0) - single).abs() < 1e-6);
    }
}

/// Analytic parameter gradients of `f` against central differences with
/// step 1e-3 at every coordinate.
fn check_param_gradients(bundle: &ModelBundle, f: impl Fn(&mut Ctx) -> Var) {
    let mut ctx = Ctx::new(bundle, true);
    let out = f(&mut ctx);
    let grads = ctx.gradients(out);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for coord in 0..bundle.params.n_scalars() {
        let (pi, off) = bundle.params.locate(coord);
        let eval = |delta: f64| {
            let mut b = bundle.clone();
            b.params.value_mut(pi).data_mut()[off] += delta;
            let mut c = Ctx::new(&b, false);
            let v = f(&mut c);
            c.g.value(v).item()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads[pi].data()[off];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn policy_gradients_match_finite_differences() {
    let bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 5).unwrap();
    let mut rng = NoiseSource::new(6);
    let (s, z, a) = (rng.normal_tensor(3, 2), rng.normal_tensor(3, 3), rng.normal_tensor(3, 2));
    check_param_gradients(&bundle, |ctx| {
        let (sv, zv, av) = (ctx.constant(s.clone()), ctx.constant(z.clone()), ctx.constant(a.clone()));
        let lp = ctx.policy_logprob_rows(sv, zv, av);
        ctx.g.sum(lp)
    });
}

#[test]
fn encoder_and_dynamics_gradients_match_finite_differences() {
    for arch in [DynamicsArch::Mlp, DynamicsArch::CausalConv] {
        let bundle = ModelBundle::init(&tiny(arch, 2), 7).unwrap();
        let seqs = [states(4, 1), states(3, 2)];
        check_param_gradients(&bundle, |ctx| {
            let refs: Vec<&Tensor> = seqs.iter().collect();
            let enc = ctx.encode_states(ENCODER, &refs).unwrap();
            let z = ctx.sample_latent(&enc, Tensor::filled(2, 3, 0.3));
            let lp = ctx.dynamics_teacher_logprob(&refs, z).unwrap();
            let aux = ctx.encode_states(AUX_POSTERIOR, &refs).unwrap();
            let s = ctx.g.sum(aux.mean);
            ctx.g.add(lp, s)
        });
    }
}

#[test]
fn dynamics_unit_std_at_mean() {
    let mut bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 2).unwrap();
    set(&mut bundle, "dyn.logstd.w", 0.0);
    set(&mut bundle, "dyn.logstd.b", 0.0);
    set(&mut bundle, "dyn.mean.b", 0.25);
    let z = [0.3, 0.1, -0.2];
    let s = [1.0, 2.0];
    let lp = dynamics_logprob(&bundle, &z, &s, &[1.25, 2.25]).unwrap();
    assert!((lp + LN_2PI).abs() < 1e-12);
}

#[test]
fn identical_components_collapse() {
    let b1 = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 8).unwrap();
    let mut b2 = ModelBundle::init(&tiny(DynamicsArch::Mlp, 2), 8).unwrap();
    let mut b1 = b1.clone();
    let mut rng = NoiseSource::new(1);
    let dup = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = t.to_rows().into_iter().map(|r| [r.clone(), r].concat()).collect();
        Tensor::from_rows(&rows)
    };
    for name in ["dyn.l1.w", "dyn.l1.b"] {
        let i = b2.params.index_of(name).unwrap();
        *b2.params.value_mut(i) = b1.params.get(name).unwrap().clone();
    }
    for name in ["dyn.mean.w", "dyn.mean.b", "dyn.logstd.w", "dyn.logstd.b"] {
        let (r, c) = b1.params.get(name).unwrap().shape();
        let single = rng.normal_tensor(r, c).scale(0.3);
        let i = b2.params.index_of(name).unwrap();
        *b2.params.value_mut(i) = dup(&single);
        let j = b1.params.index_of(name).unwrap();
        *b1.params.value_mut(j) = single;
    }
    // Unequal mixing weights must not matter either.
    let i = b2.params.index_of("dyn.logits.b").unwrap();
    *b2.params.value_mut(i) = Tensor::row_vector(vec![0.7, -0.4]);
    let z = [0.2, -0.5, 0.9];
    let s = [0.1, 0.4];
    let next = [0.3, 0.2];
    let lp1 = dynamics_logprob(&b1, &z, &s, &next).unwrap();
    let lp2 = dynamics_logprob(&b2, &z, &s, &next).unwrap();
    assert!((lp1 - lp2).abs() < 1e-12, "{lp1} vs {lp2}");
}

#[test]
fn mixture_density_integrates_to_one() {
    let cfg = ModelConfig {
        d_state: 1,
        d_action: 1,
        mixture_components: 2,
        ..tiny(DynamicsArch::Mlp, 2)
    };
    let mut bundle = ModelBundle::init(&cfg, 3).unwrap();
    let mut rng = NoiseSource::new(2);
    for name in ["dyn.mean.w", "dyn.logits.w", "dyn.logstd.w"] {
        let i = bundle.params.index_of(name).unwrap();
        let (r, c) = bundle.params.value(i).shape();
        *bundle.params.value_mut(i) = rng.normal_tensor(r, c);
    }
    let z = [0.5, -0.1, 0.3];
    let s = [0.2];
    let comps = dynamics_distribution(&bundle, &z, &s).unwrap();
    assert_eq!(comps.len(), 2);
    assert!(comps[0].1.mean() != comps[1].1.mean());
    let lo = comps.iter().map(|(_, g)| g.mean()[0] - 12.0 * g.std()[0]).fold(f64::INFINITY, f64::min);
    let hi = comps.iter().map(|(_, g)| g.mean()[0] + 12.0 * g.std()[0]).fold(f64::NEG_INFINITY, f64::max);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| dynamics_logprob(&bundle, &z, &s, &[x]).unwrap().exp();
    let mut total = 0.5 * (f(lo) + f(hi));
    for k in 1..n {
        total += f(lo + k as f64 * h);
    }
    assert!((total * h - 1.0).abs() < 1e-3, "{}", total * h);

    // The mixture log-density agrees with an explicit weighted sum.
    let x = 0.7;
    let direct: f64 = comps
        .iter()
        .map(|(w, g)| w * log_density(g, &[x]).unwrap().exp())
        .sum();
    assert!((direct.ln() - dynamics_logprob(&bundle, &z, &s, &[x]).unwrap()).abs() < 1e-12);
}

#[test]
fn teacher_forcing_matches_stepwise_history() {
    for arch in [DynamicsArch::Mlp, DynamicsArch::CausalConv] {
        let mut bundle = ModelBundle::init(&tiny(arch, 2), 11).unwrap();
        let mut rng = NoiseSource::new(3);
        let i = bundle.params.index_of("dyn.mean.w").unwrap();
        *bundle.params.value_mut(i) = rng.normal_tensor(5, 4).scale(0.2);
        let seq = states(6, 4);
        let z = [0.1, 0.2, -0.3];

        let mut ctx = Ctx::new(&bundle, false);
        let zv = ctx.constant(Tensor::row_vector(z.to_vec()));
        let teacher = ctx.dynamics_teacher_logprob(&[&seq], zv).unwrap();
        let teacher = ctx.g.value(teacher).item();

        let mut ctx = Ctx::new(&bundle, false);
        let zv = ctx.constant(Tensor::row_vector(z.to_vec()));
        let s0 = ctx.constant(Tensor::row_vector(seq.row(0).to_vec()));
        let mut hist = DynHistory::new(s0);
        let mut total = 0.0;
        for t in 0..5 {
            let mix = ctx.dynamics_step(&mut hist, zv);
            let target = ctx.constant(Tensor::row_vector(seq.row(t + 1).to_vec()));
            let lp = ctx.mixture_logprob(&mix, target);
            total += ctx.g.value(lp).item();
            hist.push_state(target);
        }
        assert!((teacher - total).abs() < 1e-10, "{arch:?}: {teacher} vs {total}");
    }
}

#[test]
fn rollout_single_step() {
    let bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 1).unwrap();
    let mut noise = NoiseSource::new(0);
    let out = rollout(&bundle, &[0.0; 3], &[1.0, 2.0], 1, RolloutMode::Stochastic, &mut noise).unwrap();
    assert_eq!(out.states.to_rows(), vec![vec![1.0, 2.0]]);
    assert_eq!(out.actions.rows(), 1);
    assert!(rollout(&bundle, &[0.0; 3], &[1.0, 2.0], 0, RolloutMode::Mean, &mut noise).is_err());
}

#[test]
fn fresh_mean_rollout_stays_put() {
    for arch in [DynamicsArch::Mlp, DynamicsArch::CausalConv] {
        for k in [1, 3] {
            let bundle = ModelBundle::init(&tiny(arch, k), 2).unwrap();
            let mut noise = NoiseSource::new(0);
            let s1 = [0.4, -1.3];
            let out = rollout(&bundle, &[0.5, 0.5, -1.0], &s1, 12, RolloutMode::Mean, &mut noise).unwrap();
            for r in 0..12 {
                assert_eq!(out.states.row(r), &s1);
            }
        }
    }
}

#[test]
fn rollout_is_deterministic() {
    for k in [1, 2] {
        let bundle = ModelBundle::init(&tiny(DynamicsArch::CausalConv, k), 2).unwrap();
        let run = || {
            let mut noise = NoiseSource::new(42);
            rollout(&bundle, &[0.1, 0.2, 0.3], &[0.0, 0.0], 10, RolloutMode::Stochastic, &mut noise).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.states.row(9) != a.states.row(0));
    }
}

#[test]
fn rollout_reports_divergence() {
    let mut bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 2).unwrap();
    set(&mut bundle, "dyn.mean.b", f64::MAX);
    set(&mut bundle, "dyn.mean.w", 0.0);
    let mut noise = NoiseSource::new(0);
    let err = rollout(&bundle, &[0.0; 3], &[f64::MAX, 0.0], 5, RolloutMode::Mean, &mut noise).unwrap_err();
    assert!(matches!(err, Error::RolloutDivergence { step: 1 }));
}

#[test]
fn aux_posterior_contracts() {
    let bundle = ModelBundle::init(&tiny(DynamicsArch::Mlp, 1), 1).unwrap();
    let mut noise = NoiseSource::new(0);
    let gen = rollout(&bundle, &[0.1, 0.2, 0.3], &[0.0, 0.0], 6, RolloutMode::Stochastic, &mut noise).unwrap();
    let q = aux_posterior(&bundle, &gen).unwrap();
    assert_eq!(q.dim(), 3);
    assert!(q.std().iter().all(|&s| s > 0.0));
    assert_eq!(q, aux_posterior(&bundle, &gen).unwrap());

    let cfg = ModelConfig {
        aux_posterior: false,
        ..tiny(DynamicsArch::Mlp, 1)
    };
    let bare = ModelBundle::init(&cfg, 1).unwrap();
    assert!(matches!(aux_posterior(&bare, &gen), Err(Error::Config(_))));
}

#[test]
fn init_is_deterministic_and_validates() {
    let cfg = tiny(DynamicsArch::CausalConv, 2);
    let a = ModelBundle::init(&cfg, 9).unwrap();
    assert_eq!(a, ModelBundle::init(&cfg, 9).unwrap());
    assert_ne!(a, ModelBundle::init(&cfg, 10).unwrap());
    a.validate().unwrap();
    let mut broken = a.clone();
    broken.config.d_latent = 5;
    assert!(broken.validate().is_err());
    let bad = ModelConfig {
        log_std_clamp: [1.0, -1.0],
        ..cfg
    };
    assert!(ModelBundle::init(&bad, 0).is_err());
}
