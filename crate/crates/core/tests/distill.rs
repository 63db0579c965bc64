mod common;

use diffgraph::{flatten_grads, ParamGrads, ParameterSet, Tensor};
use el_core::diffusion::{dsm_loss, NoiseSchedule, ScoreNetwork, TargetDistribution};
use el_core::distill::{
    adversarial_loss, distill_step, dm_generator_gradient, dm_upstream, regression_loss, train_distill,
    update_fake_score, Auxiliary, DistillConfig, DistillState, Discriminator, Generator, MixingMode, RegressionData,
};
use el_core::embed::{embedding_loss_grad, DEFAULT_LAMBDA};
use el_core::nn::Optimizer;
use el_core::rng::{keyed_rng, normal_tensor, Draw};
use el_core::CoreError;

fn setup() -> (ScoreNetwork, TargetDistribution, NoiseSchedule) {
    let target = TargetDistribution::default_gmm();
    let sched = NoiseSchedule::for_target(&target);
    (ScoreNetwork::new(2, &[16, 16], 11).unwrap(), target, sched)
}

fn small(aux: Auxiliary) -> DistillConfig {
    DistillConfig {
        auxiliary: aux,
        batch: 8,
        gen_hidden: vec![16, 16],
        disc_hidden: vec![16],
        eval_samples: 200,
        eval_interval: 5,
        ..DistillConfig::default()
    }
}

/// A fake score that differs from the teacher, so the DM direction is non-zero.
fn perturbed(net: &ScoreNetwork, salt: u64) -> ScoreNetwork {
    let mut f = net.clone();
    let mut rng = keyed_rng(salt, "perturb");
    for (_, p) in f.params_mut().iter_mut() {
        let n = normal_tensor(&mut rng, p.tensor.shape());
        p.tensor.add_assign(&n.map(|v| 0.1 * v));
    }
    f
}

fn gen_output_dot(p: &ParameterSet, z: &Tensor, u: &Tensor) -> f64 {
    let x = Generator::from_params(p.clone()).unwrap().sample(z).unwrap();
    x.zip_map(u, |a, b| a * b).unwrap().sum()
}

fn bit_eq_grads(a: &ParamGrads, b: &ParamGrads) -> bool {
    a.len() == b.len() && a.iter().all(|(k, v)| b.get(k).is_some_and(|w| w.bit_eq(v)))
}

#[test]
fn defaults_follow_reference_hyperparameters() {
    let c = DistillConfig::default();
    assert_eq!(c.lambda_embed, DEFAULT_LAMBDA);
    assert_eq!(c.adam_betas, (0.0, 0.999));
    assert_eq!(c.mixing, MixingMode::Additive);
    assert_eq!(c.fake_ratio, 1);
    assert_eq!(c.gen_hidden, vec![128, 128, 128]);
}

#[test]
fn dm_surrogate_matches_finite_differences() {
    let (teacher, _, sched) = setup();
    let fake = perturbed(&teacher, 1);
    for s in 0..10u64 {
        let gen = Generator::new(2, &[6, 6], s).unwrap();
        let z = normal_tensor(&mut keyed_rng(s, "z"), &[1, 2]);
        let d = dm_generator_gradient(&gen, &teacher, &fake, &z, &sched, &Draw::new(s, 0)).unwrap();
        assert!(flatten_grads(&d.grads).iter().any(|&v| v != 0.0));
        let err = common::param_fd(gen.params(), &d.grads, 1e-6, |p| gen_output_dot(p, &z, &d.upstream));
        assert!(err < 1e-4, "seed {s}: {err}");
    }
}

#[test]
fn dm_upstream_is_weighted_score_gap() {
    let (teacher, _, sched) = setup();
    let fake = perturbed(&teacher, 2);
    let x = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 2.0]]).unwrap();
    let eps = Tensor::from_rows(&[vec![0.5, 0.5], vec![-1.0, 0.0]]).unwrap();
    let t = [0.4, 1.3];
    let u = dm_upstream(&x, &teacher, &fake, &t, &eps, &sched).unwrap();
    for i in 0..2 {
        let xt = Tensor::from_rows(&[vec![x.row(i)[0] + t[i] * eps.row(i)[0], x.row(i)[1] + t[i] * eps.row(i)[1]]])
            .unwrap();
        let sf = fake.eval(&xt, &[t[i]], &sched).unwrap();
        let st = teacher.eval(&xt, &[t[i]], &sched).unwrap();
        for j in 0..2 {
            let want = t[i] * t[i] * (sf.data()[j] - st.data()[j]) / 2.0;
            assert!((u.row(i)[j] - want).abs() <= 1e-12 * want.abs().max(1e-12));
        }
    }
}

#[test]
fn identical_latents_average_to_single_sample_gradient() {
    let (teacher, _, sched) = setup();
    let fake = perturbed(&teacher, 3);
    let gen = Generator::new(2, &[8, 8], 0).unwrap();
    let z1 = Tensor::from_rows(&[vec![0.4, -1.1]]).unwrap();
    let eps1 = Tensor::from_rows(&[vec![0.2, 0.7]]).unwrap();
    let t = 0.8;
    let single = {
        let x = gen.sample(&z1).unwrap();
        let u = dm_upstream(&x, &teacher, &fake, &[t], &eps1, &sched).unwrap();
        gen.pullback(&z1, &[&u]).unwrap().1.pop().unwrap()
    };
    let b = 8;
    let zb = z1.gather_rows(&[0; 8]);
    let xb = gen.sample(&zb).unwrap();
    let u = dm_upstream(&xb, &teacher, &fake, &[t; 8], &eps1.gather_rows(&[0; 8]), &sched).unwrap();
    let batch = gen.pullback(&zb, &[&u]).unwrap().1.pop().unwrap();
    let (a, c) = (flatten_grads(&single), flatten_grads(&batch));
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(&c) {
        assert!((x - y).abs() <= 1e-12 * scale, "B={b}: {x} vs {y}");
    }
}

#[test]
fn dm_gradient_leaves_score_networks_alone() {
    let (teacher, target, sched) = setup();
    let fake = perturbed(&teacher, 4);
    let (t0, f0) = (teacher.params().clone(), fake.params().clone());
    let gen = Generator::new(2, &[8], 0).unwrap();
    let z = target.sample(&mut keyed_rng(0, "z"), 4);
    let d = dm_generator_gradient(&gen, &teacher, &fake, &z, &sched, &Draw::new(0, 0)).unwrap();
    assert!(d.grads.keys().all(|k| k.starts_with("gen")));
    assert!(teacher.params().bit_eq(&t0) && fake.params().bit_eq(&f0));
}

#[test]
fn fake_score_learns_a_point_mass() {
    let (teacher, _, sched) = setup();
    let mut fake = teacher.clone();
    fake.set_trainable(true);
    let point = Tensor::new(&[64, 2], [1.5, -0.5].repeat(64)).unwrap();
    let probe = Tensor::new(&[4000, 2], [1.5, -0.5].repeat(4000)).unwrap();
    let eval = |f: &ScoreNetwork| dsm_loss(f, &probe, &sched, &mut keyed_rng(9, "probe")).unwrap();
    let before = eval(&fake);
    let mut opt = Optimizer::adam(1e-3, 0.0, 0.999);
    for step in 0..50 {
        update_fake_score(&mut fake, &mut opt, &point, &sched, 1, &Draw::new(5, step)).unwrap();
    }
    let after = eval(&fake);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn fake_score_updates_are_seeded() {
    let (teacher, target, sched) = setup();
    let x0 = target.sample(&mut keyed_rng(2, "x0"), 16);
    let run = || {
        let mut f = teacher.clone();
        f.set_trainable(true);
        let mut opt = Optimizer::adam(1e-3, 0.0, 0.999);
        for step in 0..5 {
            update_fake_score(&mut f, &mut opt, &x0, &sched, 2, &Draw::new(1, step)).unwrap();
        }
        f.params().clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn regression_gradient_matches_finite_differences() {
    for s in 0..10u64 {
        let gen = Generator::new(2, &[6, 6], s).unwrap();
        let mut rng = keyed_rng(s, "reg");
        let z = normal_tensor(&mut rng, &[5, 2]);
        let y = normal_tensor(&mut rng, &[5, 2]);
        let (_, grads) = regression_loss(&gen, &z, &y).unwrap();
        let err = common::param_fd(gen.params(), &grads, 1e-6, |p| {
            regression_loss(&Generator::from_params(p.clone()).unwrap(), &z, &y).unwrap().0
        });
        assert!(err < 1e-5, "seed {s}: {err}");
    }
}

#[test]
fn regression_is_zero_on_its_own_outputs() {
    let gen = Generator::new(2, &[8], 1).unwrap();
    let z = normal_tensor(&mut keyed_rng(1, "z"), &[6, 2]);
    let y = gen.sample(&z).unwrap();
    assert_eq!(regression_loss(&gen, &z, &y).unwrap().0, 0.0);
}

#[test]
fn regression_pairs_round_trip_through_disk() {
    let (teacher, _, sched) = setup();
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("pairs-roundtrip.elp");
    let data = RegressionData::generate(&teacher, &sched, 32, 4, 3, &path).unwrap();
    assert_eq!(data.len(), 32);
    let back = RegressionData::load(&path).unwrap();
    assert!(back.z.bit_eq(&data.z) && back.y.bit_eq(&data.y));
}

fn zero_disc() -> Discriminator {
    let mut d = Discriminator::new(2, &[8], 0).unwrap();
    for (_, p) in d.params_mut().iter_mut() {
        p.tensor.scale_assign(0.0);
    }
    d
}

#[test]
fn adversarial_losses_at_chance() {
    let sched = NoiseSchedule::default();
    let mut rng = keyed_rng(0, "adv");
    let x = normal_tensor(&mut rng, &[5, 2]);
    let real = normal_tensor(&mut rng, &[5, 2]);
    let e = normal_tensor(&mut rng, &[5, 2]);
    let out = adversarial_loss(&zero_disc(), &x, &real, &[0.5; 5], &e, &e, &sched).unwrap();
    assert!((out.gen_loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((out.disc_loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let sched = NoiseSchedule::default();
    for s in 0..10u64 {
        // zero-initialized biases can park a pre-activation exactly on a ReLU kink
        let mut disc = Discriminator::new(2, &[6, 6], s).unwrap();
        let mut rng = keyed_rng(s, "adv-fd");
        for (_, p) in disc.params_mut().iter_mut() {
            let n = normal_tensor(&mut rng, p.tensor.shape());
            p.tensor.add_assign(&n.map(|v| 0.05 * v));
        }
        let x = normal_tensor(&mut rng, &[4, 2]);
        let real = normal_tensor(&mut rng, &[4, 2]);
        let (ef, er) = (normal_tensor(&mut rng, &[4, 2]), normal_tensor(&mut rng, &[4, 2]));
        let t: Vec<f64> = (0..4).map(|i| 0.3 + 0.5 * i as f64).collect();
        let out = adversarial_loss(&disc, &x, &real, &t, &ef, &er, &sched).unwrap();

        let gen_fd = diffgraph::numeric_gradient(
            |xp| Ok(adversarial_loss(&disc, xp, &real, &t, &ef, &er, &sched).unwrap().gen_loss),
            &x,
            1e-6,
        )
        .unwrap();
        for (a, n) in out.gen_upstream.data().iter().zip(gen_fd.data()) {
            assert!(diffgraph::relative_error(*a, *n) < 1e-4, "seed {s}: {a} vs {n}");
        }

        let err = common::param_fd(disc.params(), &out.disc_grads, 1e-6, |p| {
            let mut d = disc.clone();
            *d.params_mut() = p.clone();
            adversarial_loss(&d, &x, &real, &t, &ef, &er, &sched).unwrap().disc_loss
        });
        assert!(err < 1e-4, "seed {s}: {err}");
    }
}

fn disc_grad_norm(out: &el_core::distill::AdversarialOutput) -> f64 {
    flatten_grads(&out.disc_grads).iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn separable_clusters_saturate_the_discriminator() {
    let sched = NoiseSchedule::default();
    let n = 64;
    let fake_x = Tensor::new(&[n, 2], [-4.0, -4.0].repeat(n)).unwrap();
    let real = Tensor::new(&[n, 2], [4.0, 4.0].repeat(n)).unwrap();
    let t = vec![0.1; n];
    let mut disc = Discriminator::new(2, &[16], 1).unwrap();
    let mut opt = Optimizer::adam(1e-2, 0.0, 0.999);
    let mut rng = keyed_rng(1, "sep");
    let start = {
        let e = normal_tensor(&mut rng, &[n, 2]);
        adversarial_loss(&disc, &fake_x, &real, &t, &e, &e, &sched).unwrap()
    };
    let mut last = start.clone();
    for _ in 0..200 {
        let (ef, er) = (normal_tensor(&mut rng, &[n, 2]), normal_tensor(&mut rng, &[n, 2]));
        last = adversarial_loss(&disc, &fake_x, &real, &t, &ef, &er, &sched).unwrap();
        opt.step(disc.params_mut(), &last.disc_grads).unwrap();
    }
    // D(fake) -> 0 drives -log D(fake) up while the non-saturating gradient stays alive
    assert!(last.gen_loss > 2.0 * start.gen_loss, "{} -> {}", start.gen_loss, last.gen_loss);
    assert!(last.disc_loss < 0.1 * start.disc_loss);
    let up = last.gen_upstream.sq_norm().sqrt();
    assert!(up.is_finite() && up > 0.0);
}

#[test]
fn matched_distributions_give_small_disc_gradient() {
    let sched = NoiseSchedule::default();
    let target = TargetDistribution::default_gmm();
    // zero output layer: D = 1/2 everywhere at init, hidden features still random
    let mut disc = Discriminator::new(2, &[16, 16], 2).unwrap();
    let names: Vec<String> = disc.params().iter().map(|(n, _)| n.to_string()).collect();
    for n in &names[names.len() - 2..] {
        disc.params_mut().tensor_mut(n).unwrap().scale_assign(0.0);
    }
    let n = 20_000;
    let mut rng = keyed_rng(2, "sym");
    let a = target.sample(&mut rng, n);
    let b = target.sample(&mut rng, n);
    let t = sched.sample_times(&mut rng, n);
    let (ef, er) = (normal_tensor(&mut rng, &[n, 2]), normal_tensor(&mut rng, &[n, 2]));
    let same = disc_grad_norm(&adversarial_loss(&disc, &a, &b, &t, &ef, &er, &sched).unwrap());
    let shifted = b.map(|v| v + 3.0);
    let apart = disc_grad_norm(&adversarial_loss(&disc, &a, &shifted, &t, &ef, &er, &sched).unwrap());
    assert!(same < 0.05 * apart, "{same} vs {apart}");
}

#[test]
fn zero_steps_leave_generator_unchanged() {
    let (teacher, target, sched) = setup();
    let cfg = DistillConfig {
        steps: 0,
        ..small(Auxiliary::Embedding)
    };
    let out = train_distill(&cfg, &teacher, &target, &sched).unwrap();
    let fresh = Generator::new(2, &cfg.gen_hidden, cfg.seed).unwrap();
    assert!(out.gen.params().bit_eq(fresh.params()));
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.history[0].step, 0);
}

#[test]
fn seeded_runs_repeat_their_history() {
    let (teacher, target, sched) = setup();
    let cfg = DistillConfig {
        steps: 10,
        ..small(Auxiliary::Embedding)
    };
    let a = train_distill(&cfg, &teacher, &target, &sched).unwrap();
    let b = train_distill(&cfg, &teacher, &target, &sched).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 5, 10]);
    assert!(a.gen.params().bit_eq(b.gen.params()));
}

fn trajectory(cfg: &DistillConfig, teacher: &ScoreNetwork, steps: usize) -> ParameterSet {
    let (_, target, sched) = setup();
    let mut s = DistillState::new(cfg, teacher, &target, &sched).unwrap();
    for _ in 0..steps {
        distill_step(&mut s, cfg).unwrap();
    }
    s.gen.params().clone()
}

#[test]
fn zero_lambda_embedding_run_equals_plain_dm() {
    let (teacher, _, _) = setup();
    let plain = trajectory(&small(Auxiliary::None), &teacher, 6);
    let el0 = trajectory(
        &DistillConfig {
            lambda_embed: 0.0,
            ..small(Auxiliary::Embedding)
        },
        &teacher,
        6,
    );
    assert!(plain.bit_eq(&el0));
}

#[test]
fn convex_lambda_one_ignores_the_dm_term() {
    let (teacher, _, _) = setup();
    let cfg = DistillConfig {
        mixing: MixingMode::Convex,
        lambda_embed: 1.0,
        ..small(Auxiliary::Embedding)
    };
    assert_eq!(cfg.weights(), (0.0, 1.0));
    // a different teacher changes every DM gradient but nothing else
    let a = trajectory(&cfg, &teacher, 5);
    let b = trajectory(&cfg, &perturbed(&teacher, 7), 5);
    assert!(a.bit_eq(&b));
    let dm = trajectory(&small(Auxiliary::None), &teacher, 5);
    assert!(!a.bit_eq(&dm));
}

#[test]
fn total_gradient_is_weighted_sum_of_isolated_components() {
    let (teacher, target, sched) = setup();
    let cfg = small(Auxiliary::Embedding);
    let mut state = DistillState::new(&cfg, &teacher, &target, &sched).unwrap();
    state.fake = perturbed(&teacher, 8);
    let draw = Draw::new(cfg.seed, 3);
    let comps = state.component_gradients(&cfg, &draw).unwrap();

    let z = state.latents(&draw, cfg.batch);
    let dm = dm_generator_gradient(&state.gen, &state.teacher, &state.fake, &z, &sched, &draw).unwrap();
    assert!(bit_eq_grads(&dm.grads, &comps.dm));
    let real = state.real_batch(&draw, cfg.batch);
    let ens = state.ensemble.as_ref().unwrap();
    let (_, up) = embedding_loss_grad(&real, &dm.x, ens, &cfg.bandwidths, 1.0).unwrap();
    let el = state.gen.pullback(&z, &[&up]).unwrap().1.pop().unwrap();
    assert!(bit_eq_grads(&el, comps.aux.as_ref().unwrap()));

    let lambda = cfg.lambda_embed;
    let total = comps.combine(1.0, lambda);
    for (name, g) in &total {
        let want = dm.grads[name].zip_map(&el[name], |a, b| a + lambda * b).unwrap();
        assert!(g.bit_eq(&want), "{name}");
    }
}

#[test]
fn training_never_touches_teacher_or_ensemble() {
    let (teacher, target, sched) = setup();
    let cfg = small(Auxiliary::Embedding);
    let mut state = DistillState::new(&cfg, &teacher, &target, &sched).unwrap();
    let ens_before = state.ensemble.as_ref().unwrap().snapshot();
    for _ in 0..100 {
        distill_step(&mut state, &cfg).unwrap();
    }
    let bits = |p: &ParameterSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(state.teacher.params()), bits(teacher.params()));
    let ens_after = state.ensemble.as_ref().unwrap().snapshot();
    assert!(ens_before.iter().zip(&ens_after).all(|(a, b)| a.bit_eq(b)));
    assert!(!state.fake.params().bit_eq(teacher.params()));
}

#[test]
fn non_finite_values_abort_with_step_and_components() {
    let (mut teacher, target, sched) = setup();
    let name = teacher.params().iter().last().unwrap().0.to_string();
    teacher.params_mut().tensor_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let cfg = small(Auxiliary::None);
    let mut state = DistillState::new(&cfg, &teacher, &target, &sched).unwrap();
    match distill_step(&mut state, &cfg) {
        Err(CoreError::NonFinite { step, detail }) => {
            assert_eq!(step, 0);
            assert!(detail.contains("dm_grad_norm"), "{detail}");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (teacher, target, sched) = setup();
    for cfg in [
        DistillConfig { batch: 0, ..small(Auxiliary::None) },
        DistillConfig { lambda_embed: -0.5, ..small(Auxiliary::Embedding) },
        DistillConfig {
            mixing: MixingMode::Convex,
            lambda_embed: 1.5,
            ..small(Auxiliary::Embedding)
        },
    ] {
        assert!(DistillState::new(&cfg, &teacher, &target, &sched).is_err());
    }
}
