use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffgraph::{
    check_gradients, check_param_gradients, Graph, ImageShape, MlpSpec, Tensor, Var,
};
use crate::dists::{normal_tensor, MIN_STD};
use crate::Error;

fn small_config() -> RssmConfig {
    let mut a = ModalityConfig::vector("a", 4, LossKind::Reconstruction);
    a.encoder = EncoderSpec::Mlp(MlpSpec::elu(vec![8, 6]));
    a.decoder = Some(DecoderSpec::Mlp(MlpSpec::elu(vec![8])));
    let mut b = ModalityConfig::vector("b", 3, LossKind::Reconstruction);
    b.encoder = EncoderSpec::Mlp(MlpSpec::elu(vec![5]));
    b.decoder = Some(DecoderSpec::Mlp(MlpSpec::elu(vec![8])));
    let mut c = RssmConfig::new(vec![a, b], 2).with_hidden(12);
    c.deter = 8;
    c.stoch = 4;
    c
}

fn model(seed: u64) -> Rssm {
    Rssm::new(small_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn zero_model() -> Rssm {
    let mut m = model(0);
    m.params.zero_all();
    m
}

fn bundle(a: &[f64], b: &[f64]) -> ObservationBundle {
    ObservationBundle::new()
        .with("a", Observation::Vector(a.to_vec()))
        .with("b", Observation::Vector(b.to_vec()))
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, length: usize) -> SequenceBatch {
    let n = batch * length;
    SequenceBatch {
        batch,
        length,
        obs: vec![normal_tensor(rng, &[n, 4]), normal_tensor(rng, &[n, 3])],
        actions: normal_tensor(rng, &[n, 2]).map(f64::tanh),
        rewards: normal_tensor(rng, &[n, 1]),
    }
}

fn rollout_values(m: &Rssm, batch: &SequenceBatch, seed: u64) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let init = m.initial_state(&mut g, batch.batch);
    let r = m
        .posterior_rollout(&mut g, batch, &init, &mut NoiseSource::seeded(seed))
        .unwrap();
    r.posts
        .iter()
        .flat_map(|s| [g.value(s.h).data().to_vec(), g.value(s.s).data().to_vec()])
        .collect()
}

#[test]
fn zero_encoder_gives_zero_embedding() {
    let m = zero_model();
    let e = m
        .encode(&bundle(&[1.0, -2.0, 3.0, 0.5], &[4.0, 5.0, 6.0]))
        .unwrap();
    assert_eq!(e.len(), 6 + 5);
    assert!(e.iter().all(|&x| x == 0.0));
}

#[test]
fn embedding_width_is_sum_of_modalities() {
    let m = model(1);
    assert_eq!(m.embed_widths(), &[6, 5]);
    assert_eq!(m.embed_width(), 11);
}

#[test]
fn swapping_payloads_changes_embedding() {
    let mut cfg = small_config();
    for mc in &mut cfg.modalities {
        mc.kind = ModalityKind::Vector(3);
        mc.encoder = EncoderSpec::Mlp(MlpSpec::elu(vec![5]));
    }
    let m = Rssm::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (x, y) = ([0.3, -1.0, 2.0], [1.5, 0.2, -0.7]);
    let e1 = m.encode(&bundle(&x, &y)).unwrap();
    let e2 = m.encode(&bundle(&y, &x)).unwrap();
    assert_ne!(e1, e2);
}

#[test]
fn missing_or_extra_modality_is_a_config_error() {
    let m = model(1);
    let missing = ObservationBundle::new().with("a", Observation::Vector(vec![0.0; 4]));
    assert!(matches!(m.encode(&missing), Err(Error::Config(_))));
    let extra = bundle(&[0.0; 4], &[0.0; 3]).with("c", Observation::Vector(vec![1.0]));
    assert!(matches!(m.encode(&extra), Err(Error::Config(_))));
    let wrong = bundle(&[0.0; 5], &[0.0; 3]);
    assert!(matches!(m.encode(&wrong), Err(Error::Shape { .. })));
}

#[test]
fn config_validation() {
    let mut c = small_config();
    c.modalities[0].decoder = None;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = small_config();
    c.modalities[1].id = "a".into();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = small_config();
    c.modalities[1].loss = LossKind::ContrastiveVariational;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.modalities[1].decoder = None;
    assert!(c.validate().is_ok());
}

#[test]
fn det_step_zero_params() {
    let m = zero_model();
    let mut s = m.initial_latent();
    assert!(m
        .det_step_value(&s, &[0.3, -0.2])
        .unwrap()
        .iter()
        .all(|&x| x == 0.0));
    s.h = (0..8).map(|i| i as f64 - 3.0).collect();
    let h = m.det_step_value(&s, &[0.3, -0.2]).unwrap();
    for (a, b) in h.iter().zip(&s.h) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn det_step_depends_on_action() {
    let m = model(4);
    let mut s = m.initial_latent();
    s.s = vec![0.1, -0.4, 0.2, 0.9];
    s.h = vec![0.05; 8];
    let f = |g: &mut Graph, x: &[Var]| {
        let st = m.state_vars(g, std::slice::from_ref(&s));
        let h = m.det_step(g, &st, x[0])?;
        Ok(g.sum(h))
    };
    let a = Tensor::row(&[0.2, -0.6]);
    assert!(check_gradients(f, std::slice::from_ref(&a), 1e-5).unwrap() < 1e-4);
    let eps = 1e-5;
    let up = m.det_step_value(&s, &[0.2 + eps, -0.6]).unwrap();
    let down = m.det_step_value(&s, &[0.2 - eps, -0.6]).unwrap();
    assert!(up
        .iter()
        .zip(&down)
        .any(|(u, d)| (u - d).abs() / (2.0 * eps) > 1e-6));
}

#[test]
fn zero_prior_and_posterior_agree() {
    let m = zero_model();
    let p = m.prior_value(&[0.0; 8]).unwrap();
    assert!(p.mean().iter().all(|&x| x == 0.0));
    for &s in p.std() {
        assert!((s - (2f64.ln() + 0.1)).abs() < 1e-12);
    }
    let q = m.posterior_value(&[0.0; 8], &[0.5; 11]).unwrap();
    assert_eq!(p, q);
    assert_eq!(p, m.prior_value(&[0.0; 8]).unwrap());
}

#[test]
fn posterior_depends_on_embedding() {
    let m = model(5);
    let q1 = m.posterior_value(&[0.1; 8], &[0.5; 11]).unwrap();
    let q2 = m.posterior_value(&[0.1; 8], &[-0.5; 11]).unwrap();
    assert_ne!(q1.mean(), q2.mean());
}

#[test]
fn single_step_rollout_matches_observe() {
    let m = model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = random_batch(&mut rng, 1, 1);
    let vals = rollout_values(&m, &batch, 9);
    let b = bundle(batch.obs[0].data(), batch.obs[1].data());
    let post = m
        .observe(
            &[m.initial_latent()],
            &[vec![0.0, 0.0]],
            &[b],
            &mut NoiseSource::seeded(9),
        )
        .unwrap();
    assert_eq!(vals[0], post[0].h);
    assert_eq!(vals[1], post[0].s);
}

#[test]
fn rollout_is_bit_reproducible() {
    let m = model(7);
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(7), 3, 5);
    assert_eq!(
        rollout_values(&m, &batch, 11),
        rollout_values(&m, &batch, 11)
    );
    assert_ne!(
        rollout_values(&m, &batch, 11),
        rollout_values(&m, &batch, 12)
    );
}

#[test]
fn rollout_rejects_bad_lengths() {
    let m = model(7);
    let mut batch = random_batch(&mut ChaCha8Rng::seed_from_u64(7), 2, 3);
    batch.actions = Tensor::zeros(&[5, 2]);
    let mut g = Graph::new();
    let init = m.initial_state(&mut g, 2);
    let r = m.posterior_rollout(&mut g, &batch, &init, &mut NoiseSource::Zero);
    assert!(matches!(r, Err(Error::Usage(_))));
}

#[test]
fn beliefs_are_causal() {
    let m = model(8);
    let (b, l, t) = (2, 6, 2);
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(8), b, l);
    let mut mutated = batch.clone();
    for k in 0..2 {
        let cols = mutated.obs[k].cols();
        for v in &mut mutated.obs[k].data_mut()[(t + 1) * b * cols..] {
            *v = 100.0 - *v;
        }
    }
    for v in &mut mutated.actions.data_mut()[(t + 1) * b * 2..] {
        *v = -*v;
    }
    let a = rollout_values(&m, &batch, 3);
    let c = rollout_values(&m, &mutated, 3);
    assert_eq!(a[..2 * (t + 1)], c[..2 * (t + 1)]);
    assert_ne!(a[2 * (t + 1)..], c[2 * (t + 1)..]);
}

#[test]
fn stds_respect_the_floor() {
    let m = model(9);
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(9), 4, 4).clone();
    let mut g = Graph::new();
    let init = m.initial_state(&mut g, 4);
    let r = m
        .posterior_rollout(&mut g, &batch, &init, &mut NoiseSource::seeded(1))
        .unwrap();
    for (p, q) in r.posts.iter().zip(&r.priors) {
        assert!(g.value(p.dist.std).data().iter().all(|&s| s >= MIN_STD));
        assert!(g.value(q.std).data().iter().all(|&s| s >= MIN_STD));
    }
}

#[test]
fn posterior_step_gradients_match_finite_differences() {
    let m = model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let point = vec![
        normal_tensor(&mut rng, &[1, 4]),
        normal_tensor(&mut rng, &[1, 3]),
        normal_tensor(&mut rng, &[1, 2]),
    ];
    let f = |g: &mut Graph, x: &[Var]| {
        let init = m.initial_state(g, 1);
        let (e, _) = m.encode_vars(g, &x[..2])?;
        let (post, prior) = m.observe_step(g, &init, x[2], e, &mut NoiseSource::seeded(5))?;
        let kl = post.dist.kl(g, &prior)?;
        let r = m.predict_reward(g, post.h, post.s)?;
        let t = g.add(kl, r)?;
        Ok(g.sum(t))
    };
    assert!(check_gradients(f, &point, 1e-5).unwrap() < 1e-4);
}

#[test]
fn imagine_single_step_is_one_prior_transition() {
    let m = model(11);
    let mut g = Graph::new();
    let start = m.initial_state(&mut g, 2);
    let mut policy = |g: &mut Graph, f: Var| -> crate::Result<Var> {
        let rows = g.value(f).rows();
        Ok(g.constant(Tensor::full(&[rows, 2], 0.25)))
    };
    let im = m
        .imagine(&mut g, &start, 1, &mut policy, &mut NoiseSource::Zero)
        .unwrap();
    assert_eq!(
        (im.states.len(), im.actions.len(), im.rewards.len()),
        (2, 1, 1)
    );
    let a = g.constant(Tensor::full(&[2, 2], 0.25));
    let next = m
        .imagine_step(&mut g, &start, a, &mut NoiseSource::Zero)
        .unwrap();
    assert_eq!(g.value(next.s), g.value(im.states[1].s));
    assert!(matches!(
        m.imagine(&mut g, &start, 0, &mut policy, &mut NoiseSource::Zero),
        Err(Error::Usage(_))
    ));
}

#[test]
fn zero_model_imagines_zero_rewards() {
    let m = zero_model();
    let mut g = Graph::new();
    let start = m.initial_state(&mut g, 3);
    let mut policy = |g: &mut Graph, f: Var| -> crate::Result<Var> {
        let rows = g.value(f).rows();
        Ok(g.constant(Tensor::full(&[rows, 2], -0.5)))
    };
    let im = m
        .imagine(&mut g, &start, 4, &mut policy, &mut NoiseSource::seeded(2))
        .unwrap();
    for r in im.rewards {
        assert!(g.value(r).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn imagination_ignores_poisoned_observations() {
    let m = model(12);
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(12), 2, 3);
    let run = |poison: bool| {
        let mut g = Graph::new();
        let init = m.initial_state(&mut g, 2);
        let r = m
            .posterior_rollout(&mut g, &batch, &init, &mut NoiseSource::seeded(1))
            .unwrap();
        let start = r.posts[2].detach(&mut g);
        if poison {
            let mut bad = batch.clone();
            bad.obs.iter_mut().for_each(|t| t.data_mut().fill(f64::NAN));
            bad.obs.iter().for_each(|t| {
                g.constant(t.clone());
            });
        }
        let mut policy = |g: &mut Graph, f: Var| -> crate::Result<Var> {
            let s = g.slice_cols(f, 0, 2)?;
            Ok(g.tanh(s))
        };
        let im = m
            .imagine(&mut g, &start, 5, &mut policy, &mut NoiseSource::seeded(4))
            .unwrap();
        im.rewards
            .iter()
            .map(|r| g.value(*r).data().to_vec())
            .collect::<Vec<_>>()
    };
    let clean = run(false);
    assert_eq!(clean, run(true));
    assert!(clean.iter().flatten().all(|x| x.is_finite()));
}

#[test]
fn imagined_reward_gradient_reaches_policy() {
    let m = model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut pstore = crate::diffgraph::ParamStore::new();
    let actor =
        crate::diffgraph::Dense::new(&mut pstore, "pi", m.config.feature_width(), 2, &mut rng);
    let f = |g: &mut Graph, store: &crate::diffgraph::ParamStore| -> crate::Result<Var> {
        let start = m.initial_state(g, 2);
        let mut policy = |g: &mut Graph, feats: Var| -> crate::Result<Var> {
            let z = actor.apply(g, store, feats)?;
            Ok(g.tanh(z))
        };
        let im = m.imagine(g, &start, 3, &mut policy, &mut NoiseSource::seeded(8))?;
        let all = g.concat_rows(&im.rewards)?;
        Ok(g.sum(all))
    };
    assert!(check_param_gradients(&mut pstore, |s| s, f, 1e-5, 8).unwrap() < 1e-4);
    let mut g = Graph::new();
    let out = f(&mut g, &pstore).unwrap();
    let grads = g.backward(out).unwrap().for_store(&g, &pstore);
    assert!(grads
        .iter()
        .flatten()
        .any(|t| t.data().iter().any(|&x| x.abs() > 1e-8)));
}

#[test]
fn reward_head() {
    let z = zero_model();
    let st = z.initial_latent();
    let r = z.predict_reward_value(&st).unwrap();
    assert_eq!(r.mean(), &[0.0]);
    assert_eq!(r.std(), &[1.0]);
    let lp = r.log_prob(&[1.5]).unwrap();
    assert!((lp - (-0.5 * 2.25 - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);

    let m = model(14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let point = vec![
        normal_tensor(&mut rng, &[3, 8]),
        normal_tensor(&mut rng, &[3, 4]),
    ];
    let f = |g: &mut Graph, x: &[Var]| {
        let r = m.predict_reward(g, x[0], x[1])?;
        let sq = g.square(r);
        Ok(g.sum(sq))
    };
    assert!(check_gradients(f, &point, 1e-5).unwrap() < 1e-4);
}

#[test]
fn decoder_contract() {
    let z = zero_model();
    let st = z.initial_latent();
    let out = z.decode_value(&st, "a").unwrap();
    assert_eq!(out, vec![0.0; 4]);
    assert_eq!(z.decode_value(&st, "b").unwrap().len(), 3);

    let mut cfg = small_config();
    cfg.modalities[1].loss = LossKind::ContrastiveVariational;
    cfg.modalities[1].decoder = None;
    let m = Rssm::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(matches!(m.decode_value(&st, "b"), Err(Error::Config(_))));
}

#[test]
fn image_decoder_output_matches_observation_shape() {
    let shape = ImageShape {
        size: 8,
        channels: 3,
    };
    let mut img = ModalityConfig::image("cam", shape, LossKind::Reconstruction);
    img.encoder = EncoderSpec::Conv(vec![4, 4]);
    img.decoder = Some(DecoderSpec::Conv(vec![4, 4]));
    let mut c = RssmConfig::new(vec![img], 2).with_hidden(8);
    c.deter = 6;
    c.stoch = 3;
    let m = Rssm::new(c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let out = m.decode_value(&m.initial_latent(), "cam").unwrap();
    assert_eq!(out.len(), shape.len());
    let obs = ObservationBundle::new().with("cam", Observation::Image(ImageObs::blank(8, 3)));
    assert_eq!(m.encode(&obs).unwrap().len(), 2 * 2 * 4);
}

#[test]
fn decoder_overfits_a_single_sample_monotonically() {
    let mut m = model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let h = normal_tensor(&mut rng, &[1, 8]);
    let s = normal_tensor(&mut rng, &[1, 4]);
    let target = normal_tensor(&mut rng, &[1, 4]);
    let mut last = f64::NEG_INFINITY;
    for _ in 0..100 {
        let mut g = Graph::new();
        let (hv, sv, tv) = (
            g.constant(h.clone()),
            g.constant(s.clone()),
            g.constant(target.clone()),
        );
        let mean = m.decode(&mut g, 0, hv, sv).unwrap();
        let lp = crate::dists::unit_log_prob(&mut g, mean, tv).unwrap();
        let ll = g.scalar(lp);
        assert!(ll > last, "log-likelihood {ll} did not improve on {last}");
        last = ll;
        let grads = g.backward(lp).unwrap().for_store(&g, &m.params);
        for (id, gr) in m.params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            if let Some(gr) = gr {
                let p = m.params.get_mut(id);
                for (x, d) in p.data_mut().iter_mut().zip(gr.data()) {
                    *x += 0.01 * d;
                }
            }
        }
    }
}

#[test]
fn policy_features_use_the_mean() {
    let m = model(16);
    let mut st = m.initial_latent();
    st.h = vec![0.5; 8];
    let f1 = st.features();
    st.s = vec![9.0; 4];
    assert_eq!(f1, st.features());
    assert_eq!(f1.len(), 12);
}
