use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffgraph::{check_gradients, check_param_gradients, MlpSpec, ParamStore, Tensor};
use crate::dists::{normal_tensor, HALF_LOG_2PI};
use crate::rssm::{
    DecoderSpec, EncoderSpec, LossKind, ModalityConfig, NoiseSource, Rssm, RssmConfig,
    SequenceBatch,
};

fn config(losses: [LossKind; 2]) -> RssmConfig {
    let mods = [("a", 4usize), ("b", 3usize)]
        .iter()
        .zip(losses)
        .map(|(&(id, dim), loss)| {
            let mut m = ModalityConfig::vector(id, dim, loss);
            m.encoder = EncoderSpec::Mlp(MlpSpec::elu(vec![6]));
            if m.decoder.is_some() {
                m.decoder = Some(DecoderSpec::Mlp(MlpSpec::elu(vec![6])));
            }
            m
        })
        .collect();
    let mut c = RssmConfig::new(mods, 2).with_hidden(8);
    c.deter = 6;
    c.stoch = 3;
    c.score_dim = 5;
    c.score_hidden = vec![7];
    c
}

fn model(losses: [LossKind; 2], seed: u64) -> Rssm {
    Rssm::new(config(losses), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn batch(seed: u64, b: usize, l: usize) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * l;
    SequenceBatch {
        batch: b,
        length: l,
        obs: vec![
            normal_tensor(&mut rng, &[n, 4]),
            normal_tensor(&mut rng, &[n, 3]),
        ],
        actions: normal_tensor(&mut rng, &[n, 2]).map(f64::tanh),
        rewards: normal_tensor(&mut rng, &[n, 1]),
    }
}

const RECON: [LossKind; 2] = [LossKind::Reconstruction, LossKind::Reconstruction];
const MIXED: [LossKind; 2] = [LossKind::Reconstruction, LossKind::ContrastiveVariational];
const CPC: [LossKind; 2] = [LossKind::Reconstruction, LossKind::ContrastivePredictive];

enum Which {
    Elbo,
    Mixed,
    Cpc,
}

fn evaluate(
    mm: &Rssm,
    data: &SequenceBatch,
    cfg: &ObjectiveConfig,
    which: &Which,
    g: &mut Graph,
) -> crate::Result<ObjectiveOutput> {
    let init = mm.initial_state(g, data.batch);
    let roll = mm.posterior_rollout(g, data, &init, &mut NoiseSource::seeded(3))?;
    match which {
        Which::Elbo => reconstruction_elbo(g, mm, &roll, data, cfg),
        Which::Mixed => mixed_variational_loss(g, mm, &roll, data, cfg),
        Which::Cpc => cpc_loss(g, mm, &roll, data, cfg, &mut NoiseSource::seeded(4)),
    }
}

#[test]
fn infonce_examples() {
    assert!(infonce(&vec![vec![3.0; 4]; 4]).unwrap().abs() < 1e-12);
    let e = std::f64::consts::E;
    let v = infonce(&[vec![e, 1.0], vec![1.0, e]]).unwrap();
    assert!((v - 0.379885).abs() < 1e-6);
    assert!((v - (2f64.ln() + (e / (e + 1.0)).ln())).abs() < 1e-12);
    let mut prev = f64::NEG_INFINITY;
    for d in [1.0, 10.0, 100.0, 1000.0] {
        let logits: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..8).map(|j| if i == j { d } else { 0.0 }).collect())
            .collect();
        let v = infonce_from_logits(&logits);
        assert!(v >= prev && v <= 8f64.ln());
        prev = v;
    }
    assert!((prev - 8f64.ln()).abs() < 1e-12);
    assert!(matches!(
        infonce(&[vec![1.0, 0.0], vec![1.0, 1.0]]),
        Err(Error::Domain(_))
    ));
    assert!(matches!(infonce(&[vec![1.0]]), Err(Error::Usage(_))));
}

#[test]
fn infonce_graph_matches_plain_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 5] {
        let l = normal_tensor(&mut rng, &[n, n]);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| l.row_slice(i).to_vec()).collect();
        let mut g = Graph::new();
        let lv = g.constant(l.clone());
        let v = infonce_graph(&mut g, lv).unwrap();
        assert!((g.scalar(v) - infonce_from_logits(&rows)).abs() < 1e-12);
        let err = check_gradients(|g, x| infonce_graph(g, x[0]), &[l], 1e-5).unwrap();
        assert!(err < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn infonce_bounded_and_scale_invariant(seed in 0u64..10_000, n in 2usize..12, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<Vec<f64>> = (0..n).map(|_| normal_tensor(&mut rng, &[n]).data().iter().map(|x| (2.0 * x).exp()).collect()).collect();
        let v = infonce(&s).unwrap();
        prop_assert!(v <= (n as f64).ln() + 1e-12);
        let scaled: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|x| c * x).collect()).collect();
        prop_assert!((infonce(&scaled).unwrap() - v).abs() < 1e-10);
    }

    #[test]
    fn balanced_kl_value_ignores_alpha(seed in 0u64..10_000, alpha in 0.0f64..=1.0, free in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mk = |g: &mut Graph, rng: &mut ChaCha8Rng| {
            let m = g.constant(normal_tensor(rng, &[3, 2]));
            let r = g.constant(normal_tensor(rng, &[3, 2]));
            crate::dists::GaussianVar::from_raw(g, m, r)
        };
        let q = mk(&mut g, &mut rng);
        let p = mk(&mut g, &mut rng);
        let (loss, kl) = balanced_kl_free_nats(&mut g, &q, &p, alpha, free).unwrap();
        prop_assert!((g.scalar(loss) - free_nats_value(kl, free)).abs() < 1e-12);
    }
}

#[test]
fn score_examples() {
    let mut store = ParamStore::new();
    let head = ScoreHead::new(
        &mut store,
        "s",
        3,
        4,
        2,
        &[5],
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(head.lambda(&store), 1.0);
    *store.get_mut(head.log_lambda) = Tensor::scalar(2f64.ln());
    let mut g = Graph::new();
    let pz = g.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 0.0]));
    let po = g.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]));
    let l = head.log_scores_projected(&mut g, &store, pz, po).unwrap();
    let s = g.value(l).map(f64::exp);
    // dot([1,1],[1,1]) = 2 with λ = 2 gives e; dot([1,0],[0,1]) = 0 gives 1.
    assert!((s.get2(0, 0) - std::f64::consts::E).abs() < 1e-12);
    assert_eq!(s.get2(1, 1), 1.0);

    store.zero_all();
    let e = g.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[3, 3]));
    let z = g.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[3, 4]));
    let sv = score_variational(&mut g, &head, &store, e, z).unwrap();
    let sp = score_predictive(&mut g, &head, &store, e, z).unwrap();
    assert!(g.value(sv).data().iter().all(|&x| x == 1.0));
    assert_eq!(g.value(sv), g.value(sp));
}

#[test]
fn free_nats_examples() {
    let run = |kl_target: f64, alpha: f64| {
        let mut g = Graph::new();
        let qm = g.leaf(Tensor::scalar((2.0 * kl_target).sqrt()));
        let qs = g.leaf(Tensor::scalar(1.0));
        let pm = g.leaf(Tensor::scalar(0.0));
        let ps = g.leaf(Tensor::scalar(1.0));
        let q = crate::dists::GaussianVar { mean: qm, std: qs };
        let p = crate::dists::GaussianVar { mean: pm, std: ps };
        let (loss, kl) = balanced_kl_free_nats(&mut g, &q, &p, alpha, 1.0).unwrap();
        let grads = g.backward(loss).unwrap();
        let gq = grads.wrt(qm).map_or(0.0, |t| t.data()[0]);
        let gp = grads.wrt(pm).map_or(0.0, |t| t.data()[0]);
        (g.scalar(loss), kl, gq, gp)
    };
    let (v, kl, _, _) = run(0.4, 0.8);
    assert!((kl - 0.4).abs() < 1e-12 && v == 0.0);
    let (v, _, gq, gp) = run(1.5, 0.8);
    assert!((v - 0.5).abs() < 1e-12);
    assert!(gq != 0.0 && gp != 0.0);
    let (_, _, gq, gp) = run(1.5, 1.0);
    assert_eq!(gq, 0.0);
    assert!(gp != 0.0);
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let d = crate::dists::GaussianVar { mean: x, std: x };
    assert!(matches!(
        balanced_kl_free_nats(&mut g, &d, &d, 1.5, 1.0),
        Err(Error::Domain(_))
    ));
}

#[test]
fn zero_model_elbo_is_sum_of_unit_log_densities() {
    let mut m = model(RECON, 0);
    m.params.zero_all();
    let data = SequenceBatch {
        batch: 1,
        length: 1,
        obs: vec![Tensor::zeros(&[1, 4]), Tensor::zeros(&[1, 3])],
        actions: Tensor::zeros(&[1, 2]),
        rewards: Tensor::zeros(&[1, 1]),
    };
    let mut g = Graph::new();
    let init = m.initial_state(&mut g, 1);
    let roll = m
        .posterior_rollout(&mut g, &data, &init, &mut NoiseSource::Zero)
        .unwrap();
    let cfg = ObjectiveConfig {
        free_nats: 0.0,
        ..ObjectiveConfig::default()
    };
    let out = reconstruction_elbo(&mut g, &m, &roll, &data, &cfg).unwrap();
    assert_eq!(out.report.term("kl"), Some(0.0));
    assert!((out.report.total - (-8.0 * HALF_LOG_2PI)).abs() < 1e-12);
    assert_eq!(g.scalar(out.loss), -out.report.total);
}

#[test]
fn mixed_with_all_reconstruction_is_bitwise_elbo() {
    let m = model(RECON, 1);
    let data = batch(1, 3, 4);
    let cfg = ObjectiveConfig::default();
    let mut g1 = Graph::new();
    let mut g2 = Graph::new();
    let a = evaluate(&m, &data, &cfg, &Which::Elbo, &mut g1).unwrap();
    let b = evaluate(&m, &data, &cfg, &Which::Mixed, &mut g2).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.total.to_bits(), b.report.total.to_bits());
}

#[test]
fn objective_selection_errors() {
    let cfg = ObjectiveConfig::default();
    let data = batch(2, 2, 3);
    let mut g = Graph::new();
    assert!(matches!(
        evaluate(&model(MIXED, 2), &data, &cfg, &Which::Elbo, &mut g),
        Err(Error::Config(_))
    ));
    let cpc = model(CPC, 2);
    assert!(matches!(
        evaluate(&cpc, &data, &cfg, &Which::Mixed, &mut g),
        Err(Error::Config(_))
    ));
    let short = batch(2, 2, 1);
    assert!(matches!(
        evaluate(&cpc, &short, &cfg, &Which::Cpc, &mut g),
        Err(Error::Usage(_))
    ));
}

#[test]
fn contrastive_terms_respect_their_bounds() {
    let data = batch(3, 3, 4);
    let cfg = ObjectiveConfig::default();
    let m = model(MIXED, 3);
    let out = evaluate(&m, &data, &cfg, &Which::Mixed, &mut Graph::new()).unwrap();
    assert!(out.report.term("mi_b").unwrap() <= 12f64.ln());
    let m = model(CPC, 3);
    let out = evaluate(&m, &data, &cfg, &Which::Cpc, &mut Graph::new()).unwrap();
    assert!(out.report.term("mi_b").unwrap() <= 9f64.ln());

    let mut z = model(MIXED, 4);
    z.params.zero_all();
    let out = evaluate(&z, &batch(4, 2, 2), &cfg, &Which::Mixed, &mut Graph::new()).unwrap();
    assert!(out.report.term("mi_b").unwrap().abs() < 1e-12);
}

#[test]
fn cpc_pair_count_and_beta() {
    let m = model(CPC, 5);
    let data = batch(5, 3, 2);
    let mut g = Graph::new();
    let init = m.initial_state(&mut g, 3);
    let roll = m
        .posterior_rollout(&mut g, &data, &init, &mut NoiseSource::seeded(1))
        .unwrap();
    let head = m.score_head(1).unwrap();
    let e = g.slice_rows(roll.embeds[1], 3, 6).unwrap();
    let z = g.constant(Tensor::zeros(&[3, 9]));
    let l = head.log_scores(&mut g, &m.params, e, z).unwrap();
    assert_eq!(g.value(l).shape(), &[3, 3]);

    let cfg0 = ObjectiveConfig {
        beta: 0.0,
        ..ObjectiveConfig::default()
    };
    let out = evaluate(&m, &data, &cfg0, &Which::Cpc, &mut Graph::new()).unwrap();
    let t = &out.report.terms;
    let expected = t["recon_a"] + t["mi_b"] + t["reward_loglik"] - t["inverse_dynamics"];
    assert!((out.report.total - expected).abs() < 1e-12);
    assert_eq!(t["kl_loss"], 0.0);
}

#[test]
fn inverse_dynamics_examples() {
    let mut m = model(CPC, 6);
    m.params.zero_all();
    let mut g = Graph::new();
    let f = g.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[1, 9]));
    let a = g.constant(Tensor::row(&[1.0, 1.0]));
    let l = inverse_dynamics_loss(&mut g, &m, f, f, a).unwrap();
    assert_eq!(g.scalar(l), 2.0);
    let recon = model(RECON, 6);
    assert!(matches!(
        inverse_dynamics_loss(&mut g, &recon, f, f, a),
        Err(Error::Config(_))
    ));
}

#[test]
fn composed_losses_pass_gradient_checks() {
    let cfg = ObjectiveConfig {
        free_nats: 0.0,
        ..ObjectiveConfig::default()
    };
    for (losses, which) in [
        (RECON, Which::Elbo),
        (MIXED, Which::Mixed),
        (CPC, Which::Cpc),
    ] {
        let m = model(losses, 7);
        let data = batch(7, 2, 3);
        let mut m = m;
        let f = |g: &mut Graph, mm: &Rssm| Ok(evaluate(mm, &data, &cfg, &which, g)?.loss);
        let err = check_param_gradients(&mut m, |m| &mut m.params, f, 1e-5, 3).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
