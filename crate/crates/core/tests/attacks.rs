use fixlab::attacks::{
    bpda_pgd, fgsm, pgd, run_attack, Algorithm, AttackConfig, AttackModel, Criterion, Metric,
};
use fixlab::zoo::{BackboneSpec, Family, ModelSpec, Network};
use fixlab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net(family: Family) -> Network<f32> {
    Network::build(&ModelSpec::new(family, 32, 10, BackboneSpec::desk(4, 32)), 11).unwrap()
}

fn image(seed: u64) -> Tensor<f32> {
    let mut s = seed;
    Tensor::from_fn(&[1, 3, 32, 32], |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 40) as f32 / (1u64 << 24) as f32
    })
}

fn top1(m: &Network<f32>, x: &Tensor<f32>) -> usize {
    let l = m.logits(x).unwrap();
    fixlab::train::argmax(l.data())
}

#[test]
fn bpda_on_standard_family_equals_pgd() {
    let m = net(Family::Standard);
    let x = image(1);
    let label = top1(&m, &x);
    let cfg = AttackConfig { criterion: Criterion::Misclassify(3), ..AttackConfig::pgd_linf(0.01) };
    let a = pgd(&m, &x, label, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = bpda_pgd(&m, &x, label, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn every_family_stays_in_the_ball() {
    for family in [Family::Standard, Family::Coarse, Family::Retinal, Family::Cortical] {
        let m = net(family);
        let x = image(family as u64 + 5);
        let label = top1(&m, &x);
        for (metric, eps) in [(Metric::Linf, 0.02), (Metric::L2, 0.5), (Metric::L1, 5.0)] {
            for algorithm in [Algorithm::Pgd, Algorithm::PgdAdam, Algorithm::BpdaPgd] {
                let cfg = AttackConfig { algorithm, metric, ..AttackConfig::pgd_linf(eps) };
                let r = run_attack(&m, None, &x, label, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
                assert!(r.distances.get(metric) <= eps + 1e-6, "{family} {metric} {algorithm}");
                if let Some(adv) = &r.adversarial {
                    assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
                    let l = m.logits(adv).unwrap();
                    assert!(fixlab::attacks::is_adversarial(l.data(), label, cfg.criterion));
                }
            }
        }
    }
}

#[test]
fn eot_and_fgsm_are_deterministic() {
    let m = net(Family::Retinal);
    let x = image(9);
    let label = top1(&m, &x);
    let cfg = AttackConfig { eot_samples: 5, iterations: 2, ..AttackConfig::pgd_linf(0.01) };
    let a = pgd(&m, &x, label, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = pgd(&m, &x, label, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    let f = AttackConfig::fgsm(0.01, Criterion::Misclassify(1));
    let mut p = AttackConfig::pgd_linf(0.01);
    p.iterations = 1;
    p.step_const = -1.0;
    assert_eq!(
        fgsm(&m, &x, label, &f, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
        pgd(&m, &x, label, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    );
}

#[test]
fn large_budget_breaks_an_untrained_model() {
    let m = net(Family::Cortical);
    let x = image(3);
    let label = top1(&m, &x);
    let r = pgd(&m, &x, label, &AttackConfig::pgd_linf(0.5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(r.success);
}
