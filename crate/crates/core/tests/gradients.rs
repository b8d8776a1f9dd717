mod common;

use common::{close, gradient_mismatches, FD_STEP};
use envattack::nn::{self, OutputHead};
use envattack::ppo::{loss_and_gradient, Action, ActorCritic, Batch, PpoConfig};
use envattack::attack::{saliency_map, eacn_perturbation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn jacobian_and_param_gradient_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bad: usize = (0..100).map(|_| gradient_mismatches(&mut rng)).sum();
    assert_eq!(bad, 0);
}

#[test]
fn critic_gradient_is_jacobian_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = nn::FeedForwardNet::new(&[4, 10, 1], OutputHead::Value, 1.0, &mut rng).unwrap();
    let x = [0.1, -0.3, 0.7, 0.0];
    let fd = common::fd_jacobian(&net, &x);
    let eta = eacn_perturbation(&net, &x, 0.2, None).unwrap();
    // eta = -eps * grad / |grad|
    let g = &fd[0];
    let norm = nn::l2_norm(g);
    for (e, gi) in eta.eta.iter().zip(g) {
        assert!((e + 0.2 * gi / norm).abs() < 1e-6);
    }
}

#[test]
fn saliency_matches_finite_differences_of_logit_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let k = rng.gen_range(2..5);
        let net = nn::FeedForwardNet::new(&[5, 8, k], OutputHead::Logits, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (h, d) = saliency_map(&net, &x).unwrap();
        let jac = common::fd_jacobian(&net, &x);
        for i in 0..5 {
            let want: f64 = (0..k).map(|j| if j == d { -jac[j][i] } else { jac[j][i] }).sum();
            assert!(close(h[i], want, 1e-4), "{} vs {want}", h[i]);
        }
    }
}

fn perturbed_loss(ac: &ActorCritic, batch: &Batch, idx: &[usize], hp: &PpoConfig, param: usize, delta: f64) -> f64 {
    let mut ac = ac.clone();
    let na = ac.actor.num_params();
    let nc = ac.critic.num_params();
    if param < na {
        *ac.actor.params_flat_mut()[param] += delta;
    } else if param < na + nc {
        *ac.critic.params_flat_mut()[param - na] += delta;
    } else {
        ac.log_std[param - na - nc] += delta;
    }
    loss_and_gradient(&ac, batch, idx, hp).unwrap().0.total(hp)
}

fn check_ppo_gradient(ac: &ActorCritic, batch: &Batch, hp: &PpoConfig) -> usize {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, g) = loss_and_gradient(ac, batch, &idx, hp).unwrap();
    let analytic: Vec<f64> = g.actor.flat().into_iter().chain(g.critic.flat()).chain(g.log_std.clone()).collect();
    analytic
        .iter()
        .enumerate()
        .filter(|(p, a)| {
            let n = (perturbed_loss(ac, batch, &idx, hp, *p, FD_STEP) - perturbed_loss(ac, batch, &idx, hp, *p, -FD_STEP))
                / (2.0 * FD_STEP);
            !close(**a, n, 1e-4)
        })
        .count()
}

fn random_batch<R: Rng>(ac: &ActorCritic, n: usize, rng: &mut R) -> Batch {
    let d = ac.obs_dim();
    let mut b = Batch {
        observations: vec![],
        actions: vec![],
        old_log_probs: vec![],
        advantages: vec![],
        returns: vec![],
    };
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = ac.act(&x, rng).unwrap();
        b.old_log_probs.push(out.log_prob + rng.gen_range(-0.3..0.3));
        b.actions.push(out.action);
        b.observations.push(x);
        b.advantages.push(rng.gen_range(-2.0..2.0));
        b.returns.push(rng.gen_range(-1.0..1.0));
    }
    b
}

#[test]
fn categorical_ppo_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // a wide clip range keeps every sample on the smooth branch
    let hp = PpoConfig { clip_ratio: 10.0, ..PpoConfig::default() };
    for _ in 0..5 {
        let mut ac = ActorCritic::categorical(4, 3, &[6], &mut rng).unwrap();
        *ac.actor.weights_mut().last_mut().unwrap() = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = random_batch(&ac, 16, &mut rng);
        assert_eq!(check_ppo_gradient(&ac, &batch, &hp), 0);
    }
}

#[test]
fn gaussian_ppo_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let hp = PpoConfig { clip_ratio: 10.0, ..PpoConfig::default() };
    for _ in 0..5 {
        let ac = ActorCritic::gaussian(3, 2, &[5], -0.3, &mut rng).unwrap();
        let batch = random_batch(&ac, 16, &mut rng);
        assert!(matches!(batch.actions[0], Action::Continuous { .. }));
        assert_eq!(check_ppo_gradient(&ac, &batch, &hp), 0);
    }
}

#[test]
fn clipped_samples_contribute_no_policy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let hp = PpoConfig { entropy_coef: 0.0, ..PpoConfig::default() };
    let ac = ActorCritic::categorical(3, 2, &[4], &mut rng).unwrap();
    let mut batch = random_batch(&ac, 8, &mut rng);
    for i in 0..8 {
        // ratio = e^2, far above 1 + clip, with positive advantage
        let lp = ac.log_prob(&batch.observations[i], &batch.actions[i]).unwrap();
        batch.old_log_probs[i] = lp - 2.0;
        batch.advantages[i] = 1.0;
    }
    let idx: Vec<usize> = (0..8).collect();
    let (terms, g) = loss_and_gradient(&ac, &batch, &idx, &hp).unwrap();
    assert_eq!(terms.clip_fraction, 1.0);
    assert!(g.actor.is_zero());
}
