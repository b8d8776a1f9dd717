#![allow(dead_code)]

use envattack::env::{self, EnvConfig, EnvKind, EnvState};
use envattack::nn::{FeedForwardNet, OutputHead};
use envattack::ppo::{ActOutput, Action, Trajectory};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a tiny absolute floor for entries near zero.
pub fn close(analytic: f64, numeric: f64, rel: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + 1e-8
}

pub fn random_net<R: Rng>(rng: &mut R) -> (FeedForwardNet, Vec<f64>) {
    let d = rng.gen_range(1..8);
    let depth = rng.gen_range(0..3);
    let mut sizes = vec![d];
    for _ in 0..depth {
        sizes.push(rng.gen_range(2..12));
    }
    sizes.push(rng.gen_range(1..5));
    let head = [OutputHead::Value, OutputHead::Logits, OutputHead::Tanh][rng.gen_range(0..3)];
    let mut net = FeedForwardNet::new(&sizes, head, 1.0, rng).unwrap();
    for b in net.biases_mut().iter_mut().flatten() {
        *b = rng.gen_range(-0.5..0.5);
    }
    let x = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (net, x)
}

/// Central-difference Jacobian, `k x d`.
pub fn fd_jacobian(net: &FeedForwardNet, x: &[f64]) -> Vec<Vec<f64>> {
    let k = net.output_dim();
    let mut jac = vec![vec![0.0; x.len()]; k];
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += FD_STEP;
        xm[i] -= FD_STEP;
        let (fp, fm) = (net.forward(&xp).unwrap(), net.forward(&xm).unwrap());
        for j in 0..k {
            jac[j][i] = (fp[j] - fm[j]) / (2.0 * FD_STEP);
        }
    }
    jac
}

/// Central-difference gradient of `upstream . f(x)` over the flat parameters.
pub fn fd_param_gradient(net: &FeedForwardNet, x: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = net.num_params();
    let objective = |net: &FeedForwardNet| -> f64 {
        net.forward(x).unwrap().iter().zip(upstream).map(|(a, b)| a * b).sum()
    };
    (0..n)
        .map(|i| {
            let mut plus = net.clone();
            *plus.params_flat_mut()[i] += FD_STEP;
            let mut minus = net.clone();
            *minus.params_flat_mut()[i] -= FD_STEP;
            (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Checks one random net; returns the number of mismatching entries.
pub fn gradient_mismatches<R: Rng>(rng: &mut R) -> usize {
    let (net, x) = random_net(rng);
    let mut bad = 0;
    let jac = net.input_jacobian(&x).unwrap();
    let fd = fd_jacobian(&net, &x);
    for (ra, rn) in jac.iter().zip(&fd) {
        bad += ra.iter().zip(rn).filter(|(a, n)| !close(**a, **n, 1e-4)).count();
    }
    let upstream: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = net.param_gradient(&x, &upstream).unwrap().flat();
    let fd = fd_param_gradient(&net, &x, &upstream);
    bad += g.iter().zip(&fd).filter(|(a, n)| !close(**a, **n, 1e-4)).count();
    bad
}

/// Random trajectory with episode boundaries.
pub fn random_trajectory<R: Rng>(rng: &mut R, len: usize) -> Trajectory {
    let mut t = Trajectory::default();
    for _ in 0..len {
        let out = ActOutput { action: Action::Discrete(0), log_prob: 0.0, value: rng.gen_range(-2.0..2.0) };
        t.push(vec![0.0], out, rng.gen_range(-1.0..1.0), rng.gen_bool(0.15));
    }
    t.bootstrap_value = rng.gen_range(-2.0..2.0);
    t
}

/// Quadratic double sum: `A_t = sum_l (gamma lambda)^l delta_{t+l}`, cut at
/// the first episode end, with `V(s_T)` the bootstrap value.
pub fn gae_double_sum(t: &Trajectory, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = t.len();
    let value_next = |i: usize| -> f64 {
        if t.dones[i] {
            0.0
        } else if i + 1 < n {
            t.values[i + 1]
        } else {
            t.bootstrap_value
        }
    };
    (0..n)
        .map(|start| {
            let mut a = 0.0;
            for i in start..n {
                let delta = t.rewards[i] + gamma * value_next(i) - t.values[i];
                a += (gamma * lambda).powi((i - start) as i32) * delta;
                if t.dones[i] {
                    break;
                }
            }
            a
        })
        .collect()
}

/// A state reached by a random walk from reset.
pub fn random_state<R: Rng>(rng: &mut R, kind: EnvKind) -> EnvState {
    let cfg = match kind {
        EnvKind::Highway => EnvConfig::highway(rng.gen_range(1.0..2.0), rng.gen()),
        EnvKind::Flappy => EnvConfig::flappy(rng.gen_range(100.0..150.0), rng.gen()),
    };
    loop {
        let (mut s, _) = env::reset(&cfg.with_seed(rng.gen())).unwrap();
        let walk = rng.gen_range(0..30);
        let mut ok = true;
        for _ in 0..walk {
            // flappy: flap often enough to stay airborne
            let a = match kind {
                EnvKind::Flappy => usize::from(rng.gen_bool(0.3)),
                EnvKind::Highway => rng.gen_range(0..kind.num_actions()),
            };
            let (next, r) = s.step(a).unwrap();
            if r.done {
                ok = false;
                break;
            }
            s = next;
        }
        if ok {
            return s;
        }
    }
}

/// Largest masked-feature error of `X(M(s, x'))` against `x'`.
pub fn roundtrip_error(s: &EnvState, x_adv: &[f64]) -> f64 {
    let mask = s.kind().feature_mask();
    let back = s.apply_modifier(x_adv, &mask).unwrap().observe();
    mask.active_indices().into_iter().map(|i| (back[i] - x_adv[i]).abs()).fold(0.0, f64::max)
}

/// Ego and bird fields are untouched by the modifier.
pub fn protected_fields_equal(a: &EnvState, b: &EnvState) -> bool {
    match (a, b) {
        (EnvState::Highway(a), EnvState::Highway(b)) => {
            a.ego == b.ego && a.elapsed_steps == b.elapsed_steps && a.exo_vehicles.len() == b.exo_vehicles.len()
        }
        (EnvState::Flappy(a), EnvState::Flappy(b)) => {
            a.bird == b.bird
                && a.elapsed_steps == b.elapsed_steps
                && a.obstacles.iter().zip(&b.obstacles).all(|(p, q)| p.horizontal_pos == q.horizontal_pos)
        }
        _ => false,
    }
}

/// A target observation whose masked features describe a valid state.
pub fn flappy_valid_candidate<R: Rng>(rng: &mut R, s: &EnvState) -> Vec<f64> {
    let EnvState::Flappy(f) = s else { panic!("flappy state expected") };
    let half = envattack::env::flappy::SCREEN_HEIGHT / 2.0;
    let lo = (f.gap_size / 2.0 - half) / half;
    let hi = (envattack::env::flappy::SCREEN_HEIGHT - f.gap_size / 2.0 - half) / half;
    let mut x = s.observe().0;
    for i in s.kind().feature_mask().active_indices() {
        // sentinel slots have no obstacle to move
        if x[i - 1] < 1.0 {
            x[i] = rng.gen_range(lo..=hi);
        }
    }
    x
}

/// Moves occupied neighbor slots by small random amounts and keeps the
/// candidate only if it describes a valid state with the same neighbors.
pub fn highway_valid_candidate<R: Rng>(rng: &mut R, s: &EnvState) -> Option<Vec<f64>> {
    use envattack::env::highway::{MIN_GAP, REL_VELOCITY_RANGE, SENSING_RANGE, V_MAX, V_MIN};
    let EnvState::Highway(h) = s else { panic!("highway state expected") };
    let x = s.observe().0;
    let mut cand = x.clone();
    let mut pos: Vec<f64> = h.exo_vehicles.iter().map(|v| v.longitudinal_pos).collect();
    let mut slot_vehicle = [None; 6];
    for k in 0..6 {
        let (fp, fv) = (2 + 2 * k, 3 + 2 * k);
        let front = k % 2 == 0;
        let lane = h.ego.lane_index as isize + [-1, -1, 0, 0, 1, 1][k];
        // locate the slot's vehicle by its observed relative position
        let found = h.exo_vehicles.iter().position(|v| {
            v.lane_index as isize == lane
                && ((v.longitudinal_pos - h.ego.longitudinal_pos) / SENSING_RANGE - x[fp]).abs() < 1e-12
                && ((v.velocity - h.ego.velocity) / REL_VELOCITY_RANGE - x[fv]).abs() < 1e-12
        });
        let Some(i) = found else { continue };
        slot_vehicle[k] = Some(i);
        let np = x[fp] + rng.gen_range(-0.03..0.03);
        let nv = x[fv] + rng.gen_range(-0.05..0.05);
        if !(np.abs() < 1.0 && nv.abs() < 1.0) || (front && np < 0.0) || (!front && np >= 0.0) {
            return None;
        }
        let v_abs = h.ego.velocity + nv * REL_VELOCITY_RANGE;
        if !(V_MIN..=V_MAX).contains(&v_abs) {
            return None;
        }
        cand[fp] = np;
        cand[fv] = nv;
        pos[i] = h.ego.longitudinal_pos + np * SENSING_RANGE;
    }
    // gaps between every same-lane pair and to the ego
    for (i, v) in h.exo_vehicles.iter().enumerate() {
        if v.lane_index == h.ego.lane_index && (pos[i] - h.ego.longitudinal_pos).abs() < MIN_GAP + 0.1 {
            return None;
        }
        for (j, w) in h.exo_vehicles.iter().enumerate().skip(i + 1) {
            if v.lane_index == w.lane_index && (pos[i] - pos[j]).abs() < MIN_GAP + 0.1 {
                return None;
            }
        }
    }
    // every moved vehicle is still the nearest one on its side of its lane
    for (k, sv) in slot_vehicle.iter().enumerate() {
        let Some(i) = *sv else { continue };
        let front = k % 2 == 0;
        let rel = |j: usize| pos[j] - h.ego.longitudinal_pos;
        let lane = h.exo_vehicles[i].lane_index;
        let closer = h.exo_vehicles.iter().enumerate().any(|(j, w)| {
            j != i && w.lane_index == lane && (rel(j) >= 0.0) == front && rel(j).abs() <= rel(i).abs() + 1e-9
        });
        if closer {
            return None;
        }
    }
    Some(cand)
}

/// A state with deliberately broken invariants.
pub fn random_invalid_state<R: Rng>(rng: &mut R, kind: EnvKind) -> EnvState {
    let mut s = random_state(rng, kind);
    match &mut s {
        EnvState::Highway(h) => {
            let ego_pos = h.ego.longitudinal_pos;
            for v in &mut h.exo_vehicles {
                v.velocity = rng.gen_range(-20.0..80.0);
                if rng.gen_bool(0.5) {
                    v.longitudinal_pos = ego_pos + rng.gen_range(-15.0..15.0);
                    v.lane_index = h.ego.lane_index;
                }
            }
        }
        EnvState::Flappy(f) => {
            for o in &mut f.obstacles {
                o.gap_center = rng.gen_range(-300.0..800.0);
            }
        }
    }
    s
}
