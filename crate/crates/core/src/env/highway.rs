//! Four-lane, one-way highway with an ego vehicle and cruise-control traffic.
//!
//! One agent step lasts [`STEP_SECONDS`] and is integrated in
//! [`SUBSTEPS`] sub-steps so collisions cannot tunnel. Exo-vehicles keep
//! their lane, hold a cruise speed and brake when the front gap is shorter
//! than [`SAFE_GAP`]. Vehicles leaving the simulated window around the ego
//! are respawned at the other end, which keeps the traffic density
//! constant on an endless road.
//!
//! Observation layout (14 features): ego lane offset, ego velocity, then
//! `(relative position, relative velocity)` for the closest vehicle in
//! front and behind in the left, same and right lane, in that order.
//! Absent neighbors read as maximally far (`+1` in front, `-1` behind) with
//! zero relative velocity. Only the 12 neighbor features are attackable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvConfig, FeatureMask, Observation, StepInfo, StepResult, TerminalCause};
use crate::{Error, Result};

pub const NUM_ACTIONS: usize = 5;
pub const OBS_DIM: usize = 14;

pub const NUM_LANES: usize = 4;
pub const LANE_WIDTH: f64 = 4.0;
pub const ROAD_WIDTH: f64 = LANE_WIDTH * NUM_LANES as f64;
pub const V_MIN: f64 = 10.0;
pub const V_MAX: f64 = 40.0;
/// Minimum center-to-center distance between two vehicles of one lane.
pub const MIN_GAP: f64 = 10.0;
pub const VEHICLE_LENGTH: f64 = 5.0;
/// Velocity change of the accelerate / decelerate actions.
pub const SPEED_STEP: f64 = 5.0;
/// Exo-vehicles brake below this front gap.
pub const SAFE_GAP: f64 = 30.0;
pub const EXO_BRAKE: f64 = 6.0;
pub const EXO_ACCEL: f64 = 2.0;
pub const CRUISE_MIN: f64 = 18.0;
pub const CRUISE_MAX: f64 = 28.0;
/// Relative positions are normalized by this sensing range.
pub const SENSING_RANGE: f64 = 100.0;
/// Relative velocities are normalized by this range (`V_MAX - V_MIN`).
pub const REL_VELOCITY_RANGE: f64 = V_MAX - V_MIN;
pub const STEP_SECONDS: f64 = 1.0;
pub const SUBSTEPS: usize = 10;
/// Exo-vehicles at density 1.0.
pub const BASE_VEHICLES: usize = 12;
/// Simulated window around the ego, meters.
pub const WINDOW_BEHIND: f64 = 150.0;
pub const WINDOW_AHEAD: f64 = 250.0;
pub const EGO_START_VELOCITY: f64 = 25.0;
/// Ego-lane span kept free at reset, relative to the ego.
const START_CLEARANCE: (f64, f64) = (-20.0, 40.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ego {
    /// Transverse position across the road, meters from the left edge.
    pub lane_offset: f64,
    pub lane_index: usize,
    pub longitudinal_pos: f64,
    pub velocity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExoVehicle {
    pub lane_index: usize,
    pub longitudinal_pos: f64,
    pub velocity: f64,
    pub cruise_velocity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighwayState {
    pub ego: Ego,
    pub exo_vehicles: Vec<ExoVehicle>,
    pub elapsed_steps: usize,
    pub time_limit: usize,
    pub rng: ChaCha8Rng,
}

pub fn feature_mask() -> FeatureMask {
    let mut m = vec![true; OBS_DIM];
    m[0] = false;
    m[1] = false;
    FeatureMask(m)
}

pub fn lane_center(lane: usize) -> f64 {
    (lane as f64 + 0.5) * LANE_WIDTH
}

/// Number of exo-vehicles spawned for a traffic density.
pub fn vehicle_count(traffic_density: f64) -> usize {
    (BASE_VEHICLES as f64 * traffic_density).round() as usize
}

/// Neighbor slots in observation order: (lane delta, in front).
const SLOTS: [(isize, bool); 6] = [
    (-1, true),
    (-1, false),
    (0, true),
    (0, false),
    (1, true),
    (1, false),
];

impl HighwayState {
    pub fn reset(cfg: &EnvConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lane = rng.gen_range(0..NUM_LANES);
        let ego = Ego {
            lane_offset: lane_center(lane),
            lane_index: lane,
            longitudinal_pos: 0.0,
            velocity: EGO_START_VELOCITY,
        };
        let mut s = Self {
            ego,
            exo_vehicles: Vec::new(),
            elapsed_steps: 0,
            time_limit: cfg.time_limit,
            rng,
        };
        let n = vehicle_count(cfg.difficulty);
        for _ in 0..n {
            let placed = (0..10_000).find_map(|_| {
                let lane = s.rng.gen_range(0..NUM_LANES);
                let pos = s.rng.gen_range(-WINDOW_BEHIND..WINDOW_AHEAD);
                let free = s.spot_is_free(lane, pos)
                    && !(lane == s.ego.lane_index
                        && pos > START_CLEARANCE.0
                        && pos < START_CLEARANCE.1);
                free.then_some((lane, pos))
            });
            let (lane, pos) = placed.ok_or_else(|| {
                Error::Config(format!("traffic density {} does not fit the road", cfg.difficulty))
            })?;
            let cruise = s.rng.gen_range(CRUISE_MIN..CRUISE_MAX);
            s.exo_vehicles.push(ExoVehicle {
                lane_index: lane,
                longitudinal_pos: pos,
                velocity: cruise,
                cruise_velocity: cruise,
            });
        }
        Ok(s)
    }

    fn spot_is_free(&self, lane: usize, pos: f64) -> bool {
        let ego_clear = lane != self.ego.lane_index
            || (pos - self.ego.longitudinal_pos).abs() >= MIN_GAP;
        ego_clear
            && self
                .exo_vehicles
                .iter()
                .all(|v| v.lane_index != lane || (v.longitudinal_pos - pos).abs() >= MIN_GAP)
    }

    pub fn distance_traveled(&self) -> f64 {
        self.ego.longitudinal_pos
    }

    /// Actions: 0 left, 1 idle, 2 right, 3 accelerate, 4 decelerate.
    pub fn step(&self, action: usize) -> Result<(Self, StepResult)> {
        if action >= NUM_ACTIONS {
            return Err(Error::Input(format!("highway action {action} out of range")));
        }
        let mut s = self.clone();
        match action {
            0 => s.ego.lane_index = s.ego.lane_index.saturating_sub(1),
            2 => s.ego.lane_index = (s.ego.lane_index + 1).min(NUM_LANES - 1),
            3 => s.ego.velocity = (s.ego.velocity + SPEED_STEP).min(V_MAX),
            4 => s.ego.velocity = (s.ego.velocity - SPEED_STEP).max(V_MIN),
            _ => {}
        }
        s.ego.lane_offset = lane_center(s.ego.lane_index);

        let mut collided = s.ego_collides();
        let dt = STEP_SECONDS / SUBSTEPS as f64;
        for _ in 0..SUBSTEPS {
            if collided {
                break;
            }
            s.advance(dt);
            collided = s.ego_collides();
        }
        s.elapsed_steps += 1;
        if !collided {
            s.recycle();
        }
        let s = s.project_to_valid();

        let terminal = if collided {
            Some(TerminalCause::Collision)
        } else if s.elapsed_steps >= s.time_limit {
            Some(TerminalCause::TimeLimit)
        } else {
            None
        };
        let result = StepResult {
            observation: s.observe(),
            reward: if collided { 0.0 } else { s.ego.velocity / V_MAX },
            done: terminal.is_some(),
            info: StepInfo {
                distance_traveled: s.distance_traveled(),
                survived_steps: s.elapsed_steps,
                terminal,
            },
        };
        Ok((s, result))
    }

    fn ego_collides(&self) -> bool {
        self.exo_vehicles.iter().any(|v| {
            v.lane_index == self.ego.lane_index
                && (v.longitudinal_pos - self.ego.longitudinal_pos).abs() < VEHICLE_LENGTH
        })
    }

    fn advance(&mut self, dt: f64) {
        let n = self.exo_vehicles.len();
        let mut new_velocity = Vec::with_capacity(n);
        for i in 0..n {
            let v = &self.exo_vehicles[i];
            let front_gap = self.front_gap(v.lane_index, v.longitudinal_pos, Some(i));
            let vel = if front_gap < SAFE_GAP {
                (v.velocity - EXO_BRAKE * dt).max(V_MIN)
            } else if v.velocity < v.cruise_velocity {
                (v.velocity + EXO_ACCEL * dt).min(v.cruise_velocity)
            } else {
                (v.velocity - EXO_ACCEL * dt).max(v.cruise_velocity)
            };
            new_velocity.push(vel);
        }
        for (v, vel) in self.exo_vehicles.iter_mut().zip(new_velocity) {
            v.velocity = vel;
            v.longitudinal_pos += vel * dt;
        }
        self.ego.longitudinal_pos += self.ego.velocity * dt;
    }

    /// Distance to the closest vehicle strictly ahead in `lane`, ego included.
    fn front_gap(&self, lane: usize, pos: f64, skip: Option<usize>) -> f64 {
        let mut gap = f64::INFINITY;
        if self.ego.lane_index == lane && self.ego.longitudinal_pos > pos {
            gap = self.ego.longitudinal_pos - pos;
        }
        for (j, o) in self.exo_vehicles.iter().enumerate() {
            if Some(j) != skip && o.lane_index == lane && o.longitudinal_pos > pos {
                gap = gap.min(o.longitudinal_pos - pos);
            }
        }
        gap
    }

    fn recycle(&mut self) {
        let ego_pos = self.ego.longitudinal_pos;
        for i in 0..self.exo_vehicles.len() {
            let rel = self.exo_vehicles[i].longitudinal_pos - ego_pos;
            let range = if rel < -WINDOW_BEHIND {
                (WINDOW_AHEAD - 100.0, WINDOW_AHEAD)
            } else if rel > WINDOW_AHEAD {
                (-WINDOW_BEHIND, -WINDOW_BEHIND + 50.0)
            } else {
                continue;
            };
            // park the vehicle out of the way while searching for a free spot
            let parked = self.exo_vehicles[i];
            self.exo_vehicles[i].longitudinal_pos = f64::INFINITY;
            let spot = (0..20).find_map(|_| {
                let lane = self.rng.gen_range(0..NUM_LANES);
                let pos = ego_pos + self.rng.gen_range(range.0..range.1);
                self.spot_is_free(lane, pos).then_some((lane, pos))
            });
            match spot {
                Some((lane, pos)) => {
                    let cruise = self.rng.gen_range(CRUISE_MIN..CRUISE_MAX);
                    self.exo_vehicles[i] = ExoVehicle {
                        lane_index: lane,
                        longitudinal_pos: pos,
                        velocity: cruise,
                        cruise_velocity: cruise,
                    };
                }
                None => self.exo_vehicles[i] = parked,
            }
        }
    }

    /// Exo-vehicle index per neighbor slot, in observation order.
    fn neighbors(&self) -> [Option<usize>; 6] {
        let mut out = [None; 6];
        for (k, (delta, front)) in SLOTS.iter().enumerate() {
            let lane = self.ego.lane_index as isize + delta;
            if !(0..NUM_LANES as isize).contains(&lane) {
                continue;
            }
            let lane = lane as usize;
            let mut best: Option<(usize, f64)> = None;
            for (i, v) in self.exo_vehicles.iter().enumerate() {
                if v.lane_index != lane {
                    continue;
                }
                let rel = v.longitudinal_pos - self.ego.longitudinal_pos;
                let in_slot = if *front {
                    (0.0..=SENSING_RANGE).contains(&rel)
                } else {
                    rel < 0.0 && rel >= -SENSING_RANGE
                };
                if in_slot && best.map_or(true, |(_, d)| rel.abs() < d) {
                    best = Some((i, rel.abs()));
                }
            }
            out[k] = best.map(|(i, _)| i);
        }
        out
    }

    pub fn observe(&self) -> Observation {
        let mut x = Vec::with_capacity(OBS_DIM);
        let half_road = ROAD_WIDTH / 2.0;
        x.push(((self.ego.lane_offset - half_road) / half_road).clamp(-1.0, 1.0));
        let mid = (V_MAX + V_MIN) / 2.0;
        x.push(((self.ego.velocity - mid) / (V_MAX - mid)).clamp(-1.0, 1.0));
        for (k, slot) in self.neighbors().iter().enumerate() {
            match slot {
                Some(i) => {
                    let v = &self.exo_vehicles[*i];
                    let rel_pos = v.longitudinal_pos - self.ego.longitudinal_pos;
                    let rel_vel = v.velocity - self.ego.velocity;
                    x.push((rel_pos / SENSING_RANGE).clamp(-1.0, 1.0));
                    x.push((rel_vel / REL_VELOCITY_RANGE).clamp(-1.0, 1.0));
                }
                None => {
                    x.push(if SLOTS[k].1 { 1.0 } else { -1.0 });
                    x.push(0.0);
                }
            }
        }
        Observation(x)
    }

    /// Relative features are added to the ego's absolute position and
    /// velocity to recover the neighbor's absolute values. Empty slots
    /// cannot be realized and are ignored.
    pub fn apply_modifier(&self, x_adv: &[f64], mask: &FeatureMask) -> Self {
        let mut s = self.clone();
        for (k, slot) in self.neighbors().iter().enumerate() {
            let Some(i) = *slot else { continue };
            let (fp, fv) = (2 + 2 * k, 3 + 2 * k);
            let v = &mut s.exo_vehicles[i];
            if mask.get(fp) {
                v.longitudinal_pos = self.ego.longitudinal_pos + x_adv[fp] * SENSING_RANGE;
            }
            if mask.get(fv) {
                v.velocity = self.ego.velocity + x_adv[fv] * REL_VELOCITY_RANGE;
            }
        }
        s.project_to_valid()
    }

    /// Clamps velocities and lanes, then restores the minimum same-lane gap.
    /// The ego never moves: exo-vehicles ahead of it are pushed forward,
    /// everything else is resolved by pushing the rear vehicle back.
    pub fn project_to_valid(&self) -> Self {
        let mut s = self.clone();
        for v in &mut s.exo_vehicles {
            v.velocity = v.velocity.clamp(V_MIN, V_MAX);
            v.lane_index = v.lane_index.min(NUM_LANES - 1);
        }
        let ego_pos = s.ego.longitudinal_pos;
        for lane in 0..NUM_LANES {
            let mut idx: Vec<usize> =
                (0..s.exo_vehicles.len()).filter(|&i| s.exo_vehicles[i].lane_index == lane).collect();
            let pos = |s: &Self, i: usize| s.exo_vehicles[i].longitudinal_pos;
            idx.sort_by(|&a, &b| pos(&s, b).total_cmp(&pos(&s, a)).then(a.cmp(&b)));
            if lane == s.ego.lane_index {
                let (front, back): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| pos(&s, i) >= ego_pos);
                let mut prev = ego_pos;
                for &i in front.iter().rev() {
                    let p = &mut s.exo_vehicles[i].longitudinal_pos;
                    if *p < prev + MIN_GAP {
                        *p = prev + MIN_GAP;
                    }
                    prev = *p;
                }
                push_back_chain(&mut s, &back, Some(ego_pos));
            } else {
                push_back_chain(&mut s, &idx, None);
            }
        }
        s
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.ego.lane_index >= NUM_LANES {
            return Err("ego lane out of range".into());
        }
        if !(V_MIN..=V_MAX).contains(&self.ego.velocity) {
            return Err(format!("ego velocity {} out of range", self.ego.velocity));
        }
        let tol = 1e-9;
        for (i, v) in self.exo_vehicles.iter().enumerate() {
            if v.lane_index >= NUM_LANES {
                return Err(format!("vehicle {i} lane out of range"));
            }
            if !(V_MIN..=V_MAX).contains(&v.velocity) {
                return Err(format!("vehicle {i} velocity {} out of range", v.velocity));
            }
            if v.lane_index == self.ego.lane_index
                && (v.longitudinal_pos - self.ego.longitudinal_pos).abs() < MIN_GAP - tol
            {
                return Err(format!("vehicle {i} closer than min gap to ego"));
            }
            for (j, w) in self.exo_vehicles.iter().enumerate().skip(i + 1) {
                if v.lane_index == w.lane_index
                    && (v.longitudinal_pos - w.longitudinal_pos).abs() < MIN_GAP - tol
                {
                    return Err(format!("vehicles {i} and {j} closer than min gap"));
                }
            }
        }
        Ok(())
    }
}

/// `order` is sorted front to back; every vehicle is pushed back to keep
/// `MIN_GAP` to the one ahead (`anchor` is an immovable leader).
fn push_back_chain(s: &mut HighwayState, order: &[usize], anchor: Option<f64>) {
    let mut prev = anchor;
    for &i in order {
        let p = &mut s.exo_vehicles[i].longitudinal_pos;
        if let Some(ahead) = prev {
            if *p > ahead - MIN_GAP {
                *p = ahead - MIN_GAP;
            }
        }
        prev = Some(*p);
    }
}
