//! Side-scrolling flappy-bird clone.
//!
//! Coordinates are pixels with altitude measured upward from the ground.
//! The bird sits at a fixed horizontal position; obstacle columns scroll
//! left at constant speed and are recycled to the right once passed.
//!
//! Observation layout (6 features):
//!
//! | idx | feature                                   | attackable |
//! |-----|-------------------------------------------|------------|
//! | 0   | bird altitude                             | no         |
//! | 1   | bird vertical velocity                    | no         |
//! | 2   | 1st obstacle ahead, relative horizontal   | no         |
//! | 3   | 1st obstacle ahead, gap center            | yes        |
//! | 4   | 2nd obstacle ahead, relative horizontal   | no         |
//! | 5   | 2nd obstacle ahead, gap center            | yes        |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvConfig, FeatureMask, Observation, StepInfo, StepResult, TerminalCause};
use crate::{Error, Result};

pub const NUM_ACTIONS: usize = 2;
pub const OBS_DIM: usize = 6;

pub const SCREEN_HEIGHT: f64 = 512.0;
pub const BIRD_X: f64 = 60.0;
pub const BIRD_HALF_SIZE: f64 = 12.0;
pub const OBSTACLE_WIDTH: f64 = 52.0;
pub const OBSTACLE_SPACING: f64 = 200.0;
pub const SCROLL_SPEED: f64 = 4.0;
pub const GRAVITY: f64 = 1.0;
pub const FLAP_VELOCITY: f64 = 9.0;
pub const MAX_FALL_SPEED: f64 = 10.0;
/// Normalization range of relative horizontal positions.
pub const LOOK_AHEAD: f64 = 300.0;
/// Normalization range of the vertical velocity.
pub const VELOCITY_SCALE: f64 = 10.0;
/// Newly spawned gap centers keep this distance from the gap bounds.
pub const SPAWN_MARGIN: f64 = 60.0;
const NUM_OBSTACLES: usize = 4;
const FIRST_OBSTACLE_X: f64 = 260.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bird {
    pub altitude: f64,
    pub vertical_velocity: f64,
}

/// `horizontal_pos` is the left edge of the column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub horizontal_pos: f64,
    pub gap_center: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlappyState {
    pub bird: Bird,
    pub obstacles: Vec<Obstacle>,
    pub gap_size: f64,
    pub elapsed_steps: usize,
    pub time_limit: usize,
    pub rng: ChaCha8Rng,
}

pub fn feature_mask() -> FeatureMask {
    FeatureMask(vec![false, false, false, true, false, true])
}

fn normalize_height(y: f64) -> f64 {
    let half = SCREEN_HEIGHT / 2.0;
    ((y - half) / half).clamp(-1.0, 1.0)
}

fn denormalize_height(f: f64) -> f64 {
    let half = SCREEN_HEIGHT / 2.0;
    half + f * half
}

impl FlappyState {
    pub fn reset(cfg: &EnvConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gap_size = cfg.difficulty;
        let obstacles = (0..NUM_OBSTACLES)
            .map(|i| Obstacle {
                horizontal_pos: FIRST_OBSTACLE_X + i as f64 * OBSTACLE_SPACING,
                gap_center: spawn_gap_center(gap_size, &mut rng),
            })
            .collect();
        Self {
            bird: Bird {
                altitude: SCREEN_HEIGHT / 2.0,
                vertical_velocity: 0.0,
            },
            obstacles,
            gap_size,
            elapsed_steps: 0,
            time_limit: cfg.time_limit,
            rng,
        }
    }

    /// Action 0 lets gravity act, action 1 flaps.
    pub fn step(&self, action: usize) -> Result<(Self, StepResult)> {
        if action >= NUM_ACTIONS {
            return Err(Error::Input(format!("flappy action {action} out of range")));
        }
        let mut s = self.clone();
        let bird = &mut s.bird;
        bird.vertical_velocity = if action == 1 {
            FLAP_VELOCITY
        } else {
            (bird.vertical_velocity - GRAVITY).max(-MAX_FALL_SPEED)
        };
        bird.altitude += bird.vertical_velocity;
        let ceiling = SCREEN_HEIGHT - BIRD_HALF_SIZE;
        if bird.altitude > ceiling {
            bird.altitude = ceiling;
            bird.vertical_velocity = bird.vertical_velocity.min(0.0);
        }

        for o in &mut s.obstacles {
            o.horizontal_pos -= SCROLL_SPEED;
        }
        while s.obstacles[0].horizontal_pos + OBSTACLE_WIDTH < 0.0 {
            s.obstacles.remove(0);
            let last = s.obstacles.last().map(|o| o.horizontal_pos).unwrap_or(FIRST_OBSTACLE_X);
            let gap_center = spawn_gap_center(s.gap_size, &mut s.rng);
            s.obstacles.push(Obstacle {
                horizontal_pos: last + OBSTACLE_SPACING,
                gap_center,
            });
        }
        s.elapsed_steps += 1;

        let terminal = if s.bird.altitude - BIRD_HALF_SIZE <= 0.0 {
            Some(TerminalCause::Ground)
        } else if s.collides() {
            Some(TerminalCause::Collision)
        } else if s.elapsed_steps >= s.time_limit {
            Some(TerminalCause::TimeLimit)
        } else {
            None
        };
        let crashed = matches!(terminal, Some(TerminalCause::Ground | TerminalCause::Collision));
        let result = StepResult {
            observation: s.observe(),
            reward: if crashed { 0.0 } else { 1.0 },
            done: terminal.is_some(),
            info: StepInfo {
                distance_traveled: 0.0,
                survived_steps: s.elapsed_steps,
                terminal,
            },
        };
        Ok((s, result))
    }

    /// Bird box overlaps a column outside its gap.
    pub fn collides(&self) -> bool {
        let (left, right) = (BIRD_X - BIRD_HALF_SIZE, BIRD_X + BIRD_HALF_SIZE);
        let (bottom, top) = (
            self.bird.altitude - BIRD_HALF_SIZE,
            self.bird.altitude + BIRD_HALF_SIZE,
        );
        self.obstacles.iter().any(|o| {
            let overlaps_column = right > o.horizontal_pos && left < o.horizontal_pos + OBSTACLE_WIDTH;
            let half_gap = self.gap_size / 2.0;
            let outside_gap = bottom < o.gap_center - half_gap || top > o.gap_center + half_gap;
            overlaps_column && outside_gap
        })
    }

    /// Indices of the two nearest obstacles not yet fully passed.
    fn ahead(&self) -> impl Iterator<Item = usize> + '_ {
        self.obstacles
            .iter()
            .enumerate()
            .filter(|(_, o)| o.horizontal_pos + OBSTACLE_WIDTH > BIRD_X - BIRD_HALF_SIZE)
            .map(|(i, _)| i)
            .take(2)
    }

    pub fn observe(&self) -> Observation {
        let mut x = vec![
            normalize_height(self.bird.altitude),
            (self.bird.vertical_velocity / VELOCITY_SCALE).clamp(-1.0, 1.0),
            1.0,
            0.0,
            1.0,
            0.0,
        ];
        for (slot, i) in self.ahead().enumerate() {
            let o = &self.obstacles[i];
            x[2 + 2 * slot] = ((o.horizontal_pos - BIRD_X) / LOOK_AHEAD).clamp(-1.0, 1.0);
            x[3 + 2 * slot] = normalize_height(o.gap_center);
        }
        Observation(x)
    }

    pub fn apply_modifier(&self, x_adv: &[f64], mask: &FeatureMask) -> Self {
        let mut s = self.clone();
        let slots: Vec<usize> = self.ahead().collect();
        for (slot, i) in slots.into_iter().enumerate() {
            let f = 3 + 2 * slot;
            if mask.get(f) {
                s.obstacles[i].gap_center = denormalize_height(x_adv[f]);
            }
        }
        s.project_to_valid()
    }

    /// Clamps every gap fully inside the screen.
    pub fn project_to_valid(&self) -> Self {
        let mut s = self.clone();
        let half_gap = s.gap_size / 2.0;
        for o in &mut s.obstacles {
            o.gap_center = o.gap_center.clamp(half_gap, SCREEN_HEIGHT - half_gap);
        }
        s
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let half_gap = self.gap_size / 2.0;
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.gap_center >= half_gap && o.gap_center <= SCREEN_HEIGHT - half_gap) {
                return Err(format!("obstacle {i} gap center {} outside screen", o.gap_center));
            }
        }
        for w in self.obstacles.windows(2) {
            if w[1].horizontal_pos - w[0].horizontal_pos != OBSTACLE_SPACING {
                return Err("obstacles not evenly spaced".into());
            }
        }
        if !self.bird.altitude.is_finite() || !self.bird.vertical_velocity.is_finite() {
            return Err("non-finite bird state".into());
        }
        Ok(())
    }
}

fn spawn_gap_center(gap_size: f64, rng: &mut ChaCha8Rng) -> f64 {
    let lo = gap_size / 2.0 + SPAWN_MARGIN;
    let hi = SCREEN_HEIGHT - gap_size / 2.0 - SPAWN_MARGIN;
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        SCREEN_HEIGHT / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(seed: u64) -> FlappyState {
        FlappyState::reset(&EnvConfig::flappy(150.0, seed))
    }

    #[test]
    fn reset_is_deterministic() {
        assert_eq!(fresh(7), fresh(7));
        assert_ne!(fresh(7).obstacles, fresh(8).obstacles);
    }

    #[test]
    fn non_terminal_reward_is_one() {
        let mut s = fresh(1);
        for t in 0..30 {
            let (next, r) = s.step(t % 2).unwrap();
            if !r.done {
                assert_eq!(r.reward, 1.0);
            }
            s = next;
        }
    }

    #[test]
    fn invalid_action() {
        assert!(matches!(fresh(1).step(2), Err(Error::Input(_))));
    }

    #[test]
    fn flap_and_gravity() {
        let s = fresh(1);
        let (s1, _) = s.step(1).unwrap();
        assert_eq!(s1.bird.vertical_velocity, FLAP_VELOCITY);
        assert_eq!(s1.bird.altitude, SCREEN_HEIGHT / 2.0 + FLAP_VELOCITY);
        let (s2, _) = s1.step(0).unwrap();
        assert_eq!(s2.bird.vertical_velocity, FLAP_VELOCITY - GRAVITY);
    }

    #[test]
    fn one_pixel_overlap_is_collision() {
        let mut s = fresh(2);
        // column right under the bird; bird top one pixel above the gap top
        s.obstacles[0].horizontal_pos = BIRD_X - OBSTACLE_WIDTH / 2.0 + SCROLL_SPEED;
        s.obstacles[0].gap_center = 200.0;
        let top_of_gap = 200.0 + s.gap_size / 2.0;
        s.bird.altitude = top_of_gap - BIRD_HALF_SIZE + 1.0 + GRAVITY;
        s.bird.vertical_velocity = 0.0;
        let (next, r) = s.step(0).unwrap();
        assert_eq!(next.bird.altitude + BIRD_HALF_SIZE, top_of_gap + 1.0 - 0.0);
        assert!(r.done);
        assert_eq!(r.info.terminal, Some(TerminalCause::Collision));
        assert_eq!(r.reward, 0.0);

        // exactly on the boundary is still inside the gap
        let mut s = s.clone();
        s.bird.altitude = top_of_gap - BIRD_HALF_SIZE + GRAVITY;
        let (_, r) = s.step(0).unwrap();
        assert!(!r.done);
    }

    #[test]
    fn ground_ends_episode() {
        let mut s = fresh(3);
        let mut result = None;
        for _ in 0..200 {
            let (next, r) = s.step(0).unwrap();
            s = next;
            if r.done {
                result = Some(r);
                break;
            }
        }
        let r = result.expect("falling bird must hit something");
        assert!(matches!(r.info.terminal, Some(TerminalCause::Ground | TerminalCause::Collision)));
    }

    #[test]
    fn time_limit() {
        let cfg = EnvConfig { time_limit: 3, ..EnvConfig::flappy(150.0, 1) };
        let mut s = FlappyState::reset(&cfg);
        let mut last = None;
        for _ in 0..3 {
            let (n, r) = s.step(usize::from(s.bird.altitude < 256.0)).unwrap();
            s = n;
            last = Some(r);
        }
        let r = last.unwrap();
        assert!(r.done);
        assert_eq!(r.info.terminal, Some(TerminalCause::TimeLimit));
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn mid_height_zero_velocity_observation() {
        let x = fresh(4).observe();
        assert_eq!(&x[..2], &[0.0, 0.0]);
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn modifier_clamps_gap_into_screen() {
        let s = fresh(5);
        let mut x = s.observe().0;
        x[3] = -1.0;
        let m = s.apply_modifier(&x, &feature_mask());
        assert_eq!(m.obstacles[0].gap_center, s.gap_size / 2.0);
        assert!(m.check_invariants().is_ok());
    }

    #[test]
    fn modifier_fixed_point() {
        let s = fresh(6);
        let m = s.apply_modifier(&s.observe(), &feature_mask());
        for (a, b) in m.obstacles.iter().zip(&s.obstacles) {
            assert!((a.gap_center - b.gap_center).abs() < 1e-12);
        }
        assert_eq!(m.bird, s.bird);
    }

    #[test]
    fn obstacles_recycle_evenly() {
        let mut s = fresh(8);
        for t in 0..400 {
            let action = usize::from(s.bird.altitude < s.obstacles[0].gap_center || t % 7 == 0);
            let (n, r) = s.step(action).unwrap();
            assert!(n.check_invariants().is_ok());
            s = n;
            if r.done {
                break;
            }
        }
        assert_eq!(s.obstacles.len(), NUM_OBSTACLES);
    }
}
