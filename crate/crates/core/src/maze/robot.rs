use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::MazeMap;
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const STEP_LENGTH: f64 = 0.2;
pub const STEP_JITTER: f64 = 0.02;
pub const OBS_NOISE: f64 = 0.1;
pub const NUM_RANGES: usize = 5;
const MAX_HEADING_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in `(−π, π]`.
    pub theta: f64,
}

impl Pose {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Distance travelled and heading change of one move.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub distance: f64,
    pub turn: f64,
}

/// Wrap to `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

fn uniform_heading(rng: &mut RngStream) -> f64 {
    // uniform() is in [0, 1), so this is (−π, π].
    PI - 2.0 * PI * rng.uniform()
}

fn advance(pose: &Pose, heading: f64, d: f64) -> [f64; 2] {
    [pose.x + d * heading.cos(), pose.y + d * heading.sin()]
}

/// Move forward `0.2 + U[−0.02, 0.02]`; if that segment would touch an
/// obstacle, draw uniform headings until it does not.
pub fn step_robot(map: &MazeMap, pose: &Pose, rng: &mut RngStream) -> Result<(Pose, Action)> {
    let d = STEP_LENGTH + rng.uniform_range(-STEP_JITTER, STEP_JITTER);
    let mut heading = pose.theta;
    let mut tries = 0;
    while map.segment_blocked(pose.position(), advance(pose, heading, d)) {
        if tries == MAX_HEADING_TRIES {
            return Err(Error::Map(format!(
                "no free heading from ({:.3}, {:.3}) after {MAX_HEADING_TRIES} tries",
                pose.x, pose.y
            )));
        }
        heading = uniform_heading(rng);
        tries += 1;
    }
    let [x, y] = advance(pose, heading, d);
    let next = Pose { x, y, theta: heading };
    let action = Action {
        distance: d,
        turn: wrap_angle(heading - pose.theta),
    };
    Ok((next, action))
}

/// The five smallest landmark distances in ascending order, without noise.
pub fn true_ranges(map: &MazeMap, x: f64, y: f64) -> Result<[f64; NUM_RANGES]> {
    let lm = map.landmarks();
    if lm.len() < NUM_RANGES {
        return Err(Error::Map(format!("{} landmarks, need {NUM_RANGES}", lm.len())));
    }
    let mut d: Vec<f64> = lm.iter().map(|l| (l[0] - x).hypot(l[1] - y)).collect();
    d.select_nth_unstable_by(NUM_RANGES - 1, f64::total_cmp);
    let mut out = [0.0; NUM_RANGES];
    out.copy_from_slice(&d[..NUM_RANGES]);
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Noisy ranges to the five nearest landmarks. Selection and ordering use
/// the true distances; each is then perturbed by `U[−0.1, 0.1]` and floored
/// at zero. `rng = None` gives the noise-free ranges.
pub fn observe(map: &MazeMap, pose: &Pose, rng: Option<&mut RngStream>) -> Result<[f64; NUM_RANGES]> {
    let mut r = true_ranges(map, pose.x, pose.y)?;
    if let Some(rng) = rng {
        for v in &mut r {
            *v = (*v + rng.uniform_range(-OBS_NOISE, OBS_NOISE)).max(0.0);
        }
    }
    Ok(r)
}

/// One simulated run: `poses[0]` is the unobserved start, and step `t`
/// moves by `actions[t]` to `poses[t + 1]` where `obs[t]` is recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub actions: Vec<Action>,
    pub obs: Vec<[f64; NUM_RANGES]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `[d, cos Δθ, sin Δθ, o1..o5]` per step.
    pub fn inputs(&self) -> Vec<[f64; 8]> {
        self.actions
            .iter()
            .zip(&self.obs)
            .map(|(a, o)| {
                let mut x = [0.0; 8];
                x[0] = a.distance;
                x[1] = a.turn.cos();
                x[2] = a.turn.sin();
                x[3..].copy_from_slice(o);
                x
            })
            .collect()
    }

    /// `[x/n, y/n, cos θ, sin θ]` of `poses[1..]`.
    pub fn targets(&self, n: usize) -> Vec<[f64; 4]> {
        let s = n as f64;
        self.poses[1..]
            .iter()
            .map(|p| [p.x / s, p.y / s, p.theta.cos(), p.theta.sin()])
            .collect()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.poses.len() != self.actions.len() + 1 || self.obs.len() != self.actions.len() {
            return Err(Error::Format(format!(
                "trajectory with {} poses, {} actions, {} observations",
                self.poses.len(),
                self.actions.len(),
                self.obs.len()
            )));
        }
        Ok(())
    }
}

/// Uniform position in a uniformly chosen free cell.
pub(crate) fn uniform_free_position(free: &[(usize, usize)], rng: &mut RngStream) -> [f64; 2] {
    let (i, j) = free[rng.below(free.len())];
    [j as f64 + rng.uniform(), i as f64 + rng.uniform()]
}

pub(crate) fn random_pose(free: &[(usize, usize)], rng: &mut RngStream) -> Pose {
    let [x, y] = uniform_free_position(free, rng);
    Pose {
        x,
        y,
        theta: uniform_heading(rng),
    }
}

/// Simulate `len` steps from a uniformly random start pose.
pub fn simulate_trajectory(map: &MazeMap, len: usize, rng: &mut RngStream) -> Result<Trajectory> {
    let free = map.free_cells();
    if free.is_empty() {
        return Err(Error::Map("map has no free cells".into()));
    }
    let mut pose = random_pose(&free, rng);
    let mut traj = Trajectory {
        poses: vec![pose],
        actions: Vec::with_capacity(len),
        obs: Vec::with_capacity(len),
    };
    for _ in 0..len {
        let (next, action) = step_robot(map, &pose, rng)?;
        traj.obs.push(observe(map, &next, Some(rng))?);
        traj.actions.push(action);
        traj.poses.push(next);
        pose = next;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::generate_maze;

    fn open_room() -> MazeMap {
        let mut rows = vec!["#".repeat(8)];
        rows.extend((0..6).map(|_| format!("#{}#", ".".repeat(6))));
        rows.push("#".repeat(8));
        MazeMap::from_rows(&rows).unwrap()
    }

    #[test]
    fn open_room_forward_move() {
        let map = open_room();
        let mut rng = RngStream::new(0);
        for _ in 0..100 {
            let pose = Pose { x: 2.0, y: 3.5, theta: 0.0 };
            let (next, action) = step_robot(&map, &pose, &mut rng).unwrap();
            assert!((0.18..=0.22).contains(&(next.x - 2.0)));
            assert_eq!(next.y, 3.5);
            assert_eq!(action.turn, 0.0);
        }
    }

    #[test]
    fn three_four_five() {
        let far = [[0.0, 0.0], [10.0, 10.0], [10.0, 0.0], [0.0, 10.0], [20.0, 20.0]];
        let map = open_room().with_landmarks(far.to_vec());
        let r = observe(&map, &Pose { x: 3.0, y: 4.0, theta: 0.0 }, None).unwrap();
        assert_eq!(r[0], 5.0);
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn too_few_landmarks() {
        let map = open_room().with_landmarks(vec![[0.0, 0.0]; 4]);
        let err = observe(&map, &Pose { x: 3.0, y: 4.0, theta: 0.0 }, None).unwrap_err();
        assert!(matches!(err, Error::Map(_)));
    }

    #[test]
    fn robot_stays_in_free_space() {
        let map = generate_maze(10, 0.3, 1).unwrap();
        let mut rng = RngStream::new(5);
        let t = simulate_trajectory(&map, 10_000, &mut rng).unwrap();
        for p in &t.poses {
            assert!(map.is_free(p.x, p.y), "{p:?}");
            assert!(p.theta > -PI && p.theta <= PI);
        }
    }

    #[test]
    fn fixed_seed_fixed_trajectory() {
        let map = generate_maze(10, 0.3, 1).unwrap();
        let a = simulate_trajectory(&map, 50, &mut RngStream::new(9)).unwrap();
        let b = simulate_trajectory(&map, 50, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observation_noise_range() {
        let map = generate_maze(10, 0.3, 1).unwrap();
        let pose = Pose { x: 4.5, y: 4.5, theta: 0.0 };
        let clean = observe(&map, &pose, None).unwrap();
        let mut rng = RngStream::new(2);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..20_000 {
            let noisy = observe(&map, &pose, Some(&mut rng)).unwrap();
            for (n, c) in noisy.iter().zip(&clean) {
                lo = lo.min(n - c);
                hi = hi.max(n - c);
            }
        }
        assert!(lo >= -OBS_NOISE && hi <= OBS_NOISE);
        assert!(lo < -0.099 && hi > 0.099);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }
}
