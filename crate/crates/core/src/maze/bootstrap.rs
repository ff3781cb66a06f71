use std::f64::consts::PI;

use super::robot::{random_pose, true_ranges, wrap_angle, Action, Pose, NUM_RANGES, OBS_NOISE, STEP_JITTER};
use super::MazeMap;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::lse;

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub particles: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian range likelihood.
    pub obs_sigma: f64,
    /// Half-width of the uniform perturbation of each recorded distance.
    pub distance_jitter: f64,
    /// Standard deviation of the Gaussian heading perturbation per step.
    pub heading_jitter: f64,
    /// Start every particle here instead of uniformly over free space.
    pub init: Option<Pose>,
    /// When even the best particle's RMS range residual exceeds this, the
    /// set is treated as lost and redrawn from poses whose residual is
    /// within it. The same redraw seeds an unknown start. `None` disables
    /// both and keeps plain uniform redraws.
    pub lost_rms: Option<f64>,
    /// Uniform candidates tried per particle during a redraw.
    pub reset_draws: usize,
}

impl BootstrapConfig {
    pub fn new(particles: usize, seed: u64) -> Self {
        Self {
            particles,
            seed,
            obs_sigma: OBS_NOISE / 3f64.sqrt(),
            distance_jitter: STEP_JITTER,
            heading_jitter: 0.05,
            init: None,
            lost_rms: Some(2.0 * OBS_NOISE),
            reset_draws: 200,
        }
    }
}

/// Classical particle filter over robot poses using the simulator's motion
/// and range models.
#[derive(Clone, Debug)]
pub struct BootstrapFilter<'a> {
    map: &'a MazeMap,
    config: BootstrapConfig,
    free: Vec<(usize, usize)>,
    particles: Vec<Pose>,
    log_w: Vec<f64>,
    rng: RngStream,
    /// Times the particles were redrawn because the set was lost.
    pub reinits: usize,
    steps: usize,
}

impl<'a> BootstrapFilter<'a> {
    pub fn new(map: &'a MazeMap, config: BootstrapConfig) -> Result<Self> {
        if config.particles == 0 {
            return Err(Error::Config("bootstrap filter needs at least one particle".into()));
        }
        if !(config.obs_sigma > 0.0) {
            return Err(Error::Config("observation sigma must be positive".into()));
        }
        let free = map.free_cells();
        if free.is_empty() {
            return Err(Error::Map("map has no free cells".into()));
        }
        let mut f = Self {
            map,
            rng: RngStream::new(config.seed),
            free,
            particles: Vec::new(),
            log_w: Vec::new(),
            reinits: 0,
            steps: 0,
            config,
        };
        match f.config.init {
            Some(p) => f.particles = vec![p; f.config.particles],
            None => f.scatter(),
        }
        f.log_w = vec![-(f.config.particles as f64).ln(); f.config.particles];
        Ok(f)
    }

    fn scatter(&mut self) {
        let k = self.config.particles;
        self.particles = (0..k).map(|_| random_pose(&self.free, &mut self.rng)).collect();
        self.log_w = vec![-(k as f64).ln(); k];
    }

    /// Rejection-sample poses whose ranges fit `obs` within `limit` RMS.
    /// Slots left unfilled after the draw budget get plain uniform poses.
    fn scatter_consistent(&mut self, obs: &[f64; NUM_RANGES], limit: f64) -> Result<()> {
        let k = self.config.particles;
        let mut kept = Vec::with_capacity(k);
        for _ in 0..k * self.config.reset_draws.max(1) {
            let p = random_pose(&self.free, &mut self.rng);
            if (self.sq_residual(&p, obs)? / NUM_RANGES as f64).sqrt() <= limit {
                kept.push(p);
                if kept.len() == k {
                    break;
                }
            }
        }
        while kept.len() < k {
            kept.push(random_pose(&self.free, &mut self.rng));
        }
        self.particles = kept;
        self.log_w = vec![-(k as f64).ln(); k];
        Ok(())
    }

    pub fn particles(&self) -> &[Pose] {
        &self.particles
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_w.iter().map(|v| v.exp()).collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.log_w.iter().map(|v| (2.0 * v).exp()).sum::<f64>()
    }

    /// Weighted mean position and circular-mean heading.
    pub fn estimate(&self) -> Pose {
        let (mut x, mut y, mut c, mut s) = (0.0, 0.0, 0.0, 0.0);
        for (p, lw) in self.particles.iter().zip(&self.log_w) {
            let w = lw.exp();
            x += w * p.x;
            y += w * p.y;
            c += w * p.theta.cos();
            s += w * p.theta.sin();
        }
        Pose { x, y, theta: s.atan2(c) }
    }

    fn sq_residual(&self, p: &Pose, obs: &[f64; NUM_RANGES]) -> Result<f64> {
        let r = true_ranges(self.map, p.x, p.y)?;
        Ok(r.iter().zip(obs).map(|(a, b)| (a - b).powi(2)).sum())
    }

    /// Adds the range log-likelihood and renormalizes. Returns the smallest
    /// RMS residual over live particles, or `None` if every weight is zero.
    fn reweight(&mut self, obs: &[f64; NUM_RANGES]) -> Result<Option<f64>> {
        let s2 = 2.0 * self.config.obs_sigma * self.config.obs_sigma;
        let mut best = f64::INFINITY;
        for i in 0..self.particles.len() {
            if self.log_w[i] > f64::NEG_INFINITY {
                let sq = self.sq_residual(&self.particles[i], obs)?;
                best = best.min(sq);
                self.log_w[i] -= sq / s2;
            }
        }
        let z = lse(self.log_w.iter().copied());
        if !z.is_finite() {
            return Ok(None);
        }
        self.log_w.iter_mut().for_each(|v| *v -= z);
        Ok(Some((best / NUM_RANGES as f64).sqrt()))
    }

    fn lost(&self, best_rms: Option<f64>) -> bool {
        match (best_rms, self.config.lost_rms) {
            (None, _) => true,
            (Some(rms), Some(limit)) => rms > limit,
            (Some(_), None) => false,
        }
    }

    /// Propagate by `action`, weight by `obs`, and resample when the
    /// effective sample size drops below half the particle count. Returns
    /// the estimate made before resampling.
    pub fn step(&mut self, action: &Action, obs: &[f64; NUM_RANGES]) -> Result<Pose> {
        let (dj, hj) = (self.config.distance_jitter, self.config.heading_jitter);
        for i in 0..self.particles.len() {
            let p = self.particles[i];
            let mut d = action.distance;
            if dj > 0.0 {
                d += self.rng.uniform_range(-dj, dj);
            }
            let mut theta = p.theta + action.turn;
            if hj > 0.0 {
                theta += hj * self.rng.gaussian();
            }
            let theta = wrap_angle(theta);
            let next = Pose {
                x: p.x + d * theta.cos(),
                y: p.y + d * theta.sin(),
                theta,
            };
            if self.map.segment_blocked(p.position(), next.position()) {
                self.log_w[i] = f64::NEG_INFINITY;
            }
            self.particles[i] = next;
        }
        let unknown_start = self.steps == 0 && self.config.init.is_none();
        self.steps += 1;
        let best = self.reweight(obs)?;
        if unknown_start || self.lost(best) {
            if !unknown_start {
                self.reinits += 1;
            }
            match self.config.lost_rms {
                Some(limit) => self.scatter_consistent(obs, limit)?,
                None => self.scatter(),
            }
            if self.reweight(obs)?.is_none() {
                return Err(Error::Degenerate("range likelihood underflowed after reinitialization".into()));
            }
        }
        let estimate = self.estimate();
        let k = self.particles.len();
        if self.effective_sample_size() < k as f64 / 2.0 {
            let w = self.weights();
            let picked: Vec<Pose> = (0..k).map(|_| self.particles[self.rng.categorical(&w)]).collect();
            self.particles = picked;
            self.log_w = vec![-(k as f64).ln(); k];
        }
        Ok(estimate)
    }
}

#[derive(Clone, Debug)]
pub struct BootstrapRun {
    /// One estimate per step.
    pub estimates: Vec<Pose>,
    pub reinits: usize,
}

/// Run a bootstrap filter over a recorded action/observation sequence.
pub fn bootstrap_pf(
    map: &MazeMap,
    actions: &[Action],
    observations: &[[f64; NUM_RANGES]],
    config: BootstrapConfig,
) -> Result<BootstrapRun> {
    if actions.len() != observations.len() {
        return Err(Error::Format(format!(
            "{} actions for {} observations",
            actions.len(),
            observations.len()
        )));
    }
    let mut f = BootstrapFilter::new(map, config)?;
    let estimates = actions
        .iter()
        .zip(observations)
        .map(|(a, o)| f.step(a, o))
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapRun {
        estimates,
        reinits: f.reinits,
    })
}

/// Smallest absolute difference between two headings.
pub fn heading_error(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs().min(2.0 * PI)
}
