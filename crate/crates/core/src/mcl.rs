//! Monte Carlo pose refinement.
//!
//! Particles are pose hypotheses scattered around an initial estimate. Each
//! iteration runs, in order:
//!
//! 1. predict: diffuse every particle with Gaussian motion noise;
//! 2. update: render a shared random set of `M` pixels from every particle
//!    and weight it by `(M / (Σ_j ‖I(p_j) - C(p_j)‖² + ε))^4`;
//! 3. estimate: weighted mean pose, recorded in the [`Trace`];
//! 4. anneal: once the particle cloud is tight, drop to fewer particles and
//!    smaller noise;
//! 5. resample: draw the next generation proportionally to weight.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    perturb_pose, pixel_ray_unchecked, pose_error, sample_pose_in_ball, weighted_mean_pose, CameraIntrinsics,
    Pixel, Pose, PoseError,
};
use crate::radiance_field::RadianceField;
use crate::renderer::{render_ray, Image, RaySamplingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Pixels compared per particle and iteration.
    pub m_pixels: usize,
    /// Motion noise, meters per axis.
    pub sigma_t: f64,
    /// Motion noise, radians per axis.
    pub sigma_r: f64,
    pub init_radius_t: f64,
    pub init_radius_r: f64,
    pub spread_threshold_1: f64,
    pub spread_threshold_2: f64,
    pub annealed_particles: usize,
    pub weight_exponent: i32,
    pub iterations: usize,
    pub loss_epsilon: f64,
    pub resampling: Resampling,
    /// Quadrature samples per rendered ray.
    pub render_samples: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n_particles: 200,
            m_pixels: 128,
            sigma_t: 0.005,
            sigma_r: 0.005,
            init_radius_t: 0.02,
            init_radius_r: 0.02,
            spread_threshold_1: 0.01,
            spread_threshold_2: 0.005,
            annealed_particles: 100,
            weight_exponent: 4,
            iterations: 50,
            loss_epsilon: 1e-8,
            resampling: Resampling::Multinomial,
            render_samples: 128,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("filter config: {m}")));
        if self.n_particles == 0 || self.annealed_particles == 0 || self.m_pixels == 0 || self.render_samples == 0 {
            return bad("particle, pixel and sample counts must be >= 1");
        }
        for (name, v) in [
            ("sigma_t", self.sigma_t),
            ("sigma_r", self.sigma_r),
            ("init_radius_t", self.init_radius_t),
            ("init_radius_r", self.init_radius_r),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.spread_threshold_2 < self.spread_threshold_1) {
            return bad("spread_threshold_2 must be below spread_threshold_1");
        }
        if self.weight_exponent < 1 {
            return bad("weight_exponent must be >= 1");
        }
        if !(self.loss_epsilon > 0.0) {
            return bad("loss_epsilon must be > 0");
        }
        Ok(())
    }

    fn sampling(&self) -> RaySamplingConfig {
        RaySamplingConfig::with_samples(self.render_samples)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub pose: Pose,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub particles: Vec<Particle>,
    pub iteration: usize,
    pub sigma_t: f64,
    pub sigma_r: f64,
    pub anneal_stage: u8,
}

impl FilterState {
    pub fn poses(&self) -> Vec<Pose> {
        self.particles.iter().map(|p| p.pose).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    /// `1 / Σ w²` for normalized weights.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }

    fn normalize(&mut self) -> Result<()> {
        let total: f64 = self.particles.iter().map(|p| p.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Degenerate(format!(
                "weight sum {total} at iteration {}",
                self.iteration
            )));
        }
        for p in &mut self.particles {
            p.weight /= total;
        }
        Ok(())
    }
}

pub fn init_particles<R: Rng + ?Sized>(initial: &Pose, cfg: &FilterConfig, rng: &mut R) -> Result<FilterState> {
    cfg.validate()?;
    let w = 1.0 / cfg.n_particles as f64;
    let particles = (0..cfg.n_particles)
        .map(|_| {
            Ok(Particle {
                pose: sample_pose_in_ball(initial, cfg.init_radius_t, cfg.init_radius_r, rng)?,
                weight: w,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FilterState {
        particles,
        iteration: 0,
        sigma_t: cfg.sigma_t,
        sigma_r: cfg.sigma_r,
        anneal_stage: 0,
    })
}

/// Motion step: perturbs every particle with the current noise and advances
/// the iteration counter. Weights are untouched.
pub fn predict<R: Rng + ?Sized>(state: &mut FilterState, rng: &mut R) -> Result<()> {
    for p in &mut state.particles {
        p.pose = perturb_pose(&p.pose, state.sigma_t, state.sigma_r, rng)?;
    }
    state.iteration += 1;
    Ok(())
}

/// Evaluation of the measurement likelihood for one update step.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightUpdate {
    /// Pixel subset shared by all particles.
    pub pixels: Vec<Pixel>,
    /// Per particle: `Σ_j Σ_rgb (I(p_j) - C(p_j))²`.
    pub residuals: Vec<f64>,
    /// Per particle weight before normalization.
    pub raw_weights: Vec<f64>,
}

/// `(M / (residual + ε))^exponent`.
pub fn likelihood_weight(residual: f64, m_pixels: usize, epsilon: f64, exponent: i32) -> f64 {
    (m_pixels as f64 / (residual + epsilon)).powi(exponent)
}

/// Reweights particles against `query` from `M` uniformly drawn pixels,
/// then normalizes the weights.
pub fn update_weights<F, R>(
    state: &mut FilterState,
    field: &F,
    query: &Image,
    intr: &CameraIntrinsics,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<WeightUpdate>
where
    F: RadianceField + ?Sized,
    R: Rng + ?Sized,
{
    if query.width() != intr.width || query.height() != intr.height {
        return Err(Error::invalid(format!(
            "query is {}x{} but intrinsics are {}x{}",
            query.width(),
            query.height(),
            intr.width,
            intr.height
        )));
    }
    let total = intr.pixel_count();
    if cfg.m_pixels > total {
        return Err(Error::invalid(format!(
            "cannot sample {} pixels from a {total}-pixel image",
            cfg.m_pixels
        )));
    }
    let width = intr.width as usize;
    let pixels: Vec<Pixel> = index::sample(rng, total, cfg.m_pixels)
        .into_iter()
        .map(|i| Pixel::new((i % width) as u32, (i / width) as u32))
        .collect();
    let observed: Vec<_> = pixels.iter().map(|&p| query.get(p)).collect();
    let sampling = cfg.sampling();

    let residuals = state
        .particles
        .par_iter()
        .map(|particle| {
            let mut sum = 0.0;
            for (px, obs) in pixels.iter().zip(&observed) {
                let ray = pixel_ray_unchecked(intr, &particle.pose, px.u as f64, px.v as f64);
                let c = render_ray(field, &ray, &sampling, None)?;
                for ch in 0..3 {
                    let d = obs[ch] - c[ch];
                    sum += d * d;
                }
            }
            Ok(sum)
        })
        .collect::<Result<Vec<f64>>>()?;

    let raw_weights: Vec<f64> = residuals
        .iter()
        .map(|&r| likelihood_weight(r, cfg.m_pixels, cfg.loss_epsilon, cfg.weight_exponent))
        .collect();
    for (p, &w) in state.particles.iter_mut().zip(&raw_weights) {
        p.weight = w;
    }
    state.normalize()?;
    Ok(WeightUpdate {
        pixels,
        residuals,
        raw_weights,
    })
}

/// Draws a new generation with replacement, proportionally to weight, and
/// resets weights to uniform.
pub fn resample<R: Rng + ?Sized>(state: &mut FilterState, scheme: Resampling, rng: &mut R) -> Result<()> {
    let n = state.particles.len();
    let total: f64 = state.particles.iter().map(|p| p.weight).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate(format!(
            "cannot resample: weight sum {total} at iteration {}",
            state.iteration
        )));
    }
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for p in &state.particles {
        acc += p.weight / total;
        cdf.push(acc);
    }
    // pin the last bin against rounding; zero-weight tails stay unreachable
    let last_positive = state.particles.iter().rposition(|p| p.weight > 0.0).unwrap();
    for c in &mut cdf[last_positive..] {
        *c = 1.0;
    }
    let pick = |u: f64| cdf.partition_point(|&c| c <= u).min(last_positive);

    let picks: Vec<usize> = match scheme {
        Resampling::Multinomial => (0..n).map(|_| pick(rng.random::<f64>())).collect(),
        Resampling::Systematic => {
            let u0 = rng.random::<f64>() / n as f64;
            (0..n).map(|i| pick(u0 + i as f64 / n as f64)).collect()
        }
    };
    let w = 1.0 / n as f64;
    state.particles = picks
        .into_iter()
        .map(|i| Particle {
            pose: state.particles[i].pose,
            weight: w,
        })
        .collect();
    Ok(())
}

/// Mean over x, y, z of the per-axis population standard deviation of the
/// particle translations (unweighted).
pub fn translation_spread(state: &FilterState) -> f64 {
    let n = state.particles.len() as f64;
    let mut mean = [0.0; 3];
    for p in &state.particles {
        for (m, v) in mean.iter_mut().zip(p.pose.translation.to_array()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 3];
    for p in &state.particles {
        for (k, v) in p.pose.translation.to_array().iter().enumerate() {
            var[k] += (v - mean[k]).powi(2) / n;
        }
    }
    var.iter().map(|v| v.sqrt()).sum::<f64>() / 3.0
}

/// Advances the annealing stage when the spread crosses the next threshold.
/// At most one transition per call; returns whether one fired.
pub fn anneal(state: &mut FilterState, cfg: &FilterConfig) -> bool {
    let spread = translation_spread(state);
    match state.anneal_stage {
        0 if spread < cfg.spread_threshold_1 => {
            let keep = cfg.annealed_particles.min(state.particles.len());
            let mut order: Vec<usize> = (0..state.particles.len()).collect();
            // stable: equal weights keep index order
            order.sort_by(|&a, &b| {
                state.particles[b]
                    .weight
                    .partial_cmp(&state.particles[a].weight)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            order.truncate(keep);
            order.sort_unstable();
            state.particles = order.into_iter().map(|i| state.particles[i]).collect();
            if state.normalize().is_err() {
                let w = 1.0 / state.particles.len() as f64;
                state.particles.iter_mut().for_each(|p| p.weight = w);
            }
            state.sigma_t = cfg.sigma_t / 2.0;
            state.sigma_r = cfg.sigma_r / 2.0;
            state.anneal_stage = 1;
            true
        }
        1 if spread < cfg.spread_threshold_2 => {
            state.sigma_t = cfg.sigma_t / 4.0;
            state.sigma_r = cfg.sigma_r / 4.0;
            state.anneal_stage = 2;
            true
        }
        _ => false,
    }
}

pub fn estimate(state: &FilterState) -> Result<Pose> {
    weighted_mean_pose(&state.poses(), &state.weights())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub estimate: Pose,
    pub spread: f64,
    pub ess: f64,
    pub anneal_stage: u8,
    pub error: Option<PoseError>,
}

/// Per-iteration history of a refinement run, starting at initialization.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn has_errors(&self) -> bool {
        self.records.first().is_some_and(|r| r.error.is_some())
    }

    /// `iteration,tx,ty,tz,qw,qx,qy,qz,spread_m,ess,anneal_stage[,trans_err_m,rot_err_deg]`
    pub fn to_csv(&self) -> String {
        let with_err = self.has_errors();
        let mut s = String::from("iteration,tx,ty,tz,qw,qx,qy,qz,spread_m,ess,anneal_stage");
        if with_err {
            s.push_str(",trans_err_m,rot_err_deg");
        }
        s.push('\n');
        for r in &self.records {
            let t = r.estimate.translation;
            let q = r.estimate.rotation;
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                t.x,
                t.y,
                t.z,
                q.w(),
                q.x(),
                q.y(),
                q.z(),
                r.spread,
                r.ess,
                r.anneal_stage
            );
            if let (true, Some(e)) = (with_err, r.error) {
                let _ = write!(s, ",{},{}", e.translation_err, e.rotation_err);
            }
            s.push('\n');
        }
        s
    }
}

fn record(state: &FilterState, estimate: Pose, spread: f64, ground_truth: Option<&Pose>) -> TraceRecord {
    TraceRecord {
        iteration: state.iteration,
        estimate,
        spread,
        ess: state.effective_sample_size(),
        anneal_stage: state.anneal_stage,
        error: ground_truth.map(|gt| pose_error(&estimate, gt)),
    }
}

/// Runs the full filter from `initial` and returns the final estimate with
/// its trace (`iterations + 1` records).
pub fn refine<F, R>(
    field: &F,
    query: &Image,
    intr: &CameraIntrinsics,
    initial: &Pose,
    cfg: &FilterConfig,
    rng: &mut R,
    ground_truth: Option<&Pose>,
) -> Result<(Pose, Trace)>
where
    F: RadianceField + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    intr.validate()?;
    let mut state = init_particles(initial, cfg, rng)?;
    let mut trace = Trace::default();
    let mut current = estimate(&state)?;
    trace
        .records
        .push(record(&state, current, translation_spread(&state), ground_truth));

    for _ in 0..cfg.iterations {
        predict(&mut state, rng)?;
        update_weights(&mut state, field, query, intr, cfg, rng)?;
        current = estimate(&state)?;
        let spread = translation_spread(&state);
        let ess = state.effective_sample_size();
        anneal(&mut state, cfg);
        let mut rec = record(&state, current, spread, ground_truth);
        rec.ess = ess;
        trace.records.push(rec);
        resample(&mut state, cfg.resampling, rng)?;
        log::trace!(
            "iteration {}: spread {spread:.5} ess {ess:.1} stage {}",
            state.iteration,
            state.anneal_stage
        );
    }
    Ok((current, trace))
}
