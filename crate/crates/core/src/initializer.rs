//! Coarse initial pose: photometric scoring of an explicit candidate set.
//! Also hosts the random-view-synthesis pose perturbation.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pixel_ray_unchecked, sample_pose_in_ball, CameraIntrinsics, Pixel, Pose, Vec3};
use crate::radiance_field::{BoundingBox, RadianceField};
use crate::renderer::{render_ray, Image, RaySamplingConfig};
use crate::stream_rng;

/// Regular lattice of camera positions, each looking horizontally at
/// `yaw_steps` evenly spaced headings tilted by `pitch` radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeSpec {
    pub region: BoundingBox,
    pub spacing: f64,
    pub yaw_steps: usize,
    pub pitch: f64,
}

impl LatticeSpec {
    pub fn candidates(&self) -> Result<Vec<Pose>> {
        if !(self.spacing > 0.0) || self.yaw_steps == 0 {
            return Err(Error::invalid("lattice needs spacing > 0 and yaw_steps >= 1"));
        }
        let ext = self.region.extent();
        let steps = |e: f64| (e / self.spacing).floor() as usize + 1;
        let (nx, ny, nz) = (steps(ext.x), steps(ext.y), steps(ext.z));
        let mut out = Vec::with_capacity(nx * ny * nz * self.yaw_steps);
        let up = Vec3::new(0.0, 0.0, 1.0);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let eye = self.region.min
                        + Vec3::new(i as f64, j as f64, k as f64) * self.spacing;
                    for y in 0..self.yaw_steps {
                        let yaw = y as f64 * std::f64::consts::TAU / self.yaw_steps as f64;
                        let dir = Vec3::new(
                            yaw.cos() * self.pitch.cos(),
                            yaw.sin() * self.pitch.cos(),
                            self.pitch.sin(),
                        );
                        out.push(Pose::look_at(eye, eye + dir, up)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Candidates {
    List(Vec<Pose>),
    Lattice(LatticeSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub candidates: Candidates,
    pub m_pixels: usize,
    pub sampling: RaySamplingConfig,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPose {
    pub pose: Pose,
    pub index: usize,
    /// Mean squared RGB difference over the sampled pixels.
    pub score: f64,
}

/// Returns the candidate whose render best matches `query` on a shared
/// random pixel subset; ties go to the lower index.
pub fn coarse_localize<F: RadianceField + ?Sized>(
    field: &F,
    query: &Image,
    intr: &CameraIntrinsics,
    cfg: &SearchConfig,
) -> Result<ScoredPose> {
    intr.validate()?;
    if query.width() != intr.width || query.height() != intr.height {
        return Err(Error::invalid("query size does not match intrinsics"));
    }
    let candidates = match &cfg.candidates {
        Candidates::List(l) => l.clone(),
        Candidates::Lattice(spec) => spec.candidates()?,
    };
    if candidates.is_empty() {
        return Err(Error::invalid("coarse search needs at least one candidate"));
    }
    let total = intr.pixel_count();
    let m = cfg.m_pixels.clamp(1, total);
    let mut rng = stream_rng(cfg.seed, 0);
    let width = intr.width as usize;
    let pixels: Vec<Pixel> = index::sample(&mut rng, total, m)
        .into_iter()
        .map(|i| Pixel::new((i % width) as u32, (i / width) as u32))
        .collect();
    let sampling = RaySamplingConfig {
        stratified: false,
        ..cfg.sampling
    };

    let scores = candidates
        .par_iter()
        .map(|pose| {
            let mut sum = 0.0;
            for &px in &pixels {
                let ray = pixel_ray_unchecked(intr, pose, px.u as f64, px.v as f64);
                let c = render_ray(field, &ray, &sampling, None)?;
                let q = query.get(px);
                sum += (0..3).map(|ch| (c[ch] - q[ch]).powi(2)).sum::<f64>();
            }
            Ok(sum / (3 * m) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok(ScoredPose {
        pose: candidates[best],
        index: best,
        score: scores[best],
    })
}

/// Perturbs every pose within `psi` meters and `phi` radians.
pub fn rvs_perturb<R: Rng + ?Sized>(train_poses: &[Pose], psi: f64, phi: f64, rng: &mut R) -> Result<Vec<Pose>> {
    train_poses
        .iter()
        .map(|p| sample_pose_in_ball(p, psi, phi, rng))
        .collect()
}
