//! Fitting a voxel field to posed images by photometric gradient descent.
//!
//! Densities are optimized through a softplus pre-activation,
//! `σ = softplus(ρ)`, so they stay non-negative; colors are clamped to
//! `[0, 1]` after every step. Ray samples sit at bin midpoints so the loss
//! is a smooth deterministic function of the parameters.
//!
//! Backward pass for one ray with residual gradient `g = 2 (C - target)`:
//!
//! ```text
//! ∂L/∂c_k = g · T_k α_k
//! ∂L/∂σ_k = δ_k · g · (T_{k+1} c_k - Σ_{j>k} T_j α_j c_j)
//! ```
//!
//! and each sample distributes its gradient to the eight trilinear corner
//! cells by their interpolation weights.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pixel_ray_unchecked, CameraIntrinsics, Pixel, Pose, Ray};
use crate::radiance_field::{trilinear_corners, BoundingBox, GridDims, RadianceField, Rgb, VoxelGrid};
use crate::renderer::{render_ray, Image, RaySamplingConfig, Segment};
use crate::stream_rng;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`]; densities below `1e-6` map to its pre-image.
pub fn softplus_inverse(y: f64) -> f64 {
    let y = y.max(1e-6);
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Optimizable field: density pre-activations and colors per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    dims: GridDims,
    bbox: BoundingBox,
    raw_density: Vec<f64>,
    color: Vec<[f64; 3]>,
    // softplus(raw_density), kept in sync for fast sampling
    density: Vec<f64>,
}

impl FieldParams {
    pub fn uniform(dims: GridDims, bbox: BoundingBox, raw_density: f64, color: Rgb) -> Self {
        let n = dims.len();
        FieldParams {
            dims,
            bbox,
            raw_density: vec![raw_density; n],
            color: vec![color; n],
            density: vec![softplus(raw_density); n],
        }
    }

    pub fn from_grid(grid: &VoxelGrid) -> Self {
        let raw_density: Vec<f64> = grid.density().iter().map(|&d| softplus_inverse(d as f64)).collect();
        FieldParams {
            dims: grid.dims(),
            bbox: *grid.bbox(),
            density: raw_density.iter().map(|&r| softplus(r)).collect(),
            raw_density,
            color: grid.color().iter().map(|c| c.map(|v| v as f64)).collect(),
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn raw_density(&self) -> &[f64] {
        &self.raw_density
    }

    pub fn color(&self) -> &[[f64; 3]] {
        &self.color
    }

    pub fn param_count(&self) -> usize {
        self.dims.len() * 4
    }

    /// Flat parameter `i`: cell `i / 4`, slot 0 is the density
    /// pre-activation and slots 1..=3 the color channels.
    pub fn param(&self, i: usize) -> f64 {
        let (cell, slot) = (i / 4, i % 4);
        if slot == 0 {
            self.raw_density[cell]
        } else {
            self.color[cell][slot - 1]
        }
    }

    /// Sets flat parameter `i` without clamping (used by derivative checks).
    pub fn set_param(&mut self, i: usize, v: f64) {
        let (cell, slot) = (i / 4, i % 4);
        if slot == 0 {
            self.raw_density[cell] = v;
            self.density[cell] = softplus(v);
        } else {
            self.color[cell][slot - 1] = v;
        }
    }

    pub fn to_grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::new(
            self.dims,
            self.bbox,
            self.density.iter().map(|&d| d as f32).collect(),
            self.color
                .iter()
                .map(|c| c.map(|v| v.clamp(0.0, 1.0) as f32))
                .collect(),
        )
    }

    fn apply_step(&mut self, grad: &Gradient, step: f64) {
        for i in 0..self.raw_density.len() {
            let r = self.raw_density[i] - step * grad.raw_density[i];
            self.raw_density[i] = r;
            self.density[i] = softplus(r);
            for ch in 0..3 {
                self.color[i][ch] = (self.color[i][ch] - step * grad.color[i][ch]).clamp(0.0, 1.0);
            }
        }
    }
}

impl RadianceField for FieldParams {
    fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    fn sample(&self, point: crate::geometry::Vec3, _direction: crate::geometry::Vec3) -> (f64, Rgb) {
        let Some(corners) = trilinear_corners(self.dims, &self.bbox, point) else {
            return (0.0, [0.0; 3]);
        };
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for (idx, w) in corners {
            sigma += w * self.density[idx];
            for ch in 0..3 {
                rgb[ch] += w * self.color[idx][ch];
            }
        }
        (sigma, rgb)
    }
}

/// Dense gradient with the same layout as [`FieldParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub raw_density: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl Gradient {
    fn zeros(n: usize) -> Self {
        Gradient {
            raw_density: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    /// Flat accessor matching [`FieldParams::param`].
    pub fn get(&self, i: usize) -> f64 {
        let (cell, slot) = (i / 4, i % 4);
        if slot == 0 {
            self.raw_density[cell]
        } else {
            self.color[cell][slot - 1]
        }
    }
}

fn deterministic(cfg: &RaySamplingConfig) -> RaySamplingConfig {
    RaySamplingConfig {
        stratified: false,
        ..*cfg
    }
}

/// Sum over the batch of squared RGB residuals.
pub fn photometric_loss<F: RadianceField + ?Sized>(
    field: &F,
    batch: &[(Ray, Rgb)],
    cfg: &RaySamplingConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("photometric loss needs a nonempty batch"));
    }
    let cfg = deterministic(cfg);
    let per_ray = batch
        .par_iter()
        .map(|(ray, target)| {
            let c = render_ray(field, ray, &cfg, None)?;
            Ok((0..3).map(|ch| (c[ch] - target[ch]).powi(2)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_ray.iter().sum())
}

#[derive(Clone, Copy)]
struct Contribution {
    cell: u32,
    raw_density: f64,
    color: [f64; 3],
}

struct SampleRecord {
    corners: [(usize, f64); 8],
    delta: f64,
    weight: f64,
    trans_after: f64,
    color: Rgb,
}

/// Gradient contributions of one ray, in sample-then-corner order.
fn ray_backward(
    params: &FieldParams,
    ray: &Ray,
    target: &Rgb,
    cfg: &RaySamplingConfig,
    out: &mut Vec<Contribution>,
) -> f64 {
    let Some(seg) = Segment::clip(&params.bbox, ray, cfg) else {
        return target.iter().map(|t| t * t).sum();
    };
    let mut records = Vec::with_capacity(seg.n);
    let mut transmittance = 1.0;
    let mut rgb = [0.0; 3];
    for k in 0..seg.n {
        let p = ray.at(seg.midpoint(k));
        let Some(corners) = trilinear_corners(params.dims, &params.bbox, p) else {
            continue;
        };
        let mut sigma = 0.0;
        let mut c = [0.0; 3];
        for &(idx, w) in &corners {
            sigma += w * params.density[idx];
            for ch in 0..3 {
                c[ch] += w * params.color[idx][ch];
            }
        }
        let step = (-sigma * seg.bin).exp();
        let weight = transmittance * (1.0 - step);
        transmittance *= step;
        for ch in 0..3 {
            rgb[ch] += weight * c[ch];
        }
        records.push(SampleRecord {
            corners,
            delta: seg.bin,
            weight,
            trans_after: transmittance,
            color: c,
        });
    }

    // render_ray clamps; the clamp's derivative is zero outside [0, 1]
    let mut g = [0.0; 3];
    let mut loss = 0.0;
    for ch in 0..3 {
        let clamped = rgb[ch].clamp(0.0, 1.0);
        let r = clamped - target[ch];
        loss += r * r;
        if rgb[ch] == clamped {
            g[ch] = 2.0 * r;
        }
    }
    if g == [0.0; 3] {
        return loss;
    }

    let mut suffix = rgb;
    for rec in &records {
        let mut d_sigma = 0.0;
        for ch in 0..3 {
            suffix[ch] -= rec.weight * rec.color[ch];
            d_sigma += g[ch] * (rec.trans_after * rec.color[ch] - suffix[ch]);
        }
        d_sigma *= rec.delta;
        for &(idx, w) in &rec.corners {
            if w == 0.0 {
                continue;
            }
            out.push(Contribution {
                cell: idx as u32,
                raw_density: d_sigma * w * sigmoid(params.raw_density[idx]),
                color: [
                    g[0] * rec.weight * w,
                    g[1] * rec.weight * w,
                    g[2] * rec.weight * w,
                ],
            });
        }
    }
    loss
}

const RAYS_PER_CHUNK: usize = 16;

/// Loss and exact gradient over every parameter. Partial gradients are
/// merged in batch order, so the result does not depend on the worker count.
pub fn loss_and_gradient(
    params: &FieldParams,
    batch: &[(Ray, Rgb)],
    cfg: &RaySamplingConfig,
) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::invalid("loss gradient needs a nonempty batch"));
    }
    cfg.validate()?;
    let cfg = deterministic(cfg);
    let partials: Vec<(f64, Vec<Contribution>)> = batch
        .par_chunks(RAYS_PER_CHUNK)
        .map(|chunk| {
            let mut out = Vec::new();
            let loss = chunk
                .iter()
                .map(|(ray, target)| ray_backward(params, ray, target, &cfg, &mut out))
                .sum::<f64>();
            (loss, out)
        })
        .collect();
    let mut grad = Gradient::zeros(params.dims.len());
    let mut loss = 0.0;
    for (l, contribs) in partials {
        loss += l;
        for c in contribs {
            let i = c.cell as usize;
            grad.raw_density[i] += c.raw_density;
            for ch in 0..3 {
                grad.color[i][ch] += c.color[ch];
            }
        }
    }
    Ok((loss, grad))
}

pub fn loss_gradient(params: &FieldParams, batch: &[(Ray, Rgb)], cfg: &RaySamplingConfig) -> Result<Gradient> {
    loss_and_gradient(params, batch, cfg).map(|(_, g)| g)
}

/// Posed images sharing one set of intrinsics.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub intrinsics: CameraIntrinsics,
    pub views: Vec<(Image, Pose)>,
}

impl TrainSet {
    pub fn new(intrinsics: CameraIntrinsics, views: Vec<(Image, Pose)>) -> Result<Self> {
        intrinsics.validate()?;
        if views.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if let Some((i, _)) = views
            .iter()
            .enumerate()
            .find(|(_, (img, _))| img.width() != intrinsics.width || img.height() != intrinsics.height)
        {
            return Err(Error::invalid(format!(
                "training image {i} does not match the {}x{} intrinsics",
                intrinsics.width, intrinsics.height
            )));
        }
        Ok(TrainSet { intrinsics, views })
    }

    /// Uniformly random (view, pixel) rays with their observed colors.
    pub fn draw_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(Ray, Rgb)> {
        let intr = &self.intrinsics;
        (0..n)
            .map(|_| {
                let (img, pose) = &self.views[rng.random_range(0..self.views.len())];
                let px = Pixel::new(rng.random_range(0..intr.width), rng.random_range(0..intr.height));
                (pixel_ray_unchecked(intr, pose, px.u as f64, px.v as f64), img.get(px))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub rays_per_step: usize,
    /// Step applied to the gradient of the batch-mean loss.
    pub step_size: f64,
    /// Multiplier applied to the step size after every iteration.
    pub step_decay: f64,
    pub init_raw_density: f64,
    pub init_color: f64,
    pub sampling: RaySamplingConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            rays_per_step: 512,
            step_size: 20000.0,
            step_decay: 0.999,
            init_raw_density: -2.0,
            init_color: 0.5,
            sampling: RaySamplingConfig::with_samples(64),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_step == 0 {
            return Err(Error::invalid("fit: rays_per_step must be >= 1"));
        }
        if !(self.step_size > 0.0) || !(self.step_decay > 0.0) {
            return Err(Error::invalid("fit: step size and decay must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.init_color) {
            return Err(Error::invalid("fit: init_color must lie in [0, 1]"));
        }
        self.sampling.validate()
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub grid: VoxelGrid,
    pub params: FieldParams,
    /// Batch loss (sum of squared residuals) before each iteration's step.
    pub losses: Vec<f64>,
    /// `(iteration, loss)` on the fixed held-out batch, if one was given.
    pub holdout: Vec<(usize, f64)>,
}

impl FitReport {
    /// `iteration,loss` CSV of the per-iteration batch loss.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, l));
        }
        s
    }

    /// Iterations at which the held-out loss rose above the previous
    /// evaluation. Empty for a monotone run.
    pub fn holdout_increases(&self) -> Vec<usize> {
        self.holdout.windows(2).filter(|w| w[1].1 > w[0].1).map(|w| w[1].0).collect()
    }
}

pub fn fit_field(train: &TrainSet, dims: GridDims, bbox: BoundingBox, cfg: &FitConfig) -> Result<FitReport> {
    fit_field_monitored(train, dims, bbox, cfg, &[], 0)
}

/// [`fit_field`] that also evaluates `holdout` every `eval_every`
/// iterations (and at the start and end).
pub fn fit_field_monitored(
    train: &TrainSet,
    dims: GridDims,
    bbox: BoundingBox,
    cfg: &FitConfig,
    holdout: &[(Ray, Rgb)],
    eval_every: usize,
) -> Result<FitReport> {
    cfg.validate()?;
    let dims = GridDims::new(dims.nx, dims.ny, dims.nz)?;
    let mut params = FieldParams::uniform(dims, bbox, cfg.init_raw_density, [cfg.init_color; 3]);
    let mut rng = stream_rng(cfg.seed, 0);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut held = Vec::new();
    let mut step = cfg.step_size;
    let eval = |p: &FieldParams| photometric_loss(p, holdout, &cfg.sampling);

    if !holdout.is_empty() {
        held.push((0, eval(&params)?));
    }
    for it in 1..=cfg.iterations {
        let batch = train.draw_batch(cfg.rays_per_step, &mut rng);
        let (loss, grad) = loss_and_gradient(&params, &batch, &cfg.sampling)?;
        if !loss.is_finite() || grad.raw_density.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it, loss });
        }
        losses.push(loss);
        params.apply_step(&grad, step / batch.len() as f64);
        if params.raw_density.iter().any(|r| !r.is_finite()) {
            return Err(Error::Diverged { iteration: it, loss });
        }
        step *= cfg.step_decay;
        if !holdout.is_empty() && eval_every > 0 && (it % eval_every == 0 || it == cfg.iterations) {
            let l = eval(&params)?;
            if !l.is_finite() {
                return Err(Error::Diverged { iteration: it, loss: l });
            }
            held.push((it, l));
        }
        if it % 100 == 0 {
            log::debug!("fit iteration {it}: batch loss {loss:.6}");
        }
    }
    let report = FitReport {
        grid: params.to_grid()?,
        params,
        losses,
        holdout: held,
    };
    let rises = report.holdout_increases();
    if !rises.is_empty() {
        log::warn!("held-out loss increased at iterations {rises:?}; consider a smaller step or faster decay");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube() -> BoundingBox {
        BoundingBox::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng) -> FieldParams {
        let dims = GridDims::cube(8).unwrap();
        let mut p = FieldParams::uniform(dims, cube(), 0.0, [0.5; 3]);
        for i in 0..p.param_count() {
            let v = if i % 4 == 0 {
                rng.random_range(-3.0..2.0)
            } else {
                rng.random_range(0.05..0.95)
            };
            p.set_param(i, v);
        }
        p
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Ray, Rgb)> {
        (0..n)
            .map(|_| {
                let o = Vec3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(2.0..3.0),
                );
                let target = Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
                (Ray::new(o, target - o), [rng.random(), rng.random(), rng.random()])
            })
            .collect()
    }

    #[test]
    fn softplus_helpers() {
        for x in [-10.0, -2.0, 0.0, 1.5, 40.0] {
            assert!((softplus_inverse(softplus(x)) - x).abs() < 1e-6 * x.abs().max(1.0));
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-8);
        }
        // targets below the floor map to the floor's pre-activation
        assert_eq!(softplus_inverse(0.0), softplus_inverse(1e-6));
        assert!(softplus_inverse(0.0).is_finite());
    }

    #[test]
    fn loss_zero_for_matching_targets_and_unit_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng);
        let cfg = RaySamplingConfig::with_samples(32);
        let rays = random_batch(&mut rng, 10);
        let batch: Vec<_> = rays
            .iter()
            .map(|(r, _)| (*r, render_ray(&p, r, &cfg, None).unwrap()))
            .collect();
        assert_eq!(photometric_loss(&p, &batch, &cfg).unwrap(), 0.0);
        let g = loss_gradient(&p, &batch, &cfg).unwrap();
        assert!(g.raw_density.iter().all(|v| *v == 0.0));
        assert!(g.color.iter().all(|c| *c == [0.0; 3]));

        let empty = FieldParams::uniform(GridDims::cube(2).unwrap(), cube(), -1e3, [0.0; 3]);
        let ray = Ray::new(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0));
        let l = photometric_loss(&empty, &[(ray, [1.0, 0.0, 0.0])], &cfg).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(photometric_loss(&empty, &[], &cfg).is_err());
    }

    #[test]
    fn loss_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng);
        let cfg = RaySamplingConfig::with_samples(24);
        let batch = random_batch(&mut rng, 12);
        let mut rev = batch.clone();
        rev.reverse();
        let a = photometric_loss(&p, &batch, &cfg).unwrap();
        let b = photometric_loss(&p, &rev, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
    }

    #[test]
    fn untouched_cells_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng);
        // a single ray along the +x edge region never reaches the -x half
        let ray = Ray::new(Vec3::new(0.9, 0.9, 3.0), Vec3::new(0.0, 0.0, -1.0));
        let g = loss_gradient(&p, &[(ray, [1.0, 0.0, 0.0])], &RaySamplingConfig::with_samples(32)).unwrap();
        let d = p.dims();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..4 {
                    let idx = d.index(i, j, k);
                    assert_eq!(g.raw_density[idx], 0.0);
                    assert_eq!(g.color[idx], [0.0; 3]);
                }
            }
        }
        assert!(g.raw_density.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = RaySamplingConfig::with_samples(32);
        let p = random_params(&mut rng);
        let batch = random_batch(&mut rng, 8);
        let g = loss_gradient(&p, &batch, &cfg).unwrap();
        let touched: Vec<usize> = (0..p.param_count()).filter(|&i| g.get(i) != 0.0).collect();
        let h = 1e-4;
        for _ in 0..30 {
            let i = touched[rng.random_range(0..touched.len())];
            let mut plus = p.clone();
            plus.set_param(i, p.param(i) + h);
            let mut minus = p.clone();
            minus.set_param(i, p.param(i) - h);
            let fd = (photometric_loss(&plus, &batch, &cfg).unwrap() - photometric_loss(&minus, &batch, &cfg).unwrap())
                / (2.0 * h);
            let a = g.get(i);
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            assert!(rel < 1e-4 || (a - fd).abs() < 1e-10, "param {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn gradient_is_worker_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng);
        let batch = random_batch(&mut rng, 100);
        let cfg = RaySamplingConfig::with_samples(32);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| loss_and_gradient(&p, &batch, &cfg).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1, l4);
        assert_eq!(g1, g4);
    }

    fn tiny_train_set() -> (VoxelGrid, TrainSet) {
        let dims = GridDims::cube(8).unwrap();
        let mut dens = vec![0.0f32; dims.len()];
        let mut col = vec![[0.0f32; 3]; dims.len()];
        for k in 2..6 {
            for j in 2..6 {
                for i in 2..6 {
                    dens[dims.index(i, j, k)] = 6.0;
                    col[dims.index(i, j, k)] = [0.9, 0.3 + 0.1 * i as f32, 0.2];
                }
            }
        }
        let grid = VoxelGrid::new(dims, cube(), dens, col).unwrap();
        let intr = CameraIntrinsics::with_default_focal(12, 12).unwrap();
        let cfg = RaySamplingConfig::with_samples(32);
        let views = (0..6)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 6.0;
                let pose = Pose::look_at(Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.8), Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0))
                    .unwrap();
                (crate::renderer::render_image(&grid, &pose, &intr, &cfg, None).unwrap(), pose)
            })
            .collect();
        (grid, TrainSet::new(intr, views).unwrap())
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (grid, train) = tiny_train_set();
        let cfg = FitConfig {
            iterations: 0,
            ..Default::default()
        };
        let r = fit_field(&train, grid.dims(), *grid.bbox(), &cfg).unwrap();
        assert!(r.losses.is_empty());
        let init = FieldParams::uniform(grid.dims(), *grid.bbox(), -2.0, [0.5; 3]);
        assert_eq!(r.params, init);
    }

    #[test]
    fn fit_is_deterministic_and_reduces_loss() {
        let (grid, train) = tiny_train_set();
        let cfg = FitConfig {
            iterations: 150,
            rays_per_step: 128,
            // rays overlap heavily on an 8³ grid; the default step is sized for 32³
            step_size: 2000.0,
            step_decay: 1.0,
            sampling: RaySamplingConfig::with_samples(32),
            seed: 7,
            ..Default::default()
        };
        let a = fit_field(&train, grid.dims(), *grid.bbox(), &cfg).unwrap();
        let b = fit_field(&train, grid.dims(), *grid.bbox(), &cfg).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.losses, b.losses);
        let head: f64 = a.losses[..10].iter().sum();
        let tail: f64 = a.losses[a.losses.len() - 10..].iter().sum();
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        assert!(a.grid.color().iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        assert!(a.loss_csv().starts_with("iteration,loss\n1,"));
    }

    #[test]
    fn divergence_is_reported() {
        let (grid, train) = tiny_train_set();
        let cfg = FitConfig {
            iterations: 50,
            rays_per_step: 64,
            step_size: f64::INFINITY,
            sampling: RaySamplingConfig::with_samples(16),
            ..Default::default()
        };
        match fit_field(&train, grid.dims(), *grid.bbox(), &cfg) {
            Err(Error::Diverged { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.losses.len())),
        }
    }

    #[test]
    fn train_set_validation() {
        let intr = CameraIntrinsics::with_default_focal(4, 4).unwrap();
        assert!(TrainSet::new(intr, vec![]).is_err());
        assert!(TrainSet::new(intr, vec![(Image::black(5, 4), Pose::IDENTITY)]).is_err());
    }
}
