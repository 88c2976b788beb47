//! Quadrature volume rendering.
//!
//! Along each ray the segment inside the field's box is split into
//! `n_samples` equal bins. With sample densities `σ_k`, spacings `δ_k` and
//! colors `c_k`:
//!
//! ```text
//! α_k = 1 - exp(-σ_k δ_k)
//! T_1 = 1,  T_{k+1} = T_k (1 - α_k)       (= exp(-Σ_{k'≤k} σ_k' δ_k'))
//! C   = Σ_k T_k α_k c_k
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pixel_ray_unchecked, CameraIntrinsics, Pixel, Pose, Ray};
use crate::radiance_field::{RadianceField, Rgb};
use crate::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySamplingConfig {
    pub t_near: f64,
    pub t_far: f64,
    pub n_samples: usize,
    /// Jitter each sample uniformly inside its bin.
    pub stratified: bool,
}

impl Default for RaySamplingConfig {
    fn default() -> Self {
        RaySamplingConfig {
            t_near: 0.01,
            t_far: 1.0e4,
            n_samples: 128,
            stratified: false,
        }
    }
}

impl RaySamplingConfig {
    pub fn with_samples(n_samples: usize) -> Self {
        RaySamplingConfig {
            n_samples,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_near >= 0.0 && self.t_near < self.t_far) {
            return Err(Error::invalid(format!(
                "ray sampling needs 0 <= t_near < t_far, got [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("ray sampling needs n_samples >= 1"));
        }
        Ok(())
    }
}

/// Portion of a ray that is marched: `n` bins of width `bin` from `start`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Segment {
    pub start: f64,
    pub bin: f64,
    pub n: usize,
}

impl Segment {
    /// Clips `[t_near, t_far]` to the box; `None` if the ray misses it.
    pub fn clip(field_box: &crate::radiance_field::BoundingBox, ray: &Ray, cfg: &RaySamplingConfig) -> Option<Self> {
        let (t0, t1) = field_box.intersect(ray)?;
        let start = t0.max(cfg.t_near);
        let end = t1.min(cfg.t_far);
        if !(end > start) {
            return None;
        }
        Some(Segment {
            start,
            bin: (end - start) / cfg.n_samples as f64,
            n: cfg.n_samples,
        })
    }

    /// Midpoint of bin `k`; spacing between midpoints is exactly one bin.
    #[inline]
    pub fn midpoint(&self, k: usize) -> f64 {
        self.start + (k as f64 + 0.5) * self.bin
    }
}

/// Color plus accumulated opacity `Σ T_k α_k`, before clamping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub rgb: Rgb,
    pub opacity: f64,
}

/// Front-to-back compositing of explicit samples with the running-product
/// transmittance.
pub fn composite_samples(sigma: &[f64], delta: &[f64], colors: &[Rgb]) -> Composite {
    assert_eq!(sigma.len(), delta.len());
    assert_eq!(sigma.len(), colors.len());
    let mut acc = Composite {
        rgb: [0.0; 3],
        opacity: 0.0,
    };
    let mut transmittance = 1.0;
    for k in 0..sigma.len() {
        let step = (-sigma[k] * delta[k]).exp();
        let w = transmittance * (1.0 - step);
        for ch in 0..3 {
            acc.rgb[ch] += w * colors[k][ch];
        }
        acc.opacity += w;
        transmittance *= step;
    }
    acc
}

/// Composites a ray through `field` without clamping.
pub fn composite_ray<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    cfg: &RaySamplingConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<Composite> {
    cfg.validate()?;
    let mut acc = Composite {
        rgb: [0.0; 3],
        opacity: 0.0,
    };
    let Some(seg) = Segment::clip(field.bbox(), ray, cfg) else {
        return Ok(acc);
    };
    let mut transmittance = 1.0;
    let mut add = |t: f64, delta: f64| {
        let (sigma, c) = field.sample(ray.at(t), ray.direction);
        let step = (-sigma * delta).exp();
        let w = transmittance * (1.0 - step);
        for ch in 0..3 {
            acc.rgb[ch] += w * c[ch];
        }
        acc.opacity += w;
        transmittance *= step;
    };

    if cfg.stratified {
        let rng = rng.ok_or_else(|| Error::invalid("stratified sampling needs a random source"))?;
        let mut t = seg.start + rng.random::<f64>() * seg.bin;
        for k in 0..seg.n {
            if k + 1 < seg.n {
                let next = seg.start + (k as f64 + 1.0 + rng.random::<f64>()) * seg.bin;
                add(t, next - t);
                t = next;
            } else {
                add(t, seg.bin);
            }
        }
    } else {
        for k in 0..seg.n {
            add(seg.midpoint(k), seg.bin);
        }
    }
    Ok(acc)
}

pub fn clamp_rgb(c: Rgb) -> Rgb {
    c.map(|v| v.clamp(0.0, 1.0))
}

/// Renders one ray; `rng` is required when `cfg.stratified` is set.
pub fn render_ray<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    cfg: &RaySamplingConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<Rgb> {
    Ok(clamp_rgb(composite_ray(field, ray, cfg, rng)?.rgb))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelSample {
    pub pixel: Pixel,
    pub color: Rgb,
}

/// Renders the given pixels in parallel; output order follows `coords`.
///
/// Stratified jitter for pixel `i` of the list is drawn from stream `i` of
/// `seed`, so results do not depend on the worker count.
pub fn render_pixels<F: RadianceField + ?Sized>(
    field: &F,
    pose: &Pose,
    intr: &CameraIntrinsics,
    coords: &[Pixel],
    cfg: &RaySamplingConfig,
    seed: Option<u64>,
) -> Result<Vec<PixelSample>> {
    cfg.validate()?;
    if cfg.stratified && seed.is_none() {
        return Err(Error::invalid("stratified sampling needs a seed"));
    }
    if let Some(px) = coords.iter().find(|p| p.u >= intr.width || p.v >= intr.height) {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) outside {}x{} raster",
            px.u, px.v, intr.width, intr.height
        )));
    }
    coords
        .par_iter()
        .enumerate()
        .map(|(i, &px)| {
            let ray = pixel_ray_unchecked(intr, pose, px.u as f64, px.v as f64);
            let color = match seed {
                Some(s) if cfg.stratified => {
                    let mut rng = stream_rng(s, i as u64);
                    render_ray(field, &ray, cfg, Some(&mut rng))?
                }
                _ => render_ray(field, &ray, cfg, None)?,
            };
            Ok(PixelSample { pixel: px, color })
        })
        .collect()
}

/// Full-frame render in row-major order.
pub fn render_image<F: RadianceField + ?Sized>(
    field: &F,
    pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &RaySamplingConfig,
    seed: Option<u64>,
) -> Result<Image> {
    intr.validate()?;
    let coords: Vec<Pixel> = (0..intr.height)
        .flat_map(|v| (0..intr.width).map(move |u| Pixel::new(u, v)))
        .collect();
    let samples = render_pixels(field, pose, intr, &coords, cfg, seed)?;
    Ok(Image {
        width: intr.width,
        height: intr.height,
        pixels: samples.into_iter().map(|s| s.color).collect(),
    })
}

/// Row-major linear RGB raster with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width as usize * height as usize,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| p.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return Err(Error::invalid("image channels must lie in [0, 1]"));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn black(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, px: Pixel) -> Rgb {
        self.pixels[px.v as usize * self.width as usize + px.u as usize]
    }

    /// Binary PPM (`P6`, maxval 255), channels quantized by `round(c * 255)`.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            for c in p {
                out.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        if magic != "P6" {
            return Err(Error::Format(format!("expected PPM magic `P6`, found `{magic}`")));
        }
        let mut num = |what: &str| -> Result<u32> {
            let t = token()?;
            t.parse()
                .map_err(|_| Error::Format(format!("bad PPM {what} `{t}`")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = &bytes[pos + 1..];
        let n = width as usize * height as usize;
        if data.len() != n * 3 {
            return Err(Error::Format(format!(
                "PPM raster of {width}x{height} needs {} bytes, found {}",
                n * 3,
                data.len()
            )));
        }
        let pixels = data
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Image::new(width, height, pixels)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}
