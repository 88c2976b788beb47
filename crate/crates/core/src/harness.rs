//! Synthetic relocalization benchmark.
//!
//! A scene is voxelized, training and query views are rendered from known
//! poses, each query gets an initial estimate a bounded random offset away
//! from its ground truth, and the particle filter refines it. Reported
//! metrics are median translation/rotation errors and the improvement of
//! those medians from the first filter iteration to the last.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_fit::{fit_field, FitConfig, TrainSet};
use crate::geometry::{parse_pose_list, pose_error, sample_pose_in_ball, CameraIntrinsics, Pose, PoseError, Vec3};
use crate::mcl::{refine, FilterConfig, Trace};
use crate::radiance_field::{build_procedural_scene, toml_error, GridDims, RadianceField, SceneSpec, VoxelGrid};
use crate::renderer::{render_image, Image, RaySamplingConfig};
use crate::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    /// Defaults to the image width.
    #[serde(default)]
    pub focal: Option<f64>,
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let f = self.focal.unwrap_or(self.width as f64);
        CameraIntrinsics::new(
            self.width,
            self.height,
            f,
            f,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
        )
    }
}

/// Cameras on a horizontal circle, all looking at `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub count: usize,
    pub target: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetSpec {
    pub translation: f64,
    pub rotation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub camera: CameraSpec,
    pub orbit: OrbitSpec,
    /// Explicit training poses (`tx ty tz qw qx qy qz`); replaces the orbit.
    #[serde(default)]
    pub train_poses: Vec<String>,
    pub queries: usize,
    /// Query heights and look-at points vary by up to this much (meters).
    #[serde(default = "default_query_jitter")]
    pub query_jitter: f64,
    pub offset: OffsetSpec,
    /// Quadrature samples for rendering training and query images.
    #[serde(default = "default_render_samples")]
    pub render_samples: usize,
    /// When > 0 the filter runs on a field fitted to the training views
    /// instead of the generating grid.
    #[serde(default)]
    pub fit_iterations: usize,
    #[serde(default)]
    pub filter: FilterConfig,
    pub scene: SceneSpec,
}

fn default_query_jitter() -> f64 {
    0.2
}

fn default_render_samples() -> usize {
    128
}

pub const DEFAULT_BENCHMARK: &str = include_str!("default_benchmark.toml");

impl BenchmarkSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: BenchmarkSpec = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// 64³ grid, five primitives in a 2 m box, 60 orbit views, 20 queries
    /// at 160×120 offset by up to 0.05 m / 5°.
    pub fn default_benchmark() -> Self {
        Self::parse(DEFAULT_BENCHMARK).expect("bundled benchmark spec is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("benchmark spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        GridDims::new(self.dims[0], self.dims[1], self.dims[2])?;
        self.camera.intrinsics()?;
        self.scene.validate()?;
        self.filter.validate()?;
        if self.train_poses.is_empty() && self.orbit.count == 0 {
            return Err(Error::invalid("benchmark needs at least one training view"));
        }
        if !(self.orbit.radius > 0.0) {
            return Err(Error::invalid("orbit radius must be > 0"));
        }
        for (name, v) in [
            ("offset.translation", self.offset.translation),
            ("offset.rotation_deg", self.offset.rotation_deg),
            ("query_jitter", self.query_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if self.render_samples == 0 {
            return Err(Error::invalid("render_samples must be >= 1"));
        }
        self.training_poses()?;
        Ok(())
    }

    pub fn grid_dims(&self) -> Result<GridDims> {
        GridDims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    fn orbit_pose(&self, angle: f64, dz: f64, target_shift: Vec3) -> Result<Pose> {
        let o = &self.orbit;
        let c = Vec3::from_array(o.center);
        let eye = c + Vec3::new(o.radius * angle.cos(), o.radius * angle.sin(), o.height + dz);
        Pose::look_at(eye, Vec3::from_array(o.target) + target_shift, Vec3::new(0.0, 0.0, 1.0))
    }

    pub fn training_poses(&self) -> Result<Vec<Pose>> {
        if !self.train_poses.is_empty() {
            return parse_pose_list(&self.train_poses.join("\n"));
        }
        (0..self.orbit.count)
            .map(|i| self.orbit_pose(i as f64 * std::f64::consts::TAU / self.orbit.count as f64, 0.0, Vec3::ZERO))
            .collect()
    }

    fn sampling(&self) -> RaySamplingConfig {
        RaySamplingConfig::with_samples(self.render_samples)
    }
}

#[derive(Clone, Debug)]
pub struct Query {
    pub id: usize,
    pub image: Image,
    pub ground_truth: Pose,
    pub initial: Pose,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub grid: VoxelGrid,
    pub intrinsics: CameraIntrinsics,
    pub train: TrainSet,
    pub queries: Vec<Query>,
}

pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let grid = build_procedural_scene(&spec.scene, spec.grid_dims()?)?;
    let intr = spec.camera.intrinsics()?;
    let sampling = spec.sampling();

    let views = spec
        .training_poses()?
        .into_iter()
        .map(|pose| Ok((render_image(&grid, &pose, &intr, &sampling, None)?, pose)))
        .collect::<Result<Vec<_>>>()?;
    let train = TrainSet::new(intr, views)?;

    let mut rng = stream_rng(spec.seed, 0);
    let j = spec.query_jitter;
    let mut queries = Vec::with_capacity(spec.queries);
    for id in 0..spec.queries {
        use rand::Rng;
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        let dz = rng.random_range(-1.0..=1.0) * j;
        let shift = Vec3::new(
            rng.random_range(-1.0..=1.0) * j * 0.5,
            rng.random_range(-1.0..=1.0) * j * 0.5,
            rng.random_range(-1.0..=1.0) * j * 0.5,
        );
        let ground_truth = spec.orbit_pose(angle, dz, shift)?;
        let initial = sample_pose_in_ball(
            &ground_truth,
            spec.offset.translation,
            spec.offset.rotation_deg.to_radians(),
            &mut rng,
        )?;
        let image = render_image(&grid, &ground_truth, &intr, &sampling, None)?;
        queries.push(Query {
            id,
            image,
            ground_truth,
            initial,
        });
    }
    Ok(Benchmark {
        grid,
        intrinsics: intr,
        train,
        queries,
    })
}

/// `(before - after) / before · 100`; zero when nothing changed.
pub fn improvement_pct(before: f64, after: f64) -> f64 {
    if before == after {
        0.0
    } else {
        (before - after) / before * 100.0
    }
}

/// Middle order statistic, or mean of the two middle ones for even length.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryMetrics {
    pub query_id: usize,
    pub initial: PoseError,
    pub iter1: PoseError,
    pub final_: PoseError,
    pub wall_ms: f64,
}

/// Aggregates written to `summary.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub median_terr_m: f64,
    pub median_rerr_deg: f64,
    pub impr_t_pct: f64,
    pub impr_r_pct: f64,
    pub queries: usize,
    pub failures: usize,
}

pub const SUMMARY_HEADER: &str = "median_terr_m,median_rerr_deg,impr_t_pct,impr_r_pct,queries,failures";
pub const REPORT_HEADER: &str =
    "query_id,init_terr_m,init_rerr_deg,it1_terr_m,it1_rerr_deg,final_terr_m,final_rerr_deg,wall_ms";

impl Summary {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.median_terr_m, self.median_rerr_deg, self.impr_t_pct, self.impr_r_pct, self.queries, self.failures
        )
    }

    /// Parses a `summary.csv` body; `None` for a header-only file.
    pub fn parse_csv(text: &str) -> Result<Option<Summary>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == SUMMARY_HEADER => {}
            _ => return Err(Error::Parse { line: 1, message: "unexpected summary header".into() }),
        }
        let Some(row) = lines.next() else {
            return Ok(None);
        };
        let f: Vec<&str> = row.split(',').collect();
        let bad = |_| Error::Parse { line: 2, message: format!("bad summary row `{row}`") };
        if f.len() != 6 {
            return Err(Error::Parse { line: 2, message: format!("bad summary row `{row}`") });
        }
        Ok(Some(Summary {
            median_terr_m: f[0].parse().map_err(bad)?,
            median_rerr_deg: f[1].parse().map_err(bad)?,
            impr_t_pct: f[2].parse().map_err(bad)?,
            impr_r_pct: f[3].parse().map_err(bad)?,
            queries: f[4].parse().map_err(|_| Error::Parse { line: 2, message: "bad query count".into() })?,
            failures: f[5].parse().map_err(|_| Error::Parse { line: 2, message: "bad failure count".into() })?,
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_query: Vec<QueryMetrics>,
    /// `None` when no query ran at all.
    pub summary: Option<Summary>,
    pub median_it1_terr_m: f64,
    pub median_it1_rerr_deg: f64,
    /// `(iteration, median translation error, median rotation error)`.
    pub convergence: Vec<(usize, f64, f64)>,
    pub failures: usize,
}

impl MetricsReport {
    pub fn aggregate(per_query: Vec<QueryMetrics>, traces: &[&Trace], failures: usize) -> Self {
        let col = |f: &dyn Fn(&QueryMetrics) -> f64| -> Vec<f64> { per_query.iter().map(f).collect() };
        let med = |v: Vec<f64>| median(&v).unwrap_or(f64::NAN);
        let it1_t = med(col(&|q| q.iter1.translation_err));
        let it1_r = med(col(&|q| q.iter1.rotation_err));
        let fin_t = med(col(&|q| q.final_.translation_err));
        let fin_r = med(col(&|q| q.final_.rotation_err));
        let summary = (!per_query.is_empty() || failures > 0).then(|| Summary {
            median_terr_m: fin_t,
            median_rerr_deg: fin_r,
            impr_t_pct: improvement_pct(it1_t, fin_t),
            impr_r_pct: improvement_pct(it1_r, fin_r),
            queries: per_query.len(),
            failures,
        });

        let iterations = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
        let convergence = (0..iterations)
            .map(|i| {
                let errs: Vec<PoseError> = traces.iter().filter_map(|t| t.records[i].error).collect();
                let t: Vec<f64> = errs.iter().map(|e| e.translation_err).collect();
                let r: Vec<f64> = errs.iter().map(|e| e.rotation_err).collect();
                (
                    traces[0].records[i].iteration,
                    median(&t).unwrap_or(f64::NAN),
                    median(&r).unwrap_or(f64::NAN),
                )
            })
            .collect();

        MetricsReport {
            per_query,
            summary,
            median_it1_terr_m: it1_t,
            median_it1_rerr_deg: it1_r,
            convergence,
            failures,
        }
    }

    pub fn report_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for q in &self.per_query {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                q.query_id,
                q.initial.translation_err,
                q.initial.rotation_err,
                q.iter1.translation_err,
                q.iter1.rotation_err,
                q.final_.translation_err,
                q.final_.rotation_err,
                q.wall_ms
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        if let Some(sum) = &self.summary {
            s.push_str(&sum.to_csv_row());
            s.push('\n');
        }
        s
    }

    pub fn convergence_csv(&self) -> String {
        let mut s = String::from("iteration,median_terr_m,median_rerr_deg\n");
        for (i, t, r) in &self.convergence {
            let _ = writeln!(s, "{i},{t},{r}");
        }
        s
    }
}

/// Writes `report.csv`, `summary.csv` and `convergence.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("report.csv", report.report_csv()),
        ("summary.csv", report.summary_csv()),
        ("convergence.csv", report.convergence_csv()),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn emit_traces(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref().join("traces");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (id, trace) in &result.traces {
        let path = dir.join(format!("query_{id:03}.csv"));
        fs::write(&path, trace.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub report: MetricsReport,
    /// Traces of the queries that completed, by query id.
    pub traces: Vec<(usize, Trace)>,
    /// Failed query ids with their error messages.
    pub failed: Vec<(usize, String)>,
}

/// Stream index of the filter randomness for query `id`.
fn query_stream(id: usize) -> u64 {
    (1u64 << 32) + id as u64
}

pub fn run_experiment(spec: &BenchmarkSpec) -> Result<ExperimentResult> {
    let bench = generate_benchmark(spec)?;
    run_on_benchmark(spec, &bench)
}

/// Refines every query of an already generated benchmark.
pub fn run_on_benchmark(spec: &BenchmarkSpec, bench: &Benchmark) -> Result<ExperimentResult> {
    let fitted;
    let map: &VoxelGrid = if spec.fit_iterations > 0 {
        let cfg = FitConfig {
            iterations: spec.fit_iterations,
            seed: spec.seed,
            ..Default::default()
        };
        fitted = fit_field(&bench.train, bench.grid.dims(), *RadianceField::bbox(&bench.grid), &cfg)?.grid;
        &fitted
    } else {
        &bench.grid
    };

    let outcomes: Vec<(usize, Result<(QueryMetrics, Trace)>)> = bench
        .queries
        .par_iter()
        .map(|q| {
            let start = Instant::now();
            let mut rng = stream_rng(spec.seed, query_stream(q.id));
            let out = refine(
                map,
                &q.image,
                &bench.intrinsics,
                &q.initial,
                &spec.filter,
                &mut rng,
                Some(&q.ground_truth),
            )
            .map(|(est, trace)| {
                let iter1 = trace
                    .records
                    .get(1)
                    .and_then(|r| r.error)
                    .unwrap_or_else(|| pose_error(&q.initial, &q.ground_truth));
                let m = QueryMetrics {
                    query_id: q.id,
                    initial: pose_error(&q.initial, &q.ground_truth),
                    iter1,
                    final_: pose_error(&est, &q.ground_truth),
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                };
                log::info!(
                    "query {}: {:.4} m / {:.3}° -> {:.4} m / {:.3}°",
                    q.id,
                    m.iter1.translation_err,
                    m.iter1.rotation_err,
                    m.final_.translation_err,
                    m.final_.rotation_err
                );
                (m, trace)
            });
            (q.id, out)
        })
        .collect();

    let mut per_query = Vec::new();
    let mut traces = Vec::new();
    let mut failed = Vec::new();
    for (id, out) in outcomes {
        match out {
            Ok((m, t)) => {
                per_query.push(m);
                traces.push((id, t));
            }
            Err(e) => {
                log::warn!("query {id} failed: {e}");
                failed.push((id, e.to_string()));
            }
        }
    }
    let refs: Vec<&Trace> = traces.iter().map(|(_, t)| t).collect();
    let report = MetricsReport::aggregate(per_query, &refs, failed.len());
    Ok(ExperimentResult { report, traces, failed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> BenchmarkSpec {
        let mut s = BenchmarkSpec::default_benchmark();
        s.dims = [16, 16, 16];
        s.camera = CameraSpec { width: 24, height: 18, focal: None };
        s.orbit.count = 3;
        s.queries = 3;
        s.render_samples = 32;
        s.filter.n_particles = 12;
        s.filter.annealed_particles = 6;
        s.filter.m_pixels = 24;
        s.filter.iterations = 4;
        s.filter.render_samples = 32;
        s
    }

    #[test]
    fn median_matches_sort_oracle() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[7.0]), Some(7.0));
    }

    #[test]
    fn improvement_sign_convention() {
        assert_eq!(improvement_pct(0.2, 0.2), 0.0);
        assert_eq!(improvement_pct(0.0, 0.0), 0.0);
        assert_eq!(improvement_pct(2.0, 1.0), 50.0);
        assert!(improvement_pct(1.0, 1.5) < 0.0);
    }

    #[test]
    fn default_spec_parses_and_matches_documented_shape() {
        let s = BenchmarkSpec::default_benchmark();
        assert_eq!(s.dims, [64, 64, 64]);
        assert_eq!((s.camera.width, s.camera.height), (160, 120));
        assert_eq!((s.orbit.count, s.queries), (60, 20));
        assert_eq!(s.scene.primitives.len(), 5);
        assert_eq!((s.offset.translation, s.offset.rotation_deg), (0.05, 5.0));
        assert_eq!(s.filter.n_particles, 200);
        assert_eq!(s.filter.iterations, 50);
        assert_eq!(BenchmarkSpec::parse(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn bad_spec_reports_line() {
        let text = DEFAULT_BENCHMARK.replacen("queries = 20", "queries = \"many\"", 1);
        let line = text.lines().position(|l| l.contains("\"many\"")).unwrap() + 1;
        match BenchmarkSpec::parse(&text) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic_and_contained() {
        let s = small_spec();
        let a = generate_benchmark(&s).unwrap();
        let b = generate_benchmark(&s).unwrap();
        assert_eq!(a.train.views.len(), 3);
        for (qa, qb) in a.queries.iter().zip(&b.queries) {
            assert_eq!(qa.image.to_ppm(), qb.image.to_ppm());
            let e = pose_error(&qa.initial, &qa.ground_truth);
            assert!(e.translation_err <= s.offset.translation + 1e-12);
            assert!(e.rotation_err <= s.offset.rotation_deg + 1e-9);
        }
        let mut empty = s.clone();
        empty.queries = 0;
        let e = generate_benchmark(&empty).unwrap();
        assert!(e.queries.is_empty());
        assert_eq!(e.train.views.len(), 3);
    }

    #[test]
    fn empty_query_set_emits_header_only_csvs() {
        let mut s = small_spec();
        s.queries = 0;
        let r = run_experiment(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r.report, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("report.csv")).unwrap(), format!("{REPORT_HEADER}\n"));
        assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap(), format!("{SUMMARY_HEADER}\n"));
    }

    #[test]
    fn zero_offset_zero_noise_is_a_fixed_point() {
        let mut s = small_spec();
        s.offset = OffsetSpec { translation: 0.0, rotation_deg: 0.0 };
        s.filter.init_radius_t = 0.0;
        s.filter.init_radius_r = 0.0;
        s.filter.sigma_t = 0.0;
        s.filter.sigma_r = 0.0;
        let r = run_experiment(&s).unwrap();
        let sum = r.report.summary.unwrap();
        assert!(sum.median_terr_m < 1e-9 && sum.median_rerr_deg < 1e-9);
        assert_eq!(sum.impr_t_pct, 0.0);
    }

    #[test]
    fn report_aggregates_and_round_trips() {
        let s = small_spec();
        let r = run_experiment(&s).unwrap();
        let rep = &r.report;
        let finals: Vec<f64> = rep.per_query.iter().map(|q| q.final_.translation_err).collect();
        let sum = rep.summary.unwrap();
        assert_eq!(sum.median_terr_m, median(&finals).unwrap());
        assert_eq!(sum.queries + sum.failures, 3);
        assert_eq!(rep.convergence.len(), s.filter.iterations + 1);

        let dir = tempfile::tempdir().unwrap();
        emit_report(rep, dir.path()).unwrap();
        let first = fs::read(dir.path().join("summary.csv")).unwrap();
        emit_report(rep, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), first);
        let parsed = Summary::parse_csv(&String::from_utf8(first).unwrap()).unwrap().unwrap();
        assert_eq!(parsed, sum);

        let again = run_experiment(&s).unwrap();
        assert_eq!(again.report.summary_csv(), rep.summary_csv());
        assert_eq!(again.traces, r.traces);
    }
}
