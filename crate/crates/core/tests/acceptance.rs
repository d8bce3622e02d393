//! Acceptance gates. One line per criterion:
//!
//! ```text
//! PASS  <criterion>  <measurements>  [seconds]
//! FAIL  <criterion>  <first violated check>  [seconds]
//! ```
//!
//! Failing gates are reported, not hidden. The process exits nonzero on any
//! failure only with `ACCEPTANCE_STRICT=1`, so the workspace test run still
//! completes and shows every line.

use std::sync::Arc;
use std::time::{Duration, Instant};

use curvesketch::curves::{bernstein, ndc_loss, ndc_penalty, project_curve, Bezier2, BezierCurve, CurveSet, Stage, NDC_T_GRID};
use curvesketch::deform::{apply_deformation, build_skinning, displace_handles};
use curvesketch::eval::{coverage, coverage_brute_force};
use curvesketch::geometry::camera::default_fov_deg;
use curvesketch::geometry::{normalize_mesh, orbit_camera, primitives, sample_surface, Camera, Mesh, ProjectionKind, ViewSampler};
use curvesketch::image::GrayImage;
use curvesketch::keypoints::{localized_loss, visible_projection, weight_map, weight_value, Keypoint, WeightMap};
use curvesketch::perception::{semantic_loss, ConvNet, PatchSimilarity};
use curvesketch::pipeline::{self, Checkpoint, RunConfig, Scene, StageControl};
use curvesketch::raster::{RasterBackend, RasterParams, ReferenceRasterizer};
use curvesketch::sdf::{fit_neural_sdf, sdf_loss, DistanceField, DistanceOracle, NeuralSdf, SdfConfig};
use curvesketch::targets::{render_surface, RenderOptions};
use curvesketch::{Vec2, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Report {
    failures: usize,
    total: usize,
}

impl Report {
    fn run(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let out = f();
        let dt = t.elapsed();
        let out = out.and_then(|m| {
            if dt > budget {
                Err(format!("{m}; runtime {:.1}s over the {:.0}s budget", dt.as_secs_f64(), budget.as_secs_f64()))
            } else {
                Ok(m)
            }
        });
        self.total += 1;
        match out {
            Ok(m) => println!("PASS  {name}  {m}  [{:.1}s]", dt.as_secs_f64()),
            Err(m) => {
                self.failures += 1;
                println!("FAIL  {name}  {m}  [{:.1}s]", dt.as_secs_f64());
            }
        }
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn sphere() -> Mesh {
    normalize_mesh(&primitives::icosphere(3)).unwrap()
}

fn cylinder() -> Mesh {
    normalize_mesh(&primitives::textured_cylinder(48, 16)).unwrap()
}

fn random_curve(rng: &mut impl Rng, spread: f64) -> BezierCurve {
    BezierCurve::new(
        std::array::from_fn(|_| Vec3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread))),
        Stage::Geometry,
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

// ───────────────────────────── curve math ─────────────────────────────

fn curve_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..50 {
        let b = random_curve(&mut rng, 1.0);
        let p = b.control_points;
        ensure!(b.eval(0.0) == p[0] && b.eval(1.0) == p[3], "endpoints not interpolated");
        let mid = (p[0] + p[1] * 3.0 + p[2] * 3.0 + p[3]) / 8.0;
        ensure!((b.eval(0.5) - mid).norm() < 1e-12, "midpoint differs from (p0 + 3p1 + 3p2 + p3)/8");

        // Convex hull: no sample exceeds the support of the control points.
        for _ in 0..16 {
            let u = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let support = p.iter().map(|q| q.dot(&u)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..=32 {
                ensure!(b.eval(i as f64 / 32.0).dot(&u) <= support + 1e-12, "sample outside the control hull");
            }
        }

        // Affine equivariance.
        let a = nalgebra::Matrix3::new(
            rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0),
        );
        let tr = Vec3::new(0.3, -1.1, 2.0);
        let mapped = b.map_points(|q| a * q + tr);
        for i in 0..=16 {
            let t = i as f64 / 16.0;
            ensure!((mapped.eval(t) - (a * b.eval(t) + tr)).norm() < 1e-12, "affine equivariance violated at t={t}");
        }

        // d B / d t and d B / d p_j against central differences.
        let h = 1e-6;
        for &t in &[0.1, 0.37, 0.5, 0.82] {
            let fd = (b.eval(t + h) - b.eval(t - h)) / (2.0 * h);
            let an = b.derivative(t);
            for k in 0..3 {
                if an[k].abs() > 1e-3 {
                    worst_grad = worst_grad.max(rel_err(fd[k], an[k]));
                }
            }
            let w = bernstein(t);
            for j in 0..4 {
                let mut plus = b.clone();
                plus.control_points[j].x += h;
                let mut minus = b.clone();
                minus.control_points[j].x -= h;
                let fd = (plus.eval(t).x - minus.eval(t).x) / (2.0 * h);
                worst_grad = worst_grad.max(rel_err(fd, w[j]));
            }
        }
    }
    // Projection Jacobian against central differences.
    let cam = orbit_camera(20.0, 40.0, 8.0, default_fov_deg(), 224).unwrap();
    for _ in 0..20 {
        let b = random_curve(&mut rng, 0.3);
        let pc = project_curve(&b, &cam);
        let h = 1e-6;
        for j in 0..4 {
            for k in 0..3 {
                let mut q = b.control_points[j];
                q[k] += h;
                let up = cam.project(&q).uv;
                q[k] -= 2.0 * h;
                let dn = cam.project(&q).uv;
                let fd = (up - dn) / (2.0 * h);
                for axis in 0..2 {
                    let an = pc.jacobians[j][axis][k];
                    if an.abs() > 1e-3 {
                        worst_grad = worst_grad.max(rel_err(fd[axis], an));
                    }
                }
            }
        }
    }
    ensure!(worst_grad < 1e-6, "gradient relative error {worst_grad:.2e} ≥ 1e-6");
    Ok(format!("max gradient rel. err {worst_grad:.1e}"))
}

// ───────────────────────────── rasterizer ─────────────────────────────

fn random_curve2(rng: &mut impl Rng) -> Bezier2 {
    Bezier2 {
        points: std::array::from_fn(|_| Vec2::new(rng.random_range(0.15..0.85), rng.random_range(0.15..0.85))),
    }
}

fn rasterizer() -> Outcome {
    let r = ReferenceRasterizer::default();
    let p = RasterParams::new(64, 1.5);
    ensure!(r.rasterize(&[], &p).image.data.iter().all(|&v| v == 1.0), "empty scene not white");

    // Horizontal stroke along pixel-centre row 32: those pixels lie on the polyline.
    let y = 32.5 / 64.0;
    let line = Bezier2 {
        points: [Vec2::new(0.1, y), Vec2::new(0.4, y), Vec2::new(0.6, y), Vec2::new(0.9, y)],
    };
    let img = r.rasterize(&[line], &p).image;
    let on = img.get(32, 32);
    ensure!(on == 0.0, "on-curve pixel intensity {on}, expected 0");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut curves = Vec::new();
    let mut prev = r.rasterize(&curves, &p).image;
    for _ in 0..6 {
        curves.push(random_curve2(&mut rng));
        let img = r.rasterize(&curves, &p).image;
        ensure!(img.data.iter().zip(&prev.data).all(|(a, b)| a <= b), "adding a curve brightened a pixel");
        prev = img;
    }

    // Gradient of mean intensity.
    let gp = RasterParams::new(48, 3.0);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cs: Vec<Bezier2> = (0..2).map(|_| random_curve2(&mut rng)).collect();
        let n = (gp.resolution * gp.resolution) as f64;
        let mean = |c: &[Bezier2]| r.rasterize(c, &gp).image.mean();
        let fwd = r.rasterize(&cs, &gp);
        let grads = r.backward(&cs, &gp, &fwd, &GrayImage::filled(gp.resolution, gp.resolution, 1.0 / n));
        let h = 1e-6;
        for ci in 0..cs.len() {
            for j in 0..4 {
                for k in 0..2 {
                    let mut plus = cs.clone();
                    plus[ci].points[j][k] += h;
                    let mut minus = cs.clone();
                    minus[ci].points[j][k] -= h;
                    let fd = (mean(&plus) - mean(&minus)) / (2.0 * h);
                    worst = worst.max((fd - grads[ci][j][k]).abs() / fd.abs().max(grads[ci][j][k].abs()).max(1e-8));
                }
            }
        }
    }
    ensure!(worst < 1e-3, "gradient rel. err {worst:.2e} ≥ 1e-3");

    // One-pixel translation.
    let cs: Vec<Bezier2> = (0..3).map(|_| random_curve2(&mut rng)).collect();
    let moved: Vec<Bezier2> = cs.iter().map(|c| c.translated(Vec2::new(1.0 / 64.0, 0.0))).collect();
    let a = r.rasterize(&cs, &p).image;
    let b = r.rasterize(&moved, &p).image;
    let mut diff = 0.0;
    for y in 0..64 {
        for x in 0..63 {
            diff += (a.get(x, y) - b.get(x + 1, y)).abs();
        }
    }
    let mad = diff / (64.0 * 63.0);
    ensure!(mad < 0.02, "translation mean abs diff {mad:.4} ≥ 0.02");
    Ok(format!("grad rel. err {worst:.1e}, translation diff {mad:.4}"))
}

// ───────────────────────────── closed forms ─────────────────────────────

fn closed_forms() -> Outcome {
    let proj = [Vec2::new(0.3, 0.4)];
    let at = weight_value(&proj, 0.1, &Vec2::new(0.3, 0.4));
    ensure!(at == 2.0, "weight at keypoint {at}");
    let at_sigma = weight_value(&proj, 0.1, &Vec2::new(0.4, 0.4));
    ensure!((at_sigma - 1.6065).abs() < 1e-4, "weight at σ {at_sigma}");

    // Keypoint on the far side of the sphere: map ≡ 1.
    let m = sphere();
    let cam = orbit_camera(0.0, 0.0, 8.0, default_fov_deg(), 64).unwrap();
    let depth = render_surface(&m, &cam, &RenderOptions::default()).depth;
    let far = m.vertices.iter().copied().min_by(|a, b| a.x.total_cmp(&b.x)).unwrap();
    let wm = weight_map(&[Keypoint::user(far)], &cam, &depth, 0.1, 64).map_err(|e| e.to_string())?;
    ensure!(wm.image.data.iter().all(|&v| v == 1.0), "occluded keypoint altered the map");

    // NDC penalty: a curve collapsed to one point, so each of its five
    // samples (t = 0.5 and the four control points) contributes equally.
    let ortho = Camera::new(Vec3::new(0.0, 0.0, 8.0), Vec3::zeros(), Vec3::y(), default_fov_deg().to_radians(), 64)
        .unwrap()
        .with_projection(ProjectionKind::Orthographic);
    let at_uv = |uv: Vec2| -> f64 {
        let (origin, dir) = ortho.ray(&uv);
        let p = origin + dir * 8.0;
        let cs = CurveSet::new(vec![BezierCurve::new([p; 4], Stage::Geometry)], 1.5);
        ndc_loss(&cs, &ortho, 1).value / 5.0
    };
    let inside = at_uv(Vec2::new(0.5, 0.7));
    let right = at_uv(Vec2::new(1.2, 0.5));
    let corner = at_uv(Vec2::new(-0.1, 1.3));
    ensure!(inside == 0.0, "inside point penalized {inside}");
    ensure!((right - 0.2).abs() < 1e-9, "x = 1.2 gives {right}");
    ensure!((corner - 0.4).abs() < 1e-9, "(−0.1, 1.3) gives {corner}");

    // Localized loss under unit weights.
    let e = ConvNet::stub("stub-texture", 64);
    let ps = PatchSimilarity::new(ConvNet::stub("stub-lpips-vgg", 64));
    let a = GrayImage::from_fn(64, 64, |x, y| if (x + 2 * y) % 17 < 3 { 0.0 } else { 1.0 });
    let b = GrayImage::from_fn(64, 64, |x, y| if (2 * x + y) % 13 < 2 { 0.0 } else { 1.0 });
    let loc = localized_loss(&e, Some(&ps), &a, &b, &WeightMap::uniform(64), 75.0, 0.1).map_err(|e| e.to_string())?;
    let sem = semantic_loss(&e, &a, &b, 75.0).map_err(|e| e.to_string())?;
    let patch = ps.score(&a, &b).map_err(|e| e.to_string())?;
    let gap = (loc - sem - 0.1 * patch).abs();
    ensure!(gap < 1e-9, "localized − (semantic + λ·patch) = {gap:.2e}");
    Ok(format!("w = 2 / {at_sigma:.4} / ≡1, ndc = 0 / {right:.3} / {corner:.3}, reduction gap {gap:.1e}"))
}

// ───────────────────────────── SDF ─────────────────────────────

fn sdf_suite(fitted: &mut Option<Arc<NeuralSdf>>) -> Outcome {
    // Oracle exactness.
    let m = sphere();
    let oracle = DistanceOracle::new(&m).map_err(|e| e.to_string())?;
    let v0 = oracle.distance(&m.vertices[7]).abs();
    ensure!(v0 < 1e-12, "vertex distance {v0}");
    let unit = primitives::icosphere(3);
    let inner = DistanceOracle::new(&unit).map_err(|e| e.to_string())?.distance(&Vec3::zeros());
    ensure!(inner < 0.0 && inner > -1.0, "interior distance {inner}");
    let tri = m.triangle(5);
    let centroid = (tri[0] + tri[1] + tri[2]) / 3.0;
    let n = m.face_cross(5).normalize();
    let d = 1e-3;
    let off = oracle.distance(&(centroid + n * d));
    ensure!((off - d).abs() < 1e-9, "offset along normal gives {off}, expected {d}");

    // Neural fit on the sphere at the desk configuration.
    let cfg = SdfConfig::desk();
    let field = fit_neural_sdf(&m, &oracle, &cfg).map_err(|e| e.to_string())?;
    let heldout = field.report.heldout_median_error;
    ensure!(heldout < 0.01, "held-out median error {heldout:.4}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let surface = sample_surface(&m, 1000, &mut rng).map_err(|e| e.to_string())?;
    let mut abs: Vec<f64> = field.eval(&surface).into_iter().map(f64::abs).collect();
    abs.sort_by(f64::total_cmp);
    let median = abs[abs.len() / 2];
    ensure!(median < 0.01, "median |Φ| on the surface {median:.4}");

    // Curves lying on the surface.
    let cs = CurveSet::new(surface[..40].iter().map(|&p| BezierCurve::new([p; 4], Stage::Geometry)).collect(), 1.5);
    let loss = sdf_loss(&field, &cs, 16, &mut rng, true).value;
    ensure!(loss < 0.01, "on-surface curve loss {loss:.4}");
    *fitted = Some(Arc::new(field));
    Ok(format!("held-out {heldout:.4}, surface median {median:.4}, on-surface loss {loss:.4}"))
}

// ───────────────────────────── coverage ─────────────────────────────

fn coverage_suite() -> Outcome {
    let m = normalize_mesh(&primitives::icosphere(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let cs = CurveSet::new((0..4).map(|_| random_curve(&mut rng, 0.4)).collect(), 1.5);
        let fast = coverage(&m, &cs, 100, 256, seed).map_err(|e| e.to_string())?;
        let slow = coverage_brute_force(&m, &cs, 100, 256, seed).map_err(|e| e.to_string())?;
        worst = worst.max((fast - slow).abs());
    }
    ensure!(worst < 1e-6, "grid vs brute force {worst:.2e}");

    let mut cs = CurveSet::new(vec![random_curve(&mut rng, 0.4)], 1.5);
    let mut prev = coverage(&m, &cs, 2000, 256, 0).map_err(|e| e.to_string())?;
    for _ in 0..6 {
        cs.curves.push(random_curve(&mut rng, 0.4));
        let c = coverage(&m, &cs, 2000, 256, 0).map_err(|e| e.to_string())?;
        ensure!(c <= prev, "adding a curve raised coverage {prev} → {c}");
        prev = c;
    }

    let s = 2.7;
    let scaled_mesh = m.map_vertices(|v| v * s);
    let scaled = CurveSet::new(cs.curves.iter().map(|c| c.map_points(|p| p * s)).collect(), 1.5);
    let a = coverage(&m, &cs, 2000, 256, 0).map_err(|e| e.to_string())?;
    let b = coverage(&scaled_mesh, &scaled, 2000, 256, 0).map_err(|e| e.to_string())?;
    ensure!((b - s * a).abs() < 1e-9, "scaling by {s}: {b} vs {}", s * a);
    Ok(format!("grid gap {worst:.1e}, scale gap {:.1e}", (b - s * a).abs()))
}

// ───────────────────────────── desk end-to-end ─────────────────────────────

struct DeskRun {
    scene: Scene,
    cfg: RunConfig,
    stage1: Checkpoint,
    stage2: Checkpoint,
    init_coverage: f64,
    final_coverage: f64,
}

fn desk_run(mesh: Mesh, sdf_dir: &std::path::Path) -> Result<DeskRun, String> {
    let cfg = RunConfig::desk();
    let scene = Scene::fit(mesh, &cfg.sdf, sdf_dir).map_err(|e| e.to_string())?;
    let reg = cfg.registry();
    let init1 = pipeline::stage1_state(&scene, &cfg).map_err(|e| e.to_string())?;
    let init_all = pipeline::stage2_state(&scene, &cfg, &init1.curves, Vec::new()).map_err(|e| e.to_string())?;
    let stage1 = pipeline::run_stage1(&scene, &cfg, &reg, &StageControl::default()).map_err(|e| e.to_string())?;
    let stage2 = pipeline::run_stage2(&scene, &cfg, &reg, &stage1.curves, None, &StageControl::default()).map_err(|e| e.to_string())?;
    let cov = |cs: &CurveSet| coverage(&scene.mesh, cs, cfg.eval.coverage_points, cfg.eval.samples_per_curve, cfg.eval.coverage_seed);
    let init_coverage = cov(&init_all.curves).map_err(|e| e.to_string())?;
    let final_coverage = cov(&stage2.curves).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        scene,
        cfg,
        stage1,
        stage2,
        init_coverage,
        final_coverage,
    })
}

fn desk_checks(run: &DeskRun) -> Outcome {
    let mut failures = Vec::new();
    let (lead, trail) = run.stage1.window_means(50).ok_or("empty stage-1 history")?;
    let ratio = trail / lead;
    if !(ratio < 0.7) {
        failures.push(format!("(a) stage-1 loss ratio {ratio:.3} ≥ 0.7"));
    }
    let cov_ratio = run.final_coverage / run.init_coverage;
    if !(cov_ratio <= 0.5) {
        failures.push(format!("(b) coverage ratio {cov_ratio:.3} > 0.5 ({:.4} → {:.4})", run.init_coverage, run.final_coverage));
    }
    let probes = ViewSampler {
        seed: 0x9e0b_e5,
        ..run.cfg.views.clone()
    }
    .views(64);
    let ndc: f64 = probes.iter().map(|c| ndc_loss(&run.stage2.curves, c, NDC_T_GRID).value).sum();
    if ndc != 0.0 {
        // Split the residual between points on the curves and control points
        // (which may sit off the curve), and report where stage 1 stood.
        let on_curve: f64 = probes
            .iter()
            .flat_map(|c| run.stage2.curves.curves.iter().map(move |b| (c, b)))
            .flat_map(|(c, b)| (0..NDC_T_GRID).map(move |i| (c, b.eval(i as f64 / (NDC_T_GRID - 1) as f64))))
            .map(|(c, p)| {
                let q = c.project(&p);
                if q.valid {
                    ndc_penalty(&q.uv).0
                } else {
                    0.0
                }
            })
            .sum();
        let stage1: f64 = probes.iter().map(|c| ndc_loss(&run.stage1.curves, c, NDC_T_GRID).value).sum();
        let views = probes.iter().filter(|c| ndc_loss(&run.stage2.curves, c, NDC_T_GRID).value > 0.0).count();
        failures.push(format!(
            "(c) ndc loss {ndc:.3e} over 64 probes ({views} views; on-curve share {on_curve:.3e}; stage-1 curves alone {stage1:.3e})"
        ));
    }
    let n1 = run.stage1.curves.len();
    let frozen = run.stage1.curves.curves.iter().zip(&run.stage2.curves.curves[..n1]).all(|(a, b)| {
        a.control_points.iter().zip(&b.control_points).all(|(p, q)| p.iter().zip(q.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
    });
    if !frozen {
        failures.push("(d) stage-1 curves changed during stage 2".into());
    }
    let summary = format!(
        "(a) {ratio:.3} (b) {cov_ratio:.3} (c) {ndc:.1e} (d) {}",
        if frozen { "bit-frozen" } else { "moved" }
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

// ───────────────────────────── refinement ─────────────────────────────

fn refinement(run: &DeskRun) -> Outcome {
    let reg = run.cfg.registry();
    let pick = |d: Vec3| Keypoint::user(run.scene.oracle.closest_point(&d));
    let kps = vec![pick(Vec3::new(0.5, 0.1, 0.0)), pick(Vec3::new(-0.1, 0.2, 0.5))];
    let base = run.stage2.curves.clone();
    let out = pipeline::refine(&run.scene, &run.cfg, &reg, &base, kps.clone(), &StageControl::default()).map_err(|e| e.to_string())?;
    ensure!(out.curves.len() == base.len() + 12, "{} curves after refinement, expected {}", out.curves.len(), base.len() + 12);
    ensure!(
        base.curves.iter().zip(&out.curves.curves).all(|(a, b)| a.control_points == b.control_points),
        "existing curves moved"
    );
    ensure!(out.curves.curves[base.len()..].iter().all(|c| c.stage == Stage::Refinement), "new curves not tagged");
    ensure!(out.view_log.len() == run.cfg.refine.iterations, "view log has {} entries", out.view_log.len());
    // Re-derive visibility for every logged view independently of the log.
    let opts = RenderOptions::default();
    for v in &out.view_log {
        let cam = run.cfg.views.camera_at(v.elevation_deg, v.azimuth_deg);
        let depth = render_surface(&run.scene.mesh, &cam, &opts).depth;
        let seen = kps.iter().filter(|k| visible_projection(&k.position, &cam, &depth).is_some()).count();
        ensure!(seen > 0, "iteration {} used a view with no visible keypoint", v.iteration);
    }
    Ok(format!("{} → {} curves, {} views all keypoint-visible", base.len(), out.curves.len(), out.view_log.len()))
}

// ───────────────────────────── deformation ─────────────────────────────

fn deformation() -> Outcome {
    fn line(a: Vec3, b: Vec3) -> BezierCurve {
        BezierCurve::new([a, a + (b - a) / 3.0, a + (b - a) * (2.0 / 3.0), b], Stage::Geometry)
    }
    // Elongated sphere with one curve near each end.
    let m = sphere().map_vertices(|v| Vec3::new(v.x * 3.0, v.y, v.z));
    let cs = CurveSet::new(
        vec![
            line(Vec3::new(-0.4, -0.2, 0.0), Vec3::new(-0.4, 0.2, 0.0)),
            line(Vec3::new(0.4, -0.2, 0.0), Vec3::new(0.4, 0.2, 0.0)),
        ],
        1.5,
    );
    let temp = 0.05;
    let sw = build_skinning(&m, &cs, 32, temp, 8).map_err(|e| e.to_string())?;

    // Row sums on a ~50k-vertex grid.
    let n = 224;
    let verts: Vec<Vec3> = (0..n * n).map(|i| Vec3::new((i % n) as f64 / n as f64 - 0.5, (i / n) as f64 / n as f64 - 0.5, 0.05)).collect();
    let faces: Vec<[usize; 3]> = (0..n - 1)
        .flat_map(|y| (0..n - 1).flat_map(move |x| {
            let i = y * n + x;
            [[i, i + 1, i + n], [i + 1, i + n + 1, i + n]]
        }))
        .collect();
    let grid = Mesh::new(verts, faces).map_err(|e| e.to_string())?;
    let big = build_skinning(&grid, &cs, 32, temp, 8).map_err(|e| e.to_string())?;
    let worst_row = (0..big.vertex_count).map(|v| (big.row_sum(v) - 1.0).abs()).fold(0.0, f64::max);
    ensure!(worst_row < 1e-6, "row sum off by {worst_row:.2e}");
    ensure!(big.weights.iter().all(|&w| w >= 0.0), "negative weight");

    let u = Vec3::new(0.1, -0.2, 0.05);
    let moved = apply_deformation(&m, &sw, &vec![u; sw.handles.len()]).map_err(|e| e.to_string())?;
    let worst_t = moved.vertices.iter().zip(&m.vertices).map(|(a, b)| (a - b - u).norm()).fold(0.0, f64::max);
    ensure!(worst_t < 1e-12, "uniform displacement off by {worst_t:.2e}");

    let mut edited = cs.clone();
    edited.curves[0] = edited.curves[0].map_points(|p| p + u);
    let d = displace_handles(&cs, &edited, &sw.handles).map_err(|e| e.to_string())?;
    let out = apply_deformation(&m, &sw, &d).map_err(|e| e.to_string())?;
    let near: Vec<Vec3> = sw.handles.iter().filter(|h| h.curve == 0).map(|h| h.rest).collect();
    let mut far_count = 0;
    let mut worst_far: f64 = 0.0;
    for (a, b) in out.vertices.iter().zip(&m.vertices) {
        let dist = near.iter().map(|h| (h - b).norm()).fold(f64::INFINITY, f64::min);
        if dist > 10.0 * temp {
            far_count += 1;
            worst_far = worst_far.max((a - b).norm() / u.norm());
        }
    }
    ensure!(far_count > 100, "locality fixture has only {far_count} far vertices");
    ensure!(worst_far < 1e-3, "far vertices moved {worst_far:.2e}·‖u‖");

    let again = build_skinning(&m, &cs, 32, temp, 8).map_err(|e| e.to_string())?;
    ensure!(again == sw, "skinning not deterministic");
    Ok(format!("row err {worst_row:.1e}, translation err {worst_t:.1e}, far motion {worst_far:.1e}·‖u‖ over {far_count} vertices"))
}

// ───────────────────────────── determinism ─────────────────────────────

fn determinism(run: &DeskRun) -> Outcome {
    let reg = run.cfg.registry();
    let again = pipeline::run_stage1(&run.scene, &run.cfg, &reg, &StageControl::default()).map_err(|e| e.to_string())?;
    ensure!(again.history == run.stage1.history, "stage-1 loss traces differ between seeded runs");

    let mut cfg = run.cfg.clone();
    cfg.stage1.iterations = 100;
    let reg = cfg.registry();
    let straight = pipeline::run_stage1(&run.scene, &cfg, &reg, &StageControl::default()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("split.json");
    let half = StageControl {
        checkpoint: Some(path.clone()),
        stop_at: Some(50),
        ..StageControl::default()
    };
    pipeline::run_stage1(&run.scene, &cfg, &reg, &half).map_err(|e| e.to_string())?;
    let resumed = pipeline::resume(&run.scene, &cfg, &reg, &path, &StageControl::default(), false).map_err(|e| e.to_string())?;
    let gap = straight
        .curves
        .control_points()
        .iter()
        .zip(resumed.curves.control_points())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    ensure!(gap <= 1e-6, "split-resume control points differ by {gap:.2e}");
    let loss_gap = straight.history.iter().zip(&resumed.history).map(|(a, b)| (a.total - b.total).abs()).fold(0.0, f64::max);
    ensure!(straight.history.len() == resumed.history.len() && loss_gap <= 1e-6, "split-resume loss traces differ by {loss_gap:.2e}");
    Ok(format!("identical traces; split-resume gap {gap:.1e}"))
}

fn main() {
    // libtest flags (e.g. --nocapture, filters) are ignored.
    let mut report = Report { failures: 0, total: 0 };

    report.run("curve math", secs(5), curve_math);
    report.run("rasterizer", secs(30), rasterizer);
    report.run("closed forms", secs(60), closed_forms);
    let mut field = None;
    report.run("sdf", secs(600), || sdf_suite(&mut field));
    report.run("coverage", secs(60), coverage_suite);
    report.run("deformation", secs(60), deformation);

    let sdf_dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    let mut sphere_run = Err(String::new());
    report.run("desk end-to-end: sphere", secs(1800), || {
        sphere_run = desk_run(sphere(), sdf_dir.path());
        sphere_run.as_ref().map_err(Clone::clone).and_then(desk_checks)
    });
    // The 30 min budget covers both fixtures together.
    let left = secs(1800).saturating_sub(t.elapsed());
    report.run("desk end-to-end: textured cylinder", left, || desk_run(cylinder(), sdf_dir.path()).and_then(|r| desk_checks(&r)));

    match &sphere_run {
        Ok(r) => {
            report.run("refinement", secs(120), || refinement(r));
            report.run("determinism", secs(600), || determinism(r));
        }
        Err(e) => {
            report.run("refinement", secs(120), || Err(format!("no desk run: {e}")));
            report.run("determinism", secs(600), || Err(format!("no desk run: {e}")));
        }
    }

    println!("acceptance: {}/{} passed", report.total - report.failures, report.total);
    if report.failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
