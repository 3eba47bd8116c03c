//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the console; exits nonzero when
//! any criterion fails.

use std::time::Instant;

use circpose::analytic::solve_pose_normalized;
use circpose::fit::polar_n_distance_sq;
use circpose::geometry::{angular_distance, conic_transform, exp_so3, CameraIntrinsics, Conic, Point2H, Pose};
use circpose::marker::{
    imaged_center, line_at_infinity_from_two_conics, resolve_observation, Detection, MarkerKind, MarkerSpec,
};
use circpose::refine::{residuals_and_jacobian, RefinementProblem};
use circpose::sim::{
    default_intrinsics, median, run_bench, run_sweep, run_trials, sample_pose, trial_rng, PoseSampler, ScenarioConfig,
    SweepAxis,
};
use circpose::tracking::PipelineOptions;
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;

const EXACT_POSES: usize = 100;
const EXACT_ROT_TOL: f64 = 1e-7;
const EXACT_CENTER_REL_TOL: f64 = 1e-9;
const EXACT_TIME_S: f64 = 1.0;
const DISTANCE_FN_TOL: f64 = 1e-12;
const HOMOGRAPHIES: usize = 500;
const ORACLE_ANGLE_TOL: f64 = 1e-8;
const REFINE_TRIALS: usize = 200;
const SWEEP_TRIALS: usize = 100;
const NOISE_LEVELS: [f64; 5] = [0.0, 0.05, 0.1, 0.18, 0.25];
const NOISE_SWEEP_TIME_S: f64 = 600.0;
const BLUR_LEVELS: [f64; 5] = [0.0, 1.0, 3.0, 5.0, 7.0];
const DISTANCES: [f64; 5] = [0.6, 1.0, 1.75, 2.25, 2.5];
const BENCH_FRAMES: usize = 2160;
const MAX_MEAN_FRAME_MS: f64 = 50.0;
const GRADIENT_POSES: usize = 20;
const GRADIENT_REL_TOL: f64 = 1e-5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn marker() -> MarkerSpec {
    MarkerSpec::preset(MarkerKind::A)
}

fn circle(spec: &MarkerSpec, i: usize) -> Conic {
    Conic::circle(spec.circle_center(i), spec.circles[i].radius).unwrap()
}

fn scenario(noise: f64, distance: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig { trials: SWEEP_TRIALS, noise_variance: noise, ..Default::default() };
    cfg.pose_sampler.distance_min = distance;
    cfg.pose_sampler.distance_max = distance;
    cfg
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn exact_recovery() -> Verdict {
    let spec = marker();
    let k = default_intrinsics();
    let sampler = PoseSampler { distance_min: 0.4, distance_max: 3.0, cone_deg: 60.0 };
    let poses: Vec<Pose> = (0..EXACT_POSES)
        .map(|t| sample_pose(&sampler, &spec, &k, 640, 480, 4.0, &mut trial_rng(11, t as u64)).unwrap())
        .collect();
    let start = Instant::now();
    let (mut worst_rot, mut worst_center, mut errors) = (0.0f64, 0.0f64, 0);
    for gt in &poses {
        let h = gt.plane_homography(&CameraIntrinsics::identity());
        let conics =
            vec![conic_transform(&circle(&spec, 0), &h).unwrap(), conic_transform(&circle(&spec, 1), &h).unwrap()];
        let solved = resolve_observation(&spec, &Detection::new(conics, vec![]), None)
            .map_err(|e| e.to_string())
            .and_then(|o| solve_pose_normalized(&o.m0, &o.m1, &o.l_inf, spec.l_x).map_err(|e| e.to_string()));
        match solved {
            Ok(s) => {
                worst_rot = worst_rot.max(s.pose.rotation_angle_to(gt));
                let c = gt.camera_center();
                worst_center = worst_center.max((s.pose.camera_center() - c).norm() / c.norm());
            }
            Err(_) => errors += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        errors == 0 && worst_rot < EXACT_ROT_TOL && worst_center < EXACT_CENTER_REL_TOL && secs < EXACT_TIME_S,
        format!(
            "{EXACT_POSES} poses, max rotation error {worst_rot:.2e} rad (< {EXACT_ROT_TOL:e}), max center error {worst_center:.2e} relative (< {EXACT_CENTER_REL_TOL:e}), errors {errors}, {secs:.4} s (< {EXACT_TIME_S} s)"
        ),
    )
}

fn distance_function() -> Verdict {
    let unit = Conic::circle(Vector2::zeros(), 1.0).unwrap();
    let d = |x: f64, y: f64| polar_n_distance_sq(&Point2H::new(x, y, 1.0), &unit).unwrap();
    let (outer, inner) = (d(2.0, 0.0), d(0.5, 0.0));
    let on = (0..16)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 16.0;
            d(a.cos(), a.sin())
        })
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let pass =
        (outer - 1.0).abs() <= DISTANCE_FN_TOL && (inner - 0.25).abs() <= DISTANCE_FN_TOL && on <= DISTANCE_FN_TOL;
    verdict(
        pass,
        format!("d²(2,0) = {outer}, d²(0.5,0) = {inner}, max on-conic {on:.1e}; tolerance {DISTANCE_FN_TOL:e}"),
    )
}

/// Plane-to-image homography: a camera pose followed by a random affine map
/// of the image.
fn random_homography(t: usize) -> Matrix3<f64> {
    let spec = marker();
    let mut rng = trial_rng(23, t as u64);
    let sampler = PoseSampler { distance_min: 0.3, distance_max: 4.0, cone_deg: 70.0 };
    let pose = sample_pose(&sampler, &spec, &default_intrinsics(), 640, 480, 0.0, &mut rng).unwrap();
    loop {
        let a = Matrix3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-300.0..300.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-300.0..300.0),
            0.0,
            0.0,
            1.0,
        );
        let s = a.fixed_view::<2, 2>(0, 0).svd(false, false).singular_values;
        if s.min() > 0.1 * s.max() {
            return a * pose.plane_homography(&default_intrinsics());
        }
    }
}

fn oracle_equivalence() -> Verdict {
    let spec = marker();
    let (mut worst, mut failures) = (0.0f64, 0);
    for t in 0..HOMOGRAPHIES {
        let h = random_homography(t);
        let hinv_t = h.try_inverse().unwrap().transpose();
        let c: Vec<Conic> = (0..2).map(|i| conic_transform(&circle(&spec, i), &h).unwrap()).collect();
        let want_line = hinv_t * Vector3::z();
        let result = line_at_infinity_from_two_conics(&c[0], &c[1]).and_then(|l| {
            let mut r = angular_distance(l.coords(), &want_line);
            for (i, conic) in c.iter().enumerate() {
                let m = imaged_center(conic, &l)?;
                let p = spec.circle_center(i);
                r = r.max(angular_distance(m.coords(), &(h * Vector3::new(p.x, p.y, 1.0))));
            }
            Ok(r)
        });
        match result {
            Ok(r) if r < ORACLE_ANGLE_TOL => worst = worst.max(r),
            Ok(r) => {
                worst = worst.max(r);
                failures += 1;
            }
            Err(_) => failures += 1,
        }
    }
    verdict(
        failures == 0,
        format!("{HOMOGRAPHIES} homographies, max angular residual {worst:.2e} (< {ORACLE_ANGLE_TOL:e}), failures {failures}"),
    )
}

fn refinement_improves() -> Verdict {
    let cfg = ScenarioConfig { trials: REFINE_TRIALS, ..scenario(0.02, 0.6) };
    let recs = run_trials(&cfg, &PipelineOptions::default(), jobs()).unwrap();
    let refined: Vec<f64> = recs.iter().filter_map(|r| r.loc_error).collect();
    let analytic: Vec<f64> = recs.iter().filter_map(|r| r.analytic_error).collect();
    let monotone = recs.iter().filter(|r| r.cost_monotone).count();
    let (mr, ma) = (median(&refined), median(&analytic));
    verdict(
        mr <= ma && monotone == recs.len(),
        format!(
            "{REFINE_TRIALS} trials at noise 0.02, 0.6 m: median refined {mr:.3e} m <= median analytic {ma:.3e} m; monotone cost {monotone}/{}",
            recs.len()
        ),
    )
}

fn sweep_line(axis: SweepAxis, values: &[f64], cfg: &ScenarioConfig) -> (bool, f64, String, f64) {
    let start = Instant::now();
    let r = run_sweep(cfg, axis, values, &PipelineOptions::default(), jobs()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let fails: Vec<String> = r.rows.iter().map(|row| format!("{}:{}", row.value, row.failures)).collect();
    let medians: Vec<String> = r.rows.iter().map(|row| format!("{:.2e}", row.median_loc_error)).collect();
    let ok = r.rows.iter().all(|row| row.failures == 0);
    let text =
        format!("{} trials/level, failures [{}], median error [{}] m", cfg.trials, fails.join(" "), medians.join(" "));
    (ok, r.spearman(), text, secs)
}

fn noise_envelope() -> Verdict {
    let (ok, _, text, secs) = sweep_line(SweepAxis::Noise, &NOISE_LEVELS, &scenario(0.0, 0.6));
    verdict(ok && secs < NOISE_SWEEP_TIME_S, format!("0.6 m, {text}, {secs:.1} s (< {NOISE_SWEEP_TIME_S} s)"))
}

fn blur_robustness() -> Verdict {
    let (ok, rho, text, _) = sweep_line(SweepAxis::Blur, &BLUR_LEVELS, &scenario(0.02, 1.0));
    verdict(ok && rho > 0.0, format!("noise 0.02, 1.0 m, {text}, Spearman {rho:.3} (> 0)"))
}

fn distance_robustness() -> Verdict {
    let (ok, _, text, _) = sweep_line(SweepAxis::Distance, &DISTANCES, &scenario(0.02, 0.6));
    verdict(ok, format!("noise 0.02, {text}"))
}

fn throughput() -> Verdict {
    let mut cfg = scenario(0.02, 0.6);
    cfg.pose_sampler.distance_max = 1.2;
    let report = run_bench(&cfg, BENCH_FRAMES, &PipelineOptions::default()).unwrap();
    let stages: Vec<String> = report.stages.iter().map(|(n, s)| format!("{n} {:.3}", s.mean)).collect();
    let mean = report.mean_total_ms();
    verdict(
        report.tracked == BENCH_FRAMES && mean <= MAX_MEAN_FRAME_MS,
        format!(
            "{} frames, tracked {}, mean {mean:.2} ms/frame (<= {MAX_MEAN_FRAME_MS} ms), per stage ms: {}",
            report.frames,
            report.tracked,
            stages.join(", ")
        ),
    )
}

fn gradient_check() -> Verdict {
    let spec = marker();
    let k = default_intrinsics();
    let sampler = PoseSampler { distance_min: 0.5, distance_max: 2.0, cone_deg: 50.0 };
    let mut worst = 0.0f64;
    for t in 0..GRADIENT_POSES {
        let mut rng = trial_rng(31, t as u64);
        let gt = sample_pose(&sampler, &spec, &k, 640, 480, 4.0, &mut rng).unwrap();
        let h = gt.plane_homography(&k);
        let conics = (0..2).map(|i| conic_transform(&circle(&spec, i), &h).unwrap()).collect();
        let problem = RefinementProblem::new(spec.clone(), conics, k, 64, gt).unwrap();
        let samples = problem.samples();
        // Evaluate away from the optimum so residuals are nonzero.
        let w =
            Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        let dt =
            Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
        let pose = Pose { rotation: exp_so3(&w) * gt.rotation, translation: gt.translation + dt };
        let (_, jac, branches) = residuals_and_jacobian(&pose, &problem, &samples, &Vector3::zeros(), None).unwrap();
        let step = 1e-6;
        let (mut num, mut den) = (0.0, 0.0);
        for d in 0..6 {
            let shifted = |sign: f64| {
                let mut dw = Vector3::zeros();
                let mut dtr = Vector3::zeros();
                if d < 3 {
                    dw[d] = sign * step;
                } else {
                    dtr[d - 3] = sign * step;
                }
                Pose { rotation: exp_so3(&dw) * pose.rotation, translation: pose.translation + dtr }
            };
            let rp = residuals_and_jacobian(&shifted(1.0), &problem, &samples, &Vector3::zeros(), Some(&branches))
                .unwrap()
                .0;
            let rm = residuals_and_jacobian(&shifted(-1.0), &problem, &samples, &Vector3::zeros(), Some(&branches))
                .unwrap()
                .0;
            for (s, j) in jac.iter().enumerate() {
                let fd = (rp[s] - rm[s]) / (2.0 * step);
                num += (fd - j[d]).powi(2);
                den += j[d] * j[d];
            }
        }
        worst = worst.max((num / den).sqrt());
    }
    verdict(
        worst < GRADIENT_REL_TOL,
        format!("{GRADIENT_POSES} poses, max relative Jacobian error {worst:.2e} (< {GRADIENT_REL_TOL:e})"),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    // `cargo test -- --list` and filters expect a harness; honor listing.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [Criterion; 9] = [
        ("exact analytic recovery", exact_recovery),
        ("distance function ground truth", distance_function),
        ("projective recovery oracle", oracle_equivalence),
        ("refinement improves", refinement_improves),
        ("noise robustness", noise_envelope),
        ("blur robustness", blur_robustness),
        ("distance robustness", distance_robustness),
        ("throughput", throughput),
        ("gradient check", gradient_check),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let v = run();
        if !v.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
