//! Run configuration: one TOML file with marker, camera, pipeline and
//! harness sections, validated with line-precise messages.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::de::{DeTable, DeValue};
use toml::Spanned;

use crate::geometry::CameraIntrinsics;
use crate::marker::{MarkerKind, MarkerSpec};
use crate::sim::{default_intrinsics, PoseSampler, RenderOptions, ScenarioConfig};
use crate::tracking::PipelineOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("{}", located(.line, .message))]
    Parse { line: Option<usize>, message: String },
    #[error("{}", located(.line, &format!("{key}: {message}")))]
    Invalid { line: Option<usize>, key: String, message: String },
}

fn located(line: &Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("line {l}: {message}"),
        None => message.to_string(),
    }
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Io(_) => None,
            Self::Parse { line, .. } | Self::Invalid { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        let k = default_intrinsics();
        Self { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, skew: k.skew, width: 640, height: 480 }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy, skew: self.skew }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub noise_variance: f64,
    pub blur_sigma: f64,
    pub trials: usize,
    pub rng_seed: u64,
    pub gross_error_fraction: f64,
    pub distance_min: f64,
    pub distance_max: f64,
    pub cone_deg: f64,
    /// Frames rendered by the bench command.
    pub bench_frames: usize,
    pub render: RenderOptions,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        Self {
            noise_variance: s.noise_variance,
            blur_sigma: s.blur_sigma,
            trials: s.trials,
            rng_seed: s.rng_seed,
            gross_error_fraction: s.gross_error_fraction,
            distance_min: s.pose_sampler.distance_min,
            distance_max: s.pose_sampler.distance_max,
            cone_deg: s.pose_sampler.cone_deg,
            bench_frames: 2160,
            render: s.render,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub marker: MarkerSpec,
    pub camera: CameraConfig,
    pub pipeline: PipelineOptions,
    pub harness: HarnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            marker: MarkerSpec::preset(MarkerKind::A),
            camera: CameraConfig::default(),
            pipeline: PipelineOptions::default(),
            harness: HarnessConfig::default(),
        }
    }
}

/// One step of a key path.
#[derive(Debug, Clone, Copy)]
enum Seg<'a> {
    Key(&'a str),
    Index(usize),
}

struct KeyPath<'a>(Vec<Seg<'a>>);

impl fmt::Display for KeyPath<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            match s {
                Seg::Key(k) if i == 0 => write!(f, "{k}")?,
                Seg::Key(k) => write!(f, ".{k}")?,
                Seg::Index(n) => write!(f, "[{n}]")?,
            }
        }
        Ok(())
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of the deepest part of `path` present in the document.
fn path_line(src: &str, doc: &Spanned<DeTable<'_>>, path: &[Seg<'_>]) -> Option<usize> {
    let mut best = None;
    let mut table: Option<&DeTable<'_>> = Some(doc.get_ref());
    let mut array: Option<&[Spanned<DeValue<'_>>]> = None;
    for seg in path {
        let value = match (*seg, table, array) {
            (Seg::Key(k), Some(t), _) => match t.iter().find(|(name, _)| name.get_ref().as_ref() == k) {
                Some((name, v)) => {
                    best = Some(line_of(src, name.span().start));
                    v
                }
                None => break,
            },
            (Seg::Index(i), _, Some(a)) => match a.get(i) {
                Some(v) => {
                    best = Some(line_of(src, v.span().start));
                    v
                }
                None => break,
            },
            _ => break,
        };
        (table, array) = match value.get_ref() {
            DeValue::Table(t) => (Some(t), None),
            DeValue::Array(a) => (None, Some(&a[..])),
            _ => (None, None),
        };
    }
    best
}

/// Collects the first failed check.
struct Checker<'a> {
    failure: Option<(KeyPath<'a>, String)>,
}

impl<'a> Checker<'a> {
    fn check(&mut self, ok: bool, path: &[Seg<'a>], message: impl FnOnce() -> String) {
        if self.failure.is_none() && !ok {
            self.failure = Some((KeyPath(path.to_vec()), message()));
        }
    }

    fn positive(&mut self, v: f64, path: &[Seg<'a>]) {
        self.check(v > 0.0 && v.is_finite(), path, || format!("must be positive, got {v}"));
    }

    fn non_negative(&mut self, v: f64, path: &[Seg<'a>]) {
        self.check(v >= 0.0 && v.is_finite(), path, || format!("must be >= 0, got {v}"));
    }

    fn at_least(&mut self, v: usize, min: usize, path: &[Seg<'a>]) {
        self.check(v >= min, path, || format!("must be >= {min}, got {v}"));
    }
}

use Seg::{Index as I, Key as K};

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let doc = DeTable::parse(src).map_err(|e| parse_error(src, &e))?;
        let cfg: Self = toml::from_str(src).map_err(|e| parse_error(src, &e))?;
        if let Some((path, message)) = cfg.check() {
            let line = path_line(src, &doc, &path.0);
            return Err(ConfigError::Invalid { line, key: path.to_string(), message });
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Validate the whole configuration without source positions.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.check() {
            Some((path, message)) => Err(ConfigError::Invalid { line: None, key: path.to_string(), message }),
            None => Ok(()),
        }
    }

    fn check(&self) -> Option<(KeyPath<'static>, String)> {
        let mut c = Checker { failure: None };
        let m = &self.marker;
        c.positive(m.l_x, &[K("marker"), K("l_x")]);
        for (i, circle) in m.circles.iter().enumerate() {
            c.positive(circle.radius, &[K("marker"), K("circles"), I(i), K("radius")]);
            c.check((0.0..=1.0).contains(&circle.fill), &[K("marker"), K("circles"), I(i), K("fill")], || {
                format!("must be in [0, 1], got {}", circle.fill)
            });
        }
        for (i, f) in m.features.iter().enumerate() {
            c.positive(f.radius, &[K("marker"), K("features"), I(i), K("radius")]);
        }
        if c.failure.is_none() {
            if let Err(e) = m.validate() {
                c.check(false, &[K("marker")], || e.to_string());
            }
        }

        let cam = &self.camera;
        c.positive(cam.fx, &[K("camera"), K("fx")]);
        c.positive(cam.fy, &[K("camera"), K("fy")]);
        c.check(cam.cx.is_finite(), &[K("camera"), K("cx")], || "must be finite".into());
        c.check(cam.cy.is_finite(), &[K("camera"), K("cy")], || "must be finite".into());
        c.check(cam.skew.is_finite(), &[K("camera"), K("skew")], || "must be finite".into());
        c.at_least(cam.width, 16, &[K("camera"), K("width")]);
        c.at_least(cam.height, 16, &[K("camera"), K("height")]);

        let p = &self.pipeline;
        c.at_least(p.samples_per_circle, 8, &[K("pipeline"), K("samples_per_circle")]);
        c.non_negative(p.dilation, &[K("pipeline"), K("dilation")]);
        c.at_least(p.lm.max_iterations, 1, &[K("pipeline"), K("lm"), K("max_iterations")]);
        c.positive(p.lm.initial_damping, &[K("pipeline"), K("lm"), K("initial_damping")]);
        c.non_negative(p.lm.rel_decrease_tol, &[K("pipeline"), K("lm"), K("rel_decrease_tol")]);
        c.non_negative(p.lm.abs_cost_tol, &[K("pipeline"), K("lm"), K("abs_cost_tol")]);
        c.at_least(p.fit_max_iterations, 1, &[K("pipeline"), K("fit_max_iterations")]);
        c.non_negative(p.fit_rel_decrease_tol, &[K("pipeline"), K("fit_rel_decrease_tol")]);
        let e = &p.edges;
        let edges = |k: &'static str| [K("pipeline"), K("edges"), K(k)];
        c.positive(e.min_smoothing, &edges("min_smoothing"));
        c.check(e.max_smoothing >= e.min_smoothing && e.max_smoothing.is_finite(), &edges("max_smoothing"), || {
            format!("must be >= min_smoothing ({}), got {}", e.min_smoothing, e.max_smoothing)
        });
        c.non_negative(e.noise_gain, &edges("noise_gain"));
        c.at_least(e.min_area, 1, &edges("min_area"));
        c.at_least(e.band, 1, &edges("band"));
        c.non_negative(e.gradient_k, &edges("gradient_k"));
        c.at_least(e.min_points, 5, &edges("min_points"));
        c.positive(e.max_rms, &edges("max_rms"));
        c.check((0.0..=1.0).contains(&e.min_coverage), &edges("min_coverage"), || {
            format!("must be in [0, 1], got {}", e.min_coverage)
        });
        c.check(
            e.max_edge_smoothing >= e.min_smoothing && e.max_edge_smoothing.is_finite(),
            &edges("max_edge_smoothing"),
            || format!("must be >= min_smoothing ({}), got {}", e.min_smoothing, e.max_edge_smoothing),
        );

        let h = &self.harness;
        let harness = |k: &'static str| [K("harness"), K(k)];
        c.non_negative(h.noise_variance, &harness("noise_variance"));
        c.non_negative(h.blur_sigma, &harness("blur_sigma"));
        c.at_least(h.trials, 1, &harness("trials"));
        c.positive(h.gross_error_fraction, &harness("gross_error_fraction"));
        c.positive(h.distance_min, &harness("distance_min"));
        c.check(h.distance_max >= h.distance_min && h.distance_max.is_finite(), &harness("distance_max"), || {
            format!("must be >= distance_min ({}), got {}", h.distance_min, h.distance_max)
        });
        c.check((0.0..90.0).contains(&h.cone_deg), &harness("cone_deg"), || {
            format!("must be in [0, 90), got {}", h.cone_deg)
        });
        c.at_least(h.bench_frames, 1, &harness("bench_frames"));
        c.at_least(h.render.supersample, 1, &[K("harness"), K("render"), K("supersample")]);
        c.check((0.0..=1.0).contains(&h.render.background), &[K("harness"), K("render"), K("background")], || {
            format!("must be in [0, 1], got {}", h.render.background)
        });
        c.failure
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.camera.intrinsics()
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let h = &self.harness;
        ScenarioConfig {
            spec: self.marker.clone(),
            k: self.intrinsics(),
            width: self.camera.width,
            height: self.camera.height,
            pose_sampler: PoseSampler {
                distance_min: h.distance_min,
                distance_max: h.distance_max,
                cone_deg: h.cone_deg,
            },
            noise_variance: h.noise_variance,
            blur_sigma: h.blur_sigma,
            trials: h.trials,
            rng_seed: h.rng_seed,
            gross_error_fraction: h.gross_error_fraction,
            render: h.render,
        }
    }
}

fn parse_error(src: &str, e: &toml::de::Error) -> ConfigError {
    ConfigError::Parse { line: e.span().map(|s| line_of(src, s.start)), message: e.message().trim().to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[marker]
kind = "A"
l_x = 0.15
colors = ["red", "blue"]

[[marker.circles]]
center = [0.0, 0.0]
radius = 0.05

[[marker.circles]]
center = [0.15, 0.0]
radius = 0.05
fill = 0.25

[camera]
fx = 600.0
fy = 600.0
cx = 319.5
cy = 239.5
width = 640
height = 480

[pipeline]
dilation = 12.0

[harness]
noise_variance = 0.02
trials = 10
"#;

    #[test]
    fn sample_loads_with_defaults_filled() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.pipeline.dilation, 12.0);
        assert_eq!(cfg.pipeline.samples_per_circle, PipelineOptions::default().samples_per_circle);
        assert_eq!(cfg.harness.trials, 10);
        assert_eq!(cfg.marker.circles[1].fill, 0.25);
        assert_eq!(cfg.scenario().noise_variance, 0.02);
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn invalid_value_reports_its_line() {
        let src = SAMPLE.replace("fy = 600.0", "fy = -1.0");
        let e = RunConfig::parse(&src).unwrap_err();
        let want = src.lines().position(|l| l.starts_with("fy")).unwrap() + 1;
        assert_eq!(e.line(), Some(want));
        assert!(e.to_string().contains("camera.fy"), "{e}");
    }

    #[test]
    fn invalid_array_entry_reports_its_line() {
        let src = SAMPLE.replace("fill = 0.25", "fill = 1.5");
        let e = RunConfig::parse(&src).unwrap_err();
        let want = src.lines().position(|l| l.starts_with("fill")).unwrap() + 1;
        assert_eq!(e.line(), Some(want));
        assert!(e.to_string().contains("marker.circles[1].fill"), "{e}");
    }

    #[test]
    fn syntax_and_type_errors_report_lines() {
        let e = RunConfig::parse("[camera]\nfx = = 3\n").unwrap_err();
        assert_eq!(e.line(), Some(2));
        let e = RunConfig::parse("[harness]\n\ntrials = \"many\"\n").unwrap_err();
        assert_eq!(e.line(), Some(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse("[camera]\nfocal = 600.0\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: Some(2), .. }), "{e}");
    }

    #[test]
    fn geometric_spec_errors_point_at_the_marker() {
        let src = SAMPLE.replace("l_x = 0.15", "l_x = 0.3");
        let e = RunConfig::parse(&src).unwrap_err();
        assert_eq!(e.line(), Some(2));
    }
}
