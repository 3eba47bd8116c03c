//! `circpose`: track image sequences, run synthetic sweeps and benchmarks.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use circpose::config::RunConfig;
use circpose::image::GrayImage;
use circpose::sim::{
    self, format_trajectory, orbit_poses, render_frame, run_bench, run_sweep, write_sweep, SweepAxis, TrajectoryRow,
};
use circpose::tracking::{FrameOutcome, PipelineOptions, StageTimings, Tracker};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "circpose", version, about = "Camera pose tracking with circular planar markers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides harness.rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Analytic poses only, no refinement.
    #[arg(long)]
    no_refine: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Track a directory of PGM/PPM frames, or concatenated frames on stdin
    /// with `--input -`.
    Track {
        #[command(flatten)]
        common: Common,
        /// Frame directory, a single frame, or `-` for stdin.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for trajectory.txt and frames.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a synthetic sweep over one axis.
    #[command(alias = "simulate")]
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["noise", "blur", "distance"])]
        axis: String,
        /// Comma-separated values in ascending order.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        /// Output directory for the CSV tables, plot data and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Time the pipeline on a rendered orbit sequence.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Overrides harness.bench_frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the stage table, per-frame CSV and trajectories here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an orbit sequence to numbered frames plus its ground truth.
    Render {
        #[command(flatten)]
        common: Common,
        /// Number of frames in the orbit.
        #[arg(long)]
        frames: usize,
        /// Output directory for the frames and ground_truth.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

/// Exit status and message.
enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Track { common, input, out } => cmd_track(&common, &input, &out),
        Command::Sweep { common, axis, values, out, jobs } => cmd_sweep(&common, &axis, &values, &out, jobs),
        Command::Bench { common, frames, out } => cmd_bench(&common, frames, out.as_deref()),
        Command::Render { common, frames, out } => cmd_render(&common, frames, &out),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load(common: &Common) -> Result<(RunConfig, PipelineOptions), Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.harness.rng_seed = s;
    }
    let mut opts = cfg.pipeline.clone();
    if common.no_refine {
        opts.refine = false;
    }
    Ok((cfg, opts))
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn is_frame(p: &Path) -> bool {
    let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm"))
}

/// Frames of a stream of concatenated binary PNM images.
fn stream_frames(mut r: impl BufRead) -> impl Iterator<Item = Result<GrayImage, String>> {
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        match r.fill_buf() {
            Ok([]) => return None,
            Ok(_) => {}
            Err(e) => {
                done = true;
                return Some(Err(e.to_string()));
            }
        }
        let decoded = image::codecs::pnm::PnmDecoder::new(&mut r)
            .and_then(image::DynamicImage::from_decoder)
            .map(GrayImage::from_dynamic)
            .map_err(|e| e.to_string());
        // A broken header leaves the stream position unknown.
        done = decoded.is_err();
        Some(decoded)
    })
}

fn per_frame_row(out: &mut String, name: &str, o: &FrameOutcome) {
    let t = o.timing().values();
    let times: Vec<String> = t.iter().map(|v| format!("{v:.4}")).collect();
    match o {
        FrameOutcome::Tracked(r) => {
            let _ = writeln!(
                out,
                "{},{name},tracked,,{},{},{},{}",
                r.frame_index,
                r.report.initial_cost,
                r.report.final_cost,
                r.report.iterations,
                times.join(",")
            );
        }
        FrameOutcome::Skipped { frame_index, reason, .. } => {
            let reason = reason.to_string().replace([',', '\n'], ";");
            let _ = writeln!(out, "{frame_index},{name},skipped,{reason},,,,{}", times.join(","));
        }
    }
}

fn per_frame_header() -> String {
    format!(
        "frame,source,status,reason,initial_cost,final_cost,iterations,{}\n",
        StageTimings::NAMES.map(|n| format!("{n}_ms")).join(",")
    )
}

fn cmd_track(common: &Common, input: &Path, out: &Path) -> Outcome {
    let (cfg, opts) = load(common)?;
    let frames: Box<dyn Iterator<Item = (String, Result<GrayImage, String>)>> = if input == Path::new("-") {
        let stdin = BufReader::new(std::io::stdin().lock());
        Box::new(stream_frames(stdin).enumerate().map(|(i, f)| (format!("stdin:{i}"), f)))
    } else if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| runtime(format!("{}: {e}", input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_frame(p))
            .collect();
        files.sort();
        Box::new(files.into_iter().map(|p| {
            let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            (name, GrayImage::load(&p).map_err(|e| e.to_string()))
        }))
    } else if input.is_file() {
        let f = std::fs::File::open(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
        let name = input.display().to_string();
        Box::new(stream_frames(BufReader::new(f)).enumerate().map(move |(i, f)| (format!("{name}:{i}"), f)))
    } else {
        return Err(runtime(format!("{}: no such file or directory", input.display())));
    };

    let mut tracker = Tracker::new(cfg.marker.clone(), cfg.intrinsics(), opts);
    let mut csv = per_frame_header();
    let mut tracked = Vec::new();
    let mut count = 0;
    for (name, frame) in frames {
        count += 1;
        let outcome = match frame {
            Ok(img) if img.width != cfg.camera.width || img.height != cfg.camera.height => tracker.skip(format!(
                "frame is {}x{}, config expects {}x{}",
                img.width, img.height, cfg.camera.width, cfg.camera.height
            )),
            Ok(img) => tracker.process(&img),
            Err(e) => tracker.skip(e),
        };
        if let FrameOutcome::Skipped { reason, .. } = &outcome {
            eprintln!("{name}: skipped: {reason}");
        }
        per_frame_row(&mut csv, &name, &outcome);
        if let FrameOutcome::Tracked(r) = outcome {
            tracked.push(*r);
        }
    }
    if count == 0 {
        return Err(runtime(format!("{}: no frames", input.display())));
    }
    create_dir(out)?;
    write(&out.join("trajectory.txt"), &sim::export_trajectory(&tracked))?;
    write(&out.join("frames.csv"), &csv)?;
    println!("tracked {} of {count} frames", tracked.len());
    if tracked.is_empty() {
        return Err(runtime("no frame tracked"));
    }
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str, values: &[f64], out: &Path, jobs: Option<usize>) -> Outcome {
    let (cfg, opts) = load(common)?;
    let axis: SweepAxis = axis.parse().map_err(|e: String| Failure::Usage(e))?;
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] < w[0]) {
        return Err(Failure::Usage("--values must be finite and sorted ascending".into()));
    }
    let base = cfg.scenario();
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = run_sweep(&base, axis, values, &opts, jobs).map_err(runtime)?;
    write_sweep(out, &result, &base).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    print!("{}", sim::sweep_csv(&result));
    Ok(())
}

fn cmd_bench(common: &Common, frames: Option<usize>, out: Option<&Path>) -> Outcome {
    let (cfg, opts) = load(common)?;
    let frames = frames.unwrap_or(cfg.harness.bench_frames);
    if frames == 0 {
        return Err(Failure::Usage("--frames must be >= 1".into()));
    }
    let report = run_bench(&cfg.scenario(), frames, &opts).map_err(runtime)?;
    let table = report.table();
    print!("{table}");
    println!(
        "frames {} tracked {} mean_ms {:.3} fps {:.1} max_error_m {:.6}",
        report.frames,
        report.tracked,
        report.mean_total_ms(),
        report.fps,
        report.max_error()
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("stages.csv"), &table)?;
        let mut csv = per_frame_header();
        for o in &report.outcomes {
            per_frame_row(&mut csv, "", o);
        }
        write(&dir.join("frames.csv"), &csv)?;
        let tracked: Vec<_> = report.outcomes.iter().filter_map(|o| o.result().cloned()).collect();
        write(&dir.join("trajectory.txt"), &sim::export_trajectory(&tracked))?;
        let gt: Vec<TrajectoryRow> =
            report.gt.iter().enumerate().map(|(i, p)| TrajectoryRow::from_pose(i, p)).collect();
        write(&dir.join("ground_truth.txt"), &format_trajectory(&gt))?;
    }
    if report.tracked == 0 {
        return Err(runtime("no frame tracked"));
    }
    Ok(())
}

fn cmd_render(common: &Common, frames: usize, out: &Path) -> Outcome {
    let (cfg, _) = load(common)?;
    if frames == 0 {
        return Err(Failure::Usage("--frames must be >= 1".into()));
    }
    let scenario = cfg.scenario();
    let poses = orbit_poses(&scenario, frames).map_err(runtime)?;
    create_dir(out)?;
    let digits = frames.to_string().len().max(5);
    for (i, pose) in poses.iter().enumerate() {
        let img = render_frame(&scenario, pose, i).map_err(runtime)?;
        let ext = if img.rgb.is_some() { "ppm" } else { "pgm" };
        let path = out.join(format!("frame_{i:0digits$}.{ext}"));
        img.save(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    let gt: Vec<TrajectoryRow> = poses.iter().enumerate().map(|(i, p)| TrajectoryRow::from_pose(i, p)).collect();
    write(&out.join("ground_truth.txt"), &format_trajectory(&gt))?;
    println!("rendered {frames} frames to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_splits_concatenated_frames() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for (i, v) in [0.0f32, 1.0].iter().enumerate() {
            let p = dir.path().join(format!("{i}.pgm"));
            GrayImage::filled(3, 2, *v).save(&p).unwrap();
            bytes.extend(std::fs::read(&p).unwrap());
        }
        let frames: Vec<_> = stream_frames(&bytes[..]).collect();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].as_ref().unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn stream_stops_after_garbage() {
        let frames: Vec<_> = stream_frames(&b"P5\nxx"[..]).collect();
        assert_eq!(frames.len(), 1);
        assert!(frames[0].is_err());
    }

    #[test]
    fn frame_extensions() {
        assert!(is_frame(Path::new("a/b.PGM")));
        assert!(is_frame(Path::new("x.ppm")));
        assert!(!is_frame(Path::new("x.png")));
    }
}
