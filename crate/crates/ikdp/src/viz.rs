//! Deterministic SVG emitters: the denoising trace of a single solve and
//! per-step noising histograms in the arccos target coordinate.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::dataset::Dataset;
use crate::diffusion::{q_sample, DiffusionError, NoiseSchedule};
use crate::kinematics::{joint_positions, ChainSpec, JointAngles, KinematicsError, Point2};
use crate::tensor::Rng;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("no histogram steps requested")]
    EmptySteps,
    #[error("histograms need at least 2 bins, got {0}")]
    BadBins(usize),
    #[error("histogram dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

const VIEW: f64 = 600.0;

struct ViewMap {
    half: f64,
}

impl ViewMap {
    fn new(chain: &ChainSpec) -> ViewMap {
        // reach disk plus 10% margin
        ViewMap { half: chain.reach() * 1.1 }
    }

    fn x(&self, wx: f64) -> f64 {
        (wx + self.half) / (2.0 * self.half) * VIEW
    }

    fn y(&self, wy: f64) -> f64 {
        (self.half - wy) / (2.0 * self.half) * VIEW
    }
}

/// Map a world point into trace-view pixel coordinates (exposed so tests
/// can recompute vertex positions).
pub fn trace_view_point(chain: &ChainSpec, p: Point2) -> (f64, f64) {
    let vm = ViewMap::new(chain);
    (vm.x(p.x), vm.y(p.y))
}

/// Render every intermediate state of a denoising trace as a polyline
/// through the joint positions, fading from 0.1 opacity at the noisy end
/// to 1.0 at the final answer, with the target drawn as a cross.
pub fn trace_svg_string(
    trace: &[Vec<f32>],
    chain: &ChainSpec,
    target: Point2,
) -> Result<String, VizError> {
    if trace.is_empty() {
        return Err(VizError::EmptyTrace);
    }
    let vm = ViewMap::new(chain);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg version="1.1" width="{VIEW}" height="{VIEW}" xmlns="http://www.w3.org/2000/svg">"#
    );
    let _ = writeln!(svg, r#"<rect width="{VIEW}" height="{VIEW}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="#dddddd"/>"##,
        vm.x(0.0),
        vm.y(0.0),
        chain.reach() / (2.0 * vm.half) * VIEW
    );
    let steps = trace.len();
    for (i, state) in trace.iter().enumerate() {
        let angles = JointAngles::new(state.clone())?;
        let pts = joint_positions(chain, &angles)?;
        let opacity = if steps == 1 {
            1.0
        } else {
            0.1 + 0.9 * i as f64 / (steps - 1) as f64
        };
        let mut attr = String::new();
        for p in &pts {
            let _ = write!(attr, "{:.2},{:.2} ", vm.x(p.x), vm.y(p.y));
        }
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5" stroke-opacity="{:.3}"/>"##,
            attr.trim_end(),
            opacity
        );
    }
    // target cross
    let (cx, cy) = (vm.x(target.x), vm.y(target.y));
    let r = 7.0;
    let _ = writeln!(
        svg,
        r##"<path class="target-cross" d="M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}" stroke="#d62728" stroke-width="2.5" fill="none"/>"##,
        cx - r,
        cy - r,
        cx + r,
        cy + r,
        cx - r,
        cy + r,
        cx + r,
        cy - r
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Write the trace SVG to a file.
pub fn emit_trace_svg(
    trace: &[Vec<f32>],
    chain: &ChainSpec,
    target: Point2,
    path: &Path,
) -> Result<(), VizError> {
    let svg = trace_svg_string(trace, chain, target)?;
    std::fs::write(path, svg)?;
    Ok(())
}

const HIST_NOISE_SALT: u64 = 0x4849_5354;

/// Histogram counts for one panel. Step 0 is the raw dataset; step t >= 1
/// noises the stored t_x column (single-joint chains) or all angles
/// (general chains) in closed form with noise seeded from the dataset
/// seed and the step, then buckets the arccos-mapped (or raw) values.
pub fn noising_histogram_counts(
    ds: &Dataset,
    sched: &NoiseSchedule,
    step: usize,
    bins: usize,
) -> Result<Vec<usize>, VizError> {
    if bins < 2 {
        return Err(VizError::BadBins(bins));
    }
    if ds.is_empty() {
        return Err(VizError::EmptyDataset);
    }
    let arccos_view = ds.num_joints() == 1;
    let raw: Vec<f32> = if arccos_view {
        (0..ds.len()).map(|i| ds.target(i).x as f32).collect()
    } else {
        (0..ds.len())
            .flat_map(|i| ds.angles_row(i).to_vec())
            .collect()
    };
    let values = if step == 0 {
        raw
    } else {
        let mut rng = Rng::new(ds.seed() ^ HIST_NOISE_SALT ^ step as u64);
        let eps: Vec<f32> = (0..raw.len()).map(|_| rng.next_normal() as f32).collect();
        q_sample(&raw, step, &eps, sched)?
    };
    let (lo, hi) = if arccos_view {
        (0.0, std::f64::consts::PI)
    } else {
        (-std::f64::consts::TAU, std::f64::consts::TAU)
    };
    let mut counts = vec![0usize; bins];
    for &v in &values {
        let mapped = if arccos_view {
            (v as f64).clamp(-1.0, 1.0).acos()
        } else {
            v as f64
        };
        let frac = ((mapped - lo) / (hi - lo)).clamp(0.0, 1.0);
        let b = ((frac * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts)
}

/// One histogram panel per requested diffusion step, preceded by the raw
/// t = 0 panel. Steps must be valid schedule indices (>= 1).
pub fn noising_histogram_svg(
    ds: &Dataset,
    sched: &NoiseSchedule,
    steps: &[usize],
    bins: usize,
) -> Result<String, VizError> {
    if steps.is_empty() {
        return Err(VizError::EmptySteps);
    }
    let mut panels = vec![(0usize, noising_histogram_counts(ds, sched, 0, bins)?)];
    for &t in steps {
        panels.push((t, noising_histogram_counts(ds, sched, t, bins)?));
    }
    let pw = 280.0;
    let ph = 200.0;
    let margin = 24.0;
    let width = margin + (pw + margin) * panels.len() as f64;
    let height = ph + 2.0 * margin + 16.0;
    let max_count = panels
        .iter()
        .flat_map(|(_, c)| c.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg version="1.1" width="{width:.0}" height="{height:.0}" xmlns="http://www.w3.org/2000/svg">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width:.0}" height="{height:.0}" fill="white"/>"#);
    for (pi, (t, counts)) in panels.iter().enumerate() {
        let x0 = margin + (pw + margin) * pi as f64;
        let y0 = margin;
        let label = if *t == 0 {
            "t=0 (data)".to_string()
        } else {
            format!("t={t}")
        };
        let _ = writeln!(svg, r#"<g class="panel" data-step="{t}">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="13">{label}</text>"#,
            x0,
            y0 - 8.0
        );
        let bw = pw / counts.len() as f64;
        for (b, &c) in counts.iter().enumerate() {
            let h = ph * c as f64 / max_count as f64;
            let _ = writeln!(
                svg,
                r##"<rect class="bar" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"/>"##,
                x0 + bw * b as f64,
                y0 + ph - h,
                bw.max(1.0) - 0.5,
                h
            );
        }
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
            x0,
            y0 + ph,
            x0 + pw,
            y0 + ph
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Write the histogram panels to a file.
pub fn emit_noising_histogram(
    ds: &Dataset,
    sched: &NoiseSchedule,
    steps: &[usize],
    bins: usize,
    path: &Path,
) -> Result<(), VizError> {
    let svg = noising_histogram_svg(ds, sched, steps, bins)?;
    std::fs::write(path, svg)?;
    Ok(())
}
