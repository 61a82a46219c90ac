//! Trajectories, synthetic dataset generators and CSV I/O.
//!
//! All generators are deterministic per seed: every trajectory draws from
//! its own counter-derived RNG stream, so train and test splits are disjoint
//! by construction and independent of generation order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::phase::PhaseProfile;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("sample interval must be positive, got {0}")]
    InvalidDt(f64),
    #[error("trajectory contains non-finite samples")]
    NonFinite,
    #[error("label may not contain commas or newlines: {0:?}")]
    InvalidLabel(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A uniformly sampled multi-dimensional signal: `T x D` samples spaced
/// `dt` seconds apart.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: DMatrix<f64>,
    dt: f64,
    label: Option<String>,
    meta: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn new(samples: DMatrix<f64>, dt: f64) -> Result<Self, DataError> {
        if samples.nrows() < 2 {
            return Err(DataError::TooShort(samples.nrows()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(DataError::InvalidDt(dt));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite);
        }
        Ok(Self { samples, dt, label: None, meta: BTreeMap::new() })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least 2 samples
    }

    pub fn dims(&self) -> usize {
        self.samples.ncols()
    }

    /// Time spanned by the recording.
    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    /// Sample time of row `j`.
    pub fn time_of(&self, j: usize) -> f64 {
        j as f64 * self.dt
    }

    /// Row at index `j` as a column vector.
    pub fn row(&self, j: usize) -> DVector<f64> {
        self.samples.row(j).transpose()
    }

    /// Linear interpolation at time `t`, clamped to the recorded range.
    pub fn sample_at(&self, t: f64) -> DVector<f64> {
        let pos = (t / self.dt).clamp(0.0, (self.len() - 1) as f64);
        let j0 = pos.floor() as usize;
        let j1 = (j0 + 1).min(self.len() - 1);
        let frac = pos - j0 as f64;
        let a = self.samples.row(j0);
        let b = self.samples.row(j1);
        (a + (b - a) * frac).transpose()
    }

    /// Observation stream `(t, y_t)` over all samples.
    pub fn observations(&self) -> Vec<(f64, DVector<f64>)> {
        (0..self.len()).map(|j| (self.time_of(j), self.row(j))).collect()
    }
}

/// Protocol parameters of the synthetic planar reaching benchmark:
/// point-to-point reaches to a handful of targets, repeated with spatial
/// noise and per-trial timing variation, split into train and test halves.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub n_targets: usize,
    pub reps_per_target: usize,
    pub start: [f64; 2],
    pub targets: Vec<[f64; 2]>,
    /// Trial durations are drawn uniformly from this range (seconds).
    pub duration_range: (f64, f64),
    /// Both timing deltas are drawn uniformly from this range.
    pub timing_jitter: (f64, f64),
    /// Scale of the smooth spatial perturbation added to each trial.
    pub noise_sigma: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let start = [0.0, 0.0];
        let radius = 0.4;
        let angles = [20.0_f64, 65.0, 115.0, 160.0];
        let targets = angles
            .iter()
            .map(|deg| {
                let rad = deg.to_radians();
                [start[0] + radius * rad.cos(), start[1] + radius * rad.sin()]
            })
            .collect();
        Self {
            n_targets: 4,
            reps_per_target: 25,
            start,
            targets,
            duration_range: (0.7, 1.3),
            timing_jitter: (-0.12, 0.12),
            noise_sigma: 0.002,
            dt: 0.01,
            seed: 0,
        }
    }
}

/// Parameters of the synthetic joint-space pick-and-hand-over set: several
/// joints sharing one spatial template (all demos pass through the same
/// mid-movement pose) with per-demo timing jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct JointspaceSpec {
    pub n_joints: usize,
    pub n_demos: usize,
    /// Half-width of the uniform timing-delta jitter.
    pub timing_jitter: f64,
    /// Scale of the per-demo spatial perturbation (zero at start, middle
    /// and end of the movement).
    pub spatial_noise: f64,
    pub duration_range: (f64, f64),
    pub dt: f64,
    pub seed: u64,
}

impl Default for JointspaceSpec {
    fn default() -> Self {
        Self {
            n_joints: 7,
            n_demos: 11,
            timing_jitter: 0.12,
            spatial_noise: 0.01,
            duration_range: (0.9, 1.5),
            dt: 0.01,
            seed: 0,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Minimum-jerk point-to-point progression on `[0, 1]`.
fn min_jerk(s: f64) -> f64 {
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

fn draw_profile(rng: &mut impl Rng, jitter: (f64, f64), duration: f64) -> PhaseProfile {
    let (lo, hi) = jitter;
    let (d1, d2) = if lo < hi {
        (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
    } else {
        (lo, lo)
    };
    PhaseProfile { delta1: d1, delta2: d2, duration }
}

fn sample_curve(
    profile: &PhaseProfile,
    dt: f64,
    dims: usize,
    curve: impl Fn(f64, usize) -> f64,
) -> Trajectory {
    let len = (profile.duration / dt).floor() as usize + 1;
    let mut samples = DMatrix::zeros(len, dims);
    for j in 0..len {
        let phi = profile.phase_at(j as f64 * dt);
        for d in 0..dims {
            samples[(j, d)] = curve(phi, d);
        }
    }
    let mut traj = Trajectory::new(samples, dt).expect("generated trajectory is valid");
    // ground-truth timing, for synthesize-then-recover style checks
    traj.meta_mut().insert("delta1".into(), format!("{}", profile.delta1));
    traj.meta_mut().insert("delta2".into(), format!("{}", profile.delta2));
    traj
}

/// Ground-truth phase profile recorded by the generators, when present.
pub fn true_profile(traj: &Trajectory) -> Option<PhaseProfile> {
    let d1: f64 = traj.meta().get("delta1")?.parse().ok()?;
    let d2: f64 = traj.meta().get("delta2")?.parse().ok()?;
    Some(PhaseProfile { delta1: d1, delta2: d2, duration: traj.duration() })
}

/// Planar trajectories along vertically offset (hence non-intersecting)
/// parabolas, each executed with a random duration and timing profile.
pub fn gen_parabolic(n: usize, seed: u64) -> Vec<Trajectory> {
    assert!(n >= 1);
    let span = 0.5;
    let spacing = if n > 1 { span / (n - 1) as f64 } else { span };
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            // jitter stays below half the spacing so curves cannot touch
            let jitter = (rng.gen::<f64>() - 0.5) * 0.8 * spacing;
            let offset = if n > 1 { i as f64 * spacing + jitter } else { 0.25 };
            let duration = rng.gen_range(0.8..1.6);
            let profile = draw_profile(&mut rng, (-0.15, 0.15), duration);
            sample_curve(&profile, 0.01, 2, |phi, d| match d {
                0 => phi,
                _ => 0.8 * (phi - 0.5) * (phi - 0.5) + offset,
            })
            .with_label("parabola")
        })
        .collect()
}

/// Generate the reaching benchmark: per target, `reps_per_target` train and
/// as many test trajectories, labelled `mov1..movK`.
pub fn gen_reaching(spec: &BenchmarkSpec) -> (Vec<Trajectory>, Vec<Trajectory>) {
    assert!(spec.n_targets >= 1 && spec.n_targets <= spec.targets.len());
    assert!(spec.reps_per_target >= 1);
    let mut splits = Vec::new();
    for split in 0..2u64 {
        let mut set = Vec::new();
        for target in 0..spec.n_targets {
            for rep in 0..spec.reps_per_target {
                let stream = (split << 32) | ((target as u64) << 16) | rep as u64;
                let mut rng = stream_rng(spec.seed, stream);
                set.push(reaching_trial(spec, target, &mut rng));
            }
        }
        splits.push(set);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    (train, test)
}

fn reaching_trial(spec: &BenchmarkSpec, target: usize, rng: &mut impl Rng) -> Trajectory {
    let start = spec.start;
    let goal = spec.targets[target];
    let duration = rng.gen_range(spec.duration_range.0..=spec.duration_range.1);
    let profile = draw_profile(rng, spec.timing_jitter, duration);
    // Smooth perturbation that vanishes at both endpoints, so every trial
    // starts at the start point and lands on its target.
    let mut bump = [[0.0; 3]; 2];
    for d in 0..2 {
        for k in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            bump[d][k] = spec.noise_sigma * z;
        }
    }
    sample_curve(&profile, spec.dt, 2, |phi, d| {
        let reach = start[d] + (goal[d] - start[d]) * min_jerk(phi);
        let noise: f64 = (0..3)
            .map(|k| bump[d][k] * ((k + 1) as f64 * std::f64::consts::PI * phi).sin())
            .sum();
        reach + noise
    })
    .with_label(format!("mov{}", target + 1))
}

/// Convenience wrapper over [`gen_jointspace_with`] using the default
/// seven-joint, eleven-demo spec.
pub fn gen_jointspace(n_joints: usize, n_demos: usize, seed: u64) -> Vec<Trajectory> {
    gen_jointspace_with(&JointspaceSpec { n_joints, n_demos, seed, ..Default::default() })
}

/// Joint-space demonstrations sharing one spatial template. The per-demo
/// perturbation vanishes at the start, the middle and the end of the
/// movement, mimicking a task whose mid-movement pose is fixed.
pub fn gen_jointspace_with(spec: &JointspaceSpec) -> Vec<Trajectory> {
    assert!(spec.n_joints >= 1 && spec.n_demos >= 1);
    let mut template_rng = stream_rng(spec.seed, u64::MAX);
    let template: Vec<[f64; 3]> = (0..spec.n_joints)
        .map(|_| {
            [
                template_rng.gen_range(-1.0..1.0),        // start angle
                template_rng.gen_range(-1.2..1.2),        // reach amplitude
                template_rng.gen_range(-0.5..0.5),        // arc component
            ]
        })
        .collect();

    (0..spec.n_demos)
        .map(|demo| {
            let mut rng = stream_rng(spec.seed, demo as u64);
            let duration = if spec.duration_range.0 < spec.duration_range.1 {
                rng.gen_range(spec.duration_range.0..spec.duration_range.1)
            } else {
                spec.duration_range.0
            };
            let jitter = (-spec.timing_jitter, spec.timing_jitter);
            let profile = draw_profile(&mut rng, jitter, duration);
            let wobble: Vec<f64> = (0..spec.n_joints)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    spec.spatial_noise * z
                })
                .collect();
            sample_curve(&profile, spec.dt, spec.n_joints, |phi, d| {
                let [start, amp, arc] = template[d];
                start
                    + amp * min_jerk(phi)
                    + arc * (std::f64::consts::PI * phi).sin()
                    + wobble[d] * (2.0 * std::f64::consts::PI * phi).sin()
            })
            .with_label("handover")
        })
        .collect()
}

const CSV_MAGIC: &str = "# promp-trajectory v1";

/// Write trajectories in the line-oriented CSV format: a header per
/// trajectory, one row of 17-significant-digit floats per sample, and a
/// blank line between trajectories.
pub fn write_csv<W: Write>(writer: &mut W, trajectories: &[Trajectory]) -> Result<(), DataError> {
    for (i, traj) in trajectories.iter().enumerate() {
        let label = traj.label().unwrap_or("");
        if label.contains(',') || label.contains('\n') {
            return Err(DataError::InvalidLabel(label.to_string()));
        }
        if i > 0 {
            writeln!(writer)?;
        }
        writeln!(
            writer,
            "{CSV_MAGIC}, dt={}, dims={}, label={label}",
            traj.dt(),
            traj.dims()
        )?;
        let mut line = String::new();
        for j in 0..traj.len() {
            line.clear();
            for d in 0..traj.dims() {
                if d > 0 {
                    line.push(',');
                }
                write!(line, "{:.16e}", traj.samples()[(j, d)]).unwrap();
            }
            writeln!(writer, "{line}")?;
        }
    }
    Ok(())
}

pub fn write_csv_file(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<(), DataError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(&mut file, trajectories)?;
    file.flush()?;
    Ok(())
}

/// Read trajectories written by [`write_csv`], reporting malformed content
/// with its line number.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Trajectory>, DataError> {
    let mut trajectories = Vec::new();
    let mut header: Option<(f64, usize, Option<String>, usize)> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();

    let flush = |header: &mut Option<(f64, usize, Option<String>, usize)>,
                 rows: &mut Vec<Vec<f64>>,
                 out: &mut Vec<Trajectory>|
     -> Result<(), DataError> {
        if let Some((dt, dims, label, line)) = header.take() {
            if rows.len() < 2 {
                return Err(DataError::Parse {
                    line,
                    message: format!("trajectory has {} samples, need at least 2", rows.len()),
                });
            }
            let mut samples = DMatrix::zeros(rows.len(), dims);
            for (r, row) in rows.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    samples[(r, c)] = *v;
                }
            }
            let mut traj = Trajectory::new(samples, dt)
                .map_err(|e| DataError::Parse { line, message: e.to_string() })?;
            traj.label = label;
            out.push(traj);
            rows.clear();
        }
        Ok(())
    };

    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut header, &mut rows, &mut trajectories)?;
            continue;
        }
        if trimmed.starts_with('#') {
            flush(&mut header, &mut rows, &mut trajectories)?;
            header = Some(parse_header(trimmed, line_no)?);
            continue;
        }
        let Some((_, dims, _, _)) = header.as_ref() else {
            return Err(DataError::Parse {
                line: line_no,
                message: "sample row before any trajectory header".into(),
            });
        };
        let values: Result<Vec<f64>, _> = trimmed
            .split(',')
            .map(|tok| tok.trim().parse::<f64>())
            .collect();
        let values = values.map_err(|e| DataError::Parse {
            line: line_no,
            message: format!("bad float: {e}"),
        })?;
        if values.len() != *dims {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected {dims} values, got {}", values.len()),
            });
        }
        rows.push(values);
    }
    flush(&mut header, &mut rows, &mut trajectories)?;
    Ok(trajectories)
}

pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, DataError> {
    read_csv(std::fs::File::open(path)?)
}

fn parse_header(
    line: &str,
    line_no: usize,
) -> Result<(f64, usize, Option<String>, usize), DataError> {
    let err = |message: String| DataError::Parse { line: line_no, message };
    let rest = line
        .strip_prefix(CSV_MAGIC)
        .ok_or_else(|| err(format!("header must start with {CSV_MAGIC:?}")))?;

    let mut dt = None;
    let mut dims = None;
    let mut label = None;
    for field in rest.split(',') {
        let field = field.trim();
        if field.is_empty() {
            continue;
        }
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header field {field:?}")))?;
        match key.trim() {
            "dt" => {
                let v: f64 = value
                    .trim()
                    .parse()
                    .map_err(|e| err(format!("bad dt value: {e}")))?;
                dt = Some(v);
            }
            "dims" => {
                let v: usize = value
                    .trim()
                    .parse()
                    .map_err(|e| err(format!("bad dims value: {e}")))?;
                dims = Some(v);
            }
            "label" => {
                let v = value.trim();
                label = if v.is_empty() { None } else { Some(v.to_string()) };
            }
            other => return Err(err(format!("unknown header field {other:?}"))),
        }
    }
    let dt = dt.ok_or_else(|| err("missing required header field \"dt\"".into()))?;
    let dims = dims.ok_or_else(|| err("missing required header field \"dims\"".into()))?;
    if dims == 0 {
        return Err(err("dims must be positive".into()));
    }
    Ok((dt, dims, label, line_no))
}
