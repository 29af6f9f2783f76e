//! Trajectory observables: g(r), h(r), MSD diffusivity and stability time.


use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{minimum_image, Vec3};
use crate::md::Trajectory;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("trajectory has no frames")]
    Empty,
    #[error("r_max {r_max} Å exceeds half the smallest cell height ({limit} Å)")]
    RangeTooLarge { r_max: f64, limit: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("fit window covers fewer than two lags")]
    WindowTooShort,
    #[error("stability window {window} fs is longer than the run ({total} fs)")]
    WindowTooLong { window: f64, total: f64 },
    #[error("histograms use different binning")]
    BinMismatch,
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RdfConfig {
    /// Å
    pub bin_width: f64,
    /// Upper radius (Å); defaults to min(6 Å, half the smallest cell height).
    pub r_max: Option<f64>,
    /// Restrict to pairs of these two species.
    pub pair: Option<[u32; 2]>,
}

impl Default for RdfConfig {
    fn default() -> Self {
        RdfConfig {
            bin_width: 0.05,
            r_max: None,
            pair: None,
        }
    }
}

/// Radial pair statistics on a uniform grid.
///
/// `h` is the frame-averaged number of unordered pairs per bin and `g` the
/// same counts divided by the ideal-gas expectation
/// `N_a N_b / V · V_shell` (halved for like species).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rdf {
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub bin_width: f64,
    pub r_max: f64,
    pub pair: Option<[u32; 2]>,
    pub frames: usize,
}

impl Rdf {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,g,h\n");
        for k in 0..self.r.len() {
            out.push_str(&format!("{},{},{}\n", self.r[k], self.g[k], self.h[k]));
        }
        out
    }

    fn same_grid(&self, other: &Rdf) -> bool {
        self.r.len() == other.r.len() && (self.bin_width - other.bin_width).abs() < 1e-12
    }
}

fn shell_volume(lo: f64, hi: f64) -> f64 {
    4.0 / 3.0 * std::f64::consts::PI * (hi.powi(3) - lo.powi(3))
}

/// Frame-averaged g(r) and h(r).
pub fn compute_rdf(traj: &Trajectory, cfg: &RdfConfig) -> Result<Rdf> {
    if traj.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if !(cfg.bin_width > 0.0) {
        return Err(AnalysisError::Invalid("bin width must be positive".into()));
    }
    let cell = traj.cell.as_ref();
    let periodic = traj.pbc.iter().any(|&p| p) && cell.is_some();
    let limit = match cell {
        Some(c) if periodic => c
            .heights()
            .iter()
            .zip(traj.pbc)
            .filter(|(_, p)| *p)
            .map(|(h, _)| 0.5 * h)
            .fold(f64::INFINITY, f64::min),
        _ => f64::INFINITY,
    };
    let r_max = match cfg.r_max {
        Some(r) if r > limit + 1e-12 => return Err(AnalysisError::RangeTooLarge { r_max: r, limit }),
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(AnalysisError::Invalid(format!("r_max must be positive, got {r}"))),
        None => limit.min(6.0),
    };
    let nbins = (r_max / cfg.bin_width + 1e-9).floor() as usize;
    if nbins == 0 {
        return Err(AnalysisError::Invalid("r_max smaller than one bin".into()));
    }
    let r_max = nbins as f64 * cfg.bin_width;
    let z = &traj.atomic_numbers;
    let selected = |i: usize, j: usize| match cfg.pair {
        None => true,
        Some([a, b]) => (z[i] == a && z[j] == b) || (z[i] == b && z[j] == a),
    };
    let m = z.len();
    let pbc = traj.pbc;
    let hist_of = |k: usize| -> Vec<f64> {
        let pos = &traj.frames[k].positions;
        let mut h = vec![0.0; nbins];
        for i in 0..m {
            for j in i + 1..m {
                if !selected(i, j) {
                    continue;
                }
                let d = minimum_image(pos[j] - pos[i], cell, pbc).norm();
                if d < r_max {
                    let b = ((d / cfg.bin_width) as usize).min(nbins - 1);
                    h[b] += 1.0;
                }
            }
        }
        h
    };
    let per_frame: Vec<Vec<f64>> = (0..traj.len()).into_par_iter().map(hist_of).collect();
    let mut h = vec![0.0; nbins];
    for f in &per_frame {
        for (a, b) in h.iter_mut().zip(f) {
            *a += b;
        }
    }
    let nf = traj.len() as f64;
    for v in &mut h {
        *v /= nf;
    }
    let (na, nb, like) = match cfg.pair {
        None => (m as f64, m as f64, true),
        Some([a, b]) => (
            z.iter().filter(|&&x| x == a).count() as f64,
            z.iter().filter(|&&x| x == b).count() as f64,
            a == b,
        ),
    };
    let r: Vec<f64> = (0..nbins).map(|k| (k as f64 + 0.5) * cfg.bin_width).collect();
    let g = match cell {
        Some(c) if periodic => {
            let pairs = na * nb * if like { 0.5 } else { 1.0 };
            let volume = c.volume();
            (0..nbins)
                .map(|k| {
                    let lo = k as f64 * cfg.bin_width;
                    let ideal = pairs / volume * shell_volume(lo, lo + cfg.bin_width);
                    if ideal > 0.0 {
                        h[k] / ideal
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        // Without a volume there is no ideal-gas reference.
        _ => vec![f64::NAN; nbins],
    };
    Ok(Rdf {
        r,
        g,
        h,
        bin_width: cfg.bin_width,
        r_max,
        pair: cfg.pair,
        frames: traj.len(),
    })
}

/// Same binning as [`compute_rdf`]; returns the h(r) histogram only.
pub fn compute_hr(traj: &Trajectory, cfg: &RdfConfig) -> Result<Vec<f64>> {
    Ok(compute_rdf(traj, cfg)?.h)
}

/// `∫ |g_a(r) − g_b(r)| dr` over the common grid.
pub fn rdf_mae(a: &Rdf, b: &Rdf) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(AnalysisError::BinMismatch);
    }
    Ok(a.g
        .iter()
        .zip(&b.g)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        * a.bin_width)
}

/// Mean absolute difference of two h(r) histograms per bin.
pub fn hr_mae(a: &Rdf, b: &Rdf) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(AnalysisError::BinMismatch);
    }
    Ok(a.h.iter().zip(&b.h).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.h.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsdConfig {
    /// Fit window as fractions of the largest lag.
    pub fit_start: f64,
    pub fit_end: f64,
    /// Largest lag as a fraction of the trajectory length.
    pub max_lag_fraction: f64,
}

impl Default for MsdConfig {
    fn default() -> Self {
        MsdConfig {
            fit_start: 0.2,
            fit_end: 0.8,
            max_lag_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diffusion {
    /// 10⁻⁹ m²/s
    pub diffusivity: f64,
    /// fs
    pub lag: Vec<f64>,
    /// Å²
    pub msd: Vec<f64>,
    /// Å²/fs
    pub slope: f64,
    pub intercept: f64,
    /// RMS residual of the linear fit relative to the mean MSD in the window.
    pub relative_residual: f64,
    /// Log-log slope of MSD over the fit window: 1 for diffusion, 2 for
    /// ballistic motion.
    pub exponent: f64,
    pub diffusive: bool,
}

/// 1 Å²/fs in units of 10⁻⁹ m²/s.
const ANGSTROM2_PER_FS: f64 = 1e4;

fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Einstein diffusivity `D = slope / 6` of the unwrapped MSD, averaged over
/// atoms and time origins.
pub fn msd_diffusivity(traj: &Trajectory, cfg: &MsdConfig) -> Result<Diffusion> {
    let n = traj.len();
    if n < 10 {
        return Err(AnalysisError::TooFewFrames { need: 10, got: n });
    }
    if !(0.0..1.0).contains(&cfg.fit_start) || cfg.fit_end <= cfg.fit_start || cfg.fit_end > 1.0 {
        return Err(AnalysisError::Invalid("fit window must satisfy 0 ≤ start < end ≤ 1".into()));
    }
    if !(cfg.max_lag_fraction > 0.0 && cfg.max_lag_fraction <= 1.0) {
        return Err(AnalysisError::Invalid("max lag fraction must lie in (0, 1]".into()));
    }
    let unwrapped: Vec<Vec<Vec3>> = (0..n).map(|k| traj.unwrapped(k)).collect();
    let m = traj.atomic_numbers.len() as f64;
    let max_lag = ((cfg.max_lag_fraction * (n - 1) as f64) as usize).max(1);
    let msd: Vec<f64> = (1..=max_lag)
        .into_par_iter()
        .map(|l| {
            let mut acc = 0.0;
            for t in 0..n - l {
                for (a, b) in unwrapped[t + l].iter().zip(&unwrapped[t]) {
                    acc += (a - b).norm_squared();
                }
            }
            acc / ((n - l) as f64 * m)
        })
        .collect();
    let interval = traj.frame_interval();
    let lag: Vec<f64> = (1..=max_lag).map(|l| l as f64 * interval).collect();
    let lo = ((cfg.fit_start * max_lag as f64).ceil() as usize).max(1);
    let hi = (cfg.fit_end * max_lag as f64).floor() as usize;
    if hi < lo + 1 {
        return Err(AnalysisError::WindowTooShort);
    }
    let xs = &lag[lo - 1..hi];
    let ys = &msd[lo - 1..hi];
    let (slope, intercept) = least_squares(xs, ys);
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let rms = (xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum::<f64>()
        / ys.len() as f64)
        .sqrt();
    let relative_residual = if mean > 0.0 { rms / mean } else { 0.0 };
    let exponent = if ys.iter().all(|&y| y > 0.0) {
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        least_squares(&lx, &ly).0
    } else {
        0.0
    };
    Ok(Diffusion {
        diffusivity: slope / 6.0 * ANGSTROM2_PER_FS,
        lag,
        msd,
        slope,
        intercept,
        relative_residual,
        exponent,
        diffusive: (exponent - 1.0).abs() < 0.3,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// ps
    pub stability_time: f64,
    /// ps
    pub simulated_time: f64,
    /// Start of each evaluated window (ps).
    pub window_start: Vec<f64>,
    /// RDF MAE of each window against the reference.
    pub window_mae: Vec<f64>,
    pub threshold: f64,
}

/// Slides non-overlapping windows of `window` fs over the trajectory. The
/// first window whose RDF deviates from `reference` by more than
/// `threshold` marks the stability time; otherwise the whole (possibly
/// aborted) run counts as stable.
pub fn stability_time(
    traj: &Trajectory,
    reference: &Rdf,
    window: f64,
    threshold: f64,
) -> Result<StabilityReport> {
    let requested = traj.steps_requested as f64 * traj.dt;
    if !(window > 0.0) {
        return Err(AnalysisError::Invalid("window must be positive".into()));
    }
    if window > requested + 1e-9 {
        return Err(AnalysisError::WindowTooLong {
            window,
            total: requested,
        });
    }
    let total = traj.simulated_time();
    let cfg = RdfConfig {
        bin_width: reference.bin_width,
        r_max: Some(reference.r_max),
        pair: reference.pair,
    };
    let mut report = StabilityReport {
        stability_time: total / 1000.0,
        simulated_time: total / 1000.0,
        window_start: Vec::new(),
        window_mae: Vec::new(),
        threshold,
    };
    let mut k = 0usize;
    while (k + 1) as f64 * window <= total + 1e-9 {
        let start = k as f64 * window;
        let part = traj.window(start, start + window);
        if !part.is_empty() {
            let mae = rdf_mae(&compute_rdf(&part, &cfg)?, reference)?;
            report.window_start.push(start / 1000.0);
            report.window_mae.push(mae);
            if mae > threshold {
                report.stability_time = start / 1000.0;
                break;
            }
        }
        k += 1;
    }
    Ok(report)
}

/// Summary written by the analysis step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub frames: usize,
    /// ps
    pub simulated_time: f64,
    pub aborted: Option<String>,
    pub rdf_mae: Option<f64>,
    pub hr_mae: Option<f64>,
    /// 10⁻⁹ m²/s
    pub diffusivity: Option<f64>,
    pub reference_diffusivity: Option<f64>,
    pub diffusive: Option<bool>,
    pub stability: Option<StabilityReport>,
}
