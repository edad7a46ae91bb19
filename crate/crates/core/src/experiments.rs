//! Rate fits and convergence studies.
//!
//! Every study is a pure function of its spec and seeds and returns a report
//! with a CSV table (`parameter,mean,stderr`) and fitted exponents.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::darcy::{sample_dataset, DarcyProblem, ExpansionSpec};
use crate::error::{Error, Result};
use crate::field::{Field, GridGeometry, InnerProductSpec, TrigFieldSampler};
use crate::pca::{empirical_pca, excess_risk, CovarianceSummary, MeanEstimate};
use crate::rng;
use crate::spectral_ns::{run, run_with, ExactNonlinearity, NsRunConfig, SpectralField};

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub abscissae: Vec<f64>,
    pub ordinates: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square residual in log space.
    pub residual: f64,
    /// Two standard errors of the slope.
    pub half_width: f64,
}

pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<RateFit> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::invalid("a rate fit needs at least 3 points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("rate fits need positive finite data"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok(RateFit {
        abscissae: x.to_vec(),
        ordinates: y.to_vec(),
        slope,
        intercept,
        residual: (sse / n).sqrt(),
        half_width: 2.0 * (sse / (n - 2.0) / sxx).sqrt(),
    })
}

/// Fit `values[j-1] ~ C j^{slope}`.
pub fn decay_fit(values: &[f64]) -> Result<RateFit> {
    let x: Vec<f64> = (1..=values.len()).map(|j| j as f64).collect();
    fit_loglog(&x, values)
}

/// One row of a study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub parameter: f64,
    pub mean: f64,
    pub stderr: f64,
}

pub fn rows_to_csv(rows: &[Row]) -> String {
    let mut out = String::from("parameter,mean,stderr\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e}\n", r.parameter, r.mean, r.stderr));
    }
    out
}

/// Gaussian measure `sum_j sqrt(lambda_j) g_j e_j` on a 1-D grid of
/// `spectrum.len()` points, `e_j` the normalized point masses.
#[derive(Debug, Clone)]
pub struct GaussianSpectrum {
    geometry: GridGeometry,
    spectrum: Vec<f64>,
}

impl GaussianSpectrum {
    pub fn new(spectrum: &[f64]) -> Result<Self> {
        if spectrum.is_empty() || spectrum.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("spectrum must be nonempty and non-negative"));
        }
        if spectrum.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("spectrum must be descending"));
        }
        Ok(Self {
            geometry: GridGeometry::torus(1, spectrum.len())?,
            spectrum: spectrum.to_vec(),
        })
    }

    fn unit(&self, j: usize) -> Field {
        let w = 1.0 / self.geometry.cell_volume().sqrt();
        let mut values = vec![0.0; self.spectrum.len()];
        values[j] = w;
        Field::new(self.geometry, 1, values).expect("valid shape")
    }

    pub fn covariance(&self) -> Result<CovarianceSummary> {
        let pairs: Vec<(f64, Field)> = self.spectrum.iter().enumerate().map(|(j, l)| (*l, self.unit(j))).collect();
        CovarianceSummary::from_eigenpairs(&pairs, InnerProductSpec::L2)
    }

    pub fn eigenfunctions(&self) -> Vec<Field> {
        (0..self.spectrum.len()).map(|j| self.unit(j)).collect()
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Field> {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::seeded(seed);
        let w = 1.0 / self.geometry.cell_volume().sqrt();
        (0..n)
            .map(|_| {
                let values = self
                    .spectrum
                    .iter()
                    .map(|l| {
                        let g: f64 = StandardNormal.sample(&mut r);
                        l.sqrt() * g * w
                    })
                    .collect();
                Field::new(self.geometry, 1, values).expect("consistent shape")
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRateReport {
    pub d: usize,
    pub rows: Vec<Row>,
    /// Per sample size, the `1 - delta` quantile of the excess risk.
    pub quantiles: Vec<f64>,
    pub delta: f64,
    pub fit: RateFit,
    pub min_excess: f64,
}

/// Mean excess risk of empirical PCA against the sample size.
pub fn pca_rate_study(
    spectrum: &[f64],
    d: usize,
    n_grid: &[usize],
    trials: usize,
    delta: f64,
    seed: u64,
) -> Result<PcaRateReport> {
    if n_grid.len() < 3 || trials == 0 {
        return Err(Error::invalid("need at least 3 sample sizes and one trial"));
    }
    let measure = GaussianSpectrum::new(spectrum)?;
    let cov = measure.covariance()?;
    let mut rows = Vec::new();
    let mut quantiles = Vec::new();
    let mut min_excess = f64::INFINITY;
    for (gi, &n) in n_grid.iter().enumerate() {
        let mut risks: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let samples = measure.sample(n, seed ^ ((gi as u64) << 32 | t as u64));
                let basis = empirical_pca(&samples, InnerProductSpec::L2, d)?;
                excess_risk(&basis, &cov)
            })
            .collect::<Result<_>>()?;
        let est = MeanEstimate::from_samples(&risks);
        min_excess = risks.iter().copied().fold(min_excess, f64::min);
        risks.sort_by(f64::total_cmp);
        let qi = (((1.0 - delta) * trials as f64).ceil() as usize).clamp(1, trials) - 1;
        quantiles.push(risks[qi]);
        rows.push(Row {
            parameter: n as f64,
            mean: est.mean,
            stderr: est.stderr,
        });
    }
    let fit = fit_loglog(
        &rows.iter().map(|r| r.parameter).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.mean.max(f64::MIN_POSITIVE)).collect::<Vec<_>>(),
    )?;
    Ok(PcaRateReport {
        d,
        rows,
        quantiles,
        delta,
        fit,
        min_excess,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    /// `(d, sum_{j > d} lambda_j)` at the fitted dimensions.
    pub tails: Vec<Row>,
    pub fit: RateFit,
    pub target: f64,
    pub slack: f64,
    pub passed: bool,
}

fn tail_report(eigenvalues: Vec<f64>, d_grid: &[usize], target: f64, slack: f64) -> Result<SpectrumReport> {
    let tails: Vec<Row> = d_grid
        .iter()
        .map(|&d| Row {
            parameter: d as f64,
            mean: eigenvalues.iter().skip(d).sum(),
            stderr: 0.0,
        })
        .collect();
    let fit = fit_loglog(
        &tails.iter().map(|r| r.parameter).collect::<Vec<_>>(),
        &tails.iter().map(|r| r.mean).collect::<Vec<_>>(),
    )?;
    let passed = fit.slope <= target + slack;
    Ok(SpectrumReport {
        eigenvalues,
        tails,
        fit,
        target,
        slack,
        passed,
    })
}

/// Amplitude exponent of the trigonometric ensemble used for smoothness `zeta`
/// in `n` dimensions: `|k|^{-(zeta + n/2 + 1/4)}` puts the fields in `H^zeta`.
pub fn smoothness_amplitude_exponent(zeta: f64, n: usize) -> f64 {
    zeta + n as f64 / 2.0 + 0.25
}

/// Empirical PCA tail of a `H^zeta` trigonometric ensemble on the `n`-torus.
pub fn smoothness_decay_study(
    zeta: f64,
    n: usize,
    points: usize,
    samples: usize,
    d_grid: &[usize],
    seed: u64,
) -> Result<SpectrumReport> {
    if !(zeta > 0.0) {
        return Err(Error::invalid("smoothness must be positive"));
    }
    let geometry = GridGeometry::torus(n, points)?;
    let sampler = TrigFieldSampler::new(geometry, smoothness_amplitude_exponent(zeta, n))?;
    // each +-k pair carries two eigenfunctions
    let resolved = 2 * sampler.modes().len();
    let d_max = d_grid.iter().copied().max().unwrap_or(0);
    if 4 * d_max > resolved || d_max >= samples {
        return Err(Error::invalid(format!(
            "grid of {points} points resolves {resolved} modes; too few for d up to {d_max} with {samples} samples"
        )));
    }
    let fields: Vec<Field> = (0..samples)
        .into_par_iter()
        .map(|k| sampler.sample(&mut rng::substream(seed, k as u64)))
        .collect();
    let basis = empirical_pca(&fields, InnerProductSpec::L2, d_max)?;
    tail_report(basis.eigenvalues().to_vec(), d_grid, -2.0 * zeta / n as f64, 0.3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarcySpectrumReport {
    pub input: SpectrumReport,
    pub output: SpectrumReport,
}

/// Input (`L2`) and output (`H10`) PCA tails of a sampled Darcy dataset.
pub fn darcy_spectrum_study(problem: &DarcyProblem, n: usize, d_grid: &[usize], seed: u64) -> Result<DarcySpectrumReport> {
    let data = sample_dataset(problem, n, seed)?;
    let d_max = d_grid.iter().copied().max().unwrap_or(1);
    let alpha = problem.expansion().alpha;
    let bx = empirical_pca(&data.inputs, InnerProductSpec::L2, d_max)?;
    let by = empirical_pca(&data.outputs, InnerProductSpec::H10, d_max)?;
    Ok(DarcySpectrumReport {
        input: tail_report(bx.eigenvalues().to_vec(), d_grid, -(2.0 * alpha + 1.0), 0.3)?,
        output: tail_report(by.eigenvalues().to_vec(), d_grid, -2.0 * alpha, 0.5)?,
    })
}

/// Default Darcy study problem on `points` interior nodes per axis.
pub fn darcy_study_problem(points: usize, truncation: usize, alpha: f64) -> Result<DarcyProblem> {
    DarcyProblem::new(GridGeometry::unit_box(2, points)?, ExpansionSpec::new(1.0, truncation, alpha, 1.0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsRow {
    pub k_max: usize,
    pub dt: f64,
    /// `max_m ||u^m - u(t^m)||_{L2}`
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsConvergenceReport {
    pub temporal: Vec<NsRow>,
    /// Fitted order of the error in `dt` at fixed `K`.
    pub temporal_order: f64,
    pub refinement: Vec<NsRow>,
    /// `error[i] / error[i+1]` along the refinement path.
    pub refinement_ratios: Vec<f64>,
}

impl NsConvergenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("study,k_max,dt,error\n");
        for (name, rows) in [("temporal", &self.temporal), ("refinement", &self.refinement)] {
            for r in rows {
                out.push_str(&format!("{name},{},{:e},{:e}\n", r.k_max, r.dt, r.error));
            }
        }
        out
    }
}

/// Largest `L2` distance to the exact Taylor-Green solution over all steps.
pub fn taylor_green_error(config: &NsRunConfig) -> Result<NsRow> {
    let schedule = config.schedule()?;
    let u0 = SpectralField::taylor_green(config.k_max, config.nu, 0.0)?;
    let traj = run_with(&u0, config, &ExactNonlinearity::new(config.k_max))?;
    let error = traj
        .states
        .iter()
        .enumerate()
        .map(|(m, u)| {
            let exact = SpectralField::taylor_green(config.k_max, config.nu, m as f64 * schedule.dt)?;
            Ok(u.axpy(-1.0, &exact)?.l2_norm())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(NsRow {
        k_max: config.k_max,
        dt: schedule.dt,
        error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsStudyGrid {
    pub base: NsRunConfig,
    /// Time steps at `base.k_max`.
    pub dts: Vec<f64>,
    /// Cutoffs refined with `dt` from the schedule (`dt <= K^{-r}`).
    pub cutoffs: Vec<usize>,
}

impl Default for NsStudyGrid {
    fn default() -> Self {
        Self {
            base: NsRunConfig {
                k_max: 16,
                r: 3.0,
                ..NsRunConfig::default()
            },
            dts: vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0],
            cutoffs: vec![4, 8, 16],
        }
    }
}

/// Taylor-Green convergence in `dt` and along `(K, dt = K^{-r})`.
pub fn ns_convergence_study(grid: &NsStudyGrid) -> Result<NsConvergenceReport> {
    let temporal: Vec<NsRow> = grid
        .dts
        .par_iter()
        .map(|&dt| {
            taylor_green_error(&NsRunConfig {
                dt: Some(dt),
                ..grid.base.clone()
            })
        })
        .collect::<Result<_>>()?;
    let temporal_order = if temporal.len() >= 3 {
        fit_loglog(
            &temporal.iter().map(|r| r.dt).collect::<Vec<_>>(),
            &temporal.iter().map(|r| r.error).collect::<Vec<_>>(),
        )?
        .slope
    } else {
        f64::NAN
    };
    let refinement: Vec<NsRow> = grid
        .cutoffs
        .par_iter()
        .map(|&k| {
            taylor_green_error(&NsRunConfig {
                k_max: k,
                dt: None,
                ..grid.base.clone()
            })
        })
        .collect::<Result<_>>()?;
    let refinement_ratios = refinement.windows(2).map(|w| w[0].error / w[1].error).collect();
    Ok(NsConvergenceReport {
        temporal,
        temporal_order,
        refinement,
        refinement_ratios,
    })
}

/// Final-time error against a resolved reference for general initial data.
pub fn ns_reference_error(u0: &SpectralField, config: &NsRunConfig, reference: &SpectralField) -> Result<f64> {
    let (u, _) = run(&u0.with_cutoff(config.k_max), config)?;
    let k = reference.k_max().max(config.k_max);
    Ok(u.with_cutoff(k).axpy(-1.0, &reference.with_cutoff(k))?.l2_norm())
}

/// A study request, as read from the command line or a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StudySpec {
    PcaRate {
        spectrum: Vec<f64>,
        d: usize,
        n_grid: Vec<usize>,
        trials: usize,
        delta: f64,
        seed: u64,
    },
    Smoothness {
        zeta: f64,
        n: usize,
        points: usize,
        samples: usize,
        d_grid: Vec<usize>,
        seed: u64,
    },
    DarcySpectrum {
        points: usize,
        truncation: usize,
        alpha: f64,
        samples: usize,
        d_grid: Vec<usize>,
        seed: u64,
    },
    NsConvergence(NsStudyGrid),
}

impl StudySpec {
    pub fn default_for(kind: &str) -> Result<Self> {
        Ok(match kind {
            "pca-rate" => StudySpec::PcaRate {
                spectrum: (0..10).map(|j| 0.25f64.powi(j)).collect(),
                d: 2,
                n_grid: (5..=12).map(|e| 1usize << e).collect(),
                trials: 32,
                delta: 0.1,
                seed: 0,
            },
            "smoothness" => StudySpec::Smoothness {
                zeta: 1.0,
                n: 1,
                points: 256,
                samples: 256,
                d_grid: vec![2, 4, 8, 16, 32],
                seed: 0,
            },
            "darcy-spectrum" => StudySpec::DarcySpectrum {
                points: 31,
                truncation: 32,
                alpha: 2.0,
                samples: 512,
                d_grid: vec![2, 3, 4, 6, 8, 12, 16],
                seed: 0,
            },
            "ns-convergence" => StudySpec::NsConvergence(NsStudyGrid::default()),
            other => return Err(Error::invalid(format!("unknown study kind '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub json: serde_json::Value,
    pub csv: String,
}

pub fn run_study(spec: &StudySpec) -> Result<StudyOutput> {
    Ok(match spec {
        StudySpec::PcaRate {
            spectrum,
            d,
            n_grid,
            trials,
            delta,
            seed,
        } => {
            let r = pca_rate_study(spectrum, *d, n_grid, *trials, *delta, *seed)?;
            StudyOutput {
                csv: rows_to_csv(&r.rows),
                json: serde_json::to_value(&r)?,
            }
        }
        StudySpec::Smoothness {
            zeta,
            n,
            points,
            samples,
            d_grid,
            seed,
        } => {
            let r = smoothness_decay_study(*zeta, *n, *points, *samples, d_grid, *seed)?;
            StudyOutput {
                csv: rows_to_csv(&r.tails),
                json: serde_json::to_value(&r)?,
            }
        }
        StudySpec::DarcySpectrum {
            points,
            truncation,
            alpha,
            samples,
            d_grid,
            seed,
        } => {
            let problem = darcy_study_problem(*points, *truncation, *alpha)?;
            let r = darcy_spectrum_study(&problem, *samples, d_grid, *seed)?;
            let mut csv = String::from("side,parameter,mean,stderr\n");
            for (side, rows) in [("input", &r.input.tails), ("output", &r.output.tails)] {
                for row in rows {
                    csv.push_str(&format!("{side},{},{:e},{:e}\n", row.parameter, row.mean, row.stderr));
                }
            }
            StudyOutput {
                csv,
                json: serde_json::to_value(&r)?,
            }
        }
        StudySpec::NsConvergence(grid) => {
            let r = ns_convergence_study(grid)?;
            StudyOutput {
                csv: r.to_csv(),
                json: serde_json::to_value(&r)?,
            }
        }
    })
}
