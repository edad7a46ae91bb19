//! Fourier-Galerkin scheme for the 2-D periodic incompressible Navier-Stokes
//! equations with a semi-implicit midpoint step.
//!
//! Velocity fields are truncated Fourier series
//! `u(x) = sum_{|k|_inf <= K} u_k e^{i k.x}` on `[0, 2 pi]^2` with `u_k in C^2`.
//! Norms are `l2` norms of the coefficient vector; the `L2` norm of the field
//! is `2 pi` times larger.
//!
//! One time step solves
//! `u^{m+1} = u^m - dt P_K(u^m . grad u^{m+1/2}) + dt nu Lap u^{m+1/2}`
//! with `u^{m+1/2} = (u^m + u^{m+1}) / 2` by a fixed number of Picard
//! iterations of the map [`fixed_point_map`] started from zero. The advecting
//! field is taken at level `m` and the gradient falls on the midpoint.

use std::f64::consts::{E, PI};
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{bin, Fft2};
use crate::rng;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Real divergence-free candidate velocity field with cutoff `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    k_max: usize,
    coeffs: Vec<[Complex64; 2]>,
}

impl SpectralField {
    pub fn zeros(k_max: usize) -> Self {
        let side = 2 * k_max + 1;
        Self {
            k_max,
            coeffs: vec![[ZERO; 2]; side * side],
        }
    }

    pub fn from_coefficients(k_max: usize, coeffs: Vec<[Complex64; 2]>) -> Result<Self> {
        let side = 2 * k_max + 1;
        if coeffs.len() != side * side {
            return Err(Error::DimensionMismatch {
                expected: side * side,
                found: coeffs.len(),
            });
        }
        if coeffs.iter().flatten().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectral coefficients"));
        }
        Ok(Self { k_max, coeffs })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn side(&self) -> usize {
        2 * self.k_max + 1
    }

    pub fn coefficients(&self) -> &[[Complex64; 2]] {
        &self.coeffs
    }

    /// Wavenumbers in storage order (`k1` fastest).
    pub fn wavenumbers(&self) -> impl Iterator<Item = [i64; 2]> + '_ {
        let k = self.k_max as i64;
        let side = self.side();
        (0..side * side).map(move |i| [(i % side) as i64 - k, (i / side) as i64 - k])
    }

    pub fn index(&self, k: [i64; 2]) -> Option<usize> {
        let km = self.k_max as i64;
        if k[0].abs() > km || k[1].abs() > km {
            return None;
        }
        Some(((k[1] + km) as usize) * self.side() + (k[0] + km) as usize)
    }

    pub fn get(&self, k: [i64; 2]) -> [Complex64; 2] {
        self.index(k).map(|i| self.coeffs[i]).unwrap_or([ZERO; 2])
    }

    pub fn set(&mut self, k: [i64; 2], value: [Complex64; 2]) {
        let i = self.index(k).expect("wavenumber inside the cutoff");
        self.coeffs[i] = value;
    }

    /// Set `u_k` and `u_{-k} = conj(u_k)` together.
    pub fn set_real_mode(&mut self, k: [i64; 2], value: [Complex64; 2]) {
        self.set(k, value);
        self.set([-k[0], -k[1]], [value[0].conj(), value[1].conj()]);
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().flatten().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `l2` inner product `Re sum_k conj(u_k) . v_k`; for real fields this is
    /// `(2 pi)^-2` times the `L2` inner product.
    pub fn inner(&self, other: &SpectralField) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a[0].conj() * b[0] + a[1].conj() * b[1]).re)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        2.0 * PI * self.norm()
    }

    fn check(&self, other: &SpectralField) -> Result<()> {
        if self.k_max != other.k_max {
            return Err(Error::DimensionMismatch {
                expected: self.k_max,
                found: other.k_max,
            });
        }
        Ok(())
    }

    pub fn axpy(&self, alpha: f64, other: &SpectralField) -> Result<SpectralField> {
        self.check(other)?;
        Ok(Self {
            k_max: self.k_max,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| [a[0] + alpha * b[0], a[1] + alpha * b[1]])
                .collect(),
        })
    }

    pub fn scaled(&self, alpha: f64) -> SpectralField {
        Self {
            k_max: self.k_max,
            coeffs: self.coeffs.iter().map(|a| [alpha * a[0], alpha * a[1]]).collect(),
        }
    }

    pub fn distance(&self, other: &SpectralField) -> Result<f64> {
        Ok(self.axpy(-1.0, other)?.norm())
    }

    /// `max_k |u_{-k} - conj(u_k)|`.
    pub fn hermitian_defect(&self) -> f64 {
        self.wavenumbers()
            .zip(&self.coeffs)
            .map(|(k, c)| {
                let m = self.get([-k[0], -k[1]]);
                (m[0] - c[0].conj()).norm().max((m[1] - c[1].conj()).norm())
            })
            .fold(0.0, f64::max)
    }

    /// `max_k |k . u_k|`.
    pub fn divergence_defect(&self) -> f64 {
        self.wavenumbers()
            .zip(&self.coeffs)
            .map(|(k, c)| (k[0] as f64 * c[0] + k[1] as f64 * c[1]).norm())
            .fold(0.0, f64::max)
    }

    /// Same field with cutoff `k_new`, zero-padding or truncating.
    pub fn with_cutoff(&self, k_new: usize) -> SpectralField {
        let mut out = SpectralField::zeros(k_new);
        let k = k_new.min(self.k_max) as i64;
        for k2 in -k..=k {
            for k1 in -k..=k {
                out.set([k1, k2], self.get([k1, k2]));
            }
        }
        out
    }

    /// Point value by direct summation.
    pub fn eval(&self, x: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, c) in self.wavenumbers().zip(&self.coeffs) {
            let phase = Complex64::from_polar(1.0, k[0] as f64 * x[0] + k[1] as f64 * x[1]);
            out[0] += (c[0] * phase).re;
            out[1] += (c[1] * phase).re;
        }
        out
    }

    /// Both components on an `n x n` grid `x_j = 2 pi j / n`, `x` fastest.
    pub fn to_grid(&self, n: usize) -> Result<[Vec<f64>; 2]> {
        if n < self.side() {
            return Err(Error::invalid(format!(
                "grid of {n} points cannot resolve cutoff {}",
                self.k_max
            )));
        }
        let plan = Fft2::new(n);
        let mut out = [Vec::new(), Vec::new()];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut data = vec![ZERO; n * n];
            for (k, v) in self.wavenumbers().zip(&self.coeffs) {
                data[bin(k[1], n) * n + bin(k[0], n)] = v[c];
            }
            plan.process(&mut data, true);
            *slot = data.iter().map(|z| z.re).collect();
        }
        Ok(out)
    }

    /// Truncated Fourier coefficients of grid samples (inverse of [`Self::to_grid`]
    /// for band-limited data).
    pub fn from_grid(k_max: usize, n: usize, values: &[Vec<f64>; 2]) -> Result<SpectralField> {
        if values[0].len() != n * n || values[1].len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                found: values[0].len().min(values[1].len()),
            });
        }
        if n < 2 * k_max + 1 {
            return Err(Error::invalid("grid too coarse for the requested cutoff"));
        }
        let plan = Fft2::new(n);
        let mut out = SpectralField::zeros(k_max);
        let scale = 1.0 / (n * n) as f64;
        for c in 0..2 {
            let mut data: Vec<Complex64> = values[c].iter().map(|v| Complex64::new(*v, 0.0)).collect();
            plan.process(&mut data, false);
            let ks: Vec<[i64; 2]> = out.wavenumbers().collect();
            for (i, k) in ks.into_iter().enumerate() {
                out.coeffs[i][c] = data[bin(k[1], n) * n + bin(k[0], n)] * scale;
            }
        }
        Ok(out)
    }

    /// Exact Taylor-Green vortex `(sin x cos y, -cos x sin y) e^{-2 nu t}`.
    pub fn taylor_green(k_max: usize, nu: f64, t: f64) -> Result<SpectralField> {
        if k_max == 0 {
            return Err(Error::invalid("Taylor-Green needs cutoff at least 1"));
        }
        let decay = (-2.0 * nu * t).exp();
        let mut out = SpectralField::zeros(k_max);
        for s1 in [-1i64, 1] {
            for s2 in [-1i64, 1] {
                // sin x cos y -> -i s1 / 4 ; -cos x sin y -> i s2 / 4
                out.set(
                    [s1, s2],
                    [
                        Complex64::new(0.0, -(s1 as f64) / 4.0 * decay),
                        Complex64::new(0.0, s2 as f64 / 4.0 * decay),
                    ],
                );
            }
        }
        Ok(out)
    }

    /// Random real divergence-free field with zero mean, spectrum
    /// `|k|^{-decay}` and `l2` norm `norm`.
    pub fn random_divergence_free(k_max: usize, decay: f64, norm: f64, seed: u64) -> SpectralField {
        let mut r = rng::seeded(seed);
        let mut out = SpectralField::zeros(k_max);
        let k = k_max as i64;
        for k2 in 0..=k {
            for k1 in -k..=k {
                if k2 == 0 && k1 <= 0 {
                    continue;
                }
                let amp = ((k1 * k1 + k2 * k2) as f64).powf(-decay / 2.0);
                let mut draw = || {
                    Complex64::from_polar(amp * r.random::<f64>(), 2.0 * PI * r.random::<f64>())
                };
                let v = [draw(), draw()];
                out.set_real_mode([k1, k2], v);
            }
        }
        let projected = leray_project(&out);
        let n = projected.norm();
        if n == 0.0 {
            projected
        } else {
            projected.scaled(norm / n)
        }
    }
}

/// Multiply each `u_k`, `k != 0`, by `I - k k^T / |k|^2`.
pub fn leray_project(u: &SpectralField) -> SpectralField {
    let mut out = u.clone();
    let ks: Vec<[i64; 2]> = u.wavenumbers().collect();
    for (c, k) in out.coeffs.iter_mut().zip(ks) {
        if k == [0, 0] {
            continue;
        }
        let (a, b) = (k[0] as f64, k[1] as f64);
        let kk = a * a + b * b;
        let dot = (a * c[0] + b * c[1]) / kk;
        c[0] -= a * dot;
        c[1] -= b * dot;
    }
    out
}

/// The advection term `(u, v) -> P_K(u . grad v)` or an approximation of it.
pub trait Nonlinearity: Sync {
    fn k_max(&self) -> usize;
    fn apply(&self, u: &SpectralField, v: &SpectralField) -> Result<SpectralField>;
}

/// Dealiased pseudo-spectral evaluation on a `(4K+1)^2` grid.
pub struct ExactNonlinearity {
    k_max: usize,
    plan: Fft2,
}

impl ExactNonlinearity {
    pub fn new(k_max: usize) -> Self {
        Self {
            k_max,
            plan: Fft2::new(4 * k_max + 1),
        }
    }

    pub fn grid_points(&self) -> usize {
        self.plan.len()
    }

    fn to_grid(&self, k: impl Iterator<Item = [i64; 2]>, values: impl Iterator<Item = Complex64>) -> Vec<f64> {
        let n = self.plan.len();
        let mut data = vec![ZERO; n * n];
        for (k, v) in k.zip(values) {
            data[bin(k[1], n) * n + bin(k[0], n)] = v;
        }
        self.plan.process(&mut data, true);
        data.iter().map(|z| z.re).collect()
    }
}

impl Nonlinearity for ExactNonlinearity {
    fn k_max(&self) -> usize {
        self.k_max
    }

    fn apply(&self, u: &SpectralField, v: &SpectralField) -> Result<SpectralField> {
        u.check(v)?;
        if u.k_max != self.k_max {
            return Err(Error::DimensionMismatch {
                expected: self.k_max,
                found: u.k_max,
            });
        }
        let n = self.plan.len();
        let uc: Vec<Vec<f64>> = (0..2)
            .map(|c| self.to_grid(u.wavenumbers(), u.coeffs.iter().map(|x| x[c])))
            .collect();
        let mut product = [vec![0.0; n * n], vec![0.0; n * n]];
        for (c, prod) in product.iter_mut().enumerate() {
            for (j, uj) in uc.iter().enumerate() {
                // d_j v_c has coefficients i k_j v_c
                let grad = self.to_grid(
                    v.wavenumbers(),
                    v.wavenumbers()
                        .zip(&v.coeffs)
                        .map(|(k, x)| Complex64::new(0.0, k[j] as f64) * x[c]),
                );
                for ((p, a), b) in prod.iter_mut().zip(uj).zip(&grad) {
                    *p += a * b;
                }
            }
        }
        let mut out = SpectralField::zeros(self.k_max);
        let scale = 1.0 / (n * n) as f64;
        let ks: Vec<[i64; 2]> = out.wavenumbers().collect();
        for (c, prod) in product.iter().enumerate() {
            let mut data: Vec<Complex64> = prod.iter().map(|p| Complex64::new(*p, 0.0)).collect();
            self.plan.process(&mut data, false);
            for (i, k) in ks.iter().enumerate() {
                out.coeffs[i][c] = data[bin(k[1], n) * n + bin(k[0], n)] * scale;
            }
        }
        Ok(leray_project(&out))
    }
}

/// `P_K(u . grad v)` with the dealiased pseudo-spectral product.
pub fn nonlinear_term(u: &SpectralField, v: &SpectralField) -> Result<SpectralField> {
    ExactNonlinearity::new(u.k_max).apply(u, v)
}

/// `F(w)_k = (1 + dt nu |k|^2 / 2)^{-1} [u_k - dt NL(u, (u + w)/2)_k - dt nu |k|^2 u_k / 2]`.
pub fn fixed_point_map(
    u: &SpectralField,
    w: &SpectralField,
    dt: f64,
    nu: f64,
    nl: &dyn Nonlinearity,
) -> Result<SpectralField> {
    let mid = u.axpy(1.0, w)?.scaled(0.5);
    let adv = nl.apply(u, &mid)?;
    let mut out = SpectralField::zeros(u.k_max);
    let ks: Vec<[i64; 2]> = u.wavenumbers().collect();
    for (i, k) in ks.iter().enumerate() {
        let half = 0.5 * dt * nu * (k[0] * k[0] + k[1] * k[1]) as f64;
        for c in 0..2 {
            out.coeffs[i][c] = (u.coeffs[i][c] - dt * adv.coeffs[i][c] - half * u.coeffs[i][c]) / (1.0 + half);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsRunConfig {
    /// Fourier cutoff `K`.
    pub k_max: usize,
    pub nu: f64,
    pub t_final: f64,
    /// Bound `M` on the initial `l2` norm.
    pub m_bound: f64,
    /// Assumed Sobolev regularity of the data, used in `dt <= K^{-r}`.
    pub r: f64,
    pub c_cfl: f64,
    /// Fixed time step instead of the derived one; must divide `t_final`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Fixed number of Picard iterations instead of the derived one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

impl Default for NsRunConfig {
    fn default() -> Self {
        Self {
            k_max: 8,
            nu: 0.1,
            t_final: 1.0,
            m_bound: 1.0,
            r: 2.5,
            c_cfl: 1.0,
            dt: None,
            iterations: None,
        }
    }
}

/// Derived quantities of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub m_bar: f64,
    pub t_bar: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub epsilon: f64,
    pub iterations: usize,
}

impl NsRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::invalid("cutoff K must be at least 1"));
        }
        if !(self.nu >= 0.0) || !(self.t_final >= 0.0) || !self.t_final.is_finite() {
            return Err(Error::invalid("need nu >= 0 and a finite T >= 0"));
        }
        if !(self.m_bound > 0.0) || !(self.c_cfl > 0.0) {
            return Err(Error::invalid("need M > 0 and C > 0"));
        }
        if !(self.r > 2.0) {
            return Err(Error::invalid("regularity r must exceed n/2 + 1 = 2"));
        }
        Ok(())
    }

    pub fn m_bar(&self) -> f64 {
        2.0 * (E * self.m_bound + 2.0)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        self.validate()?;
        let m_bar = self.m_bar();
        let t_bar = self.t_final.max(1.0);
        let k = self.k_max as f64;
        let (dt, n_steps) = match self.dt {
            Some(dt) => {
                if !(dt > 0.0 && dt <= 1.0) {
                    return Err(Error::invalid("time step must lie in (0, 1]"));
                }
                let steps = self.t_final / dt;
                if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
                    return Err(Error::invalid(format!("dt = {dt} does not divide T = {}", self.t_final)));
                }
                (dt, steps.round() as usize)
            }
            None => {
                let bound = (1.0 / (self.c_cfl * k * k * m_bar)).min(k.powf(-self.r)).min(1.0);
                if self.t_final == 0.0 {
                    (bound, 0)
                } else {
                    let steps = (self.t_final / bound).ceil() as usize;
                    (self.t_final / steps as f64, steps)
                }
            }
        };
        let epsilon = dt / (3.0 * self.m_bound * t_bar);
        let iterations = match self.iterations {
            Some(l) => l,
            None => (3.0 * self.m_bound * t_bar / (dt * dt)).log2().ceil().max(1.0) as usize,
        };
        Ok(Schedule {
            m_bar,
            t_bar,
            dt,
            n_steps,
            epsilon,
            iterations,
        })
    }
}

impl FromStr for NsRunConfig {
    type Err = Error;

    /// Parse `K=16,nu=0.1,T=1,M=1,r=2` style specs; missing keys keep defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = NsRunConfig::default();
        cfg.apply_overrides(s)?;
        Ok(cfg)
    }
}

impl NsRunConfig {
    /// Overwrite the keys named in a `K=16,nu=0.1` style spec, then validate.
    pub fn apply_overrides(&mut self, s: &str) -> Result<()> {
        let cfg = self;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got '{part}'")))?;
            let num = || {
                value
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad number '{value}' for {key}")))
            };
            match key.trim() {
                "K" => {
                    cfg.k_max = value
                        .trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad cutoff '{value}'")))?
                }
                "nu" => cfg.nu = num()?,
                "T" => cfg.t_final = num()?,
                "M" => cfg.m_bound = num()?,
                "r" => cfg.r = num()?,
                "C" => cfg.c_cfl = num()?,
                "dt" => cfg.dt = Some(num()?),
                "L" => {
                    cfg.iterations = Some(
                        value
                            .trim()
                            .parse()
                            .map_err(|_| Error::invalid(format!("bad iteration count '{value}'")))?,
                    )
                }
                other => return Err(Error::invalid(format!("unknown NS parameter '{other}'"))),
            }
        }
        cfg.validate()
    }
}

/// Diagnostics of one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateLog {
    /// `||w^{l+1} - w^l||` for `l = 0 .. L-1`.
    pub distances: Vec<f64>,
    /// `||w^l||` for `l = 1 .. L`.
    pub norms: Vec<f64>,
    /// Largest ratio of successive distances above the round-off floor.
    pub max_ratio: f64,
}

/// Distances below `RATIO_FLOOR * max(1, ||u^m||)` are round-off and are not
/// used as denominators in the contraction ratio.
pub const RATIO_FLOOR: f64 = 1e-12;

/// `L` Picard iterations of the fixed-point map from `w^0 = 0`.
pub fn step(
    u: &SpectralField,
    schedule: &Schedule,
    nu: f64,
    nl: &dyn Nonlinearity,
) -> Result<(SpectralField, IterateLog)> {
    let floor = RATIO_FLOOR * u.norm().max(1.0);
    let mut w = SpectralField::zeros(u.k_max);
    let mut log = IterateLog {
        distances: Vec::with_capacity(schedule.iterations),
        norms: Vec::with_capacity(schedule.iterations),
        max_ratio: 0.0,
    };
    for _ in 0..schedule.iterations {
        let next = fixed_point_map(u, &w, schedule.dt, nu, nl)?;
        let d = next.distance(&w)?;
        if let Some(&prev) = log.distances.last() {
            if prev > floor {
                log.max_ratio = log.max_ratio.max(d / prev);
            }
        }
        let n = next.norm();
        if !n.is_finite() || n > schedule.m_bar {
            return Err(Error::Divergence(format!(
                "fixed-point iterate norm {n:e} exceeds M_bar = {:e}; the CFL constant is too large",
                schedule.m_bar
            )));
        }
        log.distances.push(d);
        log.norms.push(n);
        w = next;
    }
    debug_assert!(w.hermitian_defect() <= 1e-10 * w.norm().max(1.0));
    Ok((w, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub schedule: Schedule,
    /// `||u^m||` for `m = 0 .. n_T`.
    pub norms: Vec<f64>,
    pub iterates: Vec<IterateLog>,
    /// `||F(w^L) - w^L||` per step.
    pub residuals: Vec<f64>,
}

impl StepLog {
    pub fn max_ratio(&self) -> f64 {
        self.iterates.iter().map(|i| i.max_ratio).fold(0.0, f64::max)
    }
}

pub struct Trajectory {
    pub states: Vec<SpectralField>,
    pub log: StepLog,
}

impl Trajectory {
    pub fn final_state(&self) -> &SpectralField {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Run the scheme to `T`, keeping every state.
pub fn run_with(u0: &SpectralField, config: &NsRunConfig, nl: &dyn Nonlinearity) -> Result<Trajectory> {
    let schedule = config.schedule()?;
    if u0.k_max != config.k_max || nl.k_max() != config.k_max {
        return Err(Error::DimensionMismatch {
            expected: config.k_max,
            found: u0.k_max,
        });
    }
    let n0 = u0.norm();
    if n0 > config.m_bound * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "initial norm {n0} exceeds the bound M = {}",
            config.m_bound
        )));
    }
    let mut states = vec![u0.clone()];
    let mut log = StepLog {
        schedule,
        norms: vec![n0],
        iterates: Vec::with_capacity(schedule.n_steps),
        residuals: Vec::with_capacity(schedule.n_steps),
    };
    for m in 0..schedule.n_steps {
        let u = &states[m];
        let (next, it) = step(u, &schedule, config.nu, nl)?;
        let residual = fixed_point_map(u, &next, schedule.dt, config.nu, nl)?.distance(&next)?;
        let n = next.norm();
        let bound = (3.0 * (m + 1) as f64 * schedule.dt * schedule.epsilon).exp() * config.m_bound;
        if n > bound * (1.0 + 1e-12) {
            return Err(Error::NormBound {
                step: m + 1,
                norm: n,
                bound,
            });
        }
        log.norms.push(n);
        log.iterates.push(it);
        log.residuals.push(residual);
        states.push(next);
    }
    Ok(Trajectory { states, log })
}

/// Run with the exact nonlinearity; returns the state at `T` and the log.
pub fn run(u0: &SpectralField, config: &NsRunConfig) -> Result<(SpectralField, StepLog)> {
    let nl = ExactNonlinearity::new(config.k_max);
    let traj = run_with(u0, config, &nl)?;
    let last = traj.final_state().clone();
    Ok((last, traj.log))
}

/// Per-step defect `Q^m` of a trajectory in the exact scheme:
/// `Q^m = (u^{m+1} - u^m)/dt + P_K(u^m . grad u^{m+1/2}) - nu Lap u^{m+1/2}`.
pub fn remainder_diagnostic(states: &[SpectralField], dt: f64, nu: f64) -> Result<Vec<f64>> {
    let first = states.first().ok_or_else(|| Error::invalid("empty trajectory"))?;
    let nl = ExactNonlinearity::new(first.k_max);
    states
        .windows(2)
        .map(|pair| {
            let (u, v) = (&pair[0], &pair[1]);
            let mid = u.axpy(1.0, v)?.scaled(0.5);
            let adv = nl.apply(u, &mid)?;
            let mut q = v.axpy(-1.0, u)?.scaled(1.0 / dt).axpy(1.0, &adv)?;
            let ks: Vec<[i64; 2]> = q.wavenumbers().collect();
            for (i, k) in ks.iter().enumerate() {
                let kk = (k[0] * k[0] + k[1] * k[1]) as f64;
                for c in 0..2 {
                    q.coeffs[i][c] += nu * kk * mid.coeffs[i][c];
                }
            }
            Ok(q.norm())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn leray_examples() {
        let mut u = SpectralField::zeros(1);
        u.set([1, 0], [c(1.0, 0.0), ZERO]);
        assert_eq!(leray_project(&u).get([1, 0]), [ZERO, ZERO]);
        u.set([1, 0], [ZERO, c(1.0, 0.0)]);
        assert_eq!(leray_project(&u).get([1, 0]), [ZERO, c(1.0, 0.0)]);
        u.set([1, 1], [c(1.0, 0.0), ZERO]);
        let p = leray_project(&u).get([1, 1]);
        assert!((p[0] - c(0.5, 0.0)).norm() < 1e-15 && (p[1] - c(-0.5, 0.0)).norm() < 1e-15);
        u.set([0, 0], [c(2.0, 0.0), c(3.0, 0.0)]);
        assert_eq!(leray_project(&u).get([0, 0]), [c(2.0, 0.0), c(3.0, 0.0)]);
    }

    #[test]
    fn leray_is_idempotent_and_divergence_free() {
        let mut u = SpectralField::zeros(4);
        let mut r = rng::seeded(1);
        let ks: Vec<[i64; 2]> = u.wavenumbers().collect();
        for k in ks {
            u.set(k, [c(r.random(), r.random()), c(r.random(), r.random())]);
        }
        let p = leray_project(&u);
        assert!(p.divergence_defect() < 1e-14);
        assert!(leray_project(&p).distance(&p).unwrap() < 1e-15);
    }

    #[test]
    fn grid_roundtrip_and_point_values() {
        let u = SpectralField::random_divergence_free(5, 1.0, 1.0, 3);
        let grid = u.to_grid(16).unwrap();
        let back = SpectralField::from_grid(5, 16, &grid).unwrap();
        assert!(back.distance(&u).unwrap() < 1e-14);
        let x = [2.0 * PI * 3.0 / 16.0, 2.0 * PI * 7.0 / 16.0];
        let direct = u.eval(x);
        assert!((direct[0] - grid[0][7 * 16 + 3]).abs() < 1e-13);
        assert!((direct[1] - grid[1][7 * 16 + 3]).abs() < 1e-13);
        assert!(u.hermitian_defect() < 1e-15);
    }

    #[test]
    fn taylor_green_coefficients_match_point_values() {
        let tg = SpectralField::taylor_green(2, 0.1, 0.5).unwrap();
        let d = (-0.1f64).exp();
        for x in [[0.3, 1.1], [2.0, 5.5], [4.0, 0.2]] {
            let v = tg.eval(x);
            assert!((v[0] - x[0].sin() * x[1].cos() * d).abs() < 1e-14);
            assert!((v[1] + x[0].cos() * x[1].sin() * d).abs() < 1e-14);
        }
        assert!((tg.norm() - 0.5f64.sqrt() * d).abs() < 1e-15);
        assert!(tg.divergence_defect() < 1e-16);
    }

    /// Direct double sum over wavenumber pairs, independent of the FFT path.
    fn brute_force_nl(u: &SpectralField, v: &SpectralField) -> SpectralField {
        let mut out = SpectralField::zeros(u.k_max());
        let ul: Vec<([i64; 2], [Complex64; 2])> = u.wavenumbers().zip(u.coefficients().iter().copied()).collect();
        let vl: Vec<([i64; 2], [Complex64; 2])> = v.wavenumbers().zip(v.coefficients().iter().copied()).collect();
        for (p, up) in &ul {
            for (q, vq) in &vl {
                let k = [p[0] + q[0], p[1] + q[1]];
                if let Some(i) = out.index(k) {
                    // (u_p . i q) v_q
                    let s = up[0] * c(0.0, q[0] as f64) + up[1] * c(0.0, q[1] as f64);
                    out.coeffs[i][0] += s * vq[0];
                    out.coeffs[i][1] += s * vq[1];
                }
            }
        }
        leray_project(&out)
    }

    #[test]
    fn nonlinear_term_matches_brute_force_convolution() {
        let u = SpectralField::random_divergence_free(4, 1.0, 1.0, 10);
        let v = SpectralField::random_divergence_free(4, 1.0, 1.0, 11);
        let fast = nonlinear_term(&u, &v).unwrap();
        let slow = brute_force_nl(&u, &v);
        assert!(fast.distance(&slow).unwrap() < 1e-13);
    }

    #[test]
    fn nonlinear_examples() {
        let mut u = SpectralField::zeros(3);
        u.set_real_mode([1, 0], [ZERO, c(0.5, 0.0)]);
        assert!(nonlinear_term(&u, &u).unwrap().norm() < 1e-15);
        let tg = SpectralField::taylor_green(16, 0.0, 0.0).unwrap();
        assert!(nonlinear_term(&tg, &tg).unwrap().norm() <= 1e-12);
        assert!(nonlinear_term(&tg, &SpectralField::zeros(4)).is_err());
    }

    #[test]
    fn advection_is_skew_symmetric() {
        for seed in 0..10 {
            let u = SpectralField::random_divergence_free(8, 2.0, 1.0, seed);
            let v = SpectralField::random_divergence_free(8, 2.0, 1.3, seed + 100);
            let ip = nonlinear_term(&u, &v).unwrap().inner(&v);
            assert!(ip.abs() <= 1e-12 * u.norm() * v.norm().powi(2), "{ip}");
        }
    }

    #[test]
    fn fixed_point_map_examples() {
        let nl = ExactNonlinearity::new(3);
        let w = SpectralField::random_divergence_free(3, 1.0, 1.0, 5);
        let zero = SpectralField::zeros(3);
        assert_eq!(fixed_point_map(&zero, &w, 0.1, 0.3, &nl).unwrap().norm(), 0.0);

        // heat-only mode: Crank-Nicolson factor
        let (dt, nu) = (0.1, 0.5);
        let mut u = SpectralField::zeros(3);
        u.set_real_mode([1, 0], [ZERO, c(0.5, 0.0)]);
        let factor = (1.0 - 0.5 * dt * nu) / (1.0 + 0.5 * dt * nu);
        // w along u keeps the midpoint a single shear mode, so NL vanishes
        let f = fixed_point_map(&u, &u.scaled(0.7), dt, nu, &nl).unwrap();
        assert!(f.distance(&u.scaled(factor)).unwrap() < 1e-15);
    }

    #[test]
    fn fixed_point_map_contracts_under_cfl() {
        let cfg = NsRunConfig {
            k_max: 6,
            ..NsRunConfig::default()
        };
        let s = cfg.schedule().unwrap();
        let nl = ExactNonlinearity::new(6);
        for seed in 0..10 {
            let u = SpectralField::random_divergence_free(6, 1.0, cfg.m_bound, seed);
            let w = SpectralField::random_divergence_free(6, 0.5, s.m_bar / 2.0, seed + 20);
            let v = SpectralField::random_divergence_free(6, 0.0, s.m_bar / 2.0, seed + 40);
            let fw = fixed_point_map(&u, &w, s.dt, cfg.nu, &nl).unwrap();
            let fv = fixed_point_map(&u, &v, s.dt, cfg.nu, &nl).unwrap();
            assert!(fw.distance(&fv).unwrap() <= 0.5 * w.distance(&v).unwrap());
        }
    }

    #[test]
    fn schedule_follows_the_cfl_and_regularity_rules() {
        let cfg = NsRunConfig {
            k_max: 4,
            m_bound: 1.0,
            t_final: 1.0,
            r: 2.5,
            ..NsRunConfig::default()
        };
        let s = cfg.schedule().unwrap();
        let m_bar = 2.0 * (E + 2.0);
        assert!((s.m_bar - m_bar).abs() < 1e-15);
        let bound = (1.0 / (16.0 * m_bar)).min(4f64.powf(-2.5));
        assert!(s.dt <= bound && s.dt > bound * (1.0 - 1.0 / s.n_steps as f64) - 1e-15);
        assert!((s.dt * s.n_steps as f64 - 1.0).abs() < 1e-12);
        assert!((s.epsilon - s.dt / 3.0).abs() < 1e-15);
        assert_eq!(s.iterations, (3.0 / (s.dt * s.dt)).log2().ceil() as usize);
        assert!(NsRunConfig { dt: Some(0.3), ..cfg.clone() }.schedule().is_err());
        assert!(NsRunConfig { r: 1.5, ..cfg }.schedule().is_err());
    }

    #[test]
    fn ns_spec_string_parses() {
        let cfg: NsRunConfig = "K=16,nu=0.05,T=2,M=1.5,r=3".parse().unwrap();
        assert_eq!(cfg.k_max, 16);
        assert_eq!(cfg.nu, 0.05);
        assert_eq!(cfg.t_final, 2.0);
        assert_eq!(cfg.m_bound, 1.5);
        assert_eq!(cfg.r, 3.0);
        assert!("K=4,bogus=1".parse::<NsRunConfig>().is_err());
        assert!("K".parse::<NsRunConfig>().is_err());
    }

    #[test]
    fn zero_data_stays_zero() {
        let cfg = NsRunConfig {
            k_max: 3,
            dt: Some(0.25),
            ..NsRunConfig::default()
        };
        let (u, log) = run(&SpectralField::zeros(3), &cfg).unwrap();
        assert_eq!(u.norm(), 0.0);
        assert_eq!(log.norms.len(), 5);
    }

    #[test]
    fn heat_mode_iterates_converge_geometrically() {
        let cfg = NsRunConfig {
            k_max: 3,
            nu: 0.5,
            dt: Some(0.1),
            t_final: 0.1,
            ..NsRunConfig::default()
        };
        let s = cfg.schedule().unwrap();
        let mut u = SpectralField::zeros(3);
        u.set_real_mode([1, 0], [ZERO, c(0.3, 0.0)]);
        let exact = u.scaled((1.0 - 0.025) / (1.0 + 0.025));
        let nl = ExactNonlinearity::new(3);
        let (w, log) = step(&u, &s, cfg.nu, &nl).unwrap();
        assert!(w.distance(&exact).unwrap() <= 0.5f64.powi(s.iterations as i32) * u.norm() + 1e-15);
        for (l, n) in log.norms.iter().enumerate() {
            let bound = (1.0 + 0.5f64.powi(l as i32 + 1)) * (2.0 * s.dt * s.epsilon).exp() * u.norm();
            assert!(*n <= bound);
        }
    }

    #[test]
    fn iterates_obey_the_a_priori_bound_for_random_data() {
        let cfg = NsRunConfig {
            k_max: 4,
            t_final: 0.05,
            ..NsRunConfig::default()
        };
        let s = cfg.schedule().unwrap();
        let nl = ExactNonlinearity::new(4);
        let u = SpectralField::random_divergence_free(4, 1.0, 1.0, 8);
        let (_, log) = step(&u, &s, cfg.nu, &nl).unwrap();
        for (l, n) in log.norms.iter().enumerate() {
            let bound = (1.0 + 0.5f64.powi(l as i32 + 1)) * (2.0 * s.dt * s.epsilon).exp() * u.norm();
            assert!(*n <= bound * (1.0 + 1e-12));
        }
        assert!(log.max_ratio <= 0.5 + 1e-10);
    }

    #[test]
    fn taylor_green_exact_solution_satisfies_the_equations() {
        // d/dt u = -2 nu u must equal nu Lap u - P(u . grad u) for all t
        let nu = 0.1;
        let k = 4;
        let t = 0.7;
        let h = 1e-5;
        let dudt = SpectralField::taylor_green(k, nu, t + h)
            .unwrap()
            .axpy(-1.0, &SpectralField::taylor_green(k, nu, t - h).unwrap())
            .unwrap()
            .scaled(1.0 / (2.0 * h));
        let u = SpectralField::taylor_green(k, nu, t).unwrap();
        let mut rhs = nonlinear_term(&u, &u).unwrap().scaled(-1.0);
        let ks: Vec<[i64; 2]> = u.wavenumbers().collect();
        for (i, kv) in ks.iter().enumerate() {
            let kk = (kv[0] * kv[0] + kv[1] * kv[1]) as f64;
            for ch in 0..2 {
                rhs.coeffs[i][ch] -= nu * kk * u.coeffs[i][ch];
            }
        }
        assert!(dudt.distance(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn taylor_green_run_converges_in_time() {
        let errors: Vec<f64> = [16.0, 32.0, 64.0]
            .iter()
            .map(|steps| {
                let cfg = NsRunConfig {
                    k_max: 4,
                    nu: 0.1,
                    dt: Some(1.0 / steps),
                    ..NsRunConfig::default()
                };
                let u0 = SpectralField::taylor_green(4, 0.1, 0.0).unwrap();
                let (u, _) = run(&u0, &cfg).unwrap();
                u.axpy(-1.0, &SpectralField::taylor_green(4, 0.1, 1.0).unwrap()).unwrap().l2_norm()
            })
            .collect();
        for e in errors.windows(2) {
            assert!((e[0] / e[1]).log2() >= 0.9);
        }
    }

    #[test]
    fn random_data_respect_the_norm_bound() {
        let cfg = NsRunConfig {
            k_max: 4,
            t_final: 0.2,
            nu: 0.01,
            ..NsRunConfig::default()
        };
        for seed in 0..3 {
            let u0 = SpectralField::random_divergence_free(4, 2.0, 1.0, seed);
            let (_, log) = run(&u0, &cfg).unwrap();
            assert!(log.norms.iter().all(|n| *n <= E * cfg.m_bound));
        }
    }

    #[test]
    fn inviscid_energy_growth_per_step_is_bounded() {
        let cfg = NsRunConfig {
            k_max: 4,
            t_final: 0.1,
            nu: 0.0,
            ..NsRunConfig::default()
        };
        let u0 = SpectralField::random_divergence_free(4, 2.0, 1.0, 4);
        let (_, log) = run(&u0, &cfg).unwrap();
        let growth = (2.0 * log.schedule.dt * log.schedule.epsilon).exp();
        for n in log.norms.windows(2) {
            assert!(n[1] <= growth * n[0] * (1.0 + 1e-14));
        }
    }

    #[test]
    fn converged_iteration_has_negligible_remainder() {
        let cfg = NsRunConfig {
            k_max: 4,
            t_final: 0.25,
            dt: Some(1.0 / 32.0),
            iterations: Some(60),
            ..NsRunConfig::default()
        };
        let u0 = SpectralField::random_divergence_free(4, 2.0, 1.0, 6);
        let nl = ExactNonlinearity::new(4);
        let traj = run_with(&u0, &cfg, &nl).unwrap();
        let q = remainder_diagnostic(&traj.states, 1.0 / 32.0, cfg.nu).unwrap();
        assert!(q.iter().all(|v| *v <= 1e-10), "{q:?}");
    }

    #[test]
    fn initial_norm_above_bound_is_rejected() {
        let cfg = NsRunConfig {
            k_max: 3,
            m_bound: 0.1,
            ..NsRunConfig::default()
        };
        let u0 = SpectralField::random_divergence_free(3, 1.0, 1.0, 1);
        assert!(run(&u0, &cfg).is_err());
    }
}
