//! Darcy flow `-div(a grad w) = f` on the unit square with zero Dirichlet data.
//!
//! Coefficients follow the affine expansion
//! `a(x; z) = a_bar + sum_l gamma_l z_l rho_l(x)` with `z in [-1, 1]^L`,
//! `gamma_l = M l^{-1-alpha}` and `rho_l` normalized cosine products.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DomainKind, Field, GridGeometry, InnerProductSpec};
use crate::rng;

/// Relative residual at which conjugate gradients stops.
pub const CG_TOLERANCE: f64 = 1e-10;
/// Relative tolerance on the discrete energy identity.
pub const ENERGY_TOLERANCE: f64 = 1e-8;

/// One cosine product `c_{k1}(x) c_{k2}(y)` with `c_0 = 1`, `c_k = sqrt(2) cos(k pi t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosineMode {
    pub k: [usize; 2],
}

impl CosineMode {
    fn factor(k: usize, t: f64) -> f64 {
        if k == 0 {
            1.0
        } else {
            std::f64::consts::SQRT_2 * (k as f64 * std::f64::consts::PI * t).cos()
        }
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        Self::factor(self.k[0], x[0]) * Self::factor(self.k[1], x[1])
    }

    pub fn sup_norm(&self) -> f64 {
        if self.k[0] > 0 && self.k[1] > 0 {
            2.0
        } else {
            std::f64::consts::SQRT_2
        }
    }
}

/// The first `count` non-constant cosine products, ordered by total frequency.
pub fn cosine_modes(count: usize) -> Vec<CosineMode> {
    let mut out = Vec::with_capacity(count);
    let mut total = 1;
    while out.len() < count {
        for k1 in 0..=total {
            if out.len() == count {
                break;
            }
            out.push(CosineMode { k: [k1, total - k1] });
        }
        total += 1;
    }
    out
}

/// Largest deviation of the L2(0,1)^2 Gram matrix of `modes` from the identity.
///
/// Uses the midpoint rule with `q` nodes per axis, which integrates
/// `cos(j pi t)` exactly for `0 < j < 2q`.
pub fn orthonormality_defect(modes: &[CosineMode]) -> f64 {
    let kmax = modes.iter().flat_map(|m| m.k).max().unwrap_or(0);
    let q = 2 * kmax + 2;
    let gram_1d = |a: usize, b: usize| -> f64 {
        (0..q)
            .map(|i| {
                let t = (i as f64 + 0.5) / q as f64;
                CosineMode::factor(a, t) * CosineMode::factor(b, t)
            })
            .sum::<f64>()
            / q as f64
    };
    let mut worst: f64 = 0.0;
    for (i, a) in modes.iter().enumerate() {
        for (j, b) in modes.iter().enumerate() {
            let g = gram_1d(a.k[0], b.k[0]) * gram_1d(a.k[1], b.k[1]);
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    /// Constant mean field `a_bar`.
    pub mean: f64,
    pub truncation: usize,
    pub m_const: f64,
    pub alpha: f64,
    pub kappa: f64,
}

impl ExpansionSpec {
    /// Spec with the largest `M` allowed by the coercivity condition.
    pub fn new(mean: f64, truncation: usize, alpha: f64, kappa: f64) -> Result<Self> {
        let probe = Self {
            mean,
            truncation,
            m_const: 1.0,
            alpha,
            kappa,
        };
        probe.check_shape()?;
        let unit_sum = probe.weighted_sup_sum();
        let m_const = kappa / (1.0 + kappa) * mean / unit_sum;
        let spec = Self { m_const, ..probe };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_m_const(mean: f64, truncation: usize, m_const: f64, alpha: f64, kappa: f64) -> Result<Self> {
        let spec = Self {
            mean,
            truncation,
            m_const,
            alpha,
            kappa,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn check_shape(&self) -> Result<()> {
        if !(self.mean > 0.0 && self.mean.is_finite()) {
            return Err(Error::invalid("mean coefficient must be positive"));
        }
        if self.truncation == 0 {
            return Err(Error::invalid("truncation length must be positive"));
        }
        if !(self.alpha > 0.0) || !(self.kappa > 0.0) || !(self.m_const >= 0.0) {
            return Err(Error::invalid("alpha and kappa must be positive, M non-negative"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        let budget = self.kappa / (1.0 + self.kappa) * self.mean;
        let used = self.weighted_sup_sum();
        if used > budget * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "sum of gamma_l ||rho_l||_inf = {used} exceeds kappa/(1+kappa) a_min = {budget}"
            )));
        }
        let defect = orthonormality_defect(&self.modes());
        if defect > 1e-8 {
            return Err(Error::invalid(format!("expansion family not orthonormal ({defect:e})")));
        }
        Ok(())
    }

    pub fn modes(&self) -> Vec<CosineMode> {
        cosine_modes(self.truncation)
    }

    pub fn gamma(&self, l: usize) -> f64 {
        self.m_const * (l as f64).powf(-1.0 - self.alpha)
    }

    fn weighted_sup_sum(&self) -> f64 {
        self.modes()
            .iter()
            .enumerate()
            .map(|(i, m)| self.gamma(i + 1) * m.sup_norm())
            .sum()
    }

    /// `(lambda, Lambda)` with `lambda = a_min / (1 + kappa)`.
    pub fn coercivity_bounds(&self) -> (f64, f64) {
        (self.mean / (1.0 + self.kappa), self.mean + self.weighted_sup_sum())
    }
}

pub fn coercivity_bounds(spec: &ExpansionSpec) -> (f64, f64) {
    spec.coercivity_bounds()
}

/// `a(x; z)` on the interior nodes of `geometry`.
pub fn sample_coefficient(spec: &ExpansionSpec, geometry: &GridGeometry, z: &[f64]) -> Result<Field> {
    check_box(geometry)?;
    if z.len() != spec.truncation {
        return Err(Error::DimensionMismatch {
            expected: spec.truncation,
            found: z.len(),
        });
    }
    if z.iter().any(|v| !(v.abs() <= 1.0)) {
        return Err(Error::invalid("expansion coefficients must lie in [-1, 1]"));
    }
    let modes = spec.modes();
    let weights: Vec<f64> = z.iter().enumerate().map(|(i, zi)| spec.gamma(i + 1) * zi).collect();
    Field::from_fn(*geometry, 1, |_, x| {
        spec.mean
            + modes
                .iter()
                .zip(&weights)
                .filter(|(_, w)| **w != 0.0)
                .map(|(m, w)| w * m.eval(x))
                .sum::<f64>()
    })
}

fn check_box(geometry: &GridGeometry) -> Result<()> {
    if geometry.kind() != DomainKind::UnitBoxDirichlet || geometry.dim() != 2 {
        return Err(Error::GeometryMismatch(format!(
            "Darcy problems live on the 2-D unit box, got {geometry:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DarcyProblem {
    geometry: GridGeometry,
    rhs: Field,
    expansion: ExpansionSpec,
}

impl DarcyProblem {
    /// Problem with the default load `f = 1`.
    pub fn new(geometry: GridGeometry, expansion: ExpansionSpec) -> Result<Self> {
        check_box(&geometry)?;
        let rhs = Field::from_fn(geometry, 1, |_, _| 1.0)?;
        Self::with_rhs(expansion, rhs)
    }

    pub fn with_rhs(expansion: ExpansionSpec, rhs: Field) -> Result<Self> {
        check_box(rhs.geometry())?;
        if rhs.channels() != 1 {
            return Err(Error::invalid("right-hand side must be scalar"));
        }
        expansion.validate()?;
        Ok(Self {
            geometry: *rhs.geometry(),
            rhs,
            expansion,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn rhs(&self) -> &Field {
        &self.rhs
    }

    pub fn expansion(&self) -> &ExpansionSpec {
        &self.expansion
    }
}

/// Five-point operator `-div(a grad .)` with harmonic-mean face coefficients.
///
/// Faces on the boundary use the coefficient of the adjacent interior node.
pub struct Stiffness {
    p: usize,
    inv_h2: f64,
    /// east and north face coefficients per node; index `p` slots are boundary faces
    east: Vec<f64>,
    north: Vec<f64>,
    west_boundary: Vec<f64>,
    south_boundary: Vec<f64>,
    diagonal: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

impl Stiffness {
    pub fn new(a: &Field) -> Result<Self> {
        check_box(a.geometry())?;
        let min = a.values().iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::NotCoercive { min_value: min });
        }
        let p = a.geometry().points_per_dim();
        let h = a.geometry().spacing();
        let v = a.values();
        let at = |i: usize, j: usize| v[j * p + i];
        let mut east = vec![0.0; p * p];
        let mut north = vec![0.0; p * p];
        let mut west_boundary = vec![0.0; p];
        let mut south_boundary = vec![0.0; p];
        for j in 0..p {
            for i in 0..p {
                east[j * p + i] = if i + 1 < p { harmonic(at(i, j), at(i + 1, j)) } else { at(i, j) };
                north[j * p + i] = if j + 1 < p { harmonic(at(i, j), at(i, j + 1)) } else { at(i, j) };
            }
            west_boundary[j] = at(0, j);
            south_boundary[j] = at(j, 0);
        }
        let mut diagonal = vec![0.0; p * p];
        for j in 0..p {
            for i in 0..p {
                let w = if i > 0 { east[j * p + i - 1] } else { west_boundary[j] };
                let s = if j > 0 { north[(j - 1) * p + i] } else { south_boundary[i] };
                diagonal[j * p + i] = east[j * p + i] + north[j * p + i] + w + s;
            }
        }
        Ok(Self {
            p,
            inv_h2: 1.0 / (h * h),
            east,
            north,
            west_boundary,
            south_boundary,
            diagonal,
        })
    }

    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut out = vec![0.0; p * p];
        for j in 0..p {
            for i in 0..p {
                let k = j * p + i;
                let mut acc = self.diagonal[k] * w[k];
                if i + 1 < p {
                    acc -= self.east[k] * w[k + 1];
                }
                if i > 0 {
                    acc -= self.east[k - 1] * w[k - 1];
                }
                if j + 1 < p {
                    acc -= self.north[k] * w[k + p];
                }
                if j > 0 {
                    acc -= self.north[k - p] * w[k - p];
                }
                out[k] = acc * self.inv_h2;
            }
        }
        out
    }

    /// `sum over faces a_face (w_i - w_j)^2 / h^2`, boundary neighbours zero.
    pub fn face_energy(&self, w: &[f64]) -> f64 {
        let p = self.p;
        let mut e = 0.0;
        for j in 0..p {
            for i in 0..p {
                let k = j * p + i;
                let east = if i + 1 < p { w[k + 1] } else { 0.0 };
                let north = if j + 1 < p { w[k + p] } else { 0.0 };
                e += self.east[k] * (w[k] - east).powi(2) + self.north[k] * (w[k] - north).powi(2);
                if i == 0 {
                    e += self.west_boundary[j] * w[k].powi(2);
                }
                if j == 0 {
                    e += self.south_boundary[i] * w[k].powi(2);
                }
            }
        }
        e * self.inv_h2
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients; stops on `||b - A x|| <= tol ||b||`.
fn conjugate_gradients(op: &Stiffness, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = op.diagonal.iter().map(|d| 1.0 / (d * op.inv_h2)).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        let ap = op.apply(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            // confirm against the true residual to avoid drift
            let true_r: Vec<f64> = op.apply(&x).iter().zip(b).map(|(a, f)| f - a).collect();
            if dot(&true_r, &true_r).sqrt() <= tol * bnorm {
                return Ok(x);
            }
            r = true_r;
        }
        z = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res: Vec<f64> = op.apply(&x).iter().zip(b).map(|(a, f)| f - a).collect();
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: dot(&res, &res).sqrt() / bnorm,
    })
}

/// Discrete solution of `-div(a grad w) = f`.
pub fn solve_darcy(problem: &DarcyProblem, a: &Field) -> Result<Field> {
    solve_with_rhs(a, problem.rhs())
}

pub fn solve_with_rhs(a: &Field, f: &Field) -> Result<Field> {
    a.check_shape(f)?;
    let op = Stiffness::new(a)?;
    let n = f.len();
    let w = conjugate_gradients(&op, f.values(), CG_TOLERANCE, 20 * n + 100)?;
    Field::new(*f.geometry(), 1, w)
}

/// Relative residual `||A_h w - f|| / ||f||`.
pub fn relative_residual(a: &Field, f: &Field, w: &Field) -> Result<f64> {
    let op = Stiffness::new(a)?;
    let r: Vec<f64> = op.apply(w.values()).iter().zip(f.values()).map(|(x, y)| x - y).collect();
    let fnorm = dot(f.values(), f.values()).sqrt();
    Ok(if fnorm == 0.0 {
        dot(&r, &r).sqrt()
    } else {
        dot(&r, &r).sqrt() / fnorm
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    pub h10_norm: f64,
    /// `<a grad w, grad w>` summed over grid faces.
    pub energy: f64,
    /// `<f, w>`.
    pub load: f64,
    pub identity_defect: f64,
    /// `lambda ||w||_{H10}^2`.
    pub coercive_lower: f64,
    /// `||f||_{L2} / (lambda sqrt(mu_1))` with `mu_1` the smallest discrete
    /// Dirichlet eigenvalue.
    pub dual_bound: f64,
    pub holds: bool,
}

/// Smallest eigenvalue of the discrete Dirichlet Laplacian on `geometry`.
pub fn discrete_poincare_eigenvalue(geometry: &GridGeometry) -> f64 {
    let h = geometry.spacing();
    let s = (std::f64::consts::PI * h / 2.0).sin();
    geometry.dim() as f64 * 4.0 * s * s / (h * h)
}

pub fn apriori_check(problem: &DarcyProblem, a: &Field, w: &Field) -> Result<AprioriReport> {
    let op = Stiffness::new(a)?;
    let cell = problem.geometry().cell_volume();
    let energy = op.face_energy(w.values()) * cell;
    let load = dot(problem.rhs().values(), w.values()) * cell;
    let h10 = crate::field::norm(&InnerProductSpec::H10, w)?;
    let scale = energy.abs().max(load.abs());
    let defect = if scale == 0.0 { 0.0 } else { (energy - load).abs() / scale };
    if defect > ENERGY_TOLERANCE {
        return Err(Error::EnergyIdentity(defect));
    }
    let (lambda, _) = problem.expansion().coercivity_bounds();
    let coercive_lower = lambda * h10 * h10;
    let fnorm = crate::field::norm(&InnerProductSpec::L2, problem.rhs())?;
    let dual_bound = fnorm / (lambda * discrete_poincare_eigenvalue(problem.geometry()).sqrt());
    Ok(AprioriReport {
        h10_norm: h10,
        energy,
        load,
        identity_defect: defect,
        coercive_lower,
        dual_bound,
        holds: coercive_lower <= load * (1.0 + ENERGY_TOLERANCE) && h10 <= dual_bound * (1.0 + 1e-12),
    })
}

#[derive(Debug, Clone)]
pub struct DarcyDataset {
    pub z: Vec<Vec<f64>>,
    pub inputs: Vec<Field>,
    pub outputs: Vec<Field>,
}

/// `z_k` uniform on the cube, drawn from stream `k` of `seed`.
pub fn sample_z(spec: &ExpansionSpec, seed: u64, k: usize) -> Vec<f64> {
    let mut r = rng::substream(seed, k as u64);
    (0..spec.truncation).map(|_| r.random_range(-1.0..=1.0)).collect()
}

pub fn sample_dataset(problem: &DarcyProblem, n: usize, seed: u64) -> Result<DarcyDataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let items: Vec<(Vec<f64>, Field, Field)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let z = sample_z(problem.expansion(), seed, k);
            let a = sample_coefficient(problem.expansion(), problem.geometry(), &z)?;
            let w = solve_darcy(problem, &a)?;
            Ok((z, a, w))
        })
        .collect::<Result<_>>()?;
    let mut out = DarcyDataset {
        z: Vec::with_capacity(n),
        inputs: Vec::with_capacity(n),
        outputs: Vec::with_capacity(n),
    };
    for (z, a, w) in items {
        out.z.push(z);
        out.inputs.push(a);
        out.outputs.push(w);
    }
    Ok(out)
}
