//! Empirical PCA on grid fields.
//!
//! Covariances are uncentered, `Sigma_N = (1/N) sum_k u_k (x) u_k`, and are
//! always taken with respect to an [`InnerProductSpec`], so the same code
//! serves `L2` inputs and `H10` outputs. All linear algebra happens in the
//! spec's embedded coordinates, where the inner product is the Euclidean dot
//! product and the Hilbert-Schmidt norm is the Frobenius norm.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{dot, Field, GridGeometry, InnerProductSpec};

/// Relative threshold below which eigenvalues are treated as zero.
pub const EIGENVALUE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PcaOptions {
    /// Subtract the sample mean before the eigendecomposition. Off by default:
    /// the operator-learning error analysis uses the uncentered covariance.
    pub center: bool,
}

#[derive(Debug, Clone)]
pub struct PcaBasis {
    spec: InnerProductSpec,
    geometry: GridGeometry,
    channels: usize,
    eigenvalues: Vec<f64>,
    basis: Vec<Field>,
    embedded: Vec<Vec<f64>>,
    sample_count: usize,
    mean: Option<Field>,
    warnings: Vec<String>,
}

fn sorted_eigen(matrix: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(matrix);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    // stable: ties keep the solver's order
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn clamp_spectrum(values: &mut [f64], reference: f64) {
    let top = values.first().copied().unwrap_or(0.0).max(reference);
    for v in values.iter_mut() {
        if *v < EIGENVALUE_CLAMP * top || *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// `(1/N) E^T E` for row-stored snapshots, one row per worker, each entry a
/// sequential dot product so the result does not depend on scheduling.
fn gram_matrix(embedded: &[Vec<f64>]) -> DMatrix<f64> {
    let n = embedded.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| dot(&embedded[i], &embedded[j])).collect())
        .collect();
    DMatrix::from_fn(n, n, |i, j| rows[i.min(j)][i.max(j)] / n as f64)
}

fn second_moment(embedded: &[Vec<f64>]) -> DMatrix<f64> {
    let m = embedded[0].len();
    let n = embedded.len() as f64;
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|r| {
            (0..m)
                .map(|c| embedded.iter().map(|e| e[r] * e[c]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    DMatrix::from_fn(m, m, |r, c| rows[r.min(c)][r.max(c)])
}

fn combine(fields: &[Field], weights: &[f64]) -> Field {
    let mut values = vec![0.0; fields[0].len()];
    for (f, &w) in fields.iter().zip(weights) {
        if w != 0.0 {
            for (acc, v) in values.iter_mut().zip(f.values()) {
                *acc += w * v;
            }
        }
    }
    Field::new(*fields[0].geometry(), fields[0].channels(), values)
        .expect("linear combination of finite fields")
}

fn check_samples(samples: &[Field]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("need at least one sample"))?;
    for s in samples {
        first.check_shape(s)?;
    }
    Ok(())
}

pub fn empirical_pca(samples: &[Field], spec: InnerProductSpec, d: usize) -> Result<PcaBasis> {
    empirical_pca_with(samples, spec, d, PcaOptions::default())
}

pub fn empirical_pca_with(
    samples: &[Field],
    spec: InnerProductSpec,
    d: usize,
    options: PcaOptions,
) -> Result<PcaBasis> {
    check_samples(samples)?;
    if d == 0 {
        return Err(Error::invalid("PCA dimension must be at least 1"));
    }
    let geometry = *samples[0].geometry();
    let channels = samples[0].channels();
    let n = samples.len();

    let mean = if options.center {
        let w = vec![1.0 / n as f64; n];
        Some(combine(samples, &w))
    } else {
        None
    };
    let centered: Vec<Field>;
    let snapshots: &[Field] = match &mean {
        Some(m) => {
            centered = samples
                .iter()
                .map(|s| s.axpy(-1.0, m))
                .collect::<Result<_>>()?;
            &centered
        }
        None => samples,
    };

    let embedded: Vec<Vec<f64>> = snapshots
        .par_iter()
        .map(|s| spec.embed(s))
        .collect::<Result<_>>()?;
    let m = embedded[0].len();

    // Snapshot method when N <= m; otherwise the m x m second-moment matrix,
    // which has the same nonzero spectrum.
    let (mut eigenvalues, weights): (Vec<f64>, Vec<Vec<f64>>) = if n <= m {
        let (values, vectors) = sorted_eigen(gram_matrix(&embedded));
        let weights = (0..n)
            .map(|j| {
                let scale = (n as f64 * values[j].max(0.0)).sqrt();
                (0..n).map(|i| vectors[(i, j)] / scale).collect()
            })
            .collect();
        (values, weights)
    } else {
        let (values, vectors) = sorted_eigen(second_moment(&embedded));
        let weights = (0..m)
            .map(|j| {
                let q: Vec<f64> = vectors.column(j).iter().copied().collect();
                let scale = n as f64 * values[j].max(0.0);
                embedded.iter().map(|e| dot(e, &q) / scale).collect()
            })
            .collect();
        (values, weights)
    };
    // after centering, the raw second moment sets the round-off scale
    let reference = if mean.is_some() {
        let raw: Vec<f64> = samples
            .iter()
            .map(|s| spec.embed(s).map(|e| dot(&e, &e)))
            .collect::<Result<_>>()?;
        raw.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    clamp_spectrum(&mut eigenvalues, reference);

    let rank = eigenvalues.iter().take_while(|&&v| v > 0.0).count();
    let mut warnings = Vec::new();
    let retained = d.min(rank);
    if retained < d {
        let msg = format!(
            "requested PCA dimension {d} exceeds numerical rank {rank} (N = {n}, grid dim = {m}); clamped"
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    if retained == 0 {
        return Err(Error::invalid("samples have zero covariance; no PCA basis exists"));
    }

    let mut basis: Vec<Field> = weights[..retained]
        .iter()
        .map(|w| combine(snapshots, w))
        .collect();
    let mut embedded_basis: Vec<Vec<f64>> = basis
        .iter()
        .map(|b| spec.embed(b))
        .collect::<Result<_>>()?;
    reorthonormalize(&mut basis, &mut embedded_basis);

    Ok(PcaBasis {
        spec,
        geometry,
        channels,
        eigenvalues,
        basis,
        embedded: embedded_basis,
        sample_count: n,
        mean,
        warnings,
    })
}

/// One modified Gram-Schmidt sweep; removes round-off drift from the
/// eigenvector reconstruction without changing the spanned spaces.
fn reorthonormalize(basis: &mut [Field], embedded: &mut [Vec<f64>]) {
    for j in 0..basis.len() {
        for i in 0..j {
            let c = dot(&embedded[j], &embedded[i]);
            let (head, tail) = embedded.split_at_mut(j);
            for (a, b) in tail[0].iter_mut().zip(&head[i]) {
                *a -= c * b;
            }
            basis[j] = basis[j].axpy(-c, &basis[i]).expect("same shape");
        }
        let nrm = dot(&embedded[j], &embedded[j]).sqrt();
        embedded[j].iter_mut().for_each(|v| *v /= nrm);
        basis[j] = basis[j].scaled(1.0 / nrm);
    }
}

impl PcaBasis {
    /// Assemble a basis from known orthonormal fields and a spectrum, e.g. the
    /// exact eigenpairs of a synthetic measure.
    pub fn from_parts(
        spec: InnerProductSpec,
        eigenvalues: Vec<f64>,
        basis: Vec<Field>,
        sample_count: usize,
    ) -> Result<Self> {
        check_samples(&basis)?;
        if basis.len() > eigenvalues.len() {
            return Err(Error::invalid("more basis fields than eigenvalues"));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("eigenvalues must be descending"));
        }
        let embedded: Vec<Vec<f64>> = basis.iter().map(|b| spec.embed(b)).collect::<Result<_>>()?;
        for i in 0..embedded.len() {
            for j in 0..=i {
                let g = dot(&embedded[i], &embedded[j]);
                let target = if i == j { 1.0 } else { 0.0 };
                if (g - target).abs() > 1e-8 {
                    return Err(Error::invalid(format!(
                        "basis not orthonormal: <phi_{i}, phi_{j}> = {g}"
                    )));
                }
            }
        }
        Ok(Self {
            spec,
            geometry: *basis[0].geometry(),
            channels: basis[0].channels(),
            eigenvalues,
            basis,
            embedded,
            sample_count,
            mean: None,
            warnings: Vec::new(),
        })
    }

    /// Attach a centering mean, as stored with a centered basis.
    pub fn with_mean(mut self, mean: Option<Field>) -> Result<Self> {
        if let Some(m) = &mean {
            self.check_field(m)?;
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn spec(&self) -> &InnerProductSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &[Field] {
        &self.basis
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn mean(&self) -> Option<&Field> {
        self.mean.as_ref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// A copy keeping only the leading `d` basis fields (full spectrum kept).
    pub fn truncated(&self, d: usize) -> Result<Self> {
        if d == 0 || d > self.dim() {
            return Err(Error::invalid(format!(
                "cannot truncate a {}-dimensional basis to {d}",
                self.dim()
            )));
        }
        let mut out = self.clone();
        out.basis.truncate(d);
        out.embedded.truncate(d);
        Ok(out)
    }

    fn check_field(&self, u: &Field) -> Result<()> {
        if *u.geometry() != self.geometry || u.channels() != self.channels {
            return Err(Error::GeometryMismatch(format!(
                "basis on {:?} x {}, field on {:?} x {}",
                self.geometry,
                self.channels,
                u.geometry(),
                u.channels()
            )));
        }
        Ok(())
    }

    /// Latent coordinates `<u, phi_j>`, j = 1..d.
    pub fn encode(&self, u: &Field) -> Result<Vec<f64>> {
        self.check_field(u)?;
        let e = match &self.mean {
            Some(m) => self.spec.embed(&u.axpy(-1.0, m)?)?,
            None => self.spec.embed(u)?,
        };
        Ok(self.embedded.iter().map(|q| dot(&e, q)).collect())
    }

    /// `sum_j eta_j phi_j`.
    pub fn decode(&self, eta: &[f64]) -> Result<Field> {
        if eta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: eta.len(),
            });
        }
        let out = combine(&self.basis, eta);
        match &self.mean {
            Some(m) => out.axpy(1.0, m),
            None => Ok(out),
        }
    }

    pub fn project(&self, u: &Field) -> Result<Field> {
        self.decode(&self.encode(u)?)
    }

    /// `sum_{j > d} lambda_j` over the stored spectrum.
    pub fn tail_sum(&self, d: usize) -> f64 {
        self.eigenvalues.iter().skip(d).sum()
    }

    /// Squared distance `||u - P u||^2` in the basis norm.
    pub fn projection_residual(&self, u: &Field) -> Result<f64> {
        let r = u.axpy(-1.0, &self.project(u)?)?;
        let e = self.spec.embed(&r)?;
        Ok(dot(&e, &e))
    }

    /// Monte-Carlo estimate of `E ||u - P u||^2` with its standard error.
    pub fn projection_error_stats(&self, samples: &[Field]) -> Result<MeanEstimate> {
        if samples.is_empty() {
            return Err(Error::invalid("projection error needs at least one sample"));
        }
        let residuals: Vec<f64> = samples
            .par_iter()
            .map(|u| self.projection_residual(u))
            .collect::<Result<_>>()?;
        Ok(MeanEstimate::from_samples(&residuals))
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl MeanEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            count: n,
        }
    }
}

pub fn encode(basis: &PcaBasis, u: &Field) -> Result<Vec<f64>> {
    basis.encode(u)
}

pub fn decode(basis: &PcaBasis, eta: &[f64]) -> Result<Field> {
    basis.decode(eta)
}

pub fn tail_sum(basis: &PcaBasis, d: usize) -> f64 {
    basis.tail_sum(d)
}

pub fn projection_error_mc(basis: &PcaBasis, fresh_samples: &[Field]) -> Result<f64> {
    Ok(basis.projection_error_stats(fresh_samples)?.mean)
}

/// A covariance operator in the embedded coordinates of `spec`.
#[derive(Debug, Clone)]
pub struct CovarianceSummary {
    matrix: DMatrix<f64>,
    spec: InnerProductSpec,
    empirical: bool,
}

impl CovarianceSummary {
    pub fn from_matrix(matrix: DMatrix<f64>, spec: InnerProductSpec, empirical: bool) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid("covariance matrix must be square"));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::invalid(format!("covariance not symmetric (defect {asym:e})")));
        }
        let out = Self {
            matrix,
            spec,
            empirical,
        };
        let min = out.eigenvalues().last().copied().unwrap_or(0.0);
        if min < -1e-10 * scale {
            return Err(Error::invalid(format!(
                "covariance not positive semi-definite (min eigenvalue {min:e})"
            )));
        }
        Ok(out)
    }

    /// Empirical second moment `(1/N) sum u_k (x) u_k`.
    pub fn from_samples(samples: &[Field], spec: InnerProductSpec) -> Result<Self> {
        check_samples(samples)?;
        let embedded: Vec<Vec<f64>> = samples.iter().map(|s| spec.embed(s)).collect::<Result<_>>()?;
        Self::from_matrix(second_moment(&embedded), spec, true)
    }

    /// `sum_j lambda_j phi_j (x) phi_j` for known eigenpairs.
    pub fn from_eigenpairs(pairs: &[(f64, Field)], spec: InnerProductSpec) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::invalid("need at least one eigenpair"))?;
        let m = spec.embedded_len(first.1.geometry(), first.1.channels());
        let mut matrix = DMatrix::zeros(m, m);
        for (lambda, phi) in pairs {
            if *lambda < 0.0 {
                return Err(Error::invalid("negative eigenvalue in covariance"));
            }
            let q = nalgebra::DVector::from_vec(spec.embed(phi)?);
            matrix += *lambda * &q * q.transpose();
        }
        Self::from_matrix(matrix, spec, false)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn is_empirical(&self) -> bool {
        self.empirical
    }

    pub fn spec(&self) -> &InnerProductSpec {
        &self.spec
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        sorted_eigen(self.matrix.clone()).0
    }
}

/// `E||u - P_hat u||^2 - sum_{j>d} lambda_j` under the true covariance.
pub fn excess_risk(basis: &PcaBasis, true_cov: &CovarianceSummary) -> Result<f64> {
    if basis.mean.is_some() {
        return Err(Error::invalid("excess risk is defined for uncentered PCA"));
    }
    if *true_cov.spec() != basis.spec {
        return Err(Error::invalid("basis and covariance use different inner products"));
    }
    let c = true_cov.matrix();
    if c.nrows() != basis.embedded[0].len() {
        return Err(Error::DimensionMismatch {
            expected: basis.embedded[0].len(),
            found: c.nrows(),
        });
    }
    let d = basis.dim();
    let top: f64 = true_cov.eigenvalues().iter().take(d).sum();
    let captured: f64 = basis
        .embedded
        .iter()
        .map(|q| {
            let v = nalgebra::DVector::from_column_slice(q);
            v.dot(&(c * &v))
        })
        .sum();
    let scale = true_cov.trace().abs().max(f64::MIN_POSITIVE);
    let excess = top - captured;
    // top-d eigenvalues maximize the captured variance; a negative value is round-off
    Ok(if excess < 0.0 && excess > -1e-10 * scale {
        0.0
    } else {
        excess
    })
}

/// Hilbert-Schmidt norm of `a - b`.
pub fn hs_distance(a: &CovarianceSummary, b: &CovarianceSummary) -> Result<f64> {
    if a.matrix.shape() != b.matrix.shape() {
        return Err(Error::DimensionMismatch {
            expected: a.matrix.nrows(),
            found: b.matrix.nrows(),
        });
    }
    Ok((&a.matrix - &b.matrix).norm())
}

/// `max_{1 <= p <= p_max} (mean |x|^p)^{1/p} / sqrt(p)` over sample norms.
pub fn subgaussian_estimate(norms: &[f64], p_max: usize) -> Result<f64> {
    if norms.is_empty() {
        return Err(Error::invalid("sub-Gaussian estimate needs samples"));
    }
    if p_max == 0 {
        return Err(Error::invalid("p_max must be at least 1"));
    }
    let n = norms.len() as f64;
    Ok((1..=p_max)
        .map(|p| {
            let moment = norms.iter().map(|x| x.abs().powi(p as i32)).sum::<f64>() / n;
            moment.powf(1.0 / p as f64) / (p as f64).sqrt()
        })
        .fold(0.0, f64::max))
}

pub fn subgaussian_estimate_fields(
    samples: &[Field],
    spec: &InnerProductSpec,
    p_max: usize,
) -> Result<f64> {
    let norms: Vec<f64> = samples
        .iter()
        .map(|s| crate::field::norm(spec, s))
        .collect::<Result<_>>()?;
    subgaussian_estimate(&norms, p_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{inner_product, norm};
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn grid() -> GridGeometry {
        GridGeometry::torus(1, 16).unwrap()
    }

    /// cos(x), sin(x), cos(2x), sin(2x), ... normalized in L2(0, 2pi).
    fn trig_basis(count: usize) -> Vec<Field> {
        (0..count)
            .map(|j| {
                let k = (j / 2 + 1) as f64;
                Field::from_fn(grid(), 1, move |_, x| {
                    if j % 2 == 0 {
                        (k * x[0]).cos() / PI.sqrt()
                    } else {
                        (k * x[0]).sin() / PI.sqrt()
                    }
                })
                .unwrap()
            })
            .collect()
    }

    fn gaussian_samples(amplitudes: &[f64], phis: &[Field], n: usize, seed: u64) -> Vec<Field> {
        let mut rng = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let w: Vec<f64> = amplitudes
                    .iter()
                    .map(|a| { let g: f64 = StandardNormal.sample(&mut rng); a * g })
                    .collect();
                combine(phis, &w)
            })
            .collect()
    }

    fn projector_distance(a: &PcaBasis, b: &[Field]) -> f64 {
        // || P_a - P_b ||_F via embedded coordinates
        let spec = a.spec;
        let qa = &a.embedded;
        let qb: Vec<Vec<f64>> = b.iter().map(|f| spec.embed(f).unwrap()).collect();
        let cross: f64 = qa.iter().flat_map(|x| qb.iter().map(move |y| dot(x, y).powi(2))).sum();
        ((qa.len() + qb.len()) as f64 - 2.0 * cross).max(0.0).sqrt()
    }

    #[test]
    fn antipodal_pair_gives_rank_one_spectrum() {
        let v = trig_basis(1).remove(0);
        let samples = vec![v.clone(), v.scaled(-1.0)];
        let basis = empirical_pca(&samples, InnerProductSpec::L2, 1).unwrap();
        assert!((basis.eigenvalues()[0] - 1.0).abs() < 1e-12);
        assert!(basis.eigenvalues()[1..].iter().all(|&l| l == 0.0));
        assert!(projector_distance(&basis, &[v]) < 1e-10);
    }

    #[test]
    fn repeated_sample_is_uncentered() {
        let v = trig_basis(1).remove(0).scaled(2.0);
        let samples = vec![v.clone(), v.clone(), v];
        let basis = empirical_pca(&samples, InnerProductSpec::L2, 1).unwrap();
        assert!((basis.eigenvalues()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn centering_option_removes_the_mean() {
        let v = trig_basis(1).remove(0).scaled(2.0);
        let samples = vec![v.clone(), v.clone(), v.clone()];
        let basis = empirical_pca_with(&samples, InnerProductSpec::L2, 1, PcaOptions { center: true });
        // all samples equal the mean: nothing left to decompose
        assert!(basis.is_err());
    }

    #[test]
    fn synthetic_spectrum_is_recovered() {
        // Monte-Carlo oracle: E[u (x) u] has eigenvalues a_j^2 exactly.
        let phis = trig_basis(3);
        let amplitudes = [1.0, 0.5, 0.25];
        let samples = gaussian_samples(&amplitudes, &phis, 4096, 2024);
        let basis = empirical_pca(&samples, InnerProductSpec::L2, 3).unwrap();
        for (j, a) in amplitudes.iter().enumerate() {
            let rel = (basis.eigenvalues()[j] - a * a).abs() / (a * a);
            assert!(rel < 0.15, "lambda_{j}: {} vs {}", basis.eigenvalues()[j], a * a);
        }
        assert!(basis.tail_sum(3) < 1e-10);

        // fresh samples: projection error close to the tail sum
        let truncated = basis.truncated(1).unwrap();
        let fresh = gaussian_samples(&amplitudes, &phis, 4096, 77);
        let err = projection_error_mc(&truncated, &fresh).unwrap();
        let tail = 0.25 + 0.0625;
        assert!((err - tail).abs() / tail < 0.15, "{err} vs {tail}");
    }

    #[test]
    fn encode_decode_identities() {
        let phis = trig_basis(4);
        let samples = gaussian_samples(&[1.0, 0.8, 0.6, 0.4], &phis, 10, 1);
        let basis = empirical_pca(&samples, InnerProductSpec::L2, 3).unwrap();
        let e1 = basis.encode(&basis.basis()[0]).unwrap();
        assert!((e1[0] - 1.0).abs() < 1e-10 && e1[1].abs() < 1e-10 && e1[2].abs() < 1e-10);
        let zero = basis.encode(&Field::zeros(grid(), 1)).unwrap();
        assert!(zero.iter().all(|&z| z == 0.0));

        let eta = [0.3, -1.2, 2.0];
        let back = basis.encode(&basis.decode(&eta).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&eta) {
            assert!((a - b).abs() < 1e-10);
        }
        let decoded = basis.decode(&eta).unwrap();
        let nrm2 = norm(&InnerProductSpec::L2, &decoded).unwrap().powi(2);
        assert!((nrm2 - eta.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-10);

        let u = &samples[0];
        let r = u.axpy(-1.0, &basis.project(u).unwrap()).unwrap();
        for phi in basis.basis() {
            assert!(inner_product(&InnerProductSpec::L2, &r, phi).unwrap().abs() < 1e-10);
        }
        assert!(basis.decode(&[1.0]).is_err());
    }

    #[test]
    fn tail_sum_examples() {
        let phis = trig_basis(2);
        let basis = PcaBasis::from_parts(InnerProductSpec::L2, vec![3.0, 2.0, 1.0, 0.5], phis, 4).unwrap();
        assert_eq!(basis.tail_sum(2), 1.5);
        assert_eq!(basis.tail_sum(0), 6.5);
        assert_eq!(basis.tail_sum(4), 0.0);
        assert_eq!(basis.tail_sum(10), 0.0);
    }

    #[test]
    fn snapshots_in_span_have_zero_projection_error() {
        let phis = trig_basis(3);
        let samples = gaussian_samples(&[1.0, 1.0, 1.0], &phis, 3, 9);
        let basis = empirical_pca(&samples, InnerProductSpec::L2, 3).unwrap();
        assert!(projection_error_mc(&basis, &samples).unwrap() < 1e-10);
        let fresh = gaussian_samples(&[1.0, 1.0, 1.0], &phis, 20, 10);
        assert!(projection_error_mc(&basis, &fresh).unwrap() < 1e-10);
        assert!(projection_error_mc(&basis, &[]).is_err());
    }

    #[test]
    fn training_projection_error_equals_empirical_tail() {
        let g = GridGeometry::torus(2, 12).unwrap();
        let sampler = crate::field::TrigFieldSampler::new(g, 2.0).unwrap();
        let mut r = rng::seeded(3);
        let samples: Vec<Field> = (0..40).map(|_| sampler.sample(&mut r)).collect();
        let full = empirical_pca(&samples, InnerProductSpec::L2, 40).unwrap();
        let mut previous = f64::INFINITY;
        for d in 1..=20 {
            let basis = full.truncated(d).unwrap();
            let err = projection_error_mc(&basis, &samples).unwrap();
            let tail = basis.tail_sum(d);
            assert!((err - tail).abs() <= 1e-10 * full.tail_sum(0));
            assert!(err <= previous + 1e-12);
            previous = err;
        }
    }

    #[test]
    fn oversized_dimension_is_clamped_with_warning() {
        let phis = trig_basis(2);
        let samples = gaussian_samples(&[1.0, 1.0], &phis, 5, 4);
        let basis = empirical_pca(&samples, InnerProductSpec::L2, 8).unwrap();
        assert_eq!(basis.dim(), 2);
        assert_eq!(basis.warnings().len(), 1);
    }

    #[test]
    fn basis_is_orthonormal_under_h10() {
        let g = GridGeometry::unit_box(2, 9).unwrap();
        let mut r = rng::seeded(8);
        let samples: Vec<Field> = (0..12)
            .map(|_| {
                let v: Vec<f64> = (0..81).map(|_| r.random::<f64>()).collect();
                Field::new(g, 1, v).unwrap()
            })
            .collect();
        let basis = empirical_pca(&samples, InnerProductSpec::H10, 6).unwrap();
        for (i, a) in basis.basis().iter().enumerate() {
            for (j, b) in basis.basis().iter().enumerate() {
                let ip = inner_product(&InnerProductSpec::H10, a, b).unwrap();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((ip - target).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn excess_risk_zero_for_exact_eigenspace_and_full_space() {
        let phis = trig_basis(4);
        let lambdas = [1.0, 0.5, 0.25, 0.125];
        let pairs: Vec<(f64, Field)> = lambdas.iter().copied().zip(phis.iter().cloned()).collect();
        let cov = CovarianceSummary::from_eigenpairs(&pairs, InnerProductSpec::L2).unwrap();
        let exact = PcaBasis::from_parts(InnerProductSpec::L2, lambdas.to_vec(), phis[..2].to_vec(), 0).unwrap();
        assert!(excess_risk(&exact, &cov).unwrap().abs() < 1e-12);

        let full_basis: Vec<Field> = (0..16)
            .map(|i| {
                let mut v = vec![0.0; 16];
                v[i] = 1.0 / grid().cell_volume().sqrt();
                Field::new(grid(), 1, v).unwrap()
            })
            .collect();
        let full = PcaBasis::from_parts(InnerProductSpec::L2, vec![0.0; 16], full_basis, 0).unwrap();
        assert!(excess_risk(&full, &cov).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hs_distance_examples() {
        let spec = InnerProductSpec::L2;
        let a = CovarianceSummary::from_matrix(DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0]), spec, false).unwrap();
        let b = CovarianceSummary::from_matrix(DMatrix::from_diagonal(&nalgebra::dvector![1.0, 1.0]), spec, true).unwrap();
        assert!((hs_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(hs_distance(&a, &a).unwrap(), 0.0);

        // direct summation oracle on a random symmetric PSD pair
        let mut r = rng::seeded(12);
        let mut random_psd = || {
            let x = DMatrix::from_fn(5, 5, |_, _| r.random::<f64>() - 0.5);
            &x * x.transpose()
        };
        let (ma, mb) = (random_psd(), random_psd());
        let oracle = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| (ma[(i, j)] - mb[(i, j)]).powi(2))
            .sum::<f64>()
            .sqrt();
        let a = CovarianceSummary::from_matrix(ma, spec, false).unwrap();
        let b = CovarianceSummary::from_matrix(mb, spec, true).unwrap();
        assert!((hs_distance(&a, &b).unwrap() - oracle).abs() < 1e-14);

        let c = CovarianceSummary::from_matrix(DMatrix::identity(3, 3), spec, false).unwrap();
        assert!(hs_distance(&a, &c).is_err());
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let m = DMatrix::from_diagonal(&nalgebra::dvector![1.0, -0.5]);
        assert!(CovarianceSummary::from_matrix(m, InnerProductSpec::L2, false).is_err());
    }

    #[test]
    fn excess_risk_obeys_hs_bound_on_random_instances() {
        let phis = trig_basis(6);
        let mut r = rng::seeded(99);
        for trial in 0..20 {
            let mut lambdas: Vec<f64> = (0..6).map(|_| r.random::<f64>()).collect();
            lambdas.sort_by(|a, b| b.total_cmp(a));
            let pairs: Vec<(f64, Field)> = lambdas.iter().copied().zip(phis.iter().cloned()).collect();
            let truth = CovarianceSummary::from_eigenpairs(&pairs, InnerProductSpec::L2).unwrap();
            let amps: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
            let samples = gaussian_samples(&amps, &phis, 10 + trial, 500 + trial as u64);
            let emp = CovarianceSummary::from_samples(&samples, InnerProductSpec::L2).unwrap();
            for d in 1..=3 {
                let basis = empirical_pca(&samples, InnerProductSpec::L2, d).unwrap();
                let excess = excess_risk(&basis, &truth).unwrap();
                let bound = (2.0 * d as f64).sqrt() * hs_distance(&truth, &emp).unwrap();
                assert!(excess >= 0.0);
                assert!(excess <= bound, "trial {trial} d {d}: {excess} > {bound}");
            }
        }
    }

    #[test]
    fn subgaussian_examples() {
        assert!((subgaussian_estimate(&[2.0; 10], 6).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(subgaussian_estimate(&[0.0; 4], 6).unwrap(), 0.0);
        assert!(subgaussian_estimate(&[], 3).is_err());
        // Monte-Carlo moments oracle: E|g|^p known in closed form; the
        // estimator's maximum over p <= 8 for N(0,1) lies near 0.8.
        let mut r = rng::seeded(31);
        let norms: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut r)).collect();
        let k = subgaussian_estimate(&norms, 8).unwrap();
        assert!((0.7..=1.3).contains(&k), "K = {k}");
    }
}
