//! Grid functions standing in for the Hilbert spaces of inputs and outputs.
//!
//! Two domains are supported: the periodic torus `[0, 2pi)^n` (no duplicated
//! endpoint) and the unit box `[0, 1]^n` with homogeneous Dirichlet data, of
//! which only interior nodes are stored. Values are row-major with the x index
//! fastest, one contiguous block per channel.
//!
//! Every inner product is realized through an isometric embedding into
//! Euclidean space ([`InnerProductSpec::embed`]): `<u, v> = embed(u) . embed(v)`.
//! PCA, covariance and Hilbert-Schmidt computations all work in those
//! embedded coordinates.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    PeriodicTorus,
    UnitBoxDirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    dim: usize,
    points_per_dim: usize,
    kind: DomainKind,
}

impl GridGeometry {
    pub fn new(dim: usize, points_per_dim: usize, kind: DomainKind) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::invalid(format!("grid dimension {dim} not in {{1, 2}}")));
        }
        if points_per_dim < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 points per dimension, got {points_per_dim}"
            )));
        }
        Ok(Self {
            dim,
            points_per_dim,
            kind,
        })
    }

    pub fn torus(dim: usize, points_per_dim: usize) -> Result<Self> {
        Self::new(dim, points_per_dim, DomainKind::PeriodicTorus)
    }

    /// Unit box with `interior_points` unknowns per dimension.
    pub fn unit_box(dim: usize, interior_points: usize) -> Result<Self> {
        Self::new(dim, interior_points, DomainKind::UnitBoxDirichlet)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn spacing(&self) -> f64 {
        match self.kind {
            DomainKind::PeriodicTorus => 2.0 * PI / self.points_per_dim as f64,
            DomainKind::UnitBoxDirichlet => 1.0 / (self.points_per_dim + 1) as f64,
        }
    }

    pub fn total_points(&self) -> usize {
        self.points_per_dim.pow(self.dim as u32)
    }

    /// Quadrature weight `h^n` attached to every stored point.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Coordinate of grid index `i` along one axis.
    pub fn axis_coordinate(&self, i: usize) -> f64 {
        match self.kind {
            DomainKind::PeriodicTorus => i as f64 * self.spacing(),
            DomainKind::UnitBoxDirichlet => (i + 1) as f64 * self.spacing(),
        }
    }

    /// Coordinates of flat point index `idx`; `y` is 0 on 1-D grids.
    pub fn point(&self, idx: usize) -> [f64; 2] {
        let p = self.points_per_dim;
        match self.dim {
            1 => [self.axis_coordinate(idx), 0.0],
            _ => [self.axis_coordinate(idx % p), self.axis_coordinate(idx / p)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    geometry: GridGeometry,
    channels: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(geometry: GridGeometry, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("field needs at least one channel"));
        }
        let expected = channels * geometry.total_points();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(Self {
            geometry,
            channels,
            values,
        })
    }

    pub fn zeros(geometry: GridGeometry, channels: usize) -> Self {
        Self {
            geometry,
            channels,
            values: vec![0.0; channels * geometry.total_points()],
        }
    }

    /// Samples `f(channel, [x, y])` at every grid point.
    pub fn from_fn(
        geometry: GridGeometry,
        channels: usize,
        f: impl Fn(usize, [f64; 2]) -> f64,
    ) -> Result<Self> {
        let n = geometry.total_points();
        let values = (0..channels)
            .flat_map(|c| (0..n).map(move |i| (c, i)))
            .map(|(c, i)| f(c, geometry.point(i)))
            .collect();
        Self::new(geometry, channels, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.geometry.total_points();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.geometry == other.geometry && self.channels == other.channels
    }

    pub(crate) fn check_shape(&self, other: &Field) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{:?} x {} vs {:?} x {}",
                self.geometry, self.channels, other.geometry, other.channels
            )))
        }
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Field) -> Result<Field> {
        self.check_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(Field {
            values,
            ..self.clone()
        })
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        Field {
            values: self.values.iter().map(|v| alpha * v).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs_diff(&self, other: &Field) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Which Hilbert-space norm a field is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InnerProductSpec {
    /// Midpoint / interior-trapezoid quadrature, weight `h^n` per point.
    L2,
    /// `int |grad u|^2` by forward differences over every grid edge, boundary
    /// edges included. Dirichlet grids only.
    H10,
    /// `(2pi)^n sum_k (1 + |k|^2)^s |u_k|^2` from the grid DFT. Torus only.
    Sobolev { s: f64 },
}

impl InnerProductSpec {
    pub fn name(&self) -> String {
        match self {
            InnerProductSpec::L2 => "L2".into(),
            InnerProductSpec::H10 => "H10".into(),
            InnerProductSpec::Sobolev { s } => format!("H^{s}"),
        }
    }

    fn check_domain(&self, geometry: &GridGeometry) -> Result<()> {
        let ok = match self {
            InnerProductSpec::L2 => true,
            InnerProductSpec::H10 => geometry.kind == DomainKind::UnitBoxDirichlet,
            InnerProductSpec::Sobolev { .. } => geometry.kind == DomainKind::PeriodicTorus,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnsupportedInnerProduct {
                spec: self.name(),
                domain: format!("{:?}", geometry.kind),
            })
        }
    }

    /// Length of the embedded coordinate vector for fields of this shape.
    pub fn embedded_len(&self, geometry: &GridGeometry, channels: usize) -> usize {
        let p = geometry.points_per_dim;
        let per_channel = match self {
            InnerProductSpec::L2 => geometry.total_points(),
            InnerProductSpec::H10 => match geometry.dim {
                1 => p + 1,
                _ => 2 * p * (p + 1),
            },
            InnerProductSpec::Sobolev { .. } => 2 * geometry.total_points(),
        };
        channels * per_channel
    }

    /// Isometric embedding into Euclidean coordinates.
    pub fn embed(&self, u: &Field) -> Result<Vec<f64>> {
        let geometry = u.geometry;
        self.check_domain(&geometry)?;
        let mut out = Vec::with_capacity(self.embedded_len(&geometry, u.channels));
        for c in 0..u.channels {
            let values = u.channel(c);
            match self {
                InnerProductSpec::L2 => {
                    let w = geometry.cell_volume().sqrt();
                    out.extend(values.iter().map(|v| w * v));
                }
                InnerProductSpec::H10 => embed_h10(&geometry, values, &mut out),
                InnerProductSpec::Sobolev { s } => embed_sobolev(&geometry, *s, values, &mut out),
            }
        }
        Ok(out)
    }
}

fn embed_h10(geometry: &GridGeometry, values: &[f64], out: &mut Vec<f64>) {
    let p = geometry.points_per_dim;
    let h = geometry.spacing();
    // (u_{i} - u_{i-1}) / h * sqrt(h^n)
    let scale = geometry.cell_volume().sqrt() / h;
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= p as isize || j >= p as isize {
            0.0
        } else {
            values[j as usize * p + i as usize]
        }
    };
    match geometry.dim {
        1 => {
            for i in 0..=p as isize {
                out.push(scale * (at(i, 0) - at(i - 1, 0)));
            }
        }
        _ => {
            for j in 0..p as isize {
                for i in 0..=p as isize {
                    out.push(scale * (at(i, j) - at(i - 1, j)));
                }
            }
            for i in 0..p as isize {
                for j in 0..=p as isize {
                    out.push(scale * (at(i, j) - at(i, j - 1)));
                }
            }
        }
    }
}

fn embed_sobolev(geometry: &GridGeometry, s: f64, values: &[f64], out: &mut Vec<f64>) {
    let p = geometry.points_per_dim;
    let total = geometry.total_points();
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft::transform(&mut data, geometry.dim, p, false);
    let volume = (2.0 * PI).powi(geometry.dim as i32);
    for (idx, coeff) in data.iter().enumerate() {
        let k2 = match geometry.dim {
            1 => (fft::signed_wavenumber(idx, p) as f64).powi(2),
            _ => {
                let kx = fft::signed_wavenumber(idx % p, p) as f64;
                let ky = fft::signed_wavenumber(idx / p, p) as f64;
                kx * kx + ky * ky
            }
        };
        let w = (volume * (1.0 + k2).powf(s)).sqrt() / total as f64;
        out.push(w * coeff.re);
        out.push(w * coeff.im);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn inner_product(spec: &InnerProductSpec, u: &Field, v: &Field) -> Result<f64> {
    u.check_shape(v)?;
    Ok(dot(&spec.embed(u)?, &spec.embed(v)?))
}

pub fn norm(spec: &InnerProductSpec, u: &Field) -> Result<f64> {
    let e = spec.embed(u)?;
    Ok(dot(&e, &e).sqrt())
}

/// Random real trigonometric fields on the torus with algebraically decaying
/// amplitudes:
///
/// `u(x) = sum_k |k|^{-decay} cos(k . x + theta_k)`, `theta_k ~ U[0, 2pi)`,
///
/// summed over one representative of each `+-k` pair with
/// `1 <= |k|_inf <= max_wavenumber`. The cutoff defaults to the largest
/// wavenumber strictly below Nyquist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigFieldSampler {
    geometry: GridGeometry,
    decay: f64,
    max_wavenumber: usize,
}

impl TrigFieldSampler {
    pub fn new(geometry: GridGeometry, decay: f64) -> Result<Self> {
        let max_wavenumber = (geometry.points_per_dim - 1) / 2;
        Self::with_cutoff(geometry, decay, max_wavenumber)
    }

    pub fn with_cutoff(geometry: GridGeometry, decay: f64, max_wavenumber: usize) -> Result<Self> {
        if geometry.kind != DomainKind::PeriodicTorus {
            return Err(Error::invalid("trigonometric fields live on the periodic torus"));
        }
        let n = geometry.dim as f64;
        if decay.is_nan() || decay <= n / 2.0 {
            return Err(Error::invalid(format!(
                "decay exponent {decay} must exceed n/2 = {} for an L2-summable series",
                n / 2.0
            )));
        }
        if max_wavenumber == 0 || 2 * max_wavenumber >= geometry.points_per_dim {
            return Err(Error::invalid(format!(
                "cutoff {max_wavenumber} is not resolved below Nyquist on {} points",
                geometry.points_per_dim
            )));
        }
        Ok(Self {
            geometry,
            decay,
            max_wavenumber,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn max_wavenumber(&self) -> usize {
        self.max_wavenumber
    }

    /// One representative of each `+-k` pair, in a fixed order.
    pub fn modes(&self) -> Vec<[i64; 2]> {
        let kmax = self.max_wavenumber as i64;
        let mut modes = Vec::new();
        match self.geometry.dim {
            1 => modes.extend((1..=kmax).map(|k| [k, 0])),
            _ => {
                for ky in 0..=kmax {
                    for kx in -kmax..=kmax {
                        if ky > 0 || kx > 0 {
                            modes.push([kx, ky]);
                        }
                    }
                }
            }
        }
        modes
    }

    pub fn amplitude(&self, k: [i64; 2]) -> f64 {
        let norm = ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt();
        norm.powf(-self.decay)
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> Field {
        let p = self.geometry.points_per_dim;
        let dim = self.geometry.dim;
        let mut data = vec![Complex64::new(0.0, 0.0); self.geometry.total_points()];
        let index = |k: [i64; 2]| match dim {
            1 => fft::bin(k[0], p),
            _ => fft::bin(k[1], p) * p + fft::bin(k[0], p),
        };
        for k in self.modes() {
            let theta = rng.random::<f64>() * 2.0 * PI;
            let amp = self.amplitude(k);
            if amp == 0.0 {
                continue;
            }
            let coeff = Complex64::from_polar(0.5 * amp, theta);
            data[index(k)] += coeff;
            data[index([-k[0], -k[1]])] += coeff.conj();
        }
        fft::transform(&mut data, dim, p, true);
        let values = data.iter().map(|c| c.re).collect();
        Field {
            geometry: self.geometry,
            channels: 1,
            values,
        }
    }
}

pub fn random_trig_field(geometry: GridGeometry, decay_exponent: f64, seed: u64) -> Result<Field> {
    let sampler = TrigFieldSampler::new(geometry, decay_exponent)?;
    Ok(sampler.sample(&mut rng::seeded(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn torus2(p: usize) -> GridGeometry {
        GridGeometry::torus(2, p).unwrap()
    }

    #[test]
    fn l2_of_constant_on_torus() {
        let g = torus2(16);
        let one = Field::from_fn(g, 1, |_, _| 1.0).unwrap();
        let v = inner_product(&InnerProductSpec::L2, &one, &one).unwrap();
        assert!((v - (2.0 * PI).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn cos_and_sin_are_orthogonal() {
        let g = torus2(12);
        let c = Field::from_fn(g, 1, |_, x| x[0].cos()).unwrap();
        let s = Field::from_fn(g, 1, |_, x| x[0].sin()).unwrap();
        let ip = inner_product(&InnerProductSpec::L2, &c, &s).unwrap();
        let scale = norm(&InnerProductSpec::L2, &c).unwrap() * norm(&InnerProductSpec::L2, &s).unwrap();
        assert!(ip.abs() <= 1e-12 * scale);
    }

    #[test]
    fn resolved_trig_polynomial_has_analytic_norm() {
        // ||3 + cos(x) + 2 sin(2x + y)||^2 = (2pi)^2 (9 + 1/2 + 2)
        let g = torus2(10);
        let u = Field::from_fn(g, 1, |_, x| 3.0 + x[0].cos() + 2.0 * (2.0 * x[0] + x[1]).sin()).unwrap();
        let exact = (2.0 * PI).powi(2) * (9.0 + 0.5 + 2.0);
        for spec in [InnerProductSpec::L2, InnerProductSpec::Sobolev { s: 0.0 }] {
            let n2 = norm(&spec, &u).unwrap().powi(2);
            assert!((n2 - exact).abs() <= 1e-10 * exact, "{spec:?}: {n2} vs {exact}");
        }
        // H^1 weights: 1 for k=0, 2 for |k|=1, 6 for |k|^2=5
        let h1 = norm(&InnerProductSpec::Sobolev { s: 1.0 }, &u).unwrap().powi(2);
        let exact_h1 = (2.0 * PI).powi(2) * (9.0 + 0.5 * 2.0 + 2.0 * 6.0);
        assert!((h1 - exact_h1).abs() <= 1e-10 * exact_h1);
    }

    /// Dense-grid quadrature of the analytic gradient of sin(pi x) sin(pi y).
    fn h10_oracle(points: usize) -> f64 {
        let h = 1.0 / points as f64;
        let mut acc = 0.0;
        for i in 0..points {
            for j in 0..points {
                let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                let gx = PI * (PI * x).cos() * (PI * y).sin();
                let gy = PI * (PI * x).sin() * (PI * y).cos();
                acc += (gx * gx + gy * gy) * h * h;
            }
        }
        acc
    }

    #[test]
    fn h10_seminorm_of_sine_bump() {
        let oracle = h10_oracle(2000);
        assert!((oracle - PI * PI / 2.0).abs() < 1e-6);
        let mut errors = Vec::new();
        for p in [15, 31, 63] {
            let g = GridGeometry::unit_box(2, p).unwrap();
            let w = Field::from_fn(g, 1, |_, x| (PI * x[0]).sin() * (PI * x[1]).sin()).unwrap();
            let v = norm(&InnerProductSpec::H10, &w).unwrap().powi(2);
            errors.push((v - oracle).abs());
        }
        assert!(errors[2] / oracle < 1e-3);
        // second-order consistency of the forward-difference seminorm
        for pair in errors.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn unsupported_specs_are_rejected() {
        let torus = Field::zeros(torus2(4), 1);
        assert!(matches!(
            norm(&InnerProductSpec::H10, &torus),
            Err(Error::UnsupportedInnerProduct { .. })
        ));
        let boxed = Field::zeros(GridGeometry::unit_box(2, 4).unwrap(), 1);
        assert!(norm(&InnerProductSpec::Sobolev { s: 1.0 }, &boxed).is_err());
        let other = Field::zeros(torus2(5), 1);
        assert!(inner_product(&InnerProductSpec::L2, &torus, &other).is_err());
    }

    #[test]
    fn field_construction_checks_length_and_finiteness() {
        let g = torus2(4);
        assert!(Field::new(g, 1, vec![0.0; 15]).is_err());
        let mut v = vec![0.0; 16];
        v[3] = f64::NAN;
        assert!(matches!(Field::new(g, 1, v), Err(Error::NonFinite(_))));
        assert!(GridGeometry::torus(3, 4).is_err());
        assert!(GridGeometry::torus(2, 1).is_err());
    }

    #[test]
    fn trig_fields_are_seed_deterministic() {
        let g = torus2(16);
        let a = random_trig_field(g, 2.5, 11).unwrap();
        let b = random_trig_field(g, 2.5, 11).unwrap();
        let c = random_trig_field(g, 2.5, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn infinite_decay_leaves_the_unit_mode() {
        let g = GridGeometry::torus(1, 16).unwrap();
        let u = random_trig_field(g, f64::INFINITY, 3).unwrap();
        // u = cos(x + theta): project onto cos and sin to recover theta
        let c = Field::from_fn(g, 1, |_, x| x[0].cos()).unwrap();
        let s = Field::from_fn(g, 1, |_, x| x[0].sin()).unwrap();
        let a = inner_product(&InnerProductSpec::L2, &u, &c).unwrap() / PI;
        let b = -inner_product(&InnerProductSpec::L2, &u, &s).unwrap() / PI;
        assert!(((a * a + b * b).sqrt() - 1.0).abs() < 1e-12);
        let theta = b.atan2(a);
        let exact = Field::from_fn(g, 1, |_, x| (x[0] + theta).cos()).unwrap();
        assert!(u.max_abs_diff(&exact).unwrap() < 1e-12);
    }

    #[test]
    fn trig_field_rejects_slow_decay_and_bad_domains() {
        assert!(random_trig_field(torus2(16), 1.0, 0).is_err());
        assert!(random_trig_field(GridGeometry::torus(1, 16).unwrap(), 0.5, 0).is_err());
        assert!(random_trig_field(GridGeometry::unit_box(2, 16).unwrap(), 3.0, 0).is_err());
    }

    #[test]
    fn h1_finite_and_h3_growing_for_decay_three() {
        // Norm-vs-resolution sweep: with decay 3 in 2-D, E||u||_{H^1}^2 sums
        // |k|^{-4} (convergent) while E||u||_{H^3}^2 sums |k|^0 (divergent).
        let mut h1 = Vec::new();
        let mut h3 = Vec::new();
        for p in [16usize, 32, 64] {
            let sampler = TrigFieldSampler::new(torus2(p), 3.0).unwrap();
            let mut rng = rng::seeded(5);
            let (mut a, mut b) = (0.0, 0.0);
            for _ in 0..100 {
                let u = sampler.sample(&mut rng);
                a += norm(&InnerProductSpec::Sobolev { s: 1.0 }, &u).unwrap().powi(2);
                b += norm(&InnerProductSpec::Sobolev { s: 3.0 }, &u).unwrap().powi(2);
            }
            h1.push(a / 100.0);
            h3.push(b / 100.0);
        }
        assert!(h1[2] / h1[1] < 1.05, "H1 should saturate: {h1:?}");
        assert!(h3[2] / h3[1] > 3.0, "H3 should keep growing: {h3:?}");
    }

    fn random_field(g: GridGeometry, seed: u64) -> Field {
        let mut rng = rng::seeded(seed);
        let values = (0..g.total_points()).map(|_| rng.random::<f64>() - 0.5).collect();
        Field::new(g, 1, values).unwrap()
    }

    proptest! {
        #[test]
        fn inner_products_are_symmetric_bilinear_and_cauchy_schwarz(
            seed in 0u64..1000, alpha in -3.0f64..3.0, which in 0usize..3
        ) {
            let (g, spec) = match which {
                0 => (torus2(8), InnerProductSpec::L2),
                1 => (GridGeometry::unit_box(2, 7).unwrap(), InnerProductSpec::H10),
                _ => (torus2(8), InnerProductSpec::Sobolev { s: 1.5 }),
            };
            let u = random_field(g, seed);
            let v = random_field(g, seed + 1);
            let w = random_field(g, seed + 2);
            let uv = inner_product(&spec, &u, &v).unwrap();
            let vu = inner_product(&spec, &v, &u).unwrap();
            let scale = norm(&spec, &u).unwrap() * norm(&spec, &v).unwrap();
            prop_assert!((uv - vu).abs() <= 1e-13 * scale.max(1.0));
            prop_assert!(uv.abs() <= scale * (1.0 + 1e-12));
            let lhs = inner_product(&spec, &u.axpy(alpha, &w).unwrap(), &v).unwrap();
            let rhs = uv + alpha * inner_product(&spec, &w, &v).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
