//! Explicit ReLU networks that emulate the spectral Navier-Stokes scheme.
//!
//! * [`ProductNet`]: `xy` on `[-M, M] x [-L, L]` from sawtooth squaring.
//! * [`EmulatedNonlinearity`]: `(u, v) -> P_K(u . grad v)` as
//!   linear map -> pointwise product bank -> linear map.
//! * [`EmulatedStep`] / [`UnrolledNet`]: Picard iterations of the time step as
//!   a block network, repeated `n_T` times.
//!
//! Complex coefficient vectors are flattened to interleaved real pairs:
//! entry `4 i + 2 c + part` holds component `c`, real (`part = 0`) or
//! imaginary (`part = 1`) part, of the `i`-th wavenumber in
//! [`SpectralField`] storage order.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, Mlp};
use crate::spectral_ns::{run_with, Nonlinearity, NsRunConfig, Schedule, SpectralField};

/// Worst-case error of the realized product construction:
/// `(B^2 + M^2 + L^2) / 2 * 4^{-m-1}` with `B = M + L`.
pub fn product_error_bound(m: usize, bound_x: f64, bound_y: f64) -> f64 {
    let b = bound_x + bound_y;
    (b * b + bound_x * bound_x + bound_y * bound_y) / 2.0 * 0.25f64.powi(m as i32 + 1)
}

/// Reference bound `(M + L) / 2^{m+1}`.
pub fn product_reference_bound(m: usize, bound_x: f64, bound_y: f64) -> f64 {
    (bound_x + bound_y) / 2f64.powi(m as i32 + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductNet {
    pub m: usize,
    pub bound_x: f64,
    pub bound_y: f64,
    net: Mlp,
}

/// Layers that approximate `c^2` on `[-1, 1]` for three input channels
/// `c_a = (x + y) / B`, `c_b = x / M`, `c_c = y / L`, combined as
/// `xy = (B^2 c_a^2 - M^2 c_b^2 - L^2 c_c^2) / 2`.
///
/// Per channel, with `t = |c|`, `g_s` the `s`-fold hat function and
/// `f_s = f_{s-1} - g_s / 4^s`, `f_0 = t`:
/// layer 1 holds `s(c), s(-c), s(c - 1/2), s(-c - 1/2)`,
/// layers 2..m hold `s(g_{s-1}), s(g_{s-1} - 1/2), s(f_{s-2})`.
pub fn build_product_net(m: usize, bound_x: f64, bound_y: f64) -> Result<ProductNet> {
    if m == 0 {
        return Err(Error::invalid("product accuracy m must be at least 1"));
    }
    if !(bound_x > 0.0 && bound_y > 0.0) {
        return Err(Error::invalid("product bounds must be positive"));
    }
    let b = bound_x + bound_y;
    // input weights of each channel's scaled argument
    let channels: [[f64; 2]; 3] = [[1.0 / b, 1.0 / b], [1.0 / bound_x, 0.0], [0.0, 1.0 / bound_y]];
    let out_scale = [b * b / 2.0, -bound_x * bound_x / 2.0, -bound_y * bound_y / 2.0];

    let mut layers = Vec::with_capacity(m + 1);
    let mut first = Dense::zeros(12, 2);
    for (ch, w) in channels.iter().enumerate() {
        let base = 4 * ch;
        for (n, (sign, shift)) in [(1.0, 0.0), (-1.0, 0.0), (1.0, -0.5), (-1.0, -0.5)].iter().enumerate() {
            for (i, wi) in w.iter().enumerate() {
                if *wi != 0.0 {
                    first.set_weight(base + n, i, sign * wi);
                }
            }
            first.set_bias(base + n, *shift);
        }
    }
    layers.push(first);

    // expressions for (g, f) as linear forms over the previous layer's neurons
    // layer-1 neurons per channel: n0 = s(c), n1 = s(-c), n2 = s(c-1/2), n3 = s(-c-1/2)
    // g_1 = 2(n0 + n1) - 4(n2 + n3), f_0 = n0 + n1
    type Form = Vec<(usize, f64)>;
    let mut g_form: Vec<Form> = (0..3)
        .map(|ch| vec![(4 * ch, 2.0), (4 * ch + 1, 2.0), (4 * ch + 2, -4.0), (4 * ch + 3, -4.0)])
        .collect();
    let mut f_form: Vec<Form> = (0..3).map(|ch| vec![(4 * ch, 1.0), (4 * ch + 1, 1.0)]).collect();
    let mut width = 12;

    for s in 2..=m {
        // neurons: s(g_{s-1}), s(g_{s-1} - 1/2), s(f_{s-2}); three per channel
        let mut layer = Dense::zeros(9, width);
        for ch in 0..3 {
            let base = 3 * ch;
            for &(j, c) in &g_form[ch] {
                layer.set_weight(base, j, c);
                layer.set_weight(base + 1, j, c);
            }
            layer.set_bias(base + 1, -0.5);
            for &(j, c) in &f_form[ch] {
                layer.set_weight(base + 2, j, c);
            }
        }
        layers.push(layer);
        width = 9;
        let k = (s - 1) as i32;
        for ch in 0..3 {
            let base = 3 * ch;
            // g_s = 2 s(g_{s-1}) - 4 s(g_{s-1} - 1/2); f_{s-1} = s(f_{s-2}) - s(g_{s-1}) / 4^{s-1}
            g_form[ch] = vec![(base, 2.0), (base + 1, -4.0)];
            f_form[ch] = vec![(base + 2, 1.0), (base, -(0.25f64.powi(k)))];
        }
    }

    // output: sum_ch scale_ch * (f_{m-1} - g_m / 4^m)
    let mut out = Dense::zeros(1, width);
    let last = 0.25f64.powi(m as i32);
    for ch in 0..3 {
        let mut coeffs = vec![0.0; width];
        for &(j, c) in &f_form[ch] {
            coeffs[j] += c;
        }
        for &(j, c) in &g_form[ch] {
            coeffs[j] -= c * last;
        }
        for (j, c) in coeffs.iter().enumerate() {
            if *c != 0.0 {
                out.set_weight(0, j, out.weight(0, j) + out_scale[ch] * c);
            }
        }
    }
    layers.push(out);
    Ok(ProductNet {
        m,
        bound_x,
        bound_y,
        net: Mlp::from_layers(layers)?,
    })
}

impl ProductNet {
    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn multiply(&self, x: f64, y: f64) -> f64 {
        self.net.forward_unchecked(&[x, y])[0]
    }

    pub fn size(&self) -> usize {
        self.net.size()
    }

    pub fn depth(&self) -> usize {
        self.net.depth()
    }

    /// `size / m`, the construction constant.
    pub fn size_constant(&self) -> f64 {
        self.size() as f64 / self.m as f64
    }

    pub fn error_bound(&self) -> f64 {
        product_error_bound(self.m, self.bound_x, self.bound_y)
    }

    /// Largest error on a `(n x n)` lattice of the input rectangle.
    pub fn lattice_error(&self, n: usize) -> f64 {
        let pts = |b: f64| (0..n).map(move |i| -b + 2.0 * b * i as f64 / (n - 1) as f64);
        pts(self.bound_x)
            .flat_map(|x| pts(self.bound_y).map(move |y| (x, y)))
            .map(|(x, y)| (self.multiply(x, y) - x * y).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major dense real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    /// Each row is a sequential sum, so results do not depend on threading.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .par_chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn nonzeros(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

pub fn interleave(u: &SpectralField) -> Vec<f64> {
    u.coefficients()
        .iter()
        .flat_map(|c| [c[0].re, c[0].im, c[1].re, c[1].im])
        .collect()
}

pub fn deinterleave(k_max: usize, x: &[f64]) -> Result<SpectralField> {
    let coeffs = x
        .chunks_exact(4)
        .map(|c| [Complex64::new(c[0], c[1]), Complex64::new(c[2], c[3])])
        .collect();
    SpectralField::from_coefficients(k_max, coeffs)
}

/// How the product bank multiplies its pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Multiplier {
    /// Floating-point multiplication; isolates the exact linear blocks.
    Exact,
    /// The ReLU product network.
    Network,
}

/// Sizing of an emulated nonlinearity, available without building matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlPlan {
    pub k_max: usize,
    pub m_bar: f64,
    pub epsilon: f64,
    /// Points per axis of the collocation grid, `4K + 1`.
    pub grid: usize,
    /// Bound on `|u_i(x_j)|`.
    pub bound_u: f64,
    /// Bound on `|d_i v_c(x_j)|`.
    pub bound_grad: f64,
    /// Allowed error per pointwise product.
    pub product_budget: f64,
    pub m: usize,
    pub product_size: usize,
}

impl NlPlan {
    pub fn new(k_max: usize, m_bar: f64, epsilon: f64) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::invalid("cutoff must be at least 1"));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::invalid("accuracy must lie in (0, 1]"));
        }
        if !(m_bar >= 1.0) {
            return Err(Error::invalid("norm bound must be at least 1"));
        }
        let k = k_max as f64;
        let side = 2.0 * k + 1.0;
        let modes = side * side;
        let grid = 4 * k_max + 1;
        let points = (grid * grid) as f64;
        // |u_i(x)| <= sum_k |u_k,i| <= sqrt(|K|) ||u||
        let bound_u = modes.sqrt() * m_bar;
        // |d_i v_c(x)| <= sqrt(sum_k k_i^2) ||v||, sum_k k_i^2 = side * K(K+1)(2K+1)/3
        let bound_grad = (side * k * (k + 1.0) * (2.0 * k + 1.0) / 3.0).sqrt() * m_bar;
        // each point value of u . grad v_c carries two product errors; the l2
        // coefficient error is bounded by |J|^{1/2} times the pointwise vector error
        let product_budget = epsilon / (points.sqrt() * 2.0 * std::f64::consts::SQRT_2);
        let mut m = 1;
        while product_error_bound(m, bound_u, bound_grad) > product_budget {
            m += 1;
        }
        let product_size = build_product_net(m, bound_u, bound_grad)?.size();
        Ok(Self {
            k_max,
            m_bar,
            epsilon,
            grid,
            bound_u,
            bound_grad,
            product_budget,
            m,
            product_size,
        })
    }

    pub fn points(&self) -> usize {
        self.grid * self.grid
    }

    pub fn modes(&self) -> usize {
        (2 * self.k_max + 1).pow(2)
    }

    /// Size of the product bank: four products per collocation point.
    pub fn bank_size(&self) -> usize {
        4 * self.points() * self.product_size
    }

    /// Size with the transforms realized as radix-2 butterfly networks
    /// (`8 N ceil(log2 N)` real weights per complex transform of `N` points,
    /// six inverse and two forward transforms), plus the product bank.
    pub fn factored_size(&self) -> usize {
        let n = self.points();
        let log = (n as f64).log2().ceil() as usize;
        8 * 8 * n * log + self.bank_size()
    }
}

/// `P_K(u . grad v)` as dense linear maps around a bank of product networks.
pub struct EmulatedNonlinearity {
    plan: NlPlan,
    /// coefficients of u -> `u_i(x_j)`, row `2 j + i`
    point_u: DenseMatrix,
    /// coefficients of v -> `d_i v_c(x_j)`, row `4 j + 2 c + i`
    point_grad: DenseMatrix,
    /// products, entry `4 j + 2 c + i`, -> truncated projected coefficients
    out: DenseMatrix,
    product: ProductNet,
    multiplier: Multiplier,
}

fn phase_table(k_max: usize, n: usize) -> (Vec<[i64; 2]>, Vec<[usize; 2]>) {
    let k = k_max as i64;
    let side = 2 * k + 1;
    let ks = (0..side * side).map(|i| [i % side - k, i / side - k]).collect();
    let js = (0..n * n).map(|j| [j % n, j / n]).collect();
    (ks, js)
}

impl EmulatedNonlinearity {
    pub fn build(k_max: usize, m_bar: f64, epsilon: f64, multiplier: Multiplier) -> Result<Self> {
        let plan = NlPlan::new(k_max, m_bar, epsilon)?;
        let n = plan.grid;
        let (ks, js) = phase_table(k_max, n);
        let modes = ks.len();
        let points = js.len();
        let cos_table: Vec<f64> = (0..n)
            .map(|r| (2.0 * std::f64::consts::PI * r as f64 / n as f64).cos())
            .collect();
        let sin_table: Vec<f64> = (0..n)
            .map(|r| (2.0 * std::f64::consts::PI * r as f64 / n as f64).sin())
            .collect();
        // theta = k . x_j = 2 pi (k1 j1 + k2 j2) / n, reduced exactly mod n
        let residue = |k: [i64; 2], j: [usize; 2]| -> usize {
            (k[0] * j[0] as i64 + k[1] * j[1] as i64).rem_euclid(n as i64) as usize
        };

        let mut point_u = DenseMatrix::zeros(2 * points, 4 * modes);
        let mut point_grad = DenseMatrix::zeros(4 * points, 4 * modes);
        let mut dft = DenseMatrix::zeros(4 * modes, 4 * points);
        for (jj, j) in js.iter().enumerate() {
            for (kk, k) in ks.iter().enumerate() {
                let r = residue(*k, *j);
                let (c, s) = (cos_table[r], sin_table[r]);
                for i in 0..2 {
                    // Re(u_k e^{i theta}) = re cos - im sin
                    point_u.set(2 * jj + i, 4 * kk + 2 * i, c);
                    point_u.set(2 * jj + i, 4 * kk + 2 * i + 1, -s);
                }
                for comp in 0..2 {
                    for i in 0..2 {
                        // Re(i k_i v_k e^{i theta}) = -k_i (re sin + im cos)
                        let ki = k[i] as f64;
                        point_grad.set(4 * jj + 2 * comp + i, 4 * kk + 2 * comp, -ki * s);
                        point_grad.set(4 * jj + 2 * comp + i, 4 * kk + 2 * comp + 1, -ki * c);
                    }
                    // coefficient: (1/|J|) sum_j p(x_j) e^{-i theta}, p = sum_i products
                    for i in 0..2 {
                        dft.set(4 * kk + 2 * comp, 4 * jj + 2 * comp + i, c / points as f64);
                        dft.set(4 * kk + 2 * comp + 1, 4 * jj + 2 * comp + i, -s / points as f64);
                    }
                }
            }
        }
        // Leray projection acts on (component 0, component 1) per part
        let mut out = DenseMatrix::zeros(4 * modes, 4 * points);
        for (kk, k) in ks.iter().enumerate() {
            let (a, b) = (k[0] as f64, k[1] as f64);
            let kk2 = a * a + b * b;
            let proj = if kk2 == 0.0 {
                [[1.0, 0.0], [0.0, 1.0]]
            } else {
                [[1.0 - a * a / kk2, -a * b / kk2], [-a * b / kk2, 1.0 - b * b / kk2]]
            };
            for part in 0..2 {
                for c_out in 0..2 {
                    for c_in in 0..2 {
                        let w = proj[c_out][c_in];
                        if w == 0.0 {
                            continue;
                        }
                        for col in 0..4 * points {
                            let v = dft.get(4 * kk + 2 * c_in + part, col);
                            if v != 0.0 {
                                out.add(4 * kk + 2 * c_out + part, col, w * v);
                            }
                        }
                    }
                }
            }
        }
        let product = build_product_net(plan.m, plan.bound_u, plan.bound_grad)?;
        Ok(Self {
            plan,
            point_u,
            point_grad,
            out,
            product,
            multiplier,
        })
    }

    pub fn plan(&self) -> &NlPlan {
        &self.plan
    }

    pub fn product(&self) -> &ProductNet {
        &self.product
    }

    pub fn multiplier(&self) -> Multiplier {
        self.multiplier
    }

    pub fn with_multiplier(mut self, multiplier: Multiplier) -> Self {
        self.multiplier = multiplier;
        self
    }

    pub fn point_map_u(&self) -> &DenseMatrix {
        &self.point_u
    }

    pub fn point_map_grad(&self) -> &DenseMatrix {
        &self.point_grad
    }

    pub fn out_map(&self) -> &DenseMatrix {
        &self.out
    }

    fn multiply(&self, x: f64, y: f64) -> f64 {
        match self.multiplier {
            Multiplier::Exact => x * y,
            Multiplier::Network => self.product.multiply(x, y),
        }
    }

    /// Pointwise products `u_i(x_j) d_i v_c(x_j)`, entry `4 j + 2 c + i`.
    fn products(&self, u_points: &[f64], grad_points: &[f64]) -> Vec<f64> {
        (0..grad_points.len())
            .into_par_iter()
            .map(|p| {
                let j = p / 4;
                let i = p % 2;
                self.multiply(u_points[2 * j + i], grad_points[p])
            })
            .collect()
    }

    /// Evaluate on interleaved coefficient vectors.
    pub fn apply_real(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let up = self.point_u.matvec(u);
        let gp = self.point_grad.matvec(v);
        self.out.matvec(&self.products(&up, &gp))
    }

    /// Nonzero entries of the three linear maps plus the product bank.
    pub fn size(&self) -> usize {
        self.point_u.nonzeros() + self.point_grad.nonzeros() + self.out.nonzeros() + self.plan.bank_size()
    }
}

impl Nonlinearity for EmulatedNonlinearity {
    fn k_max(&self) -> usize {
        self.plan.k_max
    }

    fn apply(&self, u: &SpectralField, v: &SpectralField) -> Result<SpectralField> {
        if u.k_max() != self.plan.k_max || v.k_max() != self.plan.k_max {
            return Err(Error::DimensionMismatch {
                expected: self.plan.k_max,
                found: u.k_max().max(v.k_max()),
            });
        }
        deinterleave(self.plan.k_max, &self.apply_real(&interleave(u), &interleave(v)))
    }
}

pub fn build_nl_net(k_max: usize, m_bar: f64, epsilon: f64) -> Result<EmulatedNonlinearity> {
    EmulatedNonlinearity::build(k_max, m_bar, epsilon, Multiplier::Network)
}

/// A block of the unrolled network.
pub enum Block {
    Affine { matrix: DenseMatrix, bias: Vec<f64> },
    /// Product networks on `pairs` input pairs; the trailing `carry` inputs
    /// pass through `s(x) - s(-x)` identity channels of the same depth.
    ProductBank { pairs: usize, carry: usize },
}

/// `s(x) - s(-x)` carried through `depth` affine layers.
pub fn carry_net(depth: usize) -> Result<Mlp> {
    if depth < 2 {
        return Err(Error::invalid("carry channel needs at least two layers"));
    }
    let mut layers = vec![Dense::new(2, 1, vec![1.0, -1.0], vec![0.0, 0.0])?];
    for _ in 0..depth - 2 {
        layers.push(Dense::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0])?);
    }
    layers.push(Dense::new(1, 2, vec![1.0, -1.0], vec![0.0])?);
    Mlp::from_layers(layers)
}

/// Shape and nonzero count of one block, for structure manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub nonzeros: usize,
}

/// One time step `u^m -> w^L` as a block network.
pub struct EmulatedStep {
    nl: EmulatedNonlinearity,
    schedule: Schedule,
    nu: f64,
    /// `u -> (u, 0)`
    input: Block,
    /// `(u, w) -> (pairs, u)`
    lift: Block,
    bank: Block,
    /// `(products, u) -> (u, F(w))`
    update: Block,
    /// `(u, w) -> w`
    output: Block,
    carry: Mlp,
}

pub fn build_step_net(config: &NsRunConfig, multiplier: Multiplier) -> Result<EmulatedStep> {
    let schedule = config.schedule()?;
    let nl = EmulatedNonlinearity::build(config.k_max, schedule.m_bar, schedule.epsilon.min(1.0), multiplier)?;
    EmulatedStep::new(nl, schedule, config.nu)
}

impl EmulatedStep {
    pub fn new(nl: EmulatedNonlinearity, schedule: Schedule, nu: f64) -> Result<Self> {
        let k_max = nl.plan.k_max;
        let side = 2 * k_max + 1;
        let modes = side * side;
        let q = 4 * modes;
        let points = nl.plan.points();
        let pairs = 4 * points;

        let mut input = DenseMatrix::zeros(2 * q, q);
        let mut output = DenseMatrix::zeros(q, 2 * q);
        for i in 0..q {
            input.set(i, i, 1.0);
            output.set(i, q + i, 1.0);
        }

        // lift: pair p = 4 j + 2 c + i has inputs (u_i(x_j), d_i mid_c(x_j))
        let mut lift = DenseMatrix::zeros(2 * pairs + q, 2 * q);
        for p in 0..pairs {
            let j = p / 4;
            let i = p % 2;
            for col in 0..q {
                let a = nl.point_u.get(2 * j + i, col);
                if a != 0.0 {
                    lift.set(2 * p, col, a);
                }
                let g = nl.point_grad.get(p, col);
                if g != 0.0 {
                    lift.set(2 * p + 1, col, 0.5 * g);
                    lift.set(2 * p + 1, q + col, 0.5 * g);
                }
            }
        }
        for i in 0..q {
            lift.set(2 * pairs + i, i, 1.0);
        }

        // update: w_new = D (u - H u) - dt D Out products ; u carried
        let mut update = DenseMatrix::zeros(2 * q, pairs + q);
        let ks: Vec<[i64; 2]> = SpectralField::zeros(k_max).wavenumbers().collect();
        for (kk, k) in ks.iter().enumerate() {
            let half = 0.5 * schedule.dt * nu * (k[0] * k[0] + k[1] * k[1]) as f64;
            let d = 1.0 / (1.0 + half);
            for r in 4 * kk..4 * kk + 4 {
                update.set(r, pairs + r, 1.0);
                update.set(q + r, pairs + r, d * (1.0 - half));
                for col in 0..pairs {
                    let o = nl.out.get(r, col);
                    if o != 0.0 {
                        update.set(q + r, col, -schedule.dt * d * o);
                    }
                }
            }
        }

        let carry = carry_net(nl.product.depth())?;
        Ok(Self {
            nl,
            schedule,
            nu,
            input: Block::Affine {
                matrix: input,
                bias: vec![0.0; 2 * q],
            },
            lift: Block::Affine {
                matrix: lift,
                bias: vec![0.0; 2 * pairs + q],
            },
            bank: Block::ProductBank { pairs, carry: q },
            update: Block::Affine {
                matrix: update,
                bias: vec![0.0; 2 * q],
            },
            output: Block::Affine {
                matrix: output,
                bias: vec![0.0; q],
            },
            carry,
        })
    }

    pub fn nonlinearity(&self) -> &EmulatedNonlinearity {
        &self.nl
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    fn eval_block(&self, block: &Block, x: &[f64]) -> Vec<f64> {
        match block {
            Block::Affine { matrix, bias } => {
                let mut y = matrix.matvec(x);
                y.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
                y
            }
            Block::ProductBank { pairs, carry } => {
                let mut out: Vec<f64> = (0..*pairs)
                    .into_par_iter()
                    .map(|p| self.nl.multiply(x[2 * p], x[2 * p + 1]))
                    .collect();
                out.extend(
                    x[2 * pairs..2 * pairs + carry]
                        .iter()
                        .map(|v| self.carry.forward_unchecked(&[*v])[0]),
                );
                out
            }
        }
    }

    fn block_size(&self, block: &Block) -> usize {
        match block {
            Block::Affine { matrix, bias } => matrix.nonzeros() + bias.iter().filter(|b| **b != 0.0).count(),
            Block::ProductBank { pairs, carry } => pairs * self.nl.product.size() + carry * self.carry.size(),
        }
    }

    /// One Picard iteration on the state `(u, w)`.
    pub fn iterate(&self, state: &[f64]) -> Vec<f64> {
        let lifted = self.eval_block(&self.lift, state);
        let products = self.eval_block(&self.bank, &lifted);
        self.eval_block(&self.update, &products)
    }

    /// `psi_*`: interleaved `u^m` to interleaved `w^L`.
    pub fn apply_real(&self, u: &[f64]) -> Vec<f64> {
        let mut state = self.eval_block(&self.input, u);
        for _ in 0..self.schedule.iterations {
            state = self.iterate(&state);
        }
        self.eval_block(&self.output, &state)
    }

    pub fn apply(&self, u: &SpectralField) -> Result<SpectralField> {
        deinterleave(self.nl.plan.k_max, &self.apply_real(&interleave(u)))
    }

    /// Blocks of `psi_*` in evaluation order; the Picard blocks repeat
    /// `iterations` times.
    pub fn block_list(&self) -> Vec<BlockInfo> {
        let info = |name: &str, b: &Block| {
            let (inputs, outputs) = match b {
                Block::Affine { matrix, .. } => (matrix.cols, matrix.rows),
                Block::ProductBank { pairs, carry } => (2 * pairs + carry, pairs + carry),
            };
            BlockInfo {
                name: name.to_string(),
                inputs,
                outputs,
                nonzeros: self.block_size(b),
            }
        };
        vec![
            info("input", &self.input),
            info("lift", &self.lift),
            info("product-bank", &self.bank),
            info("update", &self.update),
            info("output", &self.output),
        ]
    }

    /// Nonzeros of one Picard iteration.
    pub fn iteration_size(&self) -> usize {
        self.block_size(&self.lift) + self.block_size(&self.bank) + self.block_size(&self.update)
    }

    pub fn io_size(&self) -> usize {
        self.block_size(&self.input) + self.block_size(&self.output)
    }

    /// Nonzeros of `psi_*` with the Picard blocks stored once per iteration.
    pub fn size(&self) -> usize {
        self.schedule.iterations * self.iteration_size() + self.io_size()
    }

    /// Depth of `psi_*` when adjacent affine maps are merged: `L m + 1`.
    pub fn depth(&self) -> usize {
        self.schedule.iterations * self.nl.product.m + 1
    }

    /// Literal recount of stored nonzeros, product and carry networks included.
    pub fn count_nonzeros(&self) -> usize {
        let count = |b: &Block| match b {
            Block::Affine { matrix, bias } => {
                matrix.data.iter().chain(bias).filter(|v| **v != 0.0).count()
            }
            Block::ProductBank { pairs, carry } => {
                let per = |net: &Mlp| {
                    net.parameters().iter().filter(|v| **v != 0.0).count()
                };
                pairs * per(self.nl.product.mlp()) + carry * per(&self.carry)
            }
        };
        self.schedule.iterations * (count(&self.lift) + count(&self.bank) + count(&self.update))
            + count(&self.input)
            + count(&self.output)
    }
}

/// `psi = psi_* o ... o psi_*` (`n_T` factors).
pub struct UnrolledNet {
    step: EmulatedStep,
    steps: usize,
}

pub fn unroll(step: EmulatedStep, n_steps: usize) -> UnrolledNet {
    UnrolledNet { step, steps: n_steps }
}

impl UnrolledNet {
    pub fn step(&self) -> &EmulatedStep {
        &self.step
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn apply(&self, u0: &SpectralField) -> Result<SpectralField> {
        let mut x = interleave(u0);
        for _ in 0..self.steps {
            x = self.step.apply_real(&x);
        }
        deinterleave(self.step.nl.plan.k_max, &x)
    }

    /// `n_T size(psi_*)`.
    pub fn size(&self) -> usize {
        self.steps * self.step.size()
    }

    pub fn count_nonzeros(&self) -> usize {
        self.steps * self.step.count_nonzeros()
    }

    pub fn depth(&self) -> usize {
        self.steps * self.step.schedule.iterations * self.step.nl.product.m + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationRow {
    pub k_max: usize,
    pub dt: f64,
    pub initial: usize,
    pub emulated_error: f64,
    pub scheme_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationReport {
    pub rows: Vec<EmulationRow>,
    /// Fitted slope of log error against log dt per initial condition.
    pub rates: Vec<f64>,
}

/// Errors at `T` of the emulated and exact-arithmetic schemes against a
/// reference solution, over a list of configurations.
///
/// The emulated run uses the arithmetic driver with the emulated
/// nonlinearity, which agrees with the unrolled network evaluation.
/// `reference(i)` returns the reference state for initial condition `i` at
/// any cutoff; errors are measured after padding both to the larger cutoff.
pub fn emulation_error_study(
    configs: &[NsRunConfig],
    initial: &dyn Fn(usize, usize) -> SpectralField,
    count: usize,
    reference: &dyn Fn(usize) -> SpectralField,
) -> Result<EmulationReport> {
    let mut rows = Vec::new();
    for cfg in configs {
        let schedule = cfg.schedule()?;
        let nl = build_nl_net(cfg.k_max, schedule.m_bar, schedule.epsilon.min(1.0))?;
        let exact = crate::spectral_ns::ExactNonlinearity::new(cfg.k_max);
        for i in 0..count {
            let u0 = initial(i, cfg.k_max);
            let emu = run_with(&u0, cfg, &nl)?;
            let ari = run_with(&u0, cfg, &exact)?;
            let r = reference(i);
            let kk = r.k_max().max(cfg.k_max);
            let err = |u: &SpectralField| -> Result<f64> {
                u.with_cutoff(kk).distance(&r.with_cutoff(kk))
            };
            rows.push(EmulationRow {
                k_max: cfg.k_max,
                dt: schedule.dt,
                initial: i,
                emulated_error: err(emu.final_state())?,
                scheme_error: err(ari.final_state())?,
            });
        }
    }
    let rates = (0..count)
        .map(|i| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.initial == i && r.emulated_error > 0.0)
                .map(|r| (r.dt.ln(), r.emulated_error.ln()))
                .collect();
            least_squares_slope(&pts)
        })
        .collect();
    Ok(EmulationReport { rows, rates })
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
