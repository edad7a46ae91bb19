//! PCA-Net: `Psi = D_Y o psi o E_X`, its training pipeline, and the error
//! decomposition of a trained model on held-out data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{norm, Field, InnerProductSpec};
use crate::nn::{train, Dense, LossTrace, Mlp, TrainConfig};
use crate::pca::{empirical_pca_with, MeanEstimate, PcaBasis, PcaOptions};

/// Disjoint index sets of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub pca: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    /// Consecutive blocks `[0, n_pca)`, `[n_pca, n_pca + n_train)`, ...
    pub fn contiguous(n_pca: usize, n_train: usize, n_test: usize) -> Self {
        Self {
            pca: (0..n_pca).collect(),
            train: (n_pca..n_pca + n_train).collect(),
            test: (n_pca + n_train..n_pca + n_train + n_test).collect(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.pca.iter().chain(&self.train).chain(&self.test) {
            if i >= n {
                return Err(Error::invalid(format!("partition index {i} out of range for {n} samples")));
            }
            if seen[i] {
                return Err(Error::invalid(format!("partition index {i} used twice")));
            }
            seen[i] = true;
        }
        if self.pca.is_empty() || self.train.is_empty() {
            return Err(Error::invalid("PCA and training partitions must be nonempty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub d_x: usize,
    pub d_y: usize,
    pub input_spec: InnerProductSpec,
    pub output_spec: InnerProductSpec,
    /// Hidden layer widths of `psi`.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Train on per-coordinate standardized latents; the affine rescaling is
    /// folded into the first and last layers afterwards.
    pub standardize: bool,
    pub center: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            d_x: 8,
            d_y: 8,
            input_spec: InnerProductSpec::L2,
            output_spec: InnerProductSpec::L2,
            hidden: vec![64, 64],
            train: TrainConfig::default(),
            standardize: true,
            center: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: Option<serde_json::Value>,
    pub pipeline: Option<PipelineConfig>,
    pub partition: Option<Partition>,
    /// Standard error of the output tail `sum_{j > d_Y} lambda_j`, from the
    /// per-sample projection residuals of the PCA partition.
    pub output_tail_stderr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PcaNetModel {
    input: PcaBasis,
    output: PcaBasis,
    net: Mlp,
    pub provenance: Provenance,
}

pub fn assemble(input: PcaBasis, output: PcaBasis, net: Mlp) -> Result<PcaNetModel> {
    if net.input_dim() != input.dim() {
        return Err(Error::DimensionMismatch {
            expected: input.dim(),
            found: net.input_dim(),
        });
    }
    if net.output_dim() != output.dim() {
        return Err(Error::DimensionMismatch {
            expected: output.dim(),
            found: net.output_dim(),
        });
    }
    Ok(PcaNetModel {
        input,
        output,
        net,
        provenance: Provenance::default(),
    })
}

pub fn predict(model: &PcaNetModel, u: &Field) -> Result<Field> {
    model.predict(u)
}

impl PcaNetModel {
    pub fn input_basis(&self) -> &PcaBasis {
        &self.input
    }

    pub fn output_basis(&self) -> &PcaBasis {
        &self.output
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn predict_latent(&self, xi: &[f64]) -> Result<Field> {
        self.output.decode(&self.net.forward(xi)?)
    }

    pub fn predict(&self, u: &Field) -> Result<Field> {
        self.predict_latent(&self.input.encode(u)?)
    }
}

/// `x -> s(x) - s(-x)` in `d` dimensions: an exact ReLU identity.
pub fn identity_net(d: usize) -> Result<Mlp> {
    let mut up = Dense::zeros(2 * d, d);
    let mut down = Dense::zeros(d, 2 * d);
    for i in 0..d {
        up.set_weight(2 * i, i, 1.0);
        up.set_weight(2 * i + 1, i, -1.0);
        down.set_weight(i, 2 * i, 1.0);
        down.set_weight(i, 2 * i + 1, -1.0);
    }
    Mlp::from_layers(vec![up, down])
}

fn coordinate_stats(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let scale = (0..d)
        .map(|j| {
            let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn standardize(xs: &[Vec<f64>], mean: &[f64], scale: &[f64]) -> Vec<Vec<f64>> {
    xs.iter()
        .map(|x| x.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect()
}

/// Rewrite `net` so that it acts on raw coordinates and returns raw outputs.
fn fold_standardization(net: &mut Mlp, in_mean: &[f64], in_scale: &[f64], out_mean: &[f64], out_scale: &[f64]) {
    let layers = net.layers_mut();
    {
        let first = &mut layers[0];
        for r in 0..first.rows() {
            let mut shift = 0.0;
            for c in 0..first.cols() {
                let w = first.weight(r, c) / in_scale[c];
                shift += w * in_mean[c];
                first.set_weight(r, c, w);
            }
            let b = first.bias()[r] - shift;
            first.set_bias(r, b);
        }
    }
    let last = layers.last_mut().expect("nonempty");
    for r in 0..last.rows() {
        for c in 0..last.cols() {
            let w = last.weight(r, c) * out_scale[r];
            last.set_weight(r, c, w);
        }
        let b = last.bias()[r] * out_scale[r] + out_mean[r];
        last.set_bias(r, b);
    }
}

/// PCA on the PCA partition, then `psi` trained on the encoded training pairs.
pub fn train_pipeline(
    inputs: &[Field],
    outputs: &[Field],
    partition: &Partition,
    config: &PipelineConfig,
) -> Result<(PcaNetModel, LossTrace)> {
    if inputs.len() != outputs.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            found: outputs.len(),
        });
    }
    partition.validate(inputs.len())?;
    let n_pca = partition.pca.len();
    if n_pca < config.d_x.max(config.d_y) {
        return Err(Error::invalid(format!(
            "{n_pca} PCA samples cannot support d_X = {}, d_Y = {}",
            config.d_x, config.d_y
        )));
    }
    let options = PcaOptions { center: config.center };
    let pick = |set: &[Field], idx: &[usize]| -> Vec<Field> { idx.iter().map(|&i| set[i].clone()).collect() };
    let pca_in = pick(inputs, &partition.pca);
    let pca_out = pick(outputs, &partition.pca);
    let basis_x = empirical_pca_with(&pca_in, config.input_spec, config.d_x, options)?;
    let basis_y = empirical_pca_with(&pca_out, config.output_spec, config.d_y, options)?;
    if basis_x.dim() < config.d_x || basis_y.dim() < config.d_y {
        return Err(Error::invalid(format!(
            "sample covariance rank too small: got d_X = {}, d_Y = {}",
            basis_x.dim(),
            basis_y.dim()
        )));
    }
    let residuals: Vec<f64> = pca_out
        .par_iter()
        .map(|w| basis_y.projection_residual(w))
        .collect::<Result<_>>()?;
    let tail_stderr = MeanEstimate::from_samples(&residuals).stderr;

    let xi: Vec<Vec<f64>> = partition
        .train
        .par_iter()
        .map(|&i| basis_x.encode(&inputs[i]))
        .collect::<Result<_>>()?;
    let eta: Vec<Vec<f64>> = partition
        .train
        .par_iter()
        .map(|&i| basis_y.encode(&outputs[i]))
        .collect::<Result<_>>()?;

    let mut widths = vec![config.d_x];
    widths.extend(&config.hidden);
    widths.push(config.d_y);
    let init = Mlp::init(&widths, config.train.init, config.train.seed)?;
    let (net, trace) = if config.standardize {
        let (mx, sx) = coordinate_stats(&xi);
        let (my, sy) = coordinate_stats(&eta);
        let (mut net, trace) = train(&init, &standardize(&xi, &mx, &sx), &standardize(&eta, &my, &sy), &config.train)?;
        fold_standardization(&mut net, &mx, &sx, &my, &sy);
        (net, trace)
    } else {
        train(&init, &xi, &eta, &config.train)?
    };

    let mut model = assemble(basis_x, basis_y, net)?;
    model.provenance = Provenance {
        dataset: None,
        pipeline: Some(config.clone()),
        partition: Some(partition.clone()),
        output_tail_stderr: Some(tail_stderr),
    };
    Ok((model, trace))
}

/// Held-out error quantities, each a root mean square over the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// `E = ||Psi - Psi_dagger||`
    pub total: f64,
    /// Standard error of the Monte-Carlo estimate of `E^2`.
    pub total_sq_stderr: f64,
    /// `E_X = ||u - D_X E_X u||`
    pub input: f64,
    /// `E_Y = ||Psi_dagger u - D_Y E_Y Psi_dagger u||`
    pub output: f64,
    /// `E_psi = |E_Y Psi_dagger D_X xi - psi(xi)|`, only with an oracle.
    pub network: Option<f64>,
    /// `E_psi* = |E_Y Psi_dagger u - psi(E_X u)|`
    pub network_star: f64,
    /// `sum_{j > d_Y} lambda_j` of the output basis spectrum.
    pub tail: f64,
    pub tail_stderr: f64,
    pub test_size: usize,
    /// Empirical Lipschitz ratio used in the second chain, if any.
    pub lipschitz_estimate: Option<f64>,
    pub output_norm: String,
    /// Total error in `L2` when the output norm differs.
    pub total_l2: Option<f64>,
}

impl ErrorReport {
    /// `E^2 - tail`; negative beyond the slack flags an evaluation bug.
    pub fn lower_bound_gap(&self) -> f64 {
        self.total * self.total - self.tail
    }

    pub fn lower_bound_holds(&self) -> bool {
        self.lower_bound_gap() >= -3.0 * self.tail_stderr
    }

    /// Flat `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![
            ("total", Some(self.total)),
            ("total_sq_stderr", Some(self.total_sq_stderr)),
            ("input", Some(self.input)),
            ("output", Some(self.output)),
            ("network", self.network),
            ("network_star", Some(self.network_star)),
            ("tail", Some(self.tail)),
            ("tail_stderr", Some(self.tail_stderr)),
            ("test_size", Some(self.test_size as f64)),
            ("lipschitz_estimate", self.lipschitz_estimate),
            ("total_l2", self.total_l2),
        ];
        rows.push(("lower_bound_gap", Some(self.lower_bound_gap())));
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            match v {
                Some(v) => out.push_str(&format!("{k},{v:e}\n")),
                None => out.push_str(&format!("{k},\n")),
            }
        }
        out
    }
}

/// `E^2 - sum_{j > d_Y} lambda_j`.
pub fn lower_bound_gap(model: &PcaNetModel, spectrum: &[f64], measured: f64) -> f64 {
    let d_y = model.output.dim();
    measured * measured - spectrum.iter().skip(d_y).sum::<f64>()
}

pub type Oracle<'a> = &'a (dyn Fn(&Field) -> Result<Field> + Sync);

/// Largest `||Psi(u) - Psi(v)|| / ||u - v||` over the given pairs. This is a
/// sampled estimate, not a bound.
pub fn lipschitz_estimate(
    oracle: Oracle<'_>,
    pairs: &[(Field, Field)],
    input_spec: &InnerProductSpec,
    output_spec: &InnerProductSpec,
) -> Result<f64> {
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|(u, v)| {
            let du = norm(input_spec, &u.axpy(-1.0, v)?)?;
            if du == 0.0 {
                return Ok(0.0);
            }
            let dv = norm(output_spec, &oracle(u)?.axpy(-1.0, &oracle(v)?)?)?;
            Ok(dv / du)
        })
        .collect::<Result<_>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().sum::<f64>() / v.len() as f64).sqrt()
}

/// All error terms on the test pairs `(u_k, Psi_dagger(u_k))`.
///
/// With an `oracle` the network term `E_psi` is computed from
/// `Psi_dagger(D_X E_X u_k)`; a `lipschitz` value then enables the second
/// inequality chain. Both chains are checked and violations are errors.
pub fn error_decomposition(
    model: &PcaNetModel,
    inputs: &[Field],
    targets: &[Field],
    oracle: Option<Oracle<'_>>,
    lipschitz: Option<f64>,
) -> Result<ErrorReport> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid("need matching nonempty test inputs and targets"));
    }
    let out_spec = *model.output.spec();
    let in_spec = *model.input.spec();
    let alt_l2 = out_spec != InnerProductSpec::L2;

    struct Terms {
        total: f64,
        total_l2: f64,
        input: f64,
        output: f64,
        network: Option<f64>,
        network_star: f64,
    }
    let terms: Vec<Terms> = inputs
        .par_iter()
        .zip(targets)
        .map(|(u, w)| {
            let xi = model.input.encode(u)?;
            let psi = model.net.forward(&xi)?;
            let pred = model.output.decode(&psi)?;
            let err = pred.axpy(-1.0, w)?;
            let total = norm(&out_spec, &err)?.powi(2);
            let total_l2 = if alt_l2 { norm(&InnerProductSpec::L2, &err)?.powi(2) } else { total };
            let projected = model.input.decode(&xi)?;
            let input = norm(&in_spec, &u.axpy(-1.0, &projected)?)?.powi(2);
            let output = model.output.projection_residual(w)?;
            let eta = model.output.encode(w)?;
            let network_star = l2_dist(&eta, &psi);
            let network = match oracle {
                Some(f) => Some(l2_dist(&model.output.encode(&f(&projected)?)?, &psi)),
                None => None,
            };
            Ok(Terms {
                total,
                total_l2,
                input,
                output,
                network,
                network_star,
            })
        })
        .collect::<Result<_>>()?;

    let col = |f: &dyn Fn(&Terms) -> f64| -> Vec<f64> { terms.iter().map(f).collect() };
    let total_sq = col(&|t| t.total);
    let total_est = MeanEstimate::from_samples(&total_sq);
    let network = if oracle.is_some() {
        Some(rms(&col(&|t| t.network.unwrap_or(0.0))))
    } else {
        None
    };
    let report = ErrorReport {
        total: total_est.mean.sqrt(),
        total_sq_stderr: total_est.stderr,
        input: rms(&col(&|t| t.input)),
        output: rms(&col(&|t| t.output)),
        network,
        network_star: rms(&col(&|t| t.network_star)),
        tail: model.output.tail_sum(model.output.dim()),
        tail_stderr: model.provenance.output_tail_stderr.unwrap_or(0.0),
        test_size: inputs.len(),
        lipschitz_estimate: lipschitz,
        output_norm: out_spec.name(),
        total_l2: if alt_l2 { Some(rms(&col(&|t| t.total_l2))) } else { None },
    };

    if report.total > report.output + report.network_star + 1e-10 {
        return Err(Error::Verification(format!(
            "E = {:e} exceeds E_Y + E_psi* = {:e}",
            report.total,
            report.output + report.network_star
        )));
    }
    if let (Some(lip), Some(net)) = (lipschitz, report.network) {
        if report.network_star > lip * report.input + net + 1e-10 {
            return Err(Error::Verification(format!(
                "E_psi* = {:e} exceeds Lip E_X + E_psi = {:e}",
                report.network_star,
                lip * report.input + net
            )));
        }
    }
    Ok(report)
}
