//! Fast invariant suites, one per module, for the `verify` command.

use std::f64::consts::E;

use rand::Rng;
use serde::Serialize;

use crate::darcy::{apriori_check, sample_coefficient, sample_z, solve_darcy, DarcyProblem, ExpansionSpec};
use crate::error::{Error, Result};
use crate::experiments::GaussianSpectrum;
use crate::field::{Field, GridGeometry, InnerProductSpec};
use crate::io::{self, DatasetManifest, Generator};
use crate::nn::{Mlp, WeightInit};
use crate::ns_relu::{build_product_net, build_step_net, product_reference_bound, unroll, EmulatedNonlinearity, Multiplier};
use crate::pca::{empirical_pca, excess_risk, hs_distance, CovarianceSummary};
use crate::pcanet::{assemble, error_decomposition, identity_net, Partition};
use crate::rng;
use crate::spectral_ns::{nonlinear_term, run, run_with, leray_project, NsRunConfig, SpectralField};

pub const SUITES: &[&str] = &["pca", "nn", "darcy", "ns", "ns-relu", "pcanet", "io"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

struct Suite {
    name: &'static str,
    out: Vec<CheckResult>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, out: Vec::new() }
    }

    fn check(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        self.out.push(CheckResult {
            suite: self.name.to_string(),
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

/// Run one suite by name, or every suite for `"all"`.
pub fn run_suite(name: &str) -> Result<Vec<CheckResult>> {
    let suite = match name {
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s)?);
            }
            return Ok(out);
        }
        "pca" => pca_suite(),
        "nn" => nn_suite(),
        "darcy" => darcy_suite(),
        "ns" => ns_suite(),
        "ns-relu" => ns_relu_suite(),
        "pcanet" => pcanet_suite(),
        "io" => io_suite(),
        other => return Err(Error::invalid(format!("unknown suite `{other}`; expected one of {SUITES:?} or all"))),
    };
    Ok(suite.out)
}

fn pca_suite() -> Suite {
    let mut s = Suite::new("pca");
    s.check("tail identity on the training set", || {
        let m = GaussianSpectrum::new(&[1.0, 0.5, 0.2, 0.05])?;
        let samples = m.sample(64, 1);
        let basis = empirical_pca(&samples, InnerProductSpec::L2, 2)?;
        let mc = basis.projection_error_stats(&samples)?.mean;
        let dev = (mc - basis.tail_sum(2)).abs();
        Ok((dev <= 1e-10, format!("|mean residual - tail| = {dev:.2e}")))
    });
    s.check("encode after decode is the identity", || {
        let m = GaussianSpectrum::new(&[1.0, 0.3, 0.1])?;
        let basis = empirical_pca(&m.sample(16, 2), InnerProductSpec::L2, 3)?;
        let eta = [0.3, -1.2, 2.0];
        let back = basis.encode(&basis.decode(&eta)?)?;
        let dev = eta.iter().zip(&back).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        Ok((dev <= 1e-12, format!("max deviation {dev:.2e}")))
    });
    s.check("excess risk bound", || {
        let mut violations = 0;
        for k in 0..10u64 {
            let m = GaussianSpectrum::new(&[1.0, 0.6, 0.3, 0.1, 0.02])?;
            let samples = m.sample(20, 10 + k);
            let truth = m.covariance()?;
            let emp = CovarianceSummary::from_samples(&samples, InnerProductSpec::L2)?;
            let basis = empirical_pca(&samples, InnerProductSpec::L2, 2)?;
            if excess_risk(&basis, &truth)? > (2.0 * basis.dim() as f64).sqrt() * hs_distance(&truth, &emp)? {
                violations += 1;
            }
        }
        Ok((violations == 0, format!("{violations} violations over 10 instances")))
    });
    s
}

fn nn_suite() -> Suite {
    let mut s = Suite::new("nn");
    s.check("parameter round-trip", || {
        let net = Mlp::init(&[3, 6, 2], WeightInit::He, 3)?;
        let back = Mlp::from_parameters(&net.widths(), &net.parameters())?;
        Ok((back == net, format!("{} parameters", net.param_count())))
    });
    s.check("composition evaluates in sequence", || {
        let a = Mlp::init(&[2, 4, 3], WeightInit::He, 4)?;
        let b = Mlp::init(&[3, 5, 2], WeightInit::He, 5)?;
        let c = Mlp::compose(&b, &a)?;
        let x = [0.4, -0.7];
        let direct = b.forward(&a.forward(&x)?)?;
        let composed = c.forward(&x)?;
        let dev = direct.iter().zip(&composed).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        Ok((dev <= 1e-12 && c.depth() + 1 == a.depth() + b.depth(), format!("deviation {dev:.2e}")))
    });
    s.check("gradient against finite differences", || {
        let net = Mlp::init(&[3, 5, 2], WeightInit::He, 6)?;
        let mut r = rng::seeded(7);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| r.random::<f64>() - 0.5).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| r.random::<f64>() - 0.5).collect()).collect();
        let (_, grad) = net.backward_gradients(&xs, &ys)?;
        let params = net.parameters();
        let widths = net.widths();
        let h = 1e-6;
        let scale = grad.iter().fold(1e-12f64, |m, g| m.max(g.abs()));
        let mut errs: Vec<f64> = Vec::new();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let plus = Mlp::from_parameters(&widths, &p)?.loss(&xs, &ys)?;
            p[i] -= 2.0 * h;
            let minus = Mlp::from_parameters(&widths, &p)?.loss(&xs, &ys)?;
            errs.push(((plus - minus) / (2.0 * h) - grad[i]).abs() / scale);
        }
        // a parameter next to a ReLU kink can spoil its own difference quotient
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        Ok((median <= 1e-5, format!("median relative error {median:.2e}")))
    });
    s
}

fn darcy_suite() -> Suite {
    let mut s = Suite::new("darcy");
    let setup = || Ok::<_, Error>((ExpansionSpec::new(1.0, 8, 1.0, 1.0)?, GridGeometry::unit_box(2, 15)?));
    s.check("coefficients respect the coercivity bound", || {
        let (spec, g) = setup()?;
        let (lambda, upper) = spec.coercivity_bounds();
        let mut worst = f64::INFINITY;
        let mut top: f64 = 0.0;
        for k in 0..100 {
            let a = sample_coefficient(&spec, &g, &sample_z(&spec, 11, k))?;
            worst = a.values().iter().copied().fold(worst, f64::min);
            top = a.values().iter().copied().fold(top, f64::max);
        }
        Ok((worst >= lambda && top <= upper, format!("a in [{worst:.4}, {top:.4}] within [{lambda:.4}, {upper:.4}]")))
    });
    s.check("energy identity and a priori bound", || {
        let (spec, g) = setup()?;
        let problem = DarcyProblem::new(g, spec.clone())?;
        let a = sample_coefficient(&spec, &g, &sample_z(&spec, 12, 0))?;
        let w = solve_darcy(&problem, &a)?;
        let rep = apriori_check(&problem, &a, &w)?;
        Ok((rep.holds && rep.identity_defect <= 1e-8, format!("identity defect {:.2e}", rep.identity_defect)))
    });
    s
}

fn ns_suite() -> Suite {
    let mut s = Suite::new("ns");
    s.check("advection is skew-symmetric", || {
        let mut worst: f64 = 0.0;
        for k in 0..5u64 {
            let u = SpectralField::random_divergence_free(8, 1.0, 1.0, 20 + k);
            let v = SpectralField::random_divergence_free(8, 0.5, 1.5, 30 + k);
            let rel = nonlinear_term(&u, &v)?.inner(&v).abs() / (u.norm() * v.norm() * v.norm());
            worst = worst.max(rel);
        }
        Ok((worst <= 1e-12, format!("max relative pairing {worst:.2e}")))
    });
    s.check("Leray projection is idempotent and divergence free", || {
        let u = SpectralField::random_divergence_free(6, 1.0, 1.0, 40);
        let p = leray_project(&u);
        let pp = leray_project(&p);
        let dev = p.distance(&pp)?;
        Ok((dev <= 1e-14 && p.divergence_defect() <= 1e-12, format!("idempotence defect {dev:.2e}")))
    });
    s.check("contraction and norm bound under the schedule", || {
        let cfg = NsRunConfig {
            k_max: 4,
            t_final: 0.25,
            ..NsRunConfig::default()
        };
        let u0 = SpectralField::random_divergence_free(4, 1.0, 1.0, 41);
        let (_, log) = run(&u0, &cfg)?;
        let ratio = log.max_ratio();
        let peak = log.norms.iter().copied().fold(0.0, f64::max);
        Ok((
            ratio <= 0.5 + 1e-10 && peak <= E * cfg.m_bound,
            format!("max ratio {ratio:.3e}, max norm {peak:.4}"),
        ))
    });
    s
}

fn ns_relu_suite() -> Suite {
    let mut s = Suite::new("ns-relu");
    s.check("product network error bound", || {
        let mut violations = 0;
        for m in 1..=5 {
            let net = build_product_net(m, 1.0, 2.0)?;
            if net.lattice_error(65) > product_reference_bound(m, 1.0, 2.0) {
                violations += 1;
            }
        }
        Ok((violations == 0, format!("{violations} violations")))
    });
    s.check("exact-product emulation reproduces the nonlinearity", || {
        let nl = EmulatedNonlinearity::build(3, 2.0 * (E + 2.0), 1e-3, Multiplier::Exact)?;
        let u = SpectralField::random_divergence_free(3, 1.0, 1.0, 50);
        let v = SpectralField::random_divergence_free(3, 1.0, 1.0, 51);
        let a = crate::spectral_ns::Nonlinearity::apply(&nl, &u, &v)?;
        let dev = a.distance(&nonlinear_term(&u, &v)?)?;
        Ok((dev <= 1e-12, format!("l2 deviation {dev:.2e}")))
    });
    s.check("unrolled network matches the scheme and its size tally", || {
        let cfg = NsRunConfig {
            k_max: 2,
            t_final: 0.02,
            ..NsRunConfig::default()
        };
        let step = build_step_net(&cfg, Multiplier::Network)?;
        let sched = *step.schedule();
        let nl = EmulatedNonlinearity::build(2, sched.m_bar, sched.epsilon, Multiplier::Network)?;
        let net = unroll(step, sched.n_steps);
        let u0 = SpectralField::random_divergence_free(2, 1.0, 1.0, 52);
        let dev = net.apply(&u0)?.distance(run_with(&u0, &cfg, &nl)?.final_state())?;
        let (tally, counted) = (net.size(), net.count_nonzeros());
        Ok((dev <= 1e-12 && tally == counted, format!("deviation {dev:.2e}, size {tally} vs {counted}")))
    });
    s
}

fn pcanet_suite() -> Suite {
    let mut s = Suite::new("pcanet");
    s.check("identity operator decomposition", || {
        let g = GridGeometry::torus(1, 16)?;
        let samples: Vec<Field> = (0..24)
            .map(|k| crate::field::random_trig_field(g, 1.5, 60 + k))
            .collect::<Result<_>>()?;
        let bx = empirical_pca(&samples[..12], InnerProductSpec::L2, 4)?;
        let model = assemble(bx.clone(), bx, identity_net(4)?)?;
        let rep = error_decomposition(&model, &samples[12..], &samples[12..], None, None)?;
        let gap = rep.total - rep.output - rep.network_star;
        Ok((gap <= 1e-10, format!("E - (E_Y + E_psi*) = {gap:.2e}")))
    });
    s
}

fn io_suite() -> Suite {
    let mut s = Suite::new("io");
    s.check("dataset round-trip and checksum", || {
        let dir = std::env::temp_dir().join(format!("pcanet-verify-{}", std::process::id()));
        let g = GridGeometry::torus(1, 8)?;
        let inputs: Vec<Field> = (0..3).map(|k| crate::field::random_trig_field(g, 1.0, k)).collect::<Result<_>>()?;
        let outputs: Vec<Field> = inputs.iter().map(|u| u.scaled(2.0)).collect();
        let gen = Generator::Synthetic {
            description: "doubling".into(),
        };
        let m = DatasetManifest::new(&inputs, &outputs, gen, 0, Partition::contiguous(1, 1, 1))?;
        let written = io::write_dataset(&dir, &m, &inputs, &outputs)?;
        let (back, a, b) = io::read_dataset(&dir)?;
        let exact = back == written && a == inputs && b == outputs;
        let data = dir.join("data.bin");
        let bytes = std::fs::read(&data).map_err(|e| Error::io(&data, e))?;
        std::fs::write(&data, &bytes[..bytes.len() - 1]).map_err(|e| Error::io(&data, e))?;
        let rejected = matches!(io::read_dataset(&dir), Err(Error::Checksum { .. }));
        let _ = std::fs::remove_dir_all(&dir);
        Ok((exact && rejected, format!("bit-exact {exact}, truncation rejected {rejected}")))
    });
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for name in SUITES {
            let results = run_suite(name).unwrap();
            assert!(!results.is_empty());
            for r in &results {
                assert!(r.passed, "{}/{}: {}", r.suite, r.name, r.detail);
            }
        }
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nope").is_err());
    }
}
