use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use pcanet::darcy::ExpansionSpec;
use pcanet::experiments::{run_study, StudySpec};
use pcanet::field::{Field, InnerProductSpec};
use pcanet::io::{self, DatasetManifest, Generator};
use pcanet::ns_relu::{build_step_net, unroll, EmulatedNonlinearity, Multiplier};
use pcanet::pca::{empirical_pca_with, PcaOptions};
use pcanet::pcanet::{error_decomposition, train_pipeline, Partition, PipelineConfig};
use pcanet::spectral_ns::{run, run_with, NsRunConfig, SpectralField};
use pcanet::verify;

use crate::config::{echo, layered};
use crate::{Cli, Command, Failure};

pub fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let file = cli.config.as_deref();
    let out = |name: &str| cli.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
    match &cli.command {
        Command::GenDarcy(a) => gen_darcy(a, file, &out("gen-darcy")),
        Command::GenNs(a) => gen_ns(a, file, &out("gen-ns")),
        Command::Pca(a) => pca(a, file, &out("pca")),
        Command::Train(a) => train(a, file, &out("train")),
        Command::Eval(a) => eval(a, file, &out("eval")),
        Command::NsSolve(a) => ns_solve(a, file, &out("ns-solve")),
        Command::EmulateNs(a) => emulate_ns(a, file, &out("emulate-ns")),
        Command::Study(a) => study(a, file, cli.out.as_deref()),
        Command::Verify(a) => verify_cmd(a, file, cli.out.as_deref()),
    }
}

fn set<T>(slot: &mut T, flag: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Run(e.into()))? + "\n";
    fs::write(path, text).map_err(|e| Failure::Run(pcanet::Error::io(path, e)))
}

fn default_split(n: usize, split: Option<[usize; 3]>) -> Partition {
    let [p, t, s] = split.unwrap_or_else(|| {
        let p = (n / 4).max(1);
        let t = (n / 2).max(1);
        [p, t, n.saturating_sub(p + t)]
    });
    Partition::contiguous(p, t, s)
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    path.clone().ok_or_else(|| Failure::Usage(format!("--{what} is required")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDarcyConfig {
    n: usize,
    seed: u64,
    points: usize,
    truncation: usize,
    alpha: f64,
    kappa: f64,
    mean: f64,
    split: Option<[usize; 3]>,
}

impl Default for GenDarcyConfig {
    fn default() -> Self {
        Self {
            n: 64,
            seed: 0,
            points: 31,
            truncation: 16,
            alpha: 1.0,
            kappa: 1.0,
            mean: 1.0,
            split: None,
        }
    }
}

fn gen_darcy(a: &crate::GenDarcyArgs, file: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut c: GenDarcyConfig = layered(&GenDarcyConfig::default(), file, "gen-darcy")?;
    set(&mut c.n, &a.n);
    set(&mut c.seed, &a.seed);
    set(&mut c.points, &a.points);
    set(&mut c.truncation, &a.truncation);
    set(&mut c.alpha, &a.alpha);
    set(&mut c.kappa, &a.kappa);
    set(&mut c.mean, &a.mean);
    if a.split.is_some() {
        c.split = a.split;
    }
    echo("gen-darcy", &c, Some(out))?;
    let expansion = ExpansionSpec::new(c.mean, c.truncation, c.alpha, c.kappa)?;
    let (inputs, outputs) = io::generate_darcy(&expansion, c.points, c.n, c.seed)?;
    let generator = Generator::Darcy { expansion, rhs: 1.0 };
    let m = DatasetManifest::new(&inputs, &outputs, generator, c.seed, default_split(c.n, c.split))?;
    let m = io::write_dataset(out, &m, &inputs, &outputs)?;
    println!("{} samples -> {} (sha256 {})", m.sample_count, out.display(), m.checksum);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenNsConfig {
    n: usize,
    seed: u64,
    ns: NsRunConfig,
    grid: Option<usize>,
    decay: f64,
    norm: f64,
    split: Option<[usize; 3]>,
}

impl Default for GenNsConfig {
    fn default() -> Self {
        Self {
            n: 16,
            seed: 0,
            ns: NsRunConfig {
                k_max: 4,
                t_final: 0.1,
                ..NsRunConfig::default()
            },
            grid: None,
            decay: 1.0,
            norm: 0.5,
            split: None,
        }
    }
}

fn apply_ns(cfg: &mut NsRunConfig, flag: &Option<String>) -> Result<(), Failure> {
    if let Some(s) = flag {
        cfg.apply_overrides(s).map_err(|e| Failure::Usage(format!("--ns: {e}")))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(format!("ns config: {e}")))
}

fn gen_ns(a: &crate::GenNsArgs, file: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut c: GenNsConfig = layered(&GenNsConfig::default(), file, "gen-ns")?;
    set(&mut c.n, &a.n);
    set(&mut c.seed, &a.seed);
    apply_ns(&mut c.ns, &a.ns)?;
    if a.grid.is_some() {
        c.grid = a.grid;
    }
    set(&mut c.decay, &a.decay);
    set(&mut c.norm, &a.norm);
    if a.split.is_some() {
        c.split = a.split;
    }
    let grid = c.grid.unwrap_or(4 * c.ns.k_max);
    c.grid = Some(grid);
    echo("gen-ns", &c, Some(out))?;
    let (inputs, outputs) = io::generate_ns(&c.ns, grid, c.decay, c.norm, c.n, c.seed)?;
    let generator = Generator::Ns {
        config: c.ns.clone(),
        grid,
        decay: c.decay,
        norm: c.norm,
    };
    let m = DatasetManifest::new(&inputs, &outputs, generator, c.seed, default_split(c.n, c.split))?;
    let m = io::write_dataset(out, &m, &inputs, &outputs)?;
    println!("{} samples -> {} (sha256 {})", m.sample_count, out.display(), m.checksum);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Side {
    Input,
    Output,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PcaConfig {
    data: Option<PathBuf>,
    side: Side,
    d: usize,
    spec: InnerProductSpec,
    center: bool,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            data: None,
            side: Side::Input,
            d: 8,
            spec: InnerProductSpec::L2,
            center: false,
        }
    }
}

fn subset(fields: &[Field], idx: &[usize]) -> Vec<Field> {
    idx.iter().map(|&i| fields[i].clone()).collect()
}

fn pca(a: &crate::PcaArgs, file: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut c: PcaConfig = layered(&PcaConfig::default(), file, "pca")?;
    if a.data.is_some() {
        c.data = a.data.clone();
    }
    if let Some(s) = &a.side {
        c.side = serde_json::from_value(json!(s)).map_err(|_| Failure::Usage(format!("unknown side `{s}`")))?;
    }
    set(&mut c.d, &a.d);
    set(&mut c.spec, &a.spec);
    set(&mut c.center, &a.center);
    let data = require(&c.data, "data")?;
    echo("pca", &c, Some(out))?;
    let (m, inputs, outputs) = io::read_dataset(&data)?;
    let pool = if c.side == Side::Input { &inputs } else { &outputs };
    let samples = subset(pool, &m.partition.pca);
    let basis = empirical_pca_with(&samples, c.spec, c.d, PcaOptions { center: c.center })?;
    for w in basis.warnings() {
        log::warn!("{w}");
    }
    let prov = vec![serde_json::to_value(&m).map_err(|e| Failure::Run(e.into()))?, json!(c)];
    io::save_basis(out, &basis, prov)?;
    println!("d = {}, tail = {:.6e}", basis.dim(), basis.tail_sum(basis.dim()));
    for (j, l) in basis.eigenvalues().iter().take(basis.dim()).enumerate() {
        println!("lambda_{} = {l:.6e}", j + 1);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCmdConfig {
    data: Option<PathBuf>,
    pipeline: PipelineConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            data: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

fn train(a: &crate::TrainArgs, file: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut c: TrainCmdConfig = layered(&TrainCmdConfig::default(), file, "train")?;
    if a.data.is_some() {
        c.data = a.data.clone();
    }
    let p = &mut c.pipeline;
    set(&mut p.d_x, &a.d_x);
    set(&mut p.d_y, &a.d_y);
    set(&mut p.input_spec, &a.input_spec);
    set(&mut p.output_spec, &a.output_spec);
    set(&mut p.hidden, &a.hidden);
    set(&mut p.train.epochs, &a.epochs);
    set(&mut p.train.learning_rate, &a.lr);
    set(&mut p.train.batch_size, &a.batch_size);
    set(&mut p.train.seed, &a.seed);
    let data = require(&c.data, "data")?;
    echo("train", &c, Some(out))?;
    let (m, inputs, outputs) = io::read_dataset(&data)?;
    let (mut model, trace) = train_pipeline(&inputs, &outputs, &m.partition, &c.pipeline)?;
    let manifest = serde_json::to_value(&m).map_err(|e| Failure::Run(e.into()))?;
    model.provenance.dataset = Some(manifest.clone());
    io::save_model(out, &model, vec![manifest, json!(c)])?;
    write_json(&out.join("loss.json"), &json!(trace))?;
    println!(
        "trained {} epochs: loss {:.4e} -> {:.4e}",
        trace.epochs.len(),
        trace.initial,
        trace.final_loss()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    model: Option<PathBuf>,
    data: Option<PathBuf>,
}

fn eval(a: &crate::EvalArgs, file: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut c: EvalConfig = layered(&EvalConfig::default(), file, "eval")?;
    if a.model.is_some() {
        c.model = a.model.clone();
    }
    if a.data.is_some() {
        c.data = a.data.clone();
    }
    let (model_dir, data) = (require(&c.model, "model")?, require(&c.data, "data")?);
    echo("eval", &c, Some(out))?;
    let model = io::load_model(&model_dir)?;
    let (m, inputs, outputs) = io::read_dataset(&data)?;
    if m.partition.test.is_empty() {
        return Err(Failure::Usage("dataset has an empty test partition".into()));
    }
    let report = error_decomposition(
        &model,
        &subset(&inputs, &m.partition.test),
        &subset(&outputs, &m.partition.test),
        None,
        None,
    )?;
    if !report.lower_bound_holds() {
        log::warn!("E^2 is below the output PCA tail by more than 3 standard errors");
    }
    write_json(&out.join("report.json"), &json!(report))?;
    let csv = report.to_csv();
    fs::write(out.join("report.csv"), &csv).map_err(|e| Failure::Run(pcanet::Error::io(out, e)))?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Initial {
    TaylorGreen,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NsSolveConfig {
    ns: NsRunConfig,
    initial: Initial,
    seed: u64,
    decay: f64,
    norm: f64,
    grid: Option<usize>,
}

impl Default for NsSolveConfig {
    fn default() -> Self {
        Self {
            ns: NsRunConfig::default(),
            initial: Initial::TaylorGreen,
            seed: 0,
            decay: 1.0,
            norm: 0.5,
            grid: None,
        }
    }
}

fn initial_state(kind: Initial, ns: &NsRunConfig, decay: f64, norm: f64, seed: u64) -> Result<SpectralField, Failure> {
    Ok(match kind {
        Initial::TaylorGreen => SpectralField::taylor_green(ns.k_max, ns.nu, 0.0)?,
        Initial::Random => SpectralField::random_divergence_free(ns.k_max, decay, norm, seed),
    })
}

fn ns_solve(a: &crate::NsSolveArgs, file: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut c: NsSolveConfig = layered(&NsSolveConfig::default(), file, "ns-solve")?;
    apply_ns(&mut c.ns, &a.ns)?;
    if let Some(s) = &a.initial {
        c.initial = serde_json::from_value(json!(s)).map_err(|_| Failure::Usage(format!("unknown initial `{s}`")))?;
    }
    set(&mut c.seed, &a.seed);
    set(&mut c.decay, &a.decay);
    set(&mut c.norm, &a.norm);
    if a.grid.is_some() {
        c.grid = a.grid;
    }
    let grid = c.grid.unwrap_or(4 * c.ns.k_max);
    c.grid = Some(grid);
    echo("ns-solve", &c, Some(out))?;
    let u0 = initial_state(c.initial, &c.ns, c.decay, c.norm, c.seed)?;
    let (u1, log) = run(&u0, &c.ns)?;
    let reference_error = match c.initial {
        Initial::TaylorGreen => Some(u1.distance(&SpectralField::taylor_green(c.ns.k_max, c.ns.nu, c.ns.t_final)?)?),
        Initial::Random => None,
    };
    let field = io::velocity_field(&u1, grid)?;
    let checksum = io::write_block(&out.join("final.bin"), field.values())?;
    let summary = json!({
        "schedule": log.schedule,
        "max_ratio": log.max_ratio(),
        "max_norm": log.norms.iter().copied().fold(0.0, f64::max),
        "final_l2_norm": u1.l2_norm(),
        "reference_error": reference_error,
        "final_state": {
            "file": "final.bin",
            "geometry": field.geometry(),
            "channels": field.channels(),
            "checksum": checksum,
        },
        "code_version": io::CODE_VERSION,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} steps of dt = {:.4e}, {} iterations each, max contraction ratio {:.3e}",
        log.schedule.n_steps,
        log.schedule.dt,
        log.schedule.iterations,
        log.max_ratio()
    );
    if let Some(e) = reference_error {
        println!("distance to the exact Taylor-Green state: {e:.4e}");
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EmulateNsConfig {
    ns: NsRunConfig,
    multiplier: Multiplier,
    seed: u64,
}

impl Default for EmulateNsConfig {
    fn default() -> Self {
        Self {
            ns: NsRunConfig {
                k_max: 4,
                t_final: 0.05,
                ..NsRunConfig::default()
            },
            multiplier: Multiplier::Network,
            seed: 0,
        }
    }
}

fn emulate_ns(a: &crate::EmulateNsArgs, file: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut c: EmulateNsConfig = layered(&EmulateNsConfig::default(), file, "emulate-ns")?;
    apply_ns(&mut c.ns, &a.ns)?;
    if let Some(s) = &a.multiplier {
        c.multiplier =
            serde_json::from_value(json!(s)).map_err(|_| Failure::Usage(format!("unknown multiplier `{s}`")))?;
    }
    set(&mut c.seed, &a.seed);
    echo("emulate-ns", &c, Some(out))?;
    let step = build_step_net(&c.ns, c.multiplier)?;
    let sched = *step.schedule();
    let nl = EmulatedNonlinearity::build(c.ns.k_max, sched.m_bar, sched.epsilon, c.multiplier)?;
    let product_m = nl.plan().m;
    let net = unroll(step, sched.n_steps);
    let u0 = SpectralField::random_divergence_free(c.ns.k_max, 1.0, c.ns.m_bound * 0.5, c.seed);
    let emulated = net.apply(&u0)?;
    let deviation = emulated.distance(run_with(&u0, &c.ns, &nl)?.final_state())?;
    let (exact, _) = run(&u0, &c.ns)?;
    let scheme_error = emulated.distance(&exact)?;
    io::save_unrolled(out, &net, &c.ns, vec![json!(c)])?;
    let summary = json!({
        "steps": sched.n_steps,
        "iterations": sched.iterations,
        "epsilon": sched.epsilon,
        "product_depth_parameter": product_m,
        "size": net.size(),
        "depth": net.depth(),
        "blocks": net.step().block_list(),
        "deviation_from_emulated_scheme": deviation,
        "distance_to_exact_scheme": scheme_error,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "size {} depth {}; deviation from scheme run {deviation:.3e}, distance to exact scheme {scheme_error:.3e}",
        net.size(),
        net.depth()
    );
    if deviation > 1e-10 {
        return Err(Failure::Verification(format!(
            "network evaluation deviates from the scheme by {deviation:e}"
        )));
    }
    Ok(())
}

fn study(a: &crate::StudyArgs, file: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let base = if a.grid == "default" {
        StudySpec::default_for(&a.kind).map_err(|e| Failure::Usage(e.to_string()))?
    } else {
        let text = fs::read_to_string(&a.grid).map_err(|e| Failure::Usage(format!("{}: {e}", a.grid)))?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", a.grid)))?;
        if let Value::Object(o) = &mut v {
            o.entry("kind").or_insert_with(|| json!(a.kind));
        }
        serde_json::from_value(v).map_err(|e| Failure::Usage(format!("{}: {e}", a.grid)))?
    };
    let spec: StudySpec = layered(&base, file, "study")?;
    echo("study", &spec, out)?;
    let result = run_study(&spec)?;
    if let Some(dir) = out {
        write_json(&dir.join("study.json"), &result.json)?;
        fs::write(dir.join("study.csv"), &result.csv).map_err(|e| Failure::Run(pcanet::Error::io(dir, e)))?;
    }
    print!("{}", result.csv);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VerifyConfig {
    suite: String,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { suite: "all".into() }
    }
}

fn verify_cmd(a: &crate::VerifyArgs, file: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let mut c: VerifyConfig = layered(&VerifyConfig::default(), file, "verify")?;
    set(&mut c.suite, &a.suite);
    echo("verify", &c, out)?;
    let results = verify::run_suite(&c.suite).map_err(|e| Failure::Usage(e.to_string()))?;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {}/{}: {}", r.suite, r.name, r.detail);
    }
    if let Some(dir) = out {
        write_json(&dir.join("verify.json"), &json!(results))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}
