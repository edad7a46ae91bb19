use nalgebra::DMatrix;

use pcanet::darcy::{sample_dataset, DarcyProblem, ExpansionSpec};
use pcanet::field::{norm, random_trig_field, Field, GridGeometry, InnerProductSpec};
use pcanet::nn::TrainConfig;
use pcanet::pca::empirical_pca;
use pcanet::pcanet::{error_decomposition, train_pipeline, Partition, PcaNetModel, PipelineConfig};

fn subset(fields: &[Field], idx: &[usize]) -> Vec<Field> {
    idx.iter().map(|&i| fields[i].clone()).collect()
}

fn rms_error(pred: &[Field], targets: &[Field], spec: &InnerProductSpec) -> f64 {
    let sq: f64 = pred
        .iter()
        .zip(targets)
        .map(|(p, t)| norm(spec, &p.axpy(-1.0, t).unwrap()).unwrap().powi(2))
        .sum();
    (sq / pred.len() as f64).sqrt()
}

/// `A u = sum_j a_j <u, phi_j> phi_j` on the eigenbasis of a large reference sample.
fn diagonal_operator_data(n: u64) -> (Vec<Field>, Vec<Field>) {
    let g = GridGeometry::torus(1, 32).unwrap();
    let reference: Vec<Field> = (0..400).map(|k| random_trig_field(g, 1.5, 5000 + k).unwrap()).collect();
    let basis = empirical_pca(&reference, InnerProductSpec::L2, 12).unwrap();
    let gains: Vec<f64> = (0..12).map(|j| 2.0 / (1.0 + j as f64)).collect();
    let inputs: Vec<Field> = (0..n).map(|k| random_trig_field(g, 1.5, 6000 + k).unwrap()).collect();
    let outputs = inputs
        .iter()
        .map(|u| {
            let eta: Vec<f64> = basis.encode(u).unwrap().iter().zip(&gains).map(|(e, a)| e * a).collect();
            basis.decode(&eta).unwrap()
        })
        .collect();
    (inputs, outputs)
}

/// Best linear latent map in closed form, evaluated like the model.
fn least_squares_error(model: &PcaNetModel, train_in: &[Field], train_out: &[Field], test_in: &[Field], test_out: &[Field]) -> f64 {
    let (bx, by) = (model.input_basis(), model.output_basis());
    let rows = |fs: &[Field], b: &pcanet::pca::PcaBasis| {
        let data: Vec<Vec<f64>> = fs.iter().map(|f| b.encode(f).unwrap()).collect();
        DMatrix::from_fn(data.len(), b.dim(), |i, j| data[i][j])
    };
    let x = rows(train_in, bx);
    let y = rows(train_out, by);
    let w = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    let pred: Vec<Field> = test_in
        .iter()
        .map(|u| {
            let xi = DMatrix::from_row_slice(1, bx.dim(), &bx.encode(u).unwrap());
            let eta = xi * &w;
            by.decode(eta.as_slice()).unwrap()
        })
        .collect();
    rms_error(&pred, test_out, by.spec())
}

#[test]
fn diagonal_linear_operator_is_learned_near_the_least_squares_optimum() {
    // with a few hundred pairs the net interpolates and generalizes poorly
    let (inputs, outputs) = diagonal_operator_data(1200);
    let part = Partition::contiguous(100, 1000, 100);
    let config = PipelineConfig {
        d_x: 6,
        d_y: 6,
        hidden: vec![32],
        train: TrainConfig {
            epochs: 300,
            learning_rate: 2e-3,
            batch_size: 25,
            seed: 3,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let (model, _) = train_pipeline(&inputs, &outputs, &part, &config).unwrap();
    let (ti, to) = (subset(&inputs, &part.test), subset(&outputs, &part.test));
    let report = error_decomposition(&model, &ti, &to, None, None).unwrap();
    let optimal = least_squares_error(
        &model,
        &subset(&inputs, &part.train),
        &subset(&outputs, &part.train),
        &ti,
        &to,
    );
    assert!(optimal > 0.0);
    assert!(report.total <= 3.0 * optimal, "E = {:.3e}, linear optimum {optimal:.3e}", report.total);
}

#[test]
fn model_equals_three_stage_evaluation() {
    let (inputs, outputs) = diagonal_operator_data(240);
    let part = Partition::contiguous(60, 60, 10);
    let config = PipelineConfig {
        d_x: 5,
        d_y: 4,
        hidden: vec![16],
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let (model, _) = train_pipeline(&inputs, &outputs, &part, &config).unwrap();
    for u in &inputs[200..210] {
        let manual = model
            .output_basis()
            .decode(&model.net().forward(&model.input_basis().encode(u).unwrap()).unwrap())
            .unwrap();
        assert!(model.predict(u).unwrap().max_abs_diff(&manual).unwrap() <= 1e-14);
    }
}

#[test]
fn darcy_desk_model_improves_with_latent_dimension() {
    // 31 interior points: a 33 x 33 grid with the boundary
    let g = GridGeometry::unit_box(2, 31).unwrap();
    let problem = DarcyProblem::new(g, ExpansionSpec::new(1.0, 16, 1.0, 1.0).unwrap()).unwrap();
    let data = sample_dataset(&problem, 512, 2024).unwrap();
    let part = Partition::contiguous(128, 256, 128);
    let (ti, to) = (subset(&data.inputs, &part.test), subset(&data.outputs, &part.test));
    let mut reports = Vec::new();
    for d in [2, 8] {
        let config = PipelineConfig {
            d_x: d,
            d_y: d,
            output_spec: InnerProductSpec::H10,
            hidden: vec![64, 64],
            train: TrainConfig {
                epochs: 300,
                learning_rate: 1e-3,
                batch_size: 32,
                seed: 8,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        };
        let (model, _) = train_pipeline(&data.inputs, &data.outputs, &part, &config).unwrap();
        let rep = error_decomposition(&model, &ti, &to, None, None).unwrap();
        assert!(rep.lower_bound_holds(), "d = {d}: gap {:.3e}", rep.lower_bound_gap());
        reports.push(rep);
    }
    let (e2, e8) = (reports[0].total, reports[1].total);
    assert!(e8 < e2, "E(8) = {e8:.3e}, E(2) = {e2:.3e}");
}
