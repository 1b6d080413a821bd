//! Expected improvement and the genetic optimizer that maximizes it.

use noiseopt::acquisition::{expected_improvement, ga_maximize, propose_single, AcquisitionSpec, GaConfig};
use noiseopt::domain::{ParameterBounds, ParameterPoint};
use noiseopt::gp::{GpModel, HpBounds, Hyperparameters, TaskMode, TrainOptions, TrainingData};

fn main() -> noiseopt::Result<()> {
    for (d, s) in [(-1.0, 0.5), (0.0, 0.5), (1.0, 0.5), (0.0, 2.0)] {
        println!("EI(mu - f_best = {d:+}, sigma = {s}) = {:.4}", expected_improvement(d, s, 0.0));
    }

    let bounds = ParameterBounds::default();
    let quad = |p: ParameterPoint| -((p.flow - 3000.0) / 4000.0).powi(2) - ((p.layer_height - 0.4) / 0.4).powi(2);
    let r = ga_maximize(quad, &bounds, &GaConfig::default().with_seed(1))?;
    println!("GA argmax {:?} value {:.2e} after {} generations", r.point, r.value, r.best_history.len() - 1);

    let points: Vec<ParameterPoint> = [(1500.0, 0.25), (2500.0, 0.5), (4000.0, 0.3), (4500.0, 0.55), (3000.0, 0.4)]
        .into_iter()
        .map(|(f, l)| ParameterPoint::new(f, l))
        .collect();
    let y: Vec<f64> = points.iter().map(|&p| quad(p)).collect();
    let best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mode = TaskMode::Single;
    let (model, _) = GpModel::fit(
        TrainingData::single(&points, y)?,
        HpBounds::default_for(mode),
        &Hyperparameters::initial(mode),
        &TrainOptions::default(),
    )?;
    let next = propose_single(&model, &bounds, &AcquisitionSpec::expected_improvement(best), &GaConfig::default())?;
    println!("next EI proposal {:?} (EI {:.3e}, predicted {:.4})", next.point, next.acquisition_value, next.predicted);
    let exploit = propose_single(&model, &bounds, &AcquisitionSpec::posterior_mean(), &GaConfig::default())?;
    println!("posterior-mean proposal {:?}", exploit.point);
    Ok(())
}
