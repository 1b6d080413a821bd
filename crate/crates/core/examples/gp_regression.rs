//! Matérn-3/2 GP: hyperparameter fit, posterior, fantasy update.

use noiseopt::domain::ParameterPoint;
use noiseopt::gp::{GpModel, HpBounds, Hyperparameters, TaskMode, TrainOptions, TrainingData};

fn truth(p: ParameterPoint) -> f64 {
    -((p.flow - 3200.0) / 2000.0).abs() * 0.05 - ((p.layer_height - 0.35) / 0.2).abs() * 0.03
}

fn main() -> noiseopt::Result<()> {
    let points: Vec<ParameterPoint> = (0..12)
        .map(|i| {
            let u = i as f64 / 11.0;
            ParameterPoint::new(1000.0 + 4000.0 * u, 0.2 + 0.4 * ((7 * i) % 12) as f64 / 11.0)
        })
        .collect();
    let targets: Vec<f64> = points.iter().map(|&p| truth(p)).collect();

    let data = TrainingData::single(&points, targets)?;
    let mode = TaskMode::Single;
    let (model, outcome) = GpModel::fit(data, HpBounds::default_for(mode), &Hyperparameters::initial(mode), &TrainOptions::default())?;
    let hp = model.hps();
    println!(
        "signal var {:.3e}, lengthscales {:?}, noise {:.3e}, LML {:.3}",
        hp.signal_variance, hp.lengthscales, hp.noise_variances[0], outcome.lml
    );

    let probe = ParameterPoint::new(3200.0, 0.35);
    let post = model.posterior(&probe.to_vec());
    println!("at {probe:?}: mean {:.4} sd {:.4}, truth {:.4}", post.mean, post.variance.sqrt(), truth(probe));

    // Conditioning on a fantasy at the probe shrinks its variance.
    let fantasy = model.with_observation(probe.to_vec(), 0, post.mean)?;
    println!("variance after fantasy {:.3e}", fantasy.posterior(&probe.to_vec()).variance);
    Ok(())
}
