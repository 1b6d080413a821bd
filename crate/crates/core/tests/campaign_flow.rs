use noiseopt::acquisition::AcquisitionKind;
use noiseopt::campaign::{CampaignConfig, CampaignState, MetricScope, SimulatorOracle};
use noiseopt::decision::Strategy;
use noiseopt::report::{convergence_rows, metric_rows, scopes};
use noiseopt::simulator::FleetSimConfig;

fn config(seed: u64, iterations: u32) -> CampaignConfig {
    CampaignConfig {
        seed,
        max_iterations: iterations,
        ei_iterations: iterations.min(11),
        ..Default::default()
    }
}

#[test]
fn single_mode_report_series_and_switch_marker() {
    let mut state = CampaignState::new(config(3, 13)).unwrap();
    let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_heterogeneous(3)).unwrap();
    state.run(&mut oracle, |_| Ok(())).unwrap();
    assert_eq!(state.strategy, Some(Strategy::SingleDevice));
    assert!(state.is_complete());

    assert_eq!(scopes(&state), (0..3).map(MetricScope::Device).collect::<Vec<_>>());
    let rows = convergence_rows(&state);
    for d in 0..3 {
        let series: Vec<_> = rows.iter().filter(|r| r.scope == MetricScope::Device(d)).collect();
        assert_eq!(series.len(), 13);
        for r in &series {
            assert_eq!(r.after_switch, r.iteration >= 12, "iteration {}", r.iteration);
            let expected = if r.iteration <= 11 { "ei" } else { "posterior_mean" };
            assert_eq!(r.acquisition, expected);
        }
        // Best-so-far never decreases.
        assert!(series.windows(2).all(|w| w[1].best_delta_w >= w[0].best_delta_w));
    }
    let metrics = metric_rows(&state);
    assert_eq!(metrics.len(), 3 * 13);
    assert!(metrics.iter().all(|m| (m.rmse * m.rmse - m.mse).abs() < 1e-12 && m.mae <= m.rmse + 1e-15));
    assert!(state.log.iter().filter(|r| r.iteration == 12).all(|r| r.acquisition == AcquisitionKind::PosteriorMean));
}

#[test]
fn multi_mode_scopes_and_batches() {
    let mut state = CampaignState::new(config(2, 2)).unwrap();
    let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_homogeneous(2)).unwrap();
    state.run(&mut oracle, |_| Ok(())).unwrap();
    assert_eq!(state.strategy, Some(Strategy::MultiDevice));
    assert_eq!(state.models.len(), 1);
    let sc = scopes(&state);
    assert_eq!(sc[0], MetricScope::Mean);
    assert_eq!(sc.len(), 4);
    for k in 1..=2 {
        let mut batch: Vec<usize> = state.log.iter().filter(|r| r.iteration == k).map(|r| r.device_id).collect();
        batch.sort_unstable();
        assert_eq!(batch, vec![0, 1, 2]);
        let mut prio: Vec<usize> = state.log.iter().filter(|r| r.iteration == k).map(|r| r.priority).collect();
        prio.sort_unstable();
        assert_eq!(prio, vec![0, 1, 2]);
    }
    let mean_rows = convergence_rows(&state).into_iter().filter(|r| r.scope == MetricScope::Mean).count();
    assert_eq!(mean_rows, 2);
}

#[test]
fn checkpoint_resume_is_deterministic() {
    let fleet = FleetSimConfig::preset_heterogeneous(9);
    let mut full = CampaignState::new(config(9, 3)).unwrap();
    full.run(&mut SimulatorOracle::new(fleet.clone()).unwrap(), |_| Ok(())).unwrap();

    let mut part = CampaignState::new(config(9, 3)).unwrap();
    let mut oracle = SimulatorOracle::new(fleet.clone()).unwrap();
    part.prepare(&mut oracle).unwrap();
    part.run_iteration(&mut oracle).unwrap();
    let text = part.to_json().unwrap();
    let mut resumed = CampaignState::from_json(&text, std::path::Path::new("mem")).unwrap();
    assert_eq!(resumed, part);
    // A fresh oracle: noise draws depend only on the dataset.
    resumed.run(&mut SimulatorOracle::new(fleet).unwrap(), |_| Ok(())).unwrap();
    assert_eq!(resumed.to_json().unwrap(), full.to_json().unwrap());
}

#[test]
fn wrong_schema_version_is_rejected() {
    let state = CampaignState::new(config(1, 1)).unwrap();
    let text = state.to_json().unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
    assert!(text.contains("99"));
    let err = CampaignState::from_json(&text, std::path::Path::new("x.json")).unwrap_err();
    assert!(err.to_string().contains("schema"), "{err}");
}
