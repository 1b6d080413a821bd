//! Acceptance criteria, one test each. Every test prints a `PASS` or `FAIL`
//! line per checked claim before asserting.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use noiseopt::acquisition::{expected_improvement, ga_maximize, GaConfig};
use noiseopt::campaign::{analyze_dataset, CampaignConfig, CampaignState, SimulatorOracle};
use noiseopt::clustering::{association, kmeans_points, ClusteringConfig, Scaling};
use noiseopt::decision::{decide, metric_vote, MetricId, Strategy, ThresholdConfig, Vote};
use noiseopt::divergence::{ks_statistic, wasserstein1, DivergenceReport};
use noiseopt::domain::{ingest_csv, ParameterBounds, ParameterPoint};
use noiseopt::gp::{lml_with_gradient, GpModel, HpBounds, Hyperparameters, TaskMode, TrainingData};
use noiseopt::report::{convergence_csv, metrics_csv};
use noiseopt::simulator::FleetSimConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const TOLERANCE: f64 = 0.02;

/// (pair, KS, KL, W, B).
type PublishedRow = ((usize, usize), f64, f64, f64, f64);

/// Published pairwise values.
const PUBLISHED: [PublishedRow; 3] = [
    ((0, 1), 0.5867, 7.9755, 0.5052, -2.7003),
    ((0, 2), 0.8311, 15.1497, 0.9268, -2.6519),
    ((1, 2), 0.4711, 5.1161, 0.4224, -2.5194),
];

struct Verdict {
    criterion: u32,
    failures: Vec<String>,
}

impl Verdict {
    fn new(criterion: u32) -> Self {
        Self {
            criterion,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, claim: &str, ok: bool, detail: impl AsRef<str>) {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("{tag} criterion {}: {claim} ({})", self.criterion, detail.as_ref());
        if !ok {
            self.failures.push(claim.to_string());
        }
    }

    fn within(&mut self, start: Instant, limit: Duration) {
        let took = start.elapsed();
        self.check(
            &format!("runs within {limit:?}"),
            took <= limit,
            format!("took {took:.2?}"),
        );
    }

    fn finish(self) {
        assert!(self.failures.is_empty(), "criterion {} failed: {:?}", self.criterion, self.failures);
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[test]
fn criterion_01_published_table_decision() {
    let start = Instant::now();
    let mut v = Verdict::new(1);
    let reports: Vec<DivergenceReport> = PUBLISHED
        .iter()
        .map(|&(pair, ks, kl, w, b)| DivergenceReport::from_values(pair, ks, kl, w, b))
        .collect();
    let decision = decide(&reports, None, &ThresholdConfig::default()).unwrap();
    v.check(
        "decision is SingleDevice",
        decision.strategy == Strategy::SingleDevice,
        format!("got {}", decision.strategy),
    );
    let sums: Vec<i32> = decision.pairs.iter().map(|p| p.sum).collect();
    v.check(
        "per-pair vote sums are (+4, +4, +2)",
        sums == [4, 4, 2],
        format!("got {sums:?}; pair (1,2) has KS 0.4711 in the neutral band and KL, W, B all High"),
    );
    v.within(start, Duration::from_secs(1));
    v.finish();
}

fn published_data_path() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("NOISEOPT_ZENODO_CSV") {
        return Some(PathBuf::from(p));
    }
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/zenodo_weights.csv");
    p.exists().then_some(p)
}

#[test]
fn criterion_02_published_dataset_metrics() {
    let start = Instant::now();
    let mut v = Verdict::new(2);
    let Some(path) = published_data_path() else {
        v.check(
            "published dataset available",
            false,
            "set NOISEOPT_ZENODO_CSV or add tests/data/zenodo_weights.csv in the ingest CSV schema",
        );
        v.finish();
        return;
    };
    let ds = ingest_csv(&path, 3, ParameterBounds::default()).unwrap();
    let config = CampaignConfig::default();
    let analysis = analyze_dataset(&ds, &config).unwrap();
    let t = ThresholdConfig::default();
    for (r, &(pair, ks, _, w, _)) in analysis.reports.iter().zip(&PUBLISHED) {
        v.check(
            &format!("pair {pair:?} KS matches to 1e-4"),
            (r.ks - ks).abs() <= 1e-4,
            format!("{} vs {ks}", r.ks),
        );
        v.check(
            &format!("pair {pair:?} W1 matches to 1e-4"),
            (r.wasserstein - w).abs() <= 1e-4,
            format!("{} vs {w}", r.wasserstein),
        );
        let kl = metric_vote(MetricId::Kl, r.kl, &t).unwrap();
        let b = metric_vote(MetricId::Bhattacharyya, r.bhattacharyya_density, &t).unwrap();
        v.check(
            &format!("pair {pair:?} KL and B vote High"),
            kl == Vote::High && b == Vote::High,
            format!("KL {} -> {kl:?}, B {} -> {b:?}", r.kl, r.bhattacharyya_density),
        );
    }
    v.within(start, Duration::from_secs(5));
    v.finish();
}

/// Maximum ECDF gap checked at every sample point, O(l·m).
fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
    let mut d: f64 = 0.0;
    for &x in a.iter().chain(b) {
        let fa = a.iter().filter(|&&y| y <= x).count() as f64 / a.len() as f64;
        let fb = b.iter().filter(|&&y| y <= x).count() as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// `∫₀¹ |F⁻¹(u) − G⁻¹(u)| du` with both quantile functions piecewise
/// constant between the breakpoints `i/l` and `j/m`.
fn w1_quantile(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (l, m) = (sa.len(), sb.len());
    // Breakpoints in units of 1 / (l·m).
    let mut cuts: Vec<usize> = (0..=l).map(|i| i * m).chain((0..=m).map(|j| j * l)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi == lo {
            continue;
        }
        // Quantile index on (lo, hi) for each sample: floor(u·n).
        let ia = lo / m;
        let ib = lo / l;
        total += (hi - lo) as f64 / (l * m) as f64 * (sa[ia] - sb[ib]).abs();
    }
    total
}

#[test]
fn criterion_03_metric_oracles() {
    let start = Instant::now();
    let mut v = Verdict::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut ks_err, mut w_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let l = rng.random_range(1..=200);
        let m = rng.random_range(1..=200);
        let shift: f64 = rng.random_range(-1.0..1.0);
        let scale: f64 = rng.random_range(0.1..3.0);
        // Rounded draws put ties into the samples.
        let a: Vec<f64> = (0..l).map(|_| (rng.sample::<f64, _>(StandardNormal) * 20.0).round() / 20.0).collect();
        let b: Vec<f64> = (0..m)
            .map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ks_err = ks_err.max((ks_statistic(&a, &b).unwrap() - ks_brute(&a, &b)).abs());
        w_err = w_err.max((wasserstein1(&a, &b).unwrap() - w1_quantile(&a, &b)).abs());
    }
    v.check("KS equals the brute-force ECDF gap to 1e-12", ks_err <= 1e-12, format!("max error {ks_err:.2e}"));
    v.check("W1 equals the quantile-matching integral to 1e-12", w_err <= 1e-12, format!("max error {w_err:.2e}"));
    v.within(start, Duration::from_secs(10));
    v.finish();
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<ParameterPoint> {
    (0..n)
        .map(|_| ParameterPoint::new(rng.random_range(1000.0..5000.0), rng.random_range(0.2..0.6)))
        .collect()
}

fn smooth_target(p: ParameterPoint) -> f64 {
    -0.03 * ((p.flow - 2800.0) / 1500.0).powi(2) - 0.02 * ((p.layer_height - 0.45) / 0.15).powi(2)
}

#[test]
fn criterion_04_gp_numerics() {
    let start = Instant::now();
    let mut v = Verdict::new(4);
    let mut rng = ChaCha8Rng::seed_from_u64(44);

    let mut worst_rel: f64 = 0.0;
    for _ in 0..20 {
        let pts = random_points(&mut rng, 10);
        let y = pts.iter().map(|&p| smooth_target(p) + 0.002 * rng.sample::<f64, _>(StandardNormal)).collect();
        let data = TrainingData::single(&pts, y).unwrap();
        let theta = vec![
            rng.random_range(1e-4f64..1e-1).ln(),
            rng.random_range(200.0f64..5000.0).ln(),
            rng.random_range(0.03f64..0.8).ln(),
            rng.random_range(1e-6f64..1e-3).ln(),
        ];
        let (_, grad) = lml_with_gradient(&data, &theta).unwrap();
        for i in 0..theta.len() {
            let h = 1e-5;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (lml_with_gradient(&data, &up).unwrap().0 - lml_with_gradient(&data, &dn).unwrap().0) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-300);
            // Components that vanish to rounding have no meaningful relative error.
            if (grad[i] - fd).abs() > 1e-9 {
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    v.check(
        "analytic LML gradient matches central differences, rel. error < 1e-5",
        worst_rel < 1e-5,
        format!("worst relative error {worst_rel:.2e}"),
    );

    let pts = random_points(&mut rng, 10);
    let y: Vec<f64> = pts.iter().map(|&p| smooth_target(p)).collect();
    let hps = Hyperparameters {
        signal_variance: 1e-3,
        lengthscales: vec![1500.0, 0.15],
        noise_variances: vec![1e-8],
    };
    let mut bounds = HpBounds::default_for(TaskMode::Single);
    bounds.noise_variances = vec![(1e-12, 1.0)];
    let model = GpModel::new(TrainingData::single(&pts, y.clone()).unwrap(), hps.clone(), bounds.clone()).unwrap();
    let interp = pts
        .iter()
        .zip(&y)
        .map(|(p, t)| (model.posterior_mean(&p.to_vec()) - t).abs())
        .fold(0.0, f64::max);
    v.check("posterior interpolates training data to 1e-4 at noise 1e-8", interp <= 1e-4, format!("max residual {interp:.2e}"));

    let devices = vec![0; pts.len()];
    let multi_data = TrainingData::multi(&pts, &devices, y, 1).unwrap();
    let mut multi_hps = hps.clone();
    multi_hps.lengthscales.push(1.0);
    let mut multi_bounds = HpBounds::default_for(TaskMode::Multi { tasks: 1 });
    multi_bounds.noise_variances = vec![(1e-12, 1.0)];
    let multi = GpModel::new(multi_data, multi_hps, multi_bounds).unwrap();
    let mut gap: f64 = 0.0;
    for p in random_points(&mut rng, 50) {
        let a = model.posterior(&p.to_vec());
        let b = multi.posterior(&[p.flow, p.layer_height, 0.0]);
        gap = gap.max((a.mean - b.mean).abs()).max((a.variance - b.variance).abs());
    }
    v.check("one-task augmented posterior equals single-task to 1e-10", gap <= 1e-10, format!("max gap {gap:.2e}"));
    v.within(start, Duration::from_secs(30));
    v.finish();
}

#[test]
fn criterion_05_expected_improvement_monte_carlo() {
    let start = Instant::now();
    let mut v = Verdict::new(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..1_000_000).map(|_| rng.sample(StandardNormal)).collect();
    let mut worst: f64 = 0.0;
    for delta in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        for sigma in [0.1, 1.0, 3.0] {
            let f_best = 0.5;
            let mu = f_best + delta;
            let mc = draws.iter().map(|z| (mu + sigma * z - f_best).max(0.0)).sum::<f64>() / draws.len() as f64;
            let ei = expected_improvement(mu, sigma, f_best);
            worst = worst.max((ei - mc).abs());
        }
    }
    v.check("closed-form EI within 5e-3 of 1e6-draw Monte Carlo on the grid", worst <= 5e-3, format!("max gap {worst:.2e}"));
    v.within(start, Duration::from_secs(30));
    v.finish();
}

#[test]
fn criterion_06_genetic_algorithm_sanity() {
    let start = Instant::now();
    let mut v = Verdict::new(6);
    let bounds = ParameterBounds::default();
    let [wf, wl] = bounds.widths();
    let quad = |p: ParameterPoint| -((p.flow - 3000.0) / wf).powi(2) - ((p.layer_height - 0.4) / wl).powi(2);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let r = ga_maximize(quad, &bounds, &GaConfig::default().with_seed(seed)).unwrap();
        let off = ((r.point.flow - 3000.0).abs() / wf).max((r.point.layer_height - 0.4).abs() / wl);
        worst = worst.max(off);
    }
    v.check(
        "GA argmax within 1% of box width of (3000, 0.4) for seeds 0..10",
        worst <= 0.01,
        format!("worst offset {:.4}% of width", 100.0 * worst),
    );
    v.within(start, Duration::from_secs(30));
    v.finish();
}

/// First BO iteration at which each device's measured |ΔW| is within
/// tolerance; censored at `max + 1`.
fn hits(state: &CampaignState, max: u32) -> Vec<u32> {
    (0..state.config.fleet_size)
        .map(|d| state.first_hit(d, TOLERANCE).unwrap_or(max + 1))
        .collect()
}

/// Runs until every device has hit or `max` iterations elapse.
fn run_until_hit(state: &mut CampaignState, oracle: &mut SimulatorOracle, max: u32) {
    state.prepare(oracle).unwrap();
    while !state.is_complete() && hits(state, max).iter().any(|&h| h > max) {
        state.run_iteration(oracle).unwrap();
    }
}

fn campaign_config(seed: u64, max: u32) -> CampaignConfig {
    CampaignConfig {
        seed,
        max_iterations: max,
        ei_iterations: max.min(11),
        ..Default::default()
    }
}

#[test]
fn criterion_07_heterogeneous_end_to_end() {
    let start = Instant::now();
    let mut v = Verdict::new(7);
    let max = 15;
    let mut decisions = Vec::new();
    let mut per_device = vec![Vec::new(); 3];
    for seed in 0..10 {
        let mut state = CampaignState::new(campaign_config(seed, max)).unwrap();
        let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_heterogeneous(seed)).unwrap();
        run_until_hit(&mut state, &mut oracle, max);
        decisions.push(state.strategy);
        for (d, h) in hits(&state, max).into_iter().enumerate() {
            per_device[d].push(h as f64);
        }
    }
    let single = decisions.iter().filter(|s| **s == Some(Strategy::SingleDevice)).count();
    v.check("every seed decides SingleDevice", single == 10, format!("{single}/10 seeds"));
    for (d, h) in per_device.iter().enumerate() {
        let med = median(h.clone());
        v.check(
            &format!("device {d} median first hit of |dW| <= 0.02 within 15 BO iterations"),
            med <= max as f64,
            format!("median {med}, per seed {h:?}"),
        );
    }
    v.within(start, Duration::from_secs(300));
    v.finish();
}

#[test]
fn criterion_08_homogeneous_end_to_end() {
    let start = Instant::now();
    let mut v = Verdict::new(8);
    let max = 25;
    let (mut pooled_totals, mut single_totals) = (Vec::new(), Vec::new());
    let mut multi = 0;
    for seed in 0..10 {
        let mut pooled = CampaignState::new(campaign_config(seed, max)).unwrap();
        let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_homogeneous(seed)).unwrap();
        run_until_hit(&mut pooled, &mut oracle, max);
        if pooled.strategy == Some(Strategy::MultiDevice) {
            multi += 1;
        }
        // Pooled batches measure every device each iteration.
        let last = *hits(&pooled, max).iter().max().unwrap();
        pooled_totals.push((3 * last) as f64);

        let mut cfg = campaign_config(seed, max);
        cfg.strategy_override = Some(Strategy::SingleDevice);
        let mut single = CampaignState::new(cfg).unwrap();
        let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_homogeneous(seed)).unwrap();
        run_until_hit(&mut single, &mut oracle, max);
        single_totals.push(hits(&single, max).iter().sum::<u32>() as f64);
    }
    v.check("every seed decides MultiDevice", multi == 10, format!("{multi}/10 seeds"));
    let (p, s) = (median(pooled_totals.clone()), median(single_totals.clone()));
    v.check(
        "pooled campaign needs fewer BO measurements than three single campaigns",
        p < s,
        format!("median pooled {p} vs single {s}; pooled {pooled_totals:?}, single {single_totals:?}"),
    );
    v.within(start, Duration::from_secs(300));
    v.finish();
}

#[test]
fn criterion_09_three_regime_clustering() {
    let start = Instant::now();
    let mut v = Verdict::new(9);
    let cfg = ClusteringConfig::default();
    let regimes = [0.05, 0.2, 0.6];
    let (mut nmis, mut planted_worse) = (Vec::new(), 0);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let (mut points, mut labels) = (Vec::new(), Vec::new());
        for (label, &level) in regimes.iter().enumerate() {
            for _ in 0..25 {
                // Row sigma scatters around its regime; the row mean is the
                // mean of three replicates at that sigma.
                let sigma = level * (0.1 * rng.sample::<f64, _>(StandardNormal)).exp();
                let mu = Normal::new(20.0, sigma / 3f64.sqrt()).unwrap().sample(&mut rng);
                points.push(vec![mu, sigma, sigma * sigma]);
                labels.push(label);
            }
        }
        let fit = kmeans_points(&points, 3, seed, cfg.restarts, cfg.standardize).unwrap();
        nmis.push(association(&fit.assignments, &labels).unwrap().nmi);

        // Inertia of the planted partition in the same standardized space.
        let scaling = Scaling::fit(&points, cfg.standardize);
        let z: Vec<Vec<f64>> = points.iter().map(|p| scaling.apply(p)).collect();
        let planted: f64 = (0..3)
            .map(|c| {
                let members: Vec<&Vec<f64>> = z.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let dim = members[0].len();
                let centre: Vec<f64> = (0..dim).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
                members.iter().map(|p| (0..dim).map(|j| (p[j] - centre[j]).powi(2)).sum::<f64>()).sum::<f64>()
            })
            .sum();
        if planted > fit.inertia {
            planted_worse += 1;
        }
    }
    let worst = nmis.iter().copied().fold(1.0, f64::min);
    println!(
        "criterion 9 diagnostic: the planted partition has higher standardized inertia than the k-means optimum on {planted_worse}/10 seeds"
    );
    v.check(
        "k=3 NMI >= 0.9 against planted sigma regimes on 10 seeds",
        worst >= 0.9,
        format!("min NMI {worst:.3}, per seed {:?}", nmis.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()),
    );
    v.within(start, Duration::from_secs(10));
    v.finish();
}

#[test]
fn criterion_10_determinism() {
    let start = Instant::now();
    let mut v = Verdict::new(10);
    let run = || {
        let mut state = CampaignState::new(CampaignConfig {
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let mut oracle = SimulatorOracle::new(FleetSimConfig::preset_heterogeneous(7)).unwrap();
        state.run(&mut oracle, |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        state.save(dir.path().join("state.json")).unwrap();
        let checkpoint = std::fs::read(dir.path().join("state.json")).unwrap();
        (state, checkpoint)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    v.check("campaign completes", a.is_complete() && b.is_complete(), format!("{} iterations", a.iteration()));
    v.check("checkpoints are byte-identical", ca == cb, format!("{} bytes", ca.len()));
    let reports_equal = convergence_csv(&a).unwrap() == convergence_csv(&b).unwrap() && metrics_csv(&a).unwrap() == metrics_csv(&b).unwrap();
    v.check("report series are byte-identical", reports_equal, "convergence.csv and metrics.csv");
    v.within(start, Duration::from_secs(300));
    v.finish();
}
