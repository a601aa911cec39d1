//! Scratch: grid search over fixed bandwidth combos (not a deliverable).
use hetfx::data::default_grid;
use hetfx::propensity::ScorePolicy;
use hetfx::psr::{psr_with_bands, BandwidthPolicy, PsrConfig};
use hetfx::simbench::{
    compute_metrics, generate_dataset, true_tau, Mechanism, OutcomeModel, ScenarioConfig,
};

fn cell(model: OutcomeModel, mech: Mechanism, n: usize, reps: usize, h1: f64, h2: f64, h3: f64) {
    let mut errors = Vec::new();
    let mut hits = Vec::new();
    for r in 0..reps {
        let config = ScenarioConfig {
            outcome_model: model,
            mechanism: mech,
            n,
            p: 5,
            seed: hetfx::rng::derive_seed(777, r as u64),
        };
        let data = generate_dataset(&config).unwrap();
        let grid = default_grid(&data.dataset, 25).unwrap();
        let psr_config = PsrConfig {
            bandwidths: BandwidthPolicy::Fixed { h1, h2, h3 },
            ..PsrConfig::default()
        };
        let est = psr_with_bands(&data.dataset, ScorePolicy::FitLogit, &psr_config, &grid, 0.95)
            .unwrap();
        let mut err_row = Vec::new();
        let mut hit_row = Vec::new();
        for (j, &x) in grid.points().iter().enumerate() {
            let truth = true_tau(model, x);
            err_row.push(est.tau_hat[j].map(|t| t - truth));
            hit_row.push(match (est.ci_lo.as_ref().unwrap()[j], est.ci_hi.as_ref().unwrap()[j]) {
                (Some(l), Some(h)) => Some(l <= truth && truth <= h),
                _ => None,
            });
        }
        errors.push(err_row);
        hits.push(hit_row);
    }
    let m = compute_metrics(&errors, &hits).unwrap();
    println!(
        "h1={h1:.2} h2={h2:.2} h3={h3:.2}: bias={:6.2} sd={:5.2} mae={:5.2} mse={:5.2} cp95={:5.1}%",
        m.bias * 100.0,
        m.sd * 100.0,
        m.mae * 100.0,
        m.mse * 100.0,
        m.cp95 * 100.0,
    );
}

fn main() {
    let reps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    println!("Sim I (1000,5) target: bias in [-1.9,1.1] mae in [8,12] mse in [1.12,2.08] cp in [88,95]");
    for &s in &[0.10, 0.13, 0.16, 0.20] {
        for &t in &[0.10, 0.14, 0.18, 0.22] {
            cell(OutcomeModel::I, Mechanism::A, 1000, reps, s, s, t);
        }
    }
}
