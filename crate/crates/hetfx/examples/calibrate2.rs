//! Scratch: per-grid-point coverage diagnosis (not part of the deliverable).
use hetfx::data::default_grid;
use hetfx::locfit::BandwidthMethod;
use hetfx::propensity::ScorePolicy;
use hetfx::psr::{psr_with_bands, BandwidthPolicy, PsrConfig};
use hetfx::simbench::{generate_dataset, true_tau, Mechanism, OutcomeModel, ScenarioConfig};

fn main() {
    let reps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let (model, mech, n, p) = (OutcomeModel::I, Mechanism::A, 1000usize, 5usize);
    let g = 25usize;
    let mut tau_draws = vec![Vec::new(); g];
    let mut sqrt_v = vec![Vec::new(); g];
    let mut hits = vec![0usize; g];
    let mut counts = vec![0usize; g];
    let mut xs = vec![0.0; g];
    for r in 0..reps {
        let config = ScenarioConfig {
            outcome_model: model,
            mechanism: mech,
            n,
            p,
            seed: hetfx::rng::derive_seed(777, r as u64),
        };
        let data = generate_dataset(&config).unwrap();
        let grid = default_grid(&data.dataset, g).unwrap();
        let psr_config = PsrConfig {
            bandwidths: BandwidthPolicy::Select {
                step1: BandwidthMethod::Lscv,
                step2: BandwidthMethod::Lscv,
            },
            ..PsrConfig::default()
        };
        let est =
            psr_with_bands(&data.dataset, ScorePolicy::FitLogit, &psr_config, &grid, 0.95).unwrap();
        for j in 0..g {
            xs[j] = grid.points()[j];
            let truth = true_tau(model, grid.points()[j]);
            if let Some(t) = est.tau_hat[j] {
                tau_draws[j].push(t - truth);
            }
            if let (Some(lo), Some(hi)) = (
                est.ci_lo.as_ref().unwrap()[j],
                est.ci_hi.as_ref().unwrap()[j],
            ) {
                counts[j] += 1;
                if lo <= truth && truth <= hi {
                    hits[j] += 1;
                }
            }
            if let Some(v) = est.variance.as_ref().unwrap()[j] {
                sqrt_v[j].push(v.sqrt());
            }
        }
    }
    println!("  j      x    sd_emp  mean_shat  ratio   cp");
    for j in 0..g {
        let m = tau_draws[j].len() as f64;
        let mean = tau_draws[j].iter().sum::<f64>() / m;
        let sd = (tau_draws[j].iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (m - 1.0))
            .sqrt();
        let msh = sqrt_v[j].iter().sum::<f64>() / sqrt_v[j].len() as f64;
        println!(
            "{:3}  {:6.3}  {:7.4}  {:8.4}  {:5.2}  {:5.1}%",
            j,
            xs[j],
            sd,
            msh,
            msh / sd,
            100.0 * hits[j] as f64 / counts[j] as f64
        );
    }
}
