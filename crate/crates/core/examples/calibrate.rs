//! Quick desk-scale run of the model-based experiment; prints the summary
//! tables for eyeballing against the reference values.

use sae_linked::sim::{run_monte_carlo, Estimator, Scenario, ScenarioConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let replicates: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let scenario = match args.get(2).map(|s| s.as_str()) {
        Some("e,u") | Some("outlier") => Scenario::Outlier,
        _ => Scenario::Clean,
    };
    let config = ScenarioConfig {
        scenario,
        areas: 40,
        area_size: 100,
        sample_size: 5,
        lambdas: vec![1.0, 0.9, 0.6, 0.4],
        units_per_block: 25,
        replicates,
        base_seed: 20260807,
        huber_c: 1.345,
        estimators: Estimator::ALL.to_vec(),
        mse: true,
        dump_scatter: false,
        dump_replicates: false,
    };
    let t0 = std::time::Instant::now();
    match run_monte_carlo(&config) {
        Ok(report) => {
            println!("elapsed: {:.1}s  failures: {}", t0.elapsed().as_secs_f64(), report.failures);
            println!("--- table 1 ---");
            print!("{}", report.table1_csv());
            println!("--- table 2 ---");
            print!("{}", report.table2_csv());
            println!(
                "certs: reml_score {:.2e} gls {:.2e} robust {:.2e} mq {:.2e} sw_eig {:.2e} asym {:.2e} boundary {}",
                report.certificates.max_reml_score,
                report.certificates.max_gls_residual_scaled,
                report.certificates.max_robust_eq,
                report.certificates.max_mq_eq,
                report.certificates.min_sandwich_eig,
                report.certificates.max_sandwich_asymmetry,
                report.certificates.boundary_fits
            );
        }
        Err(e) => println!("failed: {e}"),
    }
}
