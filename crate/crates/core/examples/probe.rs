//! Scratch diagnostics for the model-based experiment internals.

use nalgebra::DVector;
use sae_linked::data::area_aggregates_with;
use sae_linked::lmm::{fit_lmm_linked, predict_means_eblup, EblupVariant, LmmOptions};
use sae_linked::sim::{
    apply_linkage, draw_sample, generate_population, stream, Estimator, Scenario,
    ScenarioConfig,
};

fn main() {
    let config = ScenarioConfig {
        scenario: Scenario::Clean,
        areas: 40,
        area_size: 100,
        sample_size: 5,
        lambdas: vec![1.0, 0.9, 0.6, 0.4],
        units_per_block: 25,
        replicates: 50,
        base_seed: 20260807,
        huber_c: 1.345,
        estimators: vec![Estimator::Eblup],
        mse: false,
        dump_scatter: false,
        dump_replicates: false,
    };
    let r = 50u64;
    let mut s2u_star = 0.0;
    let mut s2e_star = 0.0;
    let mut s2u_cl = 0.0;
    let mut s2e_cl = 0.0;
    // Error decomposition: synthetic part vs u part.
    let d = config.areas;
    let mut mse_star = vec![0.0; d];
    let mut mse_cl = vec![0.0; d];
    let mut mse_syn_only_star = vec![0.0; d]; // u forced to 0
    let mut mse_syn_only_cl = vec![0.0; d];
    let mut u_err_star = vec![0.0; d];
    let mut u_err_cl = vec![0.0; d];

    for rep in 0..r {
        let mut pop = generate_population(&config, &mut stream(config.base_seed, rep, 0));
        apply_linkage(&mut pop, &config.lambdas, &mut stream(config.base_seed, rep, 1));
        let (sample, aggs) = draw_sample(
            &pop,
            &vec![config.sample_size; d],
            &config.lambdas,
            &mut stream(config.base_seed, rep, 2),
        )
        .unwrap();
        let truth = pop.area_means();

        let fit = fit_lmm_linked(&sample, &LmmOptions::default()).unwrap();
        let classical = sample.collapse_to_areas();
        let cl_aggs: Vec<_> = aggs
            .iter()
            .map(|a| sae_linked::data::AreaAggregates {
                xbar_nonsampled_star: a.xbar_nonsampled.clone(),
                ..a.clone()
            })
            .collect();
        let fit_cl = fit_lmm_linked(&classical, &LmmOptions::default()).unwrap();
        s2u_star += fit.sigma2_u / r as f64;
        s2e_star += fit.sigma2_e / r as f64;
        s2u_cl += fit_cl.sigma2_u / r as f64;
        s2e_cl += fit_cl.sigma2_e / r as f64;

        let p_star = predict_means_eblup(&fit, &sample, &aggs, EblupVariant::Star).unwrap();
        let p_cl =
            predict_means_eblup(&fit_cl, &classical, &cl_aggs, EblupVariant::Star).unwrap();

        // Synthetic-only variants: zero the area effects.
        let mut fit0 = fit.clone();
        fit0.u_star = vec![0.0; d];
        let mut fit0_cl = fit_cl.clone();
        fit0_cl.u_star = vec![0.0; d];
        let p0_star = predict_means_eblup(&fit0, &sample, &aggs, EblupVariant::Star).unwrap();
        let p0_cl =
            predict_means_eblup(&fit0_cl, &classical, &cl_aggs, EblupVariant::Star).unwrap();

        // True u per area: mean of y - (100 + 5x) over the area's units.
        let mut true_u = vec![0.0; d];
        let mut counts = vec![0usize; d];
        for j in 0..pop.n_units() {
            true_u[pop.unit_area[j]] += pop.y[j] - 100.0 - 5.0 * pop.x[(j, 0)];
            counts[pop.unit_area[j]] += 1;
        }
        for i in 0..d {
            true_u[i] /= counts[i] as f64;
        }

        for i in 0..d {
            mse_star[i] += (p_star[i].point - truth[i]).powi(2) / r as f64;
            mse_cl[i] += (p_cl[i].point - truth[i]).powi(2) / r as f64;
            mse_syn_only_star[i] += (p0_star[i].point - truth[i]).powi(2) / r as f64;
            mse_syn_only_cl[i] += (p0_cl[i].point - truth[i]).powi(2) / r as f64;
            u_err_star[i] += (fit.u_star[i] - true_u[i]).powi(2) / r as f64;
            u_err_cl[i] += (fit_cl.u_star[i] - true_u[i]).powi(2) / r as f64;
        }
    }

    let med = |v: &[f64]| {
        let mut c = v.to_vec();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c[c.len() / 2]
    };
    println!("delta star: s2u={s2u_star:.3} s2e={s2e_star:.3}");
    println!("delta classical: s2u={s2u_cl:.3} s2e={s2e_cl:.3}");
    println!(
        "median area MSE: star={:.4} classical={:.4}",
        med(&mse_star),
        med(&mse_cl)
    );
    println!(
        "median synthetic-only MSE: star={:.4} classical={:.4}",
        med(&mse_syn_only_star),
        med(&mse_syn_only_cl)
    );
    println!(
        "median u MSE: star={:.4} classical={:.4}",
        med(&u_err_star),
        med(&u_err_cl)
    );
    let _ = DVector::<f64>::zeros(1);
}
