//! Solves a small dollar-neutral mean-variance problem, scales it to the
//! gross target and converts it to share counts.
//!
//! Run with `cargo run --example dollar_neutral_optimizer`.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use midcap_neutral::optimizer::{
    normalize_gross, solve_dollar_neutral, weights_to_positions, OptimizerParams,
};
use midcap_neutral::panel::Permno;
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let date = NaiveDate::from_ymd_opt(2023, 6, 1).expect("valid date");
    let ids: [Permno; 5] = [10001, 10002, 10003, 10004, 10005];
    let mu = [0.012, 0.004, -0.002, 0.009, -0.007];
    let vols = [0.08, 0.06, 0.07, 0.09, 0.05];
    let sigma = DMatrix::from_fn(5, 5, |i, j| {
        let rho = if i == j { 1.0 } else { 0.3 };
        rho * vols[i] * vols[j]
    });
    let params = OptimizerParams::default();

    let raw = solve_dollar_neutral(date, &ids, &mu, &sigma, &params)?;
    println!(
        "raw weights      {:?}",
        raw.w.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    );
    println!(
        "lambda {:.6}  kkt {:.2e}  sum {:.2e}",
        raw.lambda, raw.kkt_residual, raw.neutrality_residual
    );

    let scaled = normalize_gross(&raw, &params);
    println!(
        "scaled weights   {:?}",
        scaled
            .w
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
    );
    println!(
        "long {:.4}  short {:.4}  objective {:.6}",
        scaled.long_exposure(),
        scaled.short_exposure(),
        scaled.objective_value
    );

    let prices: BTreeMap<Permno, f64> = ids
        .iter()
        .zip([42.0, 17.5, 88.1, 23.9, 61.0])
        .map(|(i, p)| (*i, p))
        .collect();
    let positions = weights_to_positions(&scaled, &prices, 1_000_000.0)?;
    for (id, shares) in positions.ids.iter().zip(&positions.shares) {
        println!("  {id}: {shares:>7} shares");
    }
    println!("rounding imbalance ${:.2}", positions.rounded_imbalance);
    Ok(())
}
