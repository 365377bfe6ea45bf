//! Runs the standard synthetic benchmark and prints the median test CER
//! of each training variant, plus the activation sweep of the full model.

use std::time::Instant;

use cfvsr::linguistics::{Lexicon, LinguisticInventory};
use cfvsr::model::ActivationConfig;
use cfvsr::trainer::{median, run_benchmark, standard_benchmark, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inv = LinguisticInventory::bundled();
    let lexicon = Lexicon::bundled(&inv);
    let cfg = standard_benchmark();
    let start = Instant::now();
    let runs = run_benchmark(&cfg, &inv, &lexicon, |r| {
        let acts: Vec<String> = r.activations.iter().map(|a| format!("{}={:.3}", a.activation, a.cer)).collect();
        println!(
            "seed {:3} {:17} test CER {:.4}  [{}]  {:.0}s",
            r.seed,
            r.variant.name(),
            r.test_cer,
            acts.join(" "),
            start.elapsed().as_secs_f64()
        );
    })?;
    for v in Variant::ALL {
        let cers: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.test_cer).collect();
        println!("{:17} median CER {:.4}", v.name(), median(&cers));
    }
    for act in ActivationConfig::ALL {
        let pick = |f: fn(&cfvsr::trainer::ActivationResult) -> f64| -> Vec<f64> {
            runs.iter()
                .filter(|r| r.variant == Variant::Full)
                .flat_map(|r| r.activations.iter().filter(|a| a.activation == act).map(f))
                .collect()
        };
        let params = runs
            .iter()
            .find_map(|r| r.activations.iter().find(|a| a.activation == act).map(|a| a.active_params))
            .unwrap_or(0);
        println!(
            "{:6} median CER {:.4}  params {:7}  median decode {:.4}s",
            act.label(),
            median(&pick(|a| a.cer)),
            params,
            median(&pick(|a| a.wall_clock_secs))
        );
    }
    Ok(())
}
