//! Token reconstruction from the layer-0 inputs, with and without masking.

use remo::attack::{run_attack_eval, AttackConfig};

fn main() -> remo::Result<()> {
    let report = run_attack_eval(&AttackConfig::default())?;
    print!("{}", report.to_csv());
    println!("unmasked training accuracy: {:.4}", report.unmasked_train_accuracy);
    println!("prompt-position clauses pass: {}", report.passes());
    Ok(())
}
