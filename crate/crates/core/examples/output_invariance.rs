//! Paired partitioned/reference generation over a batch of synthetic
//! prompts, as the `invariance` command runs it.

use remo::commands::cmd_invariance;
use remo::config::RunConfig;

fn main() -> remo::Result<()> {
    let cfg = RunConfig { prompts: 20, max_new: 10, ..RunConfig::default() };
    let report = cmd_invariance(&cfg)?;
    for line in &report.summary {
        println!("{line}");
    }
    println!("pass: {}", report.pass);
    Ok(())
}
