//! Parse a config in the `key = value` format and show its canonical form.

use remo::config::RunConfig;

fn main() -> remo::Result<()> {
    let text = "# smaller model, longer answers\nd = 16\nd_ff = 32\nmax_new = 24\ntransport = tcp:127.0.0.1:7431\n";
    let mut cfg = RunConfig::parse(text)?;
    cfg.apply_env()?;
    print!("{}", cfg.serialize());
    match RunConfig::parse("d = 16\nwidth = 3\n") {
        Ok(_) => println!("accepted an unknown key"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
