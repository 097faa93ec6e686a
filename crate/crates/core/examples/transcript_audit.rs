//! Audit what the provider saw: an honest run passes, a run that skips the
//! masks is caught by the uniformity clause.

use remo::model::{GenerateOptions, ModelConfig, ModelWeights};
use remo::prg::PrgKey;
use remo::protocol::{audit_transcript, Enclave, EnclaveOptions, InProcessTransport, Provider, Transcript};

fn transcript(weights: &ModelWeights, options: EnclaveOptions) -> remo::Result<Transcript> {
    let mut t = InProcessTransport::new(Provider::new(weights.projections.clone()));
    let mut enclave = Enclave::new(weights.structural.clone(), PrgKey::from_u64(6), options)?;
    enclave.setup(&mut t)?;
    for prompt in [[3u32, 1, 4, 1, 5], [9, 2, 6, 5, 3]] {
        enclave.run_session(&mut t, &prompt, GenerateOptions::new(6))?;
    }
    Ok(t.take_transcript())
}

fn main() -> remo::Result<()> {
    let weights = ModelWeights::random(ModelConfig::default(), 5)?;
    let honest = audit_transcript(&transcript(&weights, EnclaveOptions::default())?)?;
    println!(
        "honest: {} requests, {} masked elements, low-byte chi2 {:.1} / high-byte chi2 {:.1} (critical {:.1})",
        honest.requests, honest.masked_elements, honest.low_byte.statistic, honest.high_byte.statistic, honest.low_byte.critical
    );
    let raw = EnclaveOptions { disable_masking: true, ..EnclaveOptions::default() };
    match audit_transcript(&transcript(&weights, raw)?) {
        Ok(_) => println!("unmasked: passed (unexpected)"),
        Err(e) => println!("unmasked: {e}"),
    }
    Ok(())
}
