//! Split a toy decoder between an enclave and a weight provider and check
//! the generated tokens against the single-party model.

use remo::model::{reference_generate, GenerateOptions, ModelConfig, ModelWeights};
use remo::prg::PrgKey;
use remo::protocol::{Enclave, EnclaveOptions, InProcessTransport, Provider};

fn main() -> remo::Result<()> {
    let weights = ModelWeights::random(ModelConfig::default(), 1)?;
    // The provider only ever sees projection weights.
    let mut transport = InProcessTransport::new(Provider::new(weights.projections.clone()));
    let mut enclave = Enclave::new(weights.structural.clone(), PrgKey::from_u64(2), EnclaveOptions::default())?;
    enclave.setup(&mut transport)?;

    for prompt in [vec![5u32, 9, 13], vec![60, 2, 2, 7, 41]] {
        let masked = enclave.run_session(&mut transport, &prompt, GenerateOptions::new(12))?;
        let plain = reference_generate(&weights, &prompt, 12)?;
        println!("prompt {prompt:?}\n  partitioned {masked:?}\n  reference   {plain:?}\n  equal {}", masked == plain);
    }
    println!("{} messages exchanged", transport.transcript().len());
    Ok(())
}
