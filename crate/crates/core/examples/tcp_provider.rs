//! Run the provider as a TCP server on loopback and drive a session from a
//! separate connection.

use remo::model::{reference_generate, GenerateOptions, ModelConfig, ModelWeights};
use remo::prg::PrgKey;
use remo::protocol::{serve, Enclave, EnclaveOptions, Provider, TcpTransport, DEFAULT_TIMEOUT};

fn main() -> remo::Result<()> {
    let weights = ModelWeights::random(ModelConfig::default(), 3)?;
    let server = serve("127.0.0.1:0", Provider::new(weights.projections.clone()))?;
    println!("provider on {}", server.addr());

    let mut transport = TcpTransport::connect(server.addr(), DEFAULT_TIMEOUT)?;
    let mut enclave = Enclave::new(weights.structural.clone(), PrgKey::from_u64(4), EnclaveOptions::default())?;
    enclave.setup(&mut transport)?;
    let prompt = [1u32, 2, 3, 4];
    let out = enclave.run_session(&mut transport, &prompt, GenerateOptions::new(8))?;
    println!("response {out:?}, matches reference: {}", out == reference_generate(&weights, &prompt, 8)?);
    drop(transport);

    for (i, t) in server.shutdown().iter().enumerate() {
        println!("connection {i}: {} messages logged by the provider", t.len());
    }
    Ok(())
}
