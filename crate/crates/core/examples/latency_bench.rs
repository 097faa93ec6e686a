//! Latency and time-to-first-token with several concurrent clients against
//! one loopback provider.

use std::time::Duration;

use remo::attack::{synthetic_corpus, CorpusKind};
use remo::bench::{run_bench, BenchPlan};
use remo::model::{ModelConfig, ModelWeights};
use remo::prg::PrgKey;
use remo::protocol::{serve, Enclave, EnclaveOptions, Provider, TcpTransport};

fn main() -> remo::Result<()> {
    let weights = ModelWeights::random(ModelConfig::default(), 7)?;
    let server = serve("127.0.0.1:0", Provider::new(weights.projections.clone()))?;
    let mut enclave = Enclave::new(weights.structural.clone(), PrgKey::from_u64(8), EnclaveOptions::default())?;
    enclave.setup(&mut TcpTransport::connect(server.addr(), Duration::from_secs(10))?)?;

    let plan = BenchPlan {
        clients: vec![1, 2, 4],
        lengths: vec![4, 8, 16],
        requests_per_client: 3,
        prompts: synthetic_corpus(CorpusKind::Uniform, 4, 8, 64, 9),
        timeout: Duration::from_secs(10),
    };
    let report = run_bench(&enclave, &weights, server.addr(), &plan)?;
    print!("{}", report.to_csv());
    println!("all outputs correct and TTFT <= latency: {}", report.pass());
    Ok(())
}
