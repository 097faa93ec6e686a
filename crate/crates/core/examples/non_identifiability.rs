//! One public sketch leaves every weight matrix underdetermined; two
//! independent sketches of the same matrix pin it down exactly.

use remo::masking::ProjKind;
use remo::model::{ModelConfig, ModelWeights};
use remo::prg::PrgKey;
use remo::privacy::{enumerate_consistent_weights, kernel_analysis, stacking_attack_demo, Sketch, SolutionSpace};
use remo::protocol::{Enclave, EnclaveOptions, InProcessTransport, Provider};
use remo::masking::OpId;

fn main() -> remo::Result<()> {
    let weights = ModelWeights::random(ModelConfig::default(), 1)?;
    let mut transport = InProcessTransport::new(Provider::new(weights.projections.clone()));
    let mut enclave = Enclave::new(weights.structural.clone(), PrgKey::from_u64(2), EnclaveOptions::default())?;
    enclave.setup(&mut transport)?;

    for (op, base) in enclave.bases() {
        let (k, _) = kernel_analysis(base.m_pub());
        let w = weights.projections.get(*op)?;
        let space = SolutionSpace::from_base(base, w)?;
        let alts = enumerate_consistent_weights(&space, 10, 7)?;
        let worst = alts.iter().map(|a| space.residual(a)).fold(0.0, f64::max);
        println!("{op:>5}: m={} d={} rank={} kernel={} alternatives={} max residual={worst:e}", k.m, k.d, k.rank, k.kernel_dim, alts.len());
    }

    let op = OpId::new(0, ProjKind::Q);
    let base = enclave.base(op)?;
    let w = weights.projections.get(op)?;
    let (m, d) = base.m_pub().shape();
    let extra = enclave.issuer().bypass_single_issue(op, m, d, 0);
    let one = stacking_attack_demo(&[Sketch::of(base.m_pub().clone(), w)], w)?;
    let two = stacking_attack_demo(&[Sketch::of(base.m_pub().clone(), w), Sketch::of(extra, w)], w)?;
    println!("one sketch: {one:?}");
    println!("two sketches: {two:?}");
    Ok(())
}
