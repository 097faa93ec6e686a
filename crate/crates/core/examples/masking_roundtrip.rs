//! Mask a small activation, let a "provider" multiply it by a secret weight
//! matrix, and restore the exact product on the enclave side.

use remo::masking::{derive_step_mask, mask_embedding, recover, OpId, ProjKind, SketchIssuer};
use remo::prg::PrgKey;
use remo::ring::{QuantParams, RingMatrix};

fn main() -> remo::Result<()> {
    let p = QuantParams::new(64, 16)?;
    let op = OpId::new(0, ProjKind::Q);
    let key = PrgKey::from_u64(11);

    let e = RingMatrix::quantize(&[vec![0.5, -1.25, 2.0, 0.0], vec![1.0, 1.0, -0.75, 3.5]], p)?;
    let w = RingMatrix::quantize(
        &[vec![1.0, 0.0, 0.5], vec![0.0, 2.0, -1.0], vec![0.25, 0.25, 0.25], vec![-1.0, 0.0, 1.0]],
        p,
    )?;

    // Setup: the enclave publishes a 2x4 base, the provider returns M_pub W.
    let m_pub = SketchIssuer::new(key.clone(), p).gen_public_base(op, 2, 4)?;
    let r_pub = m_pub.matmul(&w)?;

    // One step: fresh private mask, masked input on the wire.
    let m_pvt = derive_step_mask(&key, 1, 0, op, e.rows(), 2, p)?;
    let e_hat = mask_embedding(&e, &m_pvt, &m_pub)?;
    println!("E     (decoded): {:?}", e.dequantize());
    println!("E_hat (decoded): {:?}", e_hat.dequantize());

    let o_hat = e_hat.matmul(&w)?;
    let o = recover(&o_hat, &m_pvt, &r_pub)?.rescale();
    let direct = e.matmul(&w)?.rescale();
    println!("recovered E W:   {:?}", o.dequantize());
    println!("exact match with the unmasked product: {}", o == direct);
    Ok(())
}
