mod common;

use proptest::prelude::*;

use remo::masking::{derive_step_mask, mask_embedding, recover, OpId, ProjKind, SketchIssuer};
use remo::prg::PrgKey;
use remo::ring::{QuantParams, RingMatrix};

fn params() -> impl Strategy<Value = QuantParams> {
    prop_oneof![Just((64u8, 16u8)), Just((32, 8)), Just((16, 4)), Just((8, 2))].prop_map(|(k, f)| QuantParams::new(k, f).unwrap())
}

fn matrix(rows: usize, cols: usize, p: QuantParams) -> impl Strategy<Value = RingMatrix> {
    proptest::collection::vec(any::<u64>(), rows * cols)
        .prop_map(move |v| RingMatrix::new(rows, cols, v.into_iter().map(|x| p.reduce(x)).collect(), p).unwrap())
}

/// (E, W, M_pvt, M_pub) with compatible random shapes up to 8x8.
fn tuple() -> impl Strategy<Value = (RingMatrix, RingMatrix, RingMatrix, RingMatrix)> {
    (params(), 1usize..=8, 2usize..=8, 1usize..=8)
        .prop_flat_map(|(p, n, d, d_out)| (Just(p), Just(n), Just(d), Just(d_out), 1..d))
        .prop_flat_map(|(p, n, d, d_out, m)| (matrix(n, d, p), matrix(d, d_out, p), matrix(n, m, p), matrix(m, d, p)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn recover_undoes_outsourcing((e, w, m_pvt, m_pub) in tuple()) {
        let e_hat = mask_embedding(&e, &m_pvt, &m_pub).unwrap();
        let o_hat = e_hat.matmul(&w).unwrap();
        let r_pub = m_pub.matmul(&w).unwrap();
        prop_assert_eq!(recover(&o_hat, &m_pvt, &r_pub).unwrap(), e.matmul(&w).unwrap());
    }

    #[test]
    fn masking_is_additive((e, _w, m_pvt, m_pub) in tuple()) {
        let e_hat = mask_embedding(&e, &m_pvt, &m_pub).unwrap();
        prop_assert_eq!(e_hat.sub(&e).unwrap(), m_pvt.matmul(&m_pub).unwrap());
    }

    #[test]
    fn step_masks_are_deterministic_and_distinct(seed in any::<u64>(), session in any::<u64>(), step in 0u32..1000) {
        let key = PrgKey::from_u64(seed);
        let p = QuantParams::new(64, 16).unwrap();
        let op = OpId::new(0, ProjKind::Q);
        let a = derive_step_mask(&key, session, step, op, 3, 4, p).unwrap();
        prop_assert_eq!(&a, &derive_step_mask(&key, session, step, op, 3, 4, p).unwrap());
        prop_assert_ne!(&a, &derive_step_mask(&key, session, step + 1, op, 3, 4, p).unwrap());
        prop_assert_ne!(&a, &derive_step_mask(&key, session, step, OpId::new(0, ProjKind::K), 3, 4, p).unwrap());
    }
}

#[test]
fn ten_thousand_seeded_tuples_recover_exactly() {
    assert_eq!(common::recovery_mismatches(10_000, 77), 0);
}

#[test]
fn public_bases_issue_once_per_op() {
    let p = QuantParams::new(64, 16).unwrap();
    let mut issuer = SketchIssuer::new(PrgKey::from_u64(4), p);
    let q0 = OpId::new(0, ProjKind::Q);
    let base = issuer.gen_public_base(q0, 4, 8).unwrap();
    assert_eq!(base.shape(), (4, 8));
    assert!(matches!(issuer.gen_public_base(q0, 4, 8), Err(remo::Error::SketchReissue(_))));
    assert!(issuer.gen_public_base(OpId::new(0, ProjKind::K), 4, 8).is_ok());
    assert!(matches!(issuer.gen_public_base(OpId::new(1, ProjKind::Q), 8, 8), Err(remo::Error::BadDims { .. })));
}
