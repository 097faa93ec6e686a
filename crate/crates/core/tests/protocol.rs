mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use proptest::prelude::*;
use rand::SeedableRng;

use remo::error::AuditClause;
use remo::model::{reference_generate, GenerateOptions};
use remo::protocol::{
    serve, EnclaveOptions, InProcessTransport, Message, Provider, TcpTransport, Transcript, Transport, DEFAULT_TIMEOUT,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn any_message_round_trips(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let msg = common::random_message(&mut rng);
        let bytes = msg.encode();
        prop_assert_eq!(Message::decode(&bytes).unwrap(), msg);
        // Every strict prefix is rejected rather than misread.
        let cut = (seed as usize) % bytes.len();
        prop_assert!(Message::decode(&bytes[..cut]).is_err());
    }
}

#[test]
fn wire_round_trip_of_ten_thousand_messages() {
    assert_eq!(common::wire_round_trip_failures(10_000, 3), 0);
}

#[test]
fn tcp_and_inproc_sessions_are_identical() {
    let w = common::small_model(31);
    let prompts = common::prompts(3, 32);
    let (a, ta) = common::run_inproc(&w, 33, EnclaveOptions::default(), &prompts, 10);
    let (b, tb) = common::run_tcp(&w, 33, &prompts, 10);
    assert_eq!(a, b);
    assert_eq!(ta.without_timestamps(), tb.without_timestamps());
    for (p, out) in prompts.iter().zip(&a) {
        assert_eq!(out, &reference_generate(&w, p, 10).unwrap());
    }
}

#[test]
fn audit_accepts_honest_and_rejects_controls() {
    let w = common::small_model(41);
    let prompts = common::prompts(3, 42);
    let (_, honest) = common::run_inproc(&w, 43, EnclaveOptions::default(), &prompts, 6);
    assert_eq!(common::audit_clause(&honest), None);

    let raw = EnclaveOptions { disable_masking: true, ..EnclaveOptions::default() };
    let (_, unmasked) = common::run_inproc(&w, 43, raw, &prompts, 6);
    assert_eq!(common::audit_clause(&unmasked), Some(AuditClause::Uniformity));

    assert_eq!(common::audit_clause(&common::duplicate_first_payload(&honest)), Some(AuditClause::Freshness));

    // A dropped reply breaks the request/reply pairing.
    let mut broken = honest.clone();
    let idx = broken.entries().iter().position(|e| matches!(e.message, Message::MatMulReply { .. })).unwrap();
    broken.entries_mut().remove(idx);
    assert_eq!(common::audit_clause(&broken), Some(AuditClause::Schema));

    // Too short to judge uniformity.
    let mut short = Transcript::new();
    for e in honest.entries().iter().take(40) {
        short.push(e.direction, e.timestamp_ns, e.message.clone());
    }
    assert_eq!(common::audit_clause(&short), Some(AuditClause::Uniformity));
}

#[test]
fn transcripts_survive_disk() {
    let w = common::small_model(51);
    let (_, t) = common::run_inproc(&w, 52, EnclaveOptions::default(), &common::prompts(1, 53), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.log");
    t.save(&path).unwrap();
    assert_eq!(Transcript::load(&path).unwrap(), t);
}

#[test]
fn concurrent_clients_share_one_provider() {
    let w = common::small_model(61);
    let server = serve("127.0.0.1:0", Provider::new(w.projections.clone())).unwrap();
    let mut e = common::enclave(&w, 62, EnclaveOptions::default());
    e.setup(&mut TcpTransport::connect(server.addr(), DEFAULT_TIMEOUT).unwrap()).unwrap();
    let prompts = common::prompts(6, 63);
    std::thread::scope(|s| {
        for p in &prompts {
            let (e, w, addr) = (&e, &w, server.addr());
            s.spawn(move || {
                let mut t = TcpTransport::connect(addr, DEFAULT_TIMEOUT).unwrap();
                for _ in 0..3 {
                    assert_eq!(e.run_session(&mut t, p, GenerateOptions::new(5)).unwrap(), reference_generate(w, p, 5).unwrap());
                }
            });
        }
    });
    assert_eq!(server.shutdown().len(), 7);
}

#[test]
fn malformed_frame_gets_error_then_close() {
    let w = common::small_model(71);
    let server = serve("127.0.0.1:0", Provider::new(w.projections.clone())).unwrap();
    let mut raw = TcpStream::connect(server.addr()).unwrap();
    raw.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    // Valid length prefix, unknown tag.
    let mut frame = 3u32.to_le_bytes().to_vec();
    frame.extend_from_slice(&[0xee, 1, 2]);
    raw.write_all(&frame).unwrap();
    let reply = Message::read_from(&mut raw).unwrap();
    assert!(matches!(reply, Some(Message::Error { .. })), "{reply:?}");
    let mut rest = Vec::new();
    assert_eq!(raw.read_to_end(&mut rest).unwrap(), 0);

    // Connect and leave without a word; the server keeps serving.
    drop(TcpStream::connect(server.addr()).unwrap());
    let mut t = TcpTransport::connect(server.addr(), DEFAULT_TIMEOUT).unwrap();
    assert_eq!(t.call(&Message::OpenSession { session: 5 }).unwrap(), Message::OpenSession { session: 5 });
}

#[test]
fn provider_refuses_a_second_setup() {
    let w = common::small_model(81);
    let provider = Provider::new(w.projections.clone());
    let mut first = common::enclave(&w, 82, EnclaveOptions::default());
    first.setup(&mut InProcessTransport::new(provider.clone())).unwrap();
    let mut second = common::enclave(&w, 83, EnclaveOptions::default());
    let err = second.setup(&mut InProcessTransport::new(provider)).unwrap_err();
    assert!(matches!(err, remo::Error::Remote { .. }), "{err}");
}

#[test]
fn closed_provider_surfaces_as_transport_closed() {
    let w = common::small_model(91);
    let server = serve("127.0.0.1:0", Provider::new(w.projections.clone())).unwrap();
    let addr = server.addr();
    let mut t = TcpTransport::connect(addr, Duration::from_secs(2)).unwrap();
    drop(server);
    let err = t.call(&Message::OpenSession { session: 1 }).unwrap_err();
    assert!(matches!(err, remo::Error::TransportClosed(_)), "{err}");
}
