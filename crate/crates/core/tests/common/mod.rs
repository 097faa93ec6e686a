#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use remo::masking::{mask_embedding, recover, OpId, ProjKind};
use remo::model::{ModelConfig, ModelWeights, TokenSeq};
use remo::prg::PrgKey;
use remo::protocol::{
    audit_transcript, serve, Enclave, EnclaveOptions, InProcessTransport, Message, Provider, TcpTransport, Transcript,
    DEFAULT_TIMEOUT,
};
use remo::ring::{QuantParams, RingMatrix};
use remo::model::GenerateOptions;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, params: QuantParams) -> RingMatrix {
    let data = (0..rows * cols).map(|_| params.reduce(rng.random())).collect();
    RingMatrix::new(rows, cols, data, params).unwrap()
}

const PARAMS: [(u8, u8); 3] = [(64, 16), (32, 8), (16, 4)];

/// Mask, multiply by `W` as the provider would, recover; compare with the
/// direct ring product. Returns the number of tuples that disagreed.
pub fn recovery_mismatches(tuples: usize, seed: u64) -> usize {
    let mut rng = rng(seed);
    let mut bad = 0;
    for i in 0..tuples {
        let (k, f) = PARAMS[i % PARAMS.len()];
        let p = QuantParams::new(k, f).unwrap();
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=8);
        let m = rng.random_range(1..d);
        let d_out = rng.random_range(1..=8);
        let e = random_matrix(&mut rng, n, d, p);
        let w = random_matrix(&mut rng, d, d_out, p);
        let m_pvt = random_matrix(&mut rng, n, m, p);
        let m_pub = random_matrix(&mut rng, m, d, p);
        let e_hat = mask_embedding(&e, &m_pvt, &m_pub).unwrap();
        let r_pub = m_pub.matmul(&w).unwrap();
        let o_hat = e_hat.matmul(&w).unwrap();
        if recover(&o_hat, &m_pvt, &r_pub).unwrap() != e.matmul(&w).unwrap() {
            bad += 1;
        }
    }
    bad
}

pub fn random_op(rng: &mut impl Rng) -> OpId {
    if rng.random_bool(0.1) {
        return OpId::head();
    }
    let kinds = [ProjKind::Q, ProjKind::K, ProjKind::V, ProjKind::O, ProjKind::Up, ProjKind::Down];
    OpId::new(rng.random_range(0..8), kinds[rng.random_range(0..kinds.len())])
}

pub fn random_message(rng: &mut impl Rng) -> Message {
    let (k, f) = PARAMS[rng.random_range(0..PARAMS.len())];
    let p = QuantParams::new(k, f).unwrap();
    let mat = |rng: &mut ChaCha8Rng| {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        random_matrix(rng, r, c, p)
    };
    let mut inner = ChaCha8Rng::seed_from_u64(rng.random());
    match rng.random_range(0..7) {
        0 => Message::SetupBase { op: random_op(rng), m_pub: mat(&mut inner) },
        1 => Message::PoolReply { op: random_op(rng), r_pub: mat(&mut inner) },
        2 => Message::MatMulRequest { session: rng.random(), step: rng.random(), op: random_op(rng), e_hat: mat(&mut inner) },
        3 => Message::MatMulReply { session: rng.random(), step: rng.random(), op: random_op(rng), o_hat: mat(&mut inner) },
        4 => Message::OpenSession { session: rng.random() },
        5 => Message::CloseSession { session: rng.random() },
        _ => {
            let len = rng.random_range(0..40);
            let detail: String = (0..len).map(|_| ['a', 'Z', '0', ' ', 'é', '→', '\n'][rng.random_range(0..7)]).collect();
            Message::Error { code: rng.random(), detail }
        }
    }
}

/// Messages that failed an encode/decode round-trip, either alone or read
/// back from one concatenated stream.
pub fn wire_round_trip_failures(count: usize, seed: u64) -> usize {
    let mut rng = rng(seed);
    let msgs: Vec<Message> = (0..count).map(|_| random_message(&mut rng)).collect();
    let mut bad = msgs.iter().filter(|m| Message::decode(&m.encode()).ok().as_ref() != Some(*m)).count();
    let stream: Vec<u8> = msgs.iter().flat_map(|m| m.encode()).collect();
    let mut reader = std::io::Cursor::new(stream);
    for m in &msgs {
        if Message::read_from(&mut reader).ok().flatten().as_ref() != Some(m) {
            bad += 1;
        }
    }
    if !matches!(Message::read_from(&mut reader), Ok(None)) {
        bad += 1;
    }
    bad
}

pub fn small_model(seed: u64) -> ModelWeights {
    ModelWeights::random(ModelConfig::default(), seed).unwrap()
}

pub fn enclave(w: &ModelWeights, key: u64, options: EnclaveOptions) -> Enclave {
    Enclave::new(w.structural.clone(), PrgKey::from_u64(key), options).unwrap()
}

pub fn prompts(n: usize, seed: u64) -> Vec<TokenSeq> {
    remo::attack::synthetic_corpus(remo::attack::CorpusKind::Uniform, n, 6, 64, seed)
}

/// Setup plus one session per prompt over an in-process transport.
pub fn run_inproc(w: &ModelWeights, key: u64, options: EnclaveOptions, prompts: &[TokenSeq], max_new: usize) -> (Vec<TokenSeq>, Transcript) {
    let mut t = InProcessTransport::new(Provider::new(w.projections.clone()));
    let mut e = enclave(w, key, options);
    e.setup(&mut t).unwrap();
    let outs = prompts.iter().map(|p| e.run_session(&mut t, p, GenerateOptions::new(max_new)).unwrap()).collect();
    (outs, t.take_transcript())
}

/// The same over one TCP connection to a loopback provider; the transcript
/// is the provider's log of that connection.
pub fn run_tcp(w: &ModelWeights, key: u64, prompts: &[TokenSeq], max_new: usize) -> (Vec<TokenSeq>, Transcript) {
    let server = serve("127.0.0.1:0", Provider::new(w.projections.clone())).unwrap();
    let mut t = TcpTransport::connect(server.addr(), DEFAULT_TIMEOUT).unwrap();
    let mut e = enclave(w, key, EnclaveOptions::default());
    e.setup(&mut t).unwrap();
    let outs = prompts.iter().map(|p| e.run_session(&mut t, p, GenerateOptions::new(max_new)).unwrap()).collect();
    drop(t);
    // The connection's transcript lands once the server sees the close.
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
    while server.transcripts().is_empty() && std::time::Instant::now() < deadline {
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    let mut transcripts = server.shutdown();
    assert_eq!(transcripts.len(), 1);
    (outs, transcripts.remove(0))
}

/// Copy the first masked payload of session A over the first one of
/// session B, as a replayed mask would produce.
pub fn duplicate_first_payload(t: &Transcript) -> Transcript {
    let mut t = t.clone();
    let entries = t.entries_mut();
    let reqs: Vec<(usize, u64)> = entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| match &e.message {
            Message::MatMulRequest { session, step: 0, .. } => Some((i, *session)),
            _ => None,
        })
        .collect();
    let (a, sa) = reqs[0];
    let (b, _) = *reqs.iter().find(|(_, s)| *s != sa).expect("two sessions");
    let Message::MatMulRequest { e_hat, .. } = entries[a].message.clone() else { unreachable!() };
    if let Message::MatMulRequest { e_hat: target, .. } = &mut entries[b].message {
        *target = e_hat;
    }
    t
}

pub fn audit_clause(t: &Transcript) -> Option<remo::error::AuditClause> {
    match audit_transcript(t) {
        Ok(_) => None,
        Err(remo::Error::AuditFail { clause, .. }) => Some(clause),
        Err(e) => panic!("audit errored: {e}"),
    }
}
