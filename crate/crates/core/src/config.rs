//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. Every key has a default, so an empty file is a
//! valid configuration. `REMO_SEED` in the environment replaces `seed`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attack::CorpusKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ring::QuantParams;

pub const SEED_ENV: &str = "REMO_SEED";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TransportChoice {
    InProcess,
    Tcp(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub eos: u32,
    pub k: u8,
    pub f: u8,
    /// Sketch height; 0 means half the input width of each op.
    pub m: usize,

    /// Master seed. Unset component seeds derive from it.
    pub seed: u64,
    pub model_seed: Option<u64>,
    pub session_seed: Option<u64>,
    pub corpus_seed: Option<u64>,
    pub trials_seed: Option<u64>,

    pub transport: TransportChoice,
    pub bind: String,
    pub timeout_ms: u64,
    pub out_dir: PathBuf,

    pub prompts: usize,
    pub prompt_len: usize,
    pub max_new: usize,

    pub attack_prompts: usize,
    pub attack_prompt_len: usize,
    pub attack_max_new: usize,
    pub corpus: CorpusKind,

    pub lambda: f64,
    pub game_dims: usize,
    pub trials: u64,
    pub ratios: Vec<f64>,
    pub consistent_weights: usize,

    pub bench_clients: Vec<usize>,
    pub bench_lengths: Vec<usize>,
    pub bench_requests: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab: 64,
            d: 32,
            layers: 2,
            heads: 4,
            d_ff: 64,
            max_seq: 128,
            eos: 0,
            k: 64,
            f: 16,
            m: 0,
            seed: 1,
            model_seed: None,
            session_seed: None,
            corpus_seed: None,
            trials_seed: None,
            transport: TransportChoice::InProcess,
            bind: format!("127.0.0.1:{}", crate::protocol::DEFAULT_PORT),
            timeout_ms: 30_000,
            out_dir: PathBuf::from("remo-out"),
            prompts: 100,
            prompt_len: 8,
            max_new: 16,
            attack_prompts: 1600,
            attack_prompt_len: 32,
            attack_max_new: 4,
            corpus: CorpusKind::Uniform,
            lambda: 1.0,
            game_dims: 4,
            trials: 1_000_000,
            ratios: vec![0.0, 0.1, 0.5, 1.0, 2.0],
            consistent_weights: 10,
            bench_clients: vec![1, 2, 4, 8],
            bench_lengths: vec![4, 16],
            bench_requests: 2,
        }
    }
}

fn derive(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab: self.vocab,
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            max_seq: self.max_seq,
            eos: self.eos,
            params: QuantParams::new(self.k, self.f)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sketch_rows(&self) -> Option<usize> {
        (self.m > 0).then_some(self.m)
    }

    pub fn model_seed(&self) -> u64 {
        self.model_seed.unwrap_or_else(|| derive(self.seed, 1))
    }

    pub fn session_seed(&self) -> u64 {
        self.session_seed.unwrap_or_else(|| derive(self.seed, 2))
    }

    pub fn corpus_seed(&self) -> u64 {
        self.corpus_seed.unwrap_or_else(|| derive(self.seed, 3))
    }

    pub fn trials_seed(&self) -> u64 {
        self.trials_seed.unwrap_or_else(|| derive(self.seed, 4))
    }

    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_millis(self.timeout_ms)
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid number {v:?}"))
        }
        fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',').map(|x| num(x.trim())).collect()
        }
        fn opt_seed(v: &str) -> std::result::Result<Option<u64>, String> {
            if v == "auto" {
                Ok(None)
            } else {
                num(v).map(Some)
            }
        }
        match key {
            "vocab" => self.vocab = num(value)?,
            "d" => self.d = num(value)?,
            "layers" => self.layers = num(value)?,
            "heads" => self.heads = num(value)?,
            "d_ff" => self.d_ff = num(value)?,
            "max_seq" => self.max_seq = num(value)?,
            "eos" => self.eos = num(value)?,
            "k" => self.k = num(value)?,
            "f" => self.f = num(value)?,
            "m" => self.m = num(value)?,
            "seed" => self.seed = num(value)?,
            "model_seed" => self.model_seed = opt_seed(value)?,
            "session_seed" => self.session_seed = opt_seed(value)?,
            "corpus_seed" => self.corpus_seed = opt_seed(value)?,
            "trials_seed" => self.trials_seed = opt_seed(value)?,
            "transport" => {
                self.transport = match value {
                    "inproc" => TransportChoice::InProcess,
                    v => match v.strip_prefix("tcp:") {
                        Some(addr) if !addr.is_empty() => TransportChoice::Tcp(addr.to_string()),
                        _ => return Err(format!("transport must be inproc or tcp:HOST:PORT, got {v:?}")),
                    },
                }
            }
            "bind" => self.bind = value.to_string(),
            "timeout_ms" => self.timeout_ms = num(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "prompts" => self.prompts = num(value)?,
            "prompt_len" => self.prompt_len = num(value)?,
            "max_new" => self.max_new = num(value)?,
            "attack_prompts" => self.attack_prompts = num(value)?,
            "attack_prompt_len" => self.attack_prompt_len = num(value)?,
            "attack_max_new" => self.attack_max_new = num(value)?,
            "corpus" => {
                self.corpus = match value {
                    "uniform" => CorpusKind::Uniform,
                    v => match v.strip_prefix("zipf:") {
                        Some(s) => CorpusKind::Zipf(num(s)?),
                        None => return Err(format!("corpus must be uniform or zipf:S, got {v:?}")),
                    },
                }
            }
            "lambda" => self.lambda = num(value)?,
            "game_dims" => self.game_dims = num(value)?,
            "trials" => self.trials = num(value)?,
            "ratios" => self.ratios = list(value)?,
            "consistent_weights" => self.consistent_weights = num(value)?,
            "bench_clients" => self.bench_clients = list(value)?,
            "bench_lengths" => self.bench_lengths = list(value)?,
            "bench_requests" => self.bench_requests = num(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
            cfg.set(key.trim(), value.trim()).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        Ok(cfg)
    }

    /// Canonical text form: every key, in a fixed order.
    pub fn serialize(&self) -> String {
        let seed = |s: Option<u64>| s.map_or("auto".to_string(), |v| v.to_string());
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("vocab", self.vocab.to_string());
        kv("d", self.d.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("max_seq", self.max_seq.to_string());
        kv("eos", self.eos.to_string());
        kv("k", self.k.to_string());
        kv("f", self.f.to_string());
        kv("m", self.m.to_string());
        kv("seed", self.seed.to_string());
        kv("model_seed", seed(self.model_seed));
        kv("session_seed", seed(self.session_seed));
        kv("corpus_seed", seed(self.corpus_seed));
        kv("trials_seed", seed(self.trials_seed));
        kv(
            "transport",
            match &self.transport {
                TransportChoice::InProcess => "inproc".to_string(),
                TransportChoice::Tcp(a) => format!("tcp:{a}"),
            },
        );
        kv("bind", self.bind.clone());
        kv("timeout_ms", self.timeout_ms.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("prompts", self.prompts.to_string());
        kv("prompt_len", self.prompt_len.to_string());
        kv("max_new", self.max_new.to_string());
        kv("attack_prompts", self.attack_prompts.to_string());
        kv("attack_prompt_len", self.attack_prompt_len.to_string());
        kv("attack_max_new", self.attack_max_new.to_string());
        kv(
            "corpus",
            match self.corpus {
                CorpusKind::Uniform => "uniform".to_string(),
                CorpusKind::Zipf(s) => format!("zipf:{s}"),
            },
        );
        kv("lambda", self.lambda.to_string());
        kv("game_dims", self.game_dims.to_string());
        kv("trials", self.trials.to_string());
        kv("ratios", self.ratios.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        kv("consistent_weights", self.consistent_weights.to_string());
        kv("bench_clients", join(&self.bench_clients));
        kv("bench_lengths", join(&self.bench_lengths));
        kv("bench_requests", self.bench_requests.to_string());
        out
    }

    /// Replace the master seed from `REMO_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::BadConfig(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }
}

/// Read a config file. The environment is not consulted here.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n   \n").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = RunConfig::parse("vocab = 32\nwidth = 9\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("width"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("vocab 32"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("trials = many"), Err(Error::Parse { .. })));
    }

    #[test]
    fn values_and_comments() {
        let c = RunConfig::parse("transport = tcp:localhost:9000  # remote\nratios=0, 0.25\ncorpus = zipf:1.5\nmodel_seed = 7").unwrap();
        assert_eq!(c.transport, TransportChoice::Tcp("localhost:9000".into()));
        assert_eq!(c.ratios, vec![0.0, 0.25]);
        assert_eq!(c.corpus, CorpusKind::Zipf(1.5));
        assert_eq!(c.model_seed(), 7);
        assert_ne!(c.session_seed(), RunConfig::default().model_seed());
    }

    #[test]
    fn serialize_round_trip() {
        let text = "vocab=32\n d = 16 \nheads=2\nseed=99\ntrials_seed=5\nbench_clients=1,3\ncorpus=zipf:1.1\n";
        let c = RunConfig::parse(text).unwrap();
        let s = c.serialize();
        assert_eq!(RunConfig::parse(&s).unwrap(), c);
        assert_eq!(RunConfig::parse(&s).unwrap().serialize(), s);
        assert_eq!(RunConfig::parse(&RunConfig::default().serialize()).unwrap(), RunConfig::default());
    }
}
