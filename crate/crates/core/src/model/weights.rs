use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::OpId;
use crate::ring::{QuantParams, RingMatrix};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RMW1";

/// Weight matrices of every outsourced projection. Provider-held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionWeights {
    config: ModelConfig,
    mats: BTreeMap<OpId, RingMatrix>,
}

impl ProjectionWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, op: OpId) -> Result<&RingMatrix> {
        self.mats.get(&op).ok_or(Error::UnknownOp(op))
    }

    /// Swap two weight matrices of the same shape (perturbation sanity checks).
    pub fn swapped(&self, a: OpId, b: OpId) -> Result<Self> {
        let (wa, wb) = (self.get(a)?.clone(), self.get(b)?.clone());
        if wa.shape() != wb.shape() {
            return Err(Error::shape(format!("cannot swap {a} and {b}")));
        }
        let mut out = self.clone();
        out.mats.insert(a, wb);
        out.mats.insert(b, wa);
        Ok(out)
    }
}

/// Embedding table and RMSNorm gains. These live in the enclave, which
/// performs the embedding lookup and all normalisation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuralParams {
    config: ModelConfig,
    embedding: RingMatrix,
    attn_gain: Vec<RingMatrix>,
    mlp_gain: Vec<RingMatrix>,
    final_gain: RingMatrix,
}

impl StructuralParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &RingMatrix {
        &self.embedding
    }

    pub fn attn_gain(&self, layer: usize) -> Vec<f64> {
        self.attn_gain[layer].dequantize_row(0)
    }

    pub fn mlp_gain(&self, layer: usize) -> Vec<f64> {
        self.mlp_gain[layer].dequantize_row(0)
    }

    pub fn final_gain(&self) -> Vec<f64> {
        self.final_gain.dequantize_row(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelWeights {
    pub projections: ProjectionWeights,
    pub structural: StructuralParams,
}

fn uniform_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, bound: f64, p: QuantParams) -> Result<RingMatrix> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let x: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| dist.sample(rng)).collect()).collect();
    RingMatrix::quantize(&x, p)
}

impl ModelWeights {
    /// Seeded initialisation: entries uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// unit norm gains.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let p = config.params;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let embedding = uniform_matrix(&mut rng, config.vocab, config.d, 1.0 / (config.d as f64).sqrt(), p)?;
        let mut mats = BTreeMap::new();
        for op in config.op_ids() {
            let (rows, cols) = config.op_shape(op)?;
            mats.insert(op, uniform_matrix(&mut rng, rows, cols, 1.0 / (rows as f64).sqrt(), p)?);
        }
        let ones = RingMatrix::quantize(&[vec![1.0; config.d]], p)?;
        Ok(ModelWeights {
            projections: ProjectionWeights { config, mats },
            structural: StructuralParams {
                config,
                embedding,
                attn_gain: vec![ones.clone(); config.layers],
                mlp_gain: vec![ones.clone(); config.layers],
                final_gain: ones,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.projections.config
    }

    /// Assemble from explicit parts; every shape is checked against `config`.
    pub fn from_parts(
        config: ModelConfig,
        embedding: RingMatrix,
        layer_gains: Vec<(RingMatrix, RingMatrix)>,
        final_gain: RingMatrix,
        mats: BTreeMap<OpId, RingMatrix>,
    ) -> Result<Self> {
        config.validate()?;
        let expect = |m: &RingMatrix, shape: (usize, usize), what: &str| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::shape(format!("{what} is {:?}, expected {shape:?}", m.shape())));
            }
            if m.params() != config.params {
                return Err(Error::ParamsMismatch);
            }
            Ok(())
        };
        expect(&embedding, (config.vocab, config.d), "embedding")?;
        if layer_gains.len() != config.layers {
            return Err(Error::shape("one gain pair per layer"));
        }
        for (a, m) in &layer_gains {
            expect(a, (1, config.d), "attention gain")?;
            expect(m, (1, config.d), "mlp gain")?;
        }
        expect(&final_gain, (1, config.d), "final gain")?;
        for op in config.op_ids() {
            let w = mats.get(&op).ok_or(Error::UnknownOp(op))?;
            expect(w, config.op_shape(op)?, &op.to_string())?;
        }
        if mats.len() != config.op_ids().len() {
            return Err(Error::shape("unexpected extra weight matrices"));
        }
        let (attn_gain, mlp_gain) = layer_gains.into_iter().unzip();
        Ok(ModelWeights {
            projections: ProjectionWeights { config, mats },
            structural: StructuralParams { config, embedding, attn_gain, mlp_gain, final_gain },
        })
    }

    /// Weight file layout: `RMW1`, then vocab, d, layers, heads, d_ff,
    /// max_seq, eos, k, f as u32 LE, then matrices in the order
    /// embedding; per layer: attn_gain, Q, K, V, O, mlp_gain, Up, Down;
    /// final_gain; head.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = self.config();
        w.write_all(WEIGHTS_MAGIC)?;
        let fields = [
            c.vocab as u32,
            c.d as u32,
            c.layers as u32,
            c.heads as u32,
            c.d_ff as u32,
            c.max_seq as u32,
            c.eos,
            u32::from(c.params.k()),
            u32::from(c.params.f()),
        ];
        for v in fields {
            w.write_all(&v.to_le_bytes())?;
        }
        let s = &self.structural;
        s.embedding.write_to(w)?;
        for layer in 0..c.layers {
            let l = layer as u32;
            s.attn_gain[layer].write_to(w)?;
            for kind in [super::ProjKind::Q, super::ProjKind::K, super::ProjKind::V, super::ProjKind::O] {
                self.projections.get(OpId::new(l, kind))?.write_to(w)?;
            }
            s.mlp_gain[layer].write_to(w)?;
            self.projections.get(OpId::new(l, super::ProjKind::Up))?.write_to(w)?;
            self.projections.get(OpId::new(l, super::ProjKind::Down))?.write_to(w)?;
        }
        s.final_gain.write_to(w)?;
        self.projections.get(OpId::head())?.write_to(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Decode("bad weight file magic".into()));
        }
        let mut fields = [0u32; 9];
        for v in fields.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let k = u8::try_from(fields[7]).map_err(|_| Error::Decode("k out of range".into()))?;
        let f = u8::try_from(fields[8]).map_err(|_| Error::Decode("f out of range".into()))?;
        let config = ModelConfig {
            vocab: fields[0] as usize,
            d: fields[1] as usize,
            layers: fields[2] as usize,
            heads: fields[3] as usize,
            d_ff: fields[4] as usize,
            max_seq: fields[5] as usize,
            eos: fields[6],
            params: QuantParams::new(k, f)?,
        };
        config.validate()?;
        let embedding = RingMatrix::read_from(r)?;
        let mut gains = Vec::with_capacity(config.layers);
        let mut mats = BTreeMap::new();
        for layer in 0..config.layers as u32 {
            let attn = RingMatrix::read_from(r)?;
            for kind in [super::ProjKind::Q, super::ProjKind::K, super::ProjKind::V, super::ProjKind::O] {
                mats.insert(OpId::new(layer, kind), RingMatrix::read_from(r)?);
            }
            let mlp = RingMatrix::read_from(r)?;
            mats.insert(OpId::new(layer, super::ProjKind::Up), RingMatrix::read_from(r)?);
            mats.insert(OpId::new(layer, super::ProjKind::Down), RingMatrix::read_from(r)?);
            gains.push((attn, mlp));
        }
        let final_gain = RingMatrix::read_from(r)?;
        mats.insert(OpId::head(), RingMatrix::read_from(r)?);
        Self::from_parts(config, embedding, gains, final_gain, mats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
