//! Multi-layer perceptron encoder producing the embeddings that get
//! quantized. Hidden layers use a rectifier; the output layer is linear.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{ensure, Result};
use crate::numerics::{RealMatrix, Tape, Var};

pub const ENCODER_MAGIC: &[u8; 8] = b"SSCQENC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64, 512],
            embedding_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.hidden_dims.is_empty(),
            Config,
            "encoder needs at least one hidden layer"
        );
        ensure!(
            self.input_dim > 0 && self.embedding_dim > 0 && self.hidden_dims.iter().all(|&h| h > 0),
            Config,
            "encoder layer widths must be positive"
        );
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.embedding_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// fan_in x fan_out
    pub weight: RealMatrix,
    /// 1 x fan_out
    pub bias: RealMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<DenseLayer>,
}

/// Glorot-uniform weights and zero biases, deterministic per seed.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = config.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            DenseLayer {
                weight: RealMatrix::from_vec(fan_in, fan_out, data).expect("shape"),
                bias: RealMatrix::zeros(1, fan_out),
            }
        })
        .collect();
    Ok(EncoderParams { layers })
}

/// Tape handles for the parameters of one encoder.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.input_dim(),
            hidden_dims: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.weight.cols())
                .collect(),
            embedding_dim: self.embedding_dim(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.as_slice().len())
            .sum()
    }

    /// Registers every weight and bias on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.bytes(ENCODER_MAGIC);
        w.u32(to_u32(self.layers.len(), "layer count")?);
        for l in &self.layers {
            w.u32(to_u32(l.weight.rows(), "rows")?);
            w.u32(to_u32(l.weight.cols(), "cols")?);
        }
        for l in &self.layers {
            w.f64s(l.weight.as_slice());
            w.f64s(l.bias.as_slice());
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.expect_magic(ENCODER_MAGIC)?;
        let count = r.u32("layer count")? as usize;
        if count < 2 {
            return Err(r.error(format!("encoder needs at least 2 layers, found {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for i in 0..count {
            let at = r.offset();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            if rows == 0 || cols == 0 {
                return Err(r.error_at(at, format!("layer {i} has an empty shape")));
            }
            if let Some(&(_, prev_cols)) = shapes.last() {
                if prev_cols != rows {
                    return Err(r.error_at(
                        at,
                        format!("layer {i} expects {rows} inputs but previous layer emits {prev_cols}"),
                    ));
                }
            }
            shapes.push((rows, cols));
        }
        let mut layers = Vec::with_capacity(count);
        for (rows, cols) in shapes {
            let weight = RealMatrix::from_vec(rows, cols, r.f64s(rows * cols, "weights")?)?;
            let bias = RealMatrix::from_vec(1, cols, r.f64s(cols, "biases")?)?;
            layers.push(DenseLayer { weight, bias });
        }
        r.finish()?;
        Ok(Self { layers })
    }
}

/// Embeds every row of `batch`.
pub fn encode(params: &EncoderParams, batch: &RealMatrix) -> Result<RealMatrix> {
    ensure!(
        batch.cols() == params.input_dim(),
        Dimension,
        "encoder expects {} input columns, got {}",
        params.input_dim(),
        batch.cols()
    );
    let last = params.layers.len() - 1;
    let mut h = batch.clone();
    for (i, l) in params.layers.iter().enumerate() {
        let mut next = h.matmul(&l.weight)?;
        for r in 0..next.rows() {
            for (v, b) in next.row_mut(r).iter_mut().zip(l.bias.as_slice()) {
                *v += b;
                if i < last {
                    *v = v.max(0.0);
                }
            }
        }
        h = next;
    }
    Ok(h)
}

/// Records the forward pass on `tape`.
pub fn encode_on_tape(tape: &mut Tape, vars: &EncoderVars, input: Var) -> Result<Var> {
    let last = vars.layers.len() - 1;
    let mut h = input;
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        let lin = tape.matmul(h, w)?;
        h = tape.add_row(lin, b)?;
        if i < last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}
