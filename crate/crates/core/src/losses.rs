//! The training objective over a two-view batch.
//!
//! Rows `2i` and `2i + 1` of every batch matrix are two augmented views of
//! the same input, so the positive of row `r` is `r ^ 1`. The negatives of
//! an anchor are all rows except the anchor and its positive. Every term is
//! averaged over all anchors.
//!
//! | term  | acts on | weight    |
//! |-------|---------|-----------|
//! | `icz` | `z`     | 1         |
//! | `pn`  | `z_m`   | `λ_pn`    |
//! | `cd`  | `f_m`, codewords | `λ_cd` |
//! | `icf` | `f`     | 1 (or 0)  |
//! | `cc`  | fused `(f, z)` | `λ_cc` |

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_on_tape, EncoderParams};
use crate::error::{ensure, Result};
use crate::numerics::{Mask, RealMatrix, Tape, Var};
use crate::quantizer::{soft_quantize_on_tape, CodebookSet};

/// How `f` and `z` are combined before the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// `[f/‖f‖, z/‖z‖]`
    #[default]
    Concatenate,
    /// `f/‖f‖ + z/‖z‖`
    Sum,
    /// Anchor distribution from the `f` stream, positive distribution from
    /// the `z` stream.
    Cross,
    /// `z` alone.
    QuantizedOnly,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [
        Fusion::Concatenate,
        Fusion::Sum,
        Fusion::Cross,
        Fusion::QuantizedOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Concatenate => "concatenate",
            Fusion::Sum => "sum",
            Fusion::Cross => "cross",
            Fusion::QuantizedOnly => "quantized-only",
        }
    }
}

/// Per-sample codeword distribution used by the diversity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Diversity {
    /// Softmax of cosine similarity to each codeword, unit temperature.
    #[default]
    CosineEntropy,
    /// The soft-quantization assignment itself.
    SoftQuantizationEntropy,
    /// Softmax of negative squared distance, unit temperature.
    EuclideanEntropy,
    /// Cosine softmax, squared and renormalized per sample.
    SquaredProbability,
}

impl Diversity {
    pub const ALL: [Diversity; 4] = [
        Diversity::CosineEntropy,
        Diversity::SoftQuantizationEntropy,
        Diversity::EuclideanEntropy,
        Diversity::SquaredProbability,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Diversity::CosineEntropy => "cosine-entropy",
            Diversity::SoftQuantizationEntropy => "soft-quantization-entropy",
            Diversity::EuclideanEntropy => "euclidean-entropy",
            Diversity::SquaredProbability => "squared-probability",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_pn: f64,
    pub lambda_cd: f64,
    pub lambda_cc: f64,
    /// Include the instance contrastive term on embeddings.
    pub use_icf: bool,
    pub tau_ic: f64,
    pub tau_pn: f64,
    pub tau_cc: f64,
    /// Part neighbors per anchor (`N_k`).
    pub neighbors: usize,
    pub fusion: Fusion,
    pub diversity: Diversity,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pn: 0.1,
            lambda_cd: 0.2,
            lambda_cc: 0.4,
            use_icf: true,
            tau_ic: 0.5,
            tau_pn: 0.5,
            tau_cc: 0.2,
            neighbors: 20,
            fusion: Fusion::Concatenate,
            diversity: Diversity::CosineEntropy,
        }
    }
}

impl LossConfig {
    /// Only the quantized instance contrastive term.
    pub fn baseline() -> Self {
        Self {
            lambda_pn: 0.0,
            lambda_cd: 0.0,
            lambda_cc: 0.0,
            use_icf: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("tau_ic", self.tau_ic),
            ("tau_pn", self.tau_pn),
            ("tau_cc", self.tau_cc),
        ] {
            ensure!(t > 0.0 && t.is_finite(), Config, "{name} must be positive, got {t}");
        }
        for (name, w) in [
            ("lambda_pn", self.lambda_pn),
            ("lambda_cd", self.lambda_cd),
            ("lambda_cc", self.lambda_cc),
        ] {
            ensure!(w >= 0.0 && w.is_finite(), Config, "{name} must be non-negative, got {w}");
        }
        ensure!(self.neighbors >= 1, Config, "neighbors must be at least 1");
        Ok(())
    }
}

#[inline]
pub fn positive_of(row: usize) -> usize {
    row ^ 1
}

fn check_pairs(n: usize) -> Result<()> {
    ensure!(
        n >= 2 && n % 2 == 0,
        Dimension,
        "two-view batch needs an even number of rows, got {n}"
    );
    Ok(())
}

/// Every row except the diagonal.
fn off_diagonal(n: usize) -> Mask {
    Mask::from_fn(n, n, |r, c| r != c)
}

/// Every row except the anchor and its positive.
fn negatives(n: usize) -> Mask {
    Mask::from_fn(n, n, |r, c| r != c && c != positive_of(r))
}

fn cosine_matrix(tape: &mut Tape, x: Var, temperature: f64) -> Result<Var> {
    let u = tape.normalize_rows(x)?;
    let s = tape.matmul_nt(u, u)?;
    Ok(tape.scale(s, 1.0 / temperature))
}

/// Instance contrastive loss: per anchor,
/// `-log(exp(s⁺/τ) / Σ_{j≠anchor} exp(s_j/τ))` with cosine similarity `s`.
pub fn instance_contrastive_on_tape(tape: &mut Tape, reps: Var, tau_ic: f64) -> Result<Var> {
    let n = tape.shape(reps).0;
    check_pairs(n)?;
    ensure!(tau_ic > 0.0, Config, "tau_ic must be positive");
    let s = cosine_matrix(tape, reps, tau_ic)?;
    let lse = tape.masked_logsumexp(s, off_diagonal(n))?;
    let pos_mask = Mask::from_fn(n, n, |r, c| c == positive_of(r)).to_matrix();
    let picked = tape.mul_const(s, pos_mask)?;
    let pos = tape.row_sums(picked);
    let per_anchor = tape.sub(lse, pos)?;
    Ok(tape.mean(per_anchor))
}

/// Effective neighbor count for a batch of `n` rows.
pub fn clamp_neighbors(neighbors: usize, n: usize) -> Result<usize> {
    let available = n.saturating_sub(2);
    ensure!(
        available >= 1,
        Config,
        "part-neighbor term needs at least one negative; batch has {n} rows"
    );
    if neighbors > available {
        log::warn!("neighbor count {neighbors} exceeds the {available} negatives; clamping");
    }
    Ok(neighbors.min(available))
}

/// Top-`k` negatives per row of the similarity matrix `s`, highest first,
/// ties to the lower index. Selection is treated as a constant.
fn top_negatives(s: &RealMatrix, k: usize) -> Mask {
    let n = s.rows();
    let mut mask = Mask::new(n, n, false);
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&c| c != r && c != positive_of(r)));
        let row = s.row(r);
        candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &c in &candidates[..k] {
            mask.set(r, c, true);
        }
    }
    mask
}

/// Part-neighbor consistency: in each sub-space, the share of softmax mass
/// over negatives held by the anchor's `N_k` most similar negatives.
pub fn part_neighbor_on_tape(
    tape: &mut Tape,
    z: Var,
    num_books: usize,
    neighbors: usize,
    tau_pn: f64,
) -> Result<Var> {
    let (n, d) = tape.shape(z);
    check_pairs(n)?;
    ensure!(tau_pn > 0.0, Config, "tau_pn must be positive");
    ensure!(
        num_books > 0 && d % num_books == 0,
        Config,
        "{num_books} codebooks do not divide width {d}"
    );
    let k = clamp_neighbors(neighbors, n)?;
    let sub = d / num_books;
    let neg = negatives(n);
    let mut acc: Option<Var> = None;
    for m in 0..num_books {
        let zm = tape.slice_cols(z, m * sub, sub)?;
        let s = cosine_matrix(tape, zm, tau_pn)?;
        let top = top_negatives(tape.value(s), k);
        let num = tape.masked_logsumexp(s, top)?;
        let den = tape.masked_logsumexp(s, neg.clone())?;
        let diff = tape.sub(den, num)?;
        let term = tape.mean(diff);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.expect("at least one codebook"), 1.0 / num_books as f64))
}

/// Codeword diversity: `(1/M) Σ_m Σ_k p̂_{m,k} log p̂_{m,k}` where `p̂_m` is the
/// batch-mean codeword distribution of sub-space `m`. Minimizing it
/// maximizes the entropy of codeword usage.
pub fn codeword_diversity_on_tape(
    tape: &mut Tape,
    f: Var,
    books: &[Var],
    variant: Diversity,
    tau_sq: f64,
) -> Result<Var> {
    ensure!(!books.is_empty(), Config, "need at least one codebook");
    let sub = tape.shape(books[0]).1;
    ensure!(
        tape.shape(f).1 == sub * books.len(),
        Dimension,
        "embedding width {} vs {} codebooks of width {sub}",
        tape.shape(f).1,
        books.len()
    );
    let mut acc: Option<Var> = None;
    for (m, &c) in books.iter().enumerate() {
        let fm = tape.slice_cols(f, m * sub, sub)?;
        let cosine_probs = |tape: &mut Tape| -> Result<Var> {
            let a = tape.normalize_rows(fm)?;
            let b = tape.normalize_rows(c)?;
            let s = tape.matmul_nt(a, b)?;
            Ok(tape.softmax_rows(s))
        };
        let probs = match variant {
            Diversity::CosineEntropy => cosine_probs(tape)?,
            Diversity::SoftQuantizationEntropy => {
                let d = tape.sq_dist(fm, c)?;
                let l = tape.scale(d, -1.0 / tau_sq);
                tape.softmax_rows(l)
            }
            Diversity::EuclideanEntropy => {
                let d = tape.sq_dist(fm, c)?;
                let l = tape.scale(d, -1.0);
                tape.softmax_rows(l)
            }
            Diversity::SquaredProbability => {
                let p = cosine_probs(tape)?;
                let sq = tape.square(p);
                tape.row_normalize_sum(sq)?
            }
        };
        let mean = tape.col_means(probs);
        let plogp = tape.xlogx(mean)?;
        let term = tape.sum(plogp);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), 1.0 / books.len() as f64))
}

/// Symmetric-KL consistency between the anchor's and the positive's
/// similarity distributions over the shared negatives.
pub fn consistent_contrastive_on_tape(
    tape: &mut Tape,
    f: Var,
    z: Var,
    fusion: Fusion,
    tau_cc: f64,
) -> Result<Var> {
    let n = tape.shape(f).0;
    check_pairs(n)?;
    ensure!(tape.shape(z).0 == n, Dimension, "f and z row counts differ");
    ensure!(tau_cc > 0.0, Config, "tau_cc must be positive");
    ensure!(
        n >= 4,
        Config,
        "consistency term needs at least one negative; batch has {n} rows"
    );
    let neg = negatives(n);
    let swap: Vec<usize> = (0..n).map(positive_of).collect();

    let (anchor_sim, positive_sim) = match fusion {
        Fusion::Concatenate => {
            let a = tape.normalize_rows(f)?;
            let b = tape.normalize_rows(z)?;
            let u = tape.concat_cols(&[a, b])?;
            let s = cosine_matrix(tape, u, tau_cc)?;
            (s, s)
        }
        Fusion::Sum => {
            let a = tape.normalize_rows(f)?;
            let b = tape.normalize_rows(z)?;
            let u = tape.add(a, b)?;
            let s = cosine_matrix(tape, u, tau_cc)?;
            (s, s)
        }
        Fusion::QuantizedOnly => {
            let s = cosine_matrix(tape, z, tau_cc)?;
            (s, s)
        }
        Fusion::Cross => (cosine_matrix(tape, f, tau_cc)?, cosine_matrix(tape, z, tau_cc)?),
    };

    // Row r of log_q: anchor r against its negatives. Row r of log_p: the
    // positive of r against the same negatives (negative sets of r and r^1
    // coincide, so a row swap lines them up).
    let log_q = tape.masked_log_softmax(anchor_sim, neg.clone())?;
    let log_p_src = if positive_sim == anchor_sim {
        log_q
    } else {
        tape.masked_log_softmax(positive_sim, neg.clone())?
    };
    let log_p = tape.permute_rows(log_p_src, swap)?;

    let mask = neg.to_matrix();
    let q = tape.exp(log_q);
    let q = tape.mul_const(q, mask.clone())?;
    let p = tape.exp(log_p);
    let p = tape.mul_const(p, mask)?;
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(log_p, log_q)?;
    let prod = tape.mul(dp, dl)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, 0.5 / n as f64))
}

/// Tape handles for every term of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub icz: Var,
    pub icf: Option<Var>,
    pub pn: Option<Var>,
    pub cd: Option<Var>,
    pub cc: Option<Var>,
    pub total: Var,
}

/// Records the weighted objective. Terms whose weight is zero are skipped.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    f: Var,
    z: Var,
    books: &[Var],
    config: &LossConfig,
    tau_sq: f64,
) -> Result<LossTerms> {
    config.validate()?;
    let icz = instance_contrastive_on_tape(tape, z, config.tau_ic)?;
    let mut total = icz;
    let mut add_weighted = |tape: &mut Tape, term: Var, w: f64| -> Result<()> {
        let scaled = tape.scale(term, w);
        total = tape.add(total, scaled)?;
        Ok(())
    };

    let pn = if config.lambda_pn > 0.0 {
        let v = part_neighbor_on_tape(tape, z, books.len(), config.neighbors, config.tau_pn)?;
        add_weighted(tape, v, config.lambda_pn)?;
        Some(v)
    } else {
        None
    };
    let cd = if config.lambda_cd > 0.0 {
        let v = codeword_diversity_on_tape(tape, f, books, config.diversity, tau_sq)?;
        add_weighted(tape, v, config.lambda_cd)?;
        Some(v)
    } else {
        None
    };
    let icf = if config.use_icf {
        let v = instance_contrastive_on_tape(tape, f, config.tau_ic)?;
        add_weighted(tape, v, 1.0)?;
        Some(v)
    } else {
        None
    };
    let cc = if config.lambda_cc > 0.0 {
        let v = consistent_contrastive_on_tape(tape, f, z, config.fusion, config.tau_cc)?;
        add_weighted(tape, v, config.lambda_cc)?;
        Some(v)
    } else {
        None
    };
    Ok(LossTerms {
        icz,
        icf,
        pn,
        cd,
        cc,
        total,
    })
}

/// Scalar values of every term; skipped terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub icz: f64,
    pub icf: f64,
    pub pn: f64,
    pub cd: f64,
    pub cc: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read(tape: &Tape, terms: &LossTerms) -> Self {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        Self {
            icz: tape.value(terms.icz).item(),
            icf: get(terms.icf),
            pn: get(terms.pn),
            cd: get(terms.cd),
            cc: get(terms.cc),
            total: tape.value(terms.total).item(),
        }
    }

    /// `icz + λ_pn·pn + λ_cd·cd + icf + λ_cc·cc`
    pub fn recombine(&self, config: &LossConfig) -> f64 {
        self.icz
            + config.lambda_pn * self.pn
            + config.lambda_cd * self.cd
            + self.icf
            + config.lambda_cc * self.cc
    }

    pub fn is_finite(&self) -> bool {
        [self.icz, self.icf, self.pn, self.cd, self.cc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &LossValues, weight: f64) {
        self.icz += weight * other.icz;
        self.icf += weight * other.icf;
        self.pn += weight * other.pn;
        self.cd += weight * other.cd;
        self.cc += weight * other.cc;
        self.total += weight * other.total;
    }
}

/// The augmented input rows of one training step; row `2i` and `2i + 1`
/// are views of the same item.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewBatch {
    inputs: RealMatrix,
}

impl TwoViewBatch {
    pub fn new(inputs: RealMatrix) -> Result<Self> {
        check_pairs(inputs.rows())?;
        Ok(Self { inputs })
    }

    pub fn inputs(&self) -> &RealMatrix {
        &self.inputs
    }

    pub fn pairs(&self) -> usize {
        self.inputs.rows() / 2
    }
}

/// Objective value and gradients for all trainable parameters.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub values: LossValues,
    /// `(weight, bias)` gradient per encoder layer.
    pub encoder_grads: Vec<(RealMatrix, RealMatrix)>,
    /// One gradient per codebook.
    pub codebook_grads: Vec<RealMatrix>,
}

/// Encodes and soft-quantizes both views, evaluates every enabled term,
/// and back-propagates into the encoder and the codebooks.
pub fn total_loss(
    batch: &TwoViewBatch,
    encoder: &EncoderParams,
    books: &CodebookSet,
    config: &LossConfig,
    tau_sq: f64,
) -> Result<LossBundle> {
    ensure!(
        encoder.embedding_dim() == books.dim(),
        Config,
        "encoder emits {} dims, codebooks cover {}",
        encoder.embedding_dim(),
        books.dim()
    );
    let mut tape = Tape::new();
    let enc_vars = encoder.register(&mut tape);
    let book_vars = books.register(&mut tape);
    let x = tape.constant(batch.inputs.clone());
    let f = encode_on_tape(&mut tape, &enc_vars, x)?;
    let (z, _) = soft_quantize_on_tape(&mut tape, f, &book_vars, tau_sq)?;
    let terms = total_loss_on_tape(&mut tape, f, z, &book_vars, config, tau_sq)?;
    let values = LossValues::read(&tape, &terms);
    let mut grads = tape.backward(terms.total)?;
    let encoder_grads = enc_vars
        .layers
        .iter()
        .map(|&(w, b)| {
            (
                grads.take_or_zeros(w, tape.shape(w)),
                grads.take_or_zeros(b, tape.shape(b)),
            )
        })
        .collect();
    let codebook_grads = book_vars
        .iter()
        .map(|&c| grads.take_or_zeros(c, tape.shape(c)))
        .collect();
    Ok(LossBundle {
        values,
        encoder_grads,
        codebook_grads,
    })
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).item())
}

pub fn instance_contrastive(reps: &RealMatrix, tau_ic: f64) -> Result<f64> {
    eval_scalar(|t| {
        let r = t.constant(reps.clone());
        instance_contrastive_on_tape(t, r, tau_ic)
    })
}

pub fn part_neighbor_loss(
    z: &RealMatrix,
    num_books: usize,
    neighbors: usize,
    tau_pn: f64,
) -> Result<f64> {
    eval_scalar(|t| {
        let zv = t.constant(z.clone());
        part_neighbor_on_tape(t, zv, num_books, neighbors, tau_pn)
    })
}

pub fn codeword_diversity(
    f: &RealMatrix,
    books: &CodebookSet,
    variant: Diversity,
    tau_sq: f64,
) -> Result<f64> {
    eval_scalar(|t| {
        let fv = t.constant(f.clone());
        let bv: Vec<Var> = books.books().iter().map(|b| t.constant(b.clone())).collect();
        codeword_diversity_on_tape(t, fv, &bv, variant, tau_sq)
    })
}

pub fn consistent_contrastive(
    f: &RealMatrix,
    z: &RealMatrix,
    fusion: Fusion,
    tau_cc: f64,
) -> Result<f64> {
    eval_scalar(|t| {
        let fv = t.constant(f.clone());
        let zv = t.constant(z.clone());
        consistent_contrastive_on_tape(t, fv, zv, fusion, tau_cc)
    })
}
