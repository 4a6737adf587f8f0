//! Product-quantization head: `M` codebooks of `K` codewords each.
//!
//! Training uses the soft assignment (a temperature softmax over negative
//! squared distances, then a probability-weighted sum of codewords).
//! Indexing uses the hard assignment, packed to `M·log2(K)` bits.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{to_u32, Reader, Writer};
use crate::error::{ensure, Error, Result};
use crate::numerics::{squared_distance, RealMatrix, Tape, Var};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"SSCQPQ1\0";
pub const CODE_FILE_MAGIC: &[u8; 8] = b"SSCQCOD1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    /// Number of codebooks `M`.
    pub num_books: usize,
    /// Codewords per codebook `K`; a power of two.
    pub codewords: usize,
    /// Soft-quantization temperature.
    pub tau_sq: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            num_books: 8,
            codewords: 16,
            tau_sq: 0.2,
        }
    }
}

impl QuantizerConfig {
    /// Validates against the embedding width and returns the sub-space width.
    pub fn sub_dim(&self, embedding_dim: usize) -> Result<usize> {
        ensure!(self.num_books > 0, Config, "need at least one codebook");
        ensure!(
            embedding_dim % self.num_books == 0,
            Config,
            "embedding dim {embedding_dim} is not divisible by {} codebooks",
            self.num_books
        );
        ensure!(
            self.codewords.is_power_of_two(),
            Config,
            "codewords per book must be a power of two, got {}",
            self.codewords
        );
        ensure!(
            self.tau_sq > 0.0,
            Config,
            "tau_sq must be positive, got {}",
            self.tau_sq
        );
        Ok(embedding_dim / self.num_books)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    sub_dim: usize,
    codewords: usize,
    /// One `K x sub_dim` matrix per codebook.
    books: Vec<RealMatrix>,
}

impl CodebookSet {
    pub fn from_books(books: Vec<RealMatrix>) -> Result<Self> {
        ensure!(!books.is_empty(), Config, "need at least one codebook");
        let (k, sub_dim) = books[0].shape();
        ensure!(
            k.is_power_of_two(),
            Config,
            "codewords per book must be a power of two, got {k}"
        );
        ensure!(sub_dim > 0, Config, "codewords must have positive width");
        for (m, b) in books.iter().enumerate() {
            ensure!(
                b.shape() == (k, sub_dim),
                Dimension,
                "codebook {m} is {:?}, expected {:?}",
                b.shape(),
                (k, sub_dim)
            );
            ensure!(b.is_finite(), Numeric, "codebook {m} has non-finite values");
        }
        Ok(Self {
            sub_dim,
            codewords: k,
            books,
        })
    }

    /// Codewords drawn from N(0, 1/sub_dim), deterministic per seed.
    pub fn random(num_books: usize, codewords: usize, sub_dim: usize, seed: u64) -> Result<Self> {
        ensure!(sub_dim > 0, Config, "codewords must have positive width");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (sub_dim as f64).sqrt()).expect("valid std");
        let books = (0..num_books)
            .map(|_| {
                let data = (0..codewords * sub_dim).map(|_| normal.sample(&mut rng)).collect();
                RealMatrix::from_vec(codewords, sub_dim, data).expect("shape")
            })
            .collect();
        Self::from_books(books)
    }

    pub fn num_books(&self) -> usize {
        self.books.len()
    }

    pub fn codewords(&self) -> usize {
        self.codewords
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn dim(&self) -> usize {
        self.sub_dim * self.books.len()
    }

    pub fn book(&self, m: usize) -> &RealMatrix {
        &self.books[m]
    }

    pub fn books(&self) -> &[RealMatrix] {
        &self.books
    }

    pub fn codeword(&self, m: usize, k: usize) -> &[f64] {
        self.books[m].row(k)
    }

    pub(crate) fn books_mut(&mut self) -> &mut [RealMatrix] {
        &mut self.books
    }

    pub fn layout(&self) -> CodeLayout {
        CodeLayout::new(self.num_books(), self.codewords).expect("validated at construction")
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.books.iter().map(|b| tape.param(b.clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.bytes(CODEBOOK_MAGIC);
        w.u32(to_u32(self.num_books(), "M")?);
        w.u32(to_u32(self.codewords, "K")?);
        w.u32(to_u32(self.sub_dim, "sub_dim")?);
        for b in &self.books {
            w.f64s(b.as_slice());
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.expect_magic(CODEBOOK_MAGIC)?;
        let at = r.offset();
        let m = r.u32("M")? as usize;
        let k = r.u32("K")? as usize;
        let sub_dim = r.u32("sub_dim")? as usize;
        if m == 0 || sub_dim == 0 || !k.is_power_of_two() {
            return Err(r.error_at(
                at,
                format!("invalid codebook header M={m} K={k} sub_dim={sub_dim}"),
            ));
        }
        let mut books = Vec::with_capacity(m);
        for _ in 0..m {
            books.push(RealMatrix::from_vec(k, sub_dim, r.f64s(k * sub_dim, "codewords")?)?);
        }
        r.finish()?;
        Self::from_books(books)
    }
}

/// Soft assignment probabilities; `probs[m]` is `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub probs: Vec<RealMatrix>,
    pub tau_sq: f64,
}

fn check_embedding(f_cols: usize, books: &CodebookSet) -> Result<()> {
    ensure!(
        f_cols == books.dim(),
        Dimension,
        "embedding has {f_cols} columns, codebooks expect {}",
        books.dim()
    );
    Ok(())
}

/// Records soft quantization of `f` against the codebook variables `books`
/// on `tape`. Returns `z` and the per-codebook probability matrices.
pub fn soft_quantize_on_tape(
    tape: &mut Tape,
    f: Var,
    books: &[Var],
    tau_sq: f64,
) -> Result<(Var, Vec<Var>)> {
    ensure!(tau_sq > 0.0, Config, "tau_sq must be positive, got {tau_sq}");
    let sub_dim = tape.shape(books[0]).1;
    ensure!(
        tape.shape(f).1 == sub_dim * books.len(),
        Dimension,
        "embedding has {} columns, codebooks expect {}",
        tape.shape(f).1,
        sub_dim * books.len()
    );
    let mut parts = Vec::with_capacity(books.len());
    let mut probs = Vec::with_capacity(books.len());
    for (m, &c) in books.iter().enumerate() {
        let fm = tape.slice_cols(f, m * sub_dim, sub_dim)?;
        let d = tape.sq_dist(fm, c)?;
        let logits = tape.scale(d, -1.0 / tau_sq);
        let p = tape.softmax_rows(logits);
        parts.push(tape.matmul(p, c)?);
        probs.push(p);
    }
    let z = tape.concat_cols(&parts)?;
    Ok((z, probs))
}

/// Soft quantization of every row of `f`.
pub fn soft_quantize(
    f: &RealMatrix,
    books: &CodebookSet,
    tau_sq: f64,
) -> Result<(RealMatrix, SoftAssignment)> {
    check_embedding(f.cols(), books)?;
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let cv: Vec<Var> = books.books().iter().map(|b| tape.constant(b.clone())).collect();
    let (z, probs) = soft_quantize_on_tape(&mut tape, fv, &cv, tau_sq)?;
    let assignment = SoftAssignment {
        probs: probs.iter().map(|&p| tape.value(p).clone()).collect(),
        tau_sq,
    };
    Ok((tape.value(z).clone(), assignment))
}

/// Nearest codeword index per codebook; ties go to the lowest index.
pub fn assign_indices(f_row: &[f64], books: &CodebookSet) -> Vec<usize> {
    let s = books.sub_dim();
    (0..books.num_books())
        .map(|m| {
            let fm = &f_row[m * s..(m + 1) * s];
            let book = books.book(m);
            let mut best = (0, f64::INFINITY);
            for k in 0..books.codewords() {
                let d = squared_distance(fm, book.row(k));
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

/// Hard-quantizes and packs every row of `f`.
pub fn hard_assign(f: &RealMatrix, books: &CodebookSet) -> Result<Vec<PackedCode>> {
    check_embedding(f.cols(), books)?;
    let layout = books.layout();
    f.iter_rows()
        .map(|row| layout.pack(&assign_indices(row, books)))
        .collect()
}

/// Concatenation of the codewords a code points at.
pub fn reconstruct(code: &PackedCode, books: &CodebookSet) -> Result<RealMatrix> {
    let indices = books.layout().unpack(code)?;
    reconstruct_indices(&indices, books)
}

pub fn reconstruct_indices(indices: &[usize], books: &CodebookSet) -> Result<RealMatrix> {
    ensure!(
        indices.len() == books.num_books(),
        CorruptCode,
        "{} sub-indices for {} codebooks",
        indices.len(),
        books.num_books()
    );
    let mut out = Vec::with_capacity(books.dim());
    for (m, &k) in indices.iter().enumerate() {
        if k >= books.codewords() {
            return Err(Error::CorruptCode(format!(
                "sub-index {k} of codebook {m} exceeds {} codewords",
                books.codewords()
            )));
        }
        out.extend_from_slice(books.codeword(m, k));
    }
    RealMatrix::from_vec(1, books.dim(), out)
}

/// Bit layout of a packed code: sub-index `m` occupies bit positions
/// `[m·b, (m+1)·b)` with `b = log2(K)`, least significant bit first, and
/// bit position `p` lives in byte `p / 8` at bit `p % 8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodeLayout {
    pub num_books: usize,
    pub codewords: usize,
    pub bits_per_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedCode {
    bytes: Vec<u8>,
}

impl PackedCode {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

impl CodeLayout {
    pub fn new(num_books: usize, codewords: usize) -> Result<Self> {
        ensure!(
            codewords.is_power_of_two() && codewords <= 1 << 16,
            Config,
            "codewords per book must be a power of two up to 65536, got {codewords}"
        );
        Ok(Self {
            num_books,
            codewords,
            bits_per_index: codewords.trailing_zeros(),
        })
    }

    /// Code length `L` in bits.
    pub fn bits(&self) -> usize {
        self.num_books * self.bits_per_index as usize
    }

    pub fn bytes_per_code(&self) -> usize {
        self.bits().div_ceil(8)
    }

    pub fn pack(&self, indices: &[usize]) -> Result<PackedCode> {
        ensure!(
            indices.len() == self.num_books,
            CorruptCode,
            "{} sub-indices for {} codebooks",
            indices.len(),
            self.num_books
        );
        let b = self.bits_per_index as usize;
        let mut bytes = vec![0u8; self.bytes_per_code()];
        for (m, &idx) in indices.iter().enumerate() {
            ensure!(
                idx < self.codewords,
                CorruptCode,
                "sub-index {idx} of codebook {m} exceeds {} codewords",
                self.codewords
            );
            for bit in 0..b {
                if (idx >> bit) & 1 == 1 {
                    let p = m * b + bit;
                    bytes[p / 8] |= 1 << (p % 8);
                }
            }
        }
        Ok(PackedCode { bytes })
    }

    pub fn unpack(&self, code: &PackedCode) -> Result<Vec<usize>> {
        ensure!(
            code.bytes.len() == self.bytes_per_code(),
            CorruptCode,
            "code of {} bytes, layout needs {}",
            code.bytes.len(),
            self.bytes_per_code()
        );
        let b = self.bits_per_index as usize;
        Ok((0..self.num_books)
            .map(|m| {
                (0..b).fold(0usize, |acc, bit| {
                    let p = m * b + bit;
                    acc | ((((code.bytes[p / 8] >> (p % 8)) & 1) as usize) << bit)
                })
            })
            .collect())
    }
}

/// Writes codes in the code-file format: magic, `(count, M, K)` as u32,
/// then `ceil(L/8)` bytes per item.
pub fn save_codes(path: &Path, layout: CodeLayout, codes: &[PackedCode]) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(CODE_FILE_MAGIC);
    w.u32(to_u32(codes.len(), "item count")?);
    w.u32(to_u32(layout.num_books, "M")?);
    w.u32(to_u32(layout.codewords, "K")?);
    for c in codes {
        debug_assert_eq!(c.bytes.len(), layout.bytes_per_code());
        w.bytes(&c.bytes);
    }
    w.save(path)
}

pub fn load_codes(path: &Path) -> Result<(CodeLayout, Vec<PackedCode>)> {
    let mut r = Reader::open(path)?;
    r.expect_magic(CODE_FILE_MAGIC)?;
    let count = r.u32("item count")? as usize;
    let at = r.offset();
    let m = r.u32("M")? as usize;
    let k = r.u32("K")? as usize;
    let layout = CodeLayout::new(m, k).map_err(|e| r.error_at(at, e.to_string()))?;
    let mut codes = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let code = PackedCode {
            bytes: r.take(layout.bytes_per_code(), "code")?.to_vec(),
        };
        for (m, idx) in layout.unpack(&code)?.into_iter().enumerate() {
            if idx >= k {
                return Err(r.error_at(at, format!("sub-index {idx} of codebook {m} >= {k}")));
            }
        }
        codes.push(code);
    }
    r.finish()?;
    Ok((layout, codes))
}
