//! Compact-code database and asymmetric-distance search.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderParams};
use crate::error::{ensure, Error, Result};
use crate::numerics::{squared_distance, RealMatrix};
use crate::quantizer::{hard_assign, load_codes, save_codes, CodeLayout, CodebookSet, PackedCode};
use crate::trainer::{BOOKS_FILE, ENCODER_FILE};

pub const CODES_FILE: &str = "codes.cod";
pub const INDEX_MANIFEST_FILE: &str = "index.toml";

const ENCODE_CHUNK: usize = 1024;

/// Packed codes for a database together with the frozen codebooks that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PQIndex {
    books: CodebookSet,
    layout: CodeLayout,
    codes: Vec<PackedCode>,
    /// Unpacked sub-indices, `num_books` per item.
    indices: Vec<u32>,
    ids: Vec<u64>,
}

/// Squared distances from each query sub-vector to every codeword,
/// stored query-major as `M × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    num_books: usize,
    codewords: usize,
    entries: Vec<f64>,
}

impl DistanceTable {
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.entries[m * self.codewords + k]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_books, self.codewords)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub item_id: u64,
    pub distance: f64,
}

/// Hits in ascending distance, ties by ascending item id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.item_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexManifest {
    pub count: usize,
    pub num_books: usize,
    pub codewords: usize,
    pub sub_dim: usize,
    pub config_hash: String,
    pub ids: Vec<u64>,
}

/// Encodes and hard-quantizes `items`; item `i` gets identifier `ids[i]`.
pub fn build_index(
    encoder: &EncoderParams,
    books: &CodebookSet,
    items: &RealMatrix,
    ids: Vec<u64>,
) -> Result<PQIndex> {
    ensure!(items.rows() > 0, Config, "cannot index an empty database");
    ensure!(
        ids.len() == items.rows(),
        Dimension,
        "{} ids for {} items",
        ids.len(),
        items.rows()
    );
    let mut codes = Vec::with_capacity(items.rows());
    let all: Vec<usize> = (0..items.rows()).collect();
    for chunk in all.chunks(ENCODE_CHUNK) {
        let f = encode(encoder, &items.select_rows(chunk))?;
        codes.extend(hard_assign(&f, books)?);
    }
    PQIndex::from_codes(books.clone(), codes, ids)
}

/// Entry `(m, k)` is `‖q_m − c_{m,k}‖²`.
pub fn distance_table(query: &[f64], books: &CodebookSet) -> Result<DistanceTable> {
    ensure!(
        query.len() == books.dim(),
        Dimension,
        "query has {} dims, codebooks cover {}",
        query.len(),
        books.dim()
    );
    let (m_count, k_count, s) = (books.num_books(), books.codewords(), books.sub_dim());
    let mut entries = Vec::with_capacity(m_count * k_count);
    for m in 0..m_count {
        let qm = &query[m * s..(m + 1) * s];
        for k in 0..k_count {
            entries.push(squared_distance(qm, books.codeword(m, k)));
        }
    }
    Ok(DistanceTable {
        num_books: m_count,
        codewords: k_count,
        entries,
    })
}

fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.item_id.cmp(&b.item_id))
}

impl PQIndex {
    /// Wraps existing codes, checking every sub-index against the books.
    pub fn from_codes(books: CodebookSet, codes: Vec<PackedCode>, ids: Vec<u64>) -> Result<Self> {
        ensure!(!codes.is_empty(), Config, "cannot index an empty database");
        ensure!(
            codes.len() == ids.len(),
            Dimension,
            "{} codes for {} ids",
            codes.len(),
            ids.len()
        );
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Config(format!("duplicate item id {dup}")));
        }
        let layout = books.layout();
        let mut indices = Vec::with_capacity(codes.len() * layout.num_books);
        for (i, code) in codes.iter().enumerate() {
            ensure!(
                code.as_bytes().len() == layout.bytes_per_code(),
                CorruptCode,
                "code {i} has {} bytes, layout needs {}",
                code.as_bytes().len(),
                layout.bytes_per_code()
            );
            for (m, k) in layout.unpack(code)?.into_iter().enumerate() {
                ensure!(
                    k < layout.codewords,
                    CorruptCode,
                    "code {i}: sub-index {k} of codebook {m} exceeds {} codewords",
                    layout.codewords
                );
                indices.push(k as u32);
            }
        }
        Ok(Self {
            books,
            layout,
            codes,
            indices,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn books(&self) -> &CodebookSet {
        &self.books
    }

    pub fn layout(&self) -> CodeLayout {
        self.layout
    }

    pub fn codes(&self) -> &[PackedCode] {
        &self.codes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Sub-indices of item `i`.
    pub fn item_indices(&self, i: usize) -> Vec<usize> {
        let m = self.layout.num_books;
        self.indices[i * m..(i + 1) * m]
            .iter()
            .map(|&k| k as usize)
            .collect()
    }

    /// `Σ_m table[m, code_m]` for every item, in storage order.
    pub fn asymmetric_distances(&self, table: &DistanceTable) -> Result<Vec<f64>> {
        ensure!(
            table.shape() == (self.layout.num_books, self.layout.codewords),
            Dimension,
            "table is {:?}, index needs {:?}",
            table.shape(),
            (self.layout.num_books, self.layout.codewords)
        );
        let (m_count, k_count) = (self.layout.num_books, self.layout.codewords);
        Ok(self
            .indices
            .chunks_exact(m_count)
            .map(|code| {
                code.iter()
                    .enumerate()
                    .map(|(m, &k)| table.entries[m * k_count + k as usize])
                    .sum()
            })
            .collect())
    }

    /// The `k` nearest items; all of them when `k` exceeds the index size.
    pub fn search(&self, table: &DistanceTable, k: usize) -> Result<RetrievalResult> {
        ensure!(k >= 1, Config, "k must be at least 1");
        let mut hits: Vec<Hit> = self
            .asymmetric_distances(table)?
            .into_iter()
            .zip(&self.ids)
            .map(|(distance, &item_id)| Hit { item_id, distance })
            .collect();
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(hit_order);
        Ok(RetrievalResult { hits })
    }

    /// Searches every row of `queries` (already embedded). Results are in
    /// query order regardless of how the work is scheduled.
    pub fn search_batch(&self, queries: &RealMatrix, k: usize) -> Result<Vec<RetrievalResult>> {
        (0..queries.rows())
            .into_par_iter()
            .map(|q| {
                let table = distance_table(queries.row(q), &self.books)?;
                self.search(&table, k)
            })
            .collect()
    }

    /// Writes the encoder, codebooks, code file and manifest into `dir`.
    pub fn save(&self, dir: &Path, encoder: &EncoderParams, config_hash: &str) -> Result<()> {
        ensure!(
            encoder.embedding_dim() == self.books.dim(),
            Config,
            "encoder emits {} dims, index codebooks cover {}",
            encoder.embedding_dim(),
            self.books.dim()
        );
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        encoder.save(&dir.join(ENCODER_FILE))?;
        self.books.save(&dir.join(BOOKS_FILE))?;
        save_codes(&dir.join(CODES_FILE), self.layout, &self.codes)?;
        let manifest = IndexManifest {
            count: self.len(),
            num_books: self.layout.num_books,
            codewords: self.layout.codewords,
            sub_dim: self.books.sub_dim(),
            config_hash: config_hash.to_string(),
            ids: self.ids.clone(),
        };
        let path = dir.join(INDEX_MANIFEST_FILE);
        let text = toml::to_string(&manifest).expect("manifest is representable as TOML");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Loads an index directory written by [`PQIndex::save`].
pub fn open_index(dir: &Path) -> Result<(PQIndex, EncoderParams, IndexManifest)> {
    let path = dir.join(INDEX_MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: IndexManifest =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let encoder = EncoderParams::load(&dir.join(ENCODER_FILE))?;
    let books = CodebookSet::load(&dir.join(BOOKS_FILE))?;
    let (layout, codes) = load_codes(&dir.join(CODES_FILE))?;
    ensure!(
        layout == books.layout()
            && manifest.count == codes.len()
            && manifest.num_books == layout.num_books
            && manifest.codewords == layout.codewords
            && manifest.sub_dim == books.sub_dim(),
        Config,
        "{}: manifest, codebooks and code file disagree",
        dir.display()
    );
    ensure!(
        encoder.embedding_dim() == books.dim(),
        Config,
        "{}: encoder emits {} dims, codebooks cover {}",
        dir.display(),
        encoder.embedding_dim(),
        books.dim()
    );
    let index = PQIndex::from_codes(books, codes, manifest.ids.clone())?;
    Ok((index, encoder, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, DenseLayer, EncoderConfig};
    use crate::quantizer::reconstruct;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A two-layer rectifier network that returns its input unchanged:
    /// `relu(x) - relu(-x) = x`.
    fn identity_encoder(dim: usize) -> EncoderParams {
        let mut w1 = RealMatrix::zeros(dim, 2 * dim);
        let mut w2 = RealMatrix::zeros(2 * dim, dim);
        for i in 0..dim {
            w1.set(i, i, 1.0);
            w1.set(i, dim + i, -1.0);
            w2.set(i, i, 1.0);
            w2.set(dim + i, i, -1.0);
        }
        EncoderParams {
            layers: vec![
                DenseLayer {
                    weight: w1,
                    bias: RealMatrix::zeros(1, 2 * dim),
                },
                DenseLayer {
                    weight: w2,
                    bias: RealMatrix::zeros(1, dim),
                },
            ],
        }
    }

    fn random_rows(rows: usize, cols: usize, seed: u64) -> RealMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        RealMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn grid_items(books: &CodebookSet, n: usize, seed: u64) -> (RealMatrix, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut picks = Vec::new();
        for _ in 0..n {
            let idx: Vec<usize> = (0..books.num_books())
                .map(|_| rng.random_range(0..books.codewords()))
                .collect();
            let mut row = Vec::new();
            for (m, &k) in idx.iter().enumerate() {
                row.extend_from_slice(books.codeword(m, k));
            }
            rows.push(row);
            picks.push(idx);
        }
        (RealMatrix::from_rows(&rows).unwrap(), picks)
    }

    #[test]
    fn grid_vectors_get_exact_codes() {
        let books = CodebookSet::random(4, 8, 3, 1).unwrap();
        let (items, picks) = grid_items(&books, 50, 2);
        let index = build_index(&identity_encoder(12), &books, &items, (0..50).collect()).unwrap();
        for (i, pick) in picks.iter().enumerate() {
            assert_eq!(&index.item_indices(i), pick);
            let r = reconstruct(&index.codes()[i], &books).unwrap();
            assert_eq!(r.row(0), items.row(i));
        }
    }

    #[test]
    fn empty_database_is_rejected() {
        let books = CodebookSet::random(2, 4, 2, 1).unwrap();
        let err = build_index(&identity_encoder(4), &books, &RealMatrix::zeros(0, 4), vec![]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let books = CodebookSet::random(2, 4, 2, 1).unwrap();
        let err = build_index(&identity_encoder(4), &books, &random_rows(2, 4, 1), vec![3, 3]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn rebuild_gives_identical_files_of_expected_size() {
        let cfg = EncoderConfig {
            input_dim: 16,
            hidden_dims: vec![32],
            embedding_dim: 32,
        };
        let enc = init_encoder(&cfg, 4).unwrap();
        let books = CodebookSet::random(8, 16, 4, 5).unwrap();
        let items = random_rows(1000, 16, 6);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            build_index(&enc, &books, &items, (0..1000).collect())
                .unwrap()
                .save(d.path(), &enc, "abc")
                .unwrap();
        }
        let a = fs::read(dirs[0].path().join(CODES_FILE)).unwrap();
        let b = fs::read(dirs[1].path().join(CODES_FILE)).unwrap();
        assert_eq!(a, b);
        // 8-byte magic and three u32 counts, then 8·4 bits per item
        assert_eq!(a.len(), 20 + 1000 * 4);

        let (index, enc2, manifest) = open_index(dirs[0].path()).unwrap();
        assert_eq!(enc2, enc);
        assert_eq!(manifest.count, 1000);
        assert_eq!(manifest.config_hash, "abc");
        assert_eq!(index, build_index(&enc, &books, &items, (0..1000).collect()).unwrap());
    }

    #[test]
    fn open_reports_bad_code_file_magic() {
        let books = CodebookSet::random(2, 4, 2, 1).unwrap();
        let enc = identity_encoder(4);
        let d = tempfile::tempdir().unwrap();
        build_index(&enc, &books, &random_rows(5, 4, 1), (0..5).collect())
            .unwrap()
            .save(d.path(), &enc, "")
            .unwrap();
        let path = d.path().join(CODES_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        match open_index(d.path()) {
            Err(Error::Format { path: p, offset, .. }) => {
                assert_eq!(p, path);
                assert_eq!(offset, 0);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn table_entries_match_formula() {
        let books = CodebookSet::random(8, 16, 4, 9).unwrap();
        let q = random_rows(1, 32, 10);
        let t = distance_table(q.row(0), &books).unwrap();
        assert_eq!(t.shape(), (8, 16));
        for m in 0..8 {
            for k in 0..16 {
                let mut d = 0.0;
                for j in 0..4 {
                    d += (q.get(0, m * 4 + j) - books.codeword(m, k)[j]).powi(2);
                }
                assert!((t.get(m, k) - d).abs() < 1e-12);
                assert!(t.get(m, k) >= 0.0);
            }
        }
    }

    #[test]
    fn codeword_query_hits_zero_per_book() {
        let books = CodebookSet::random(4, 8, 3, 3).unwrap();
        let (items, picks) = grid_items(&books, 1, 4);
        let t = distance_table(items.row(0), &books).unwrap();
        for (m, &k) in picks[0].iter().enumerate() {
            assert_eq!(t.get(m, k), 0.0);
        }
    }

    #[test]
    fn zero_query_on_unit_codewords_gives_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let books: Vec<RealMatrix> = (0..3)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..4)
                    .map(|_| {
                        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let n = crate::numerics::norm(&v);
                        v.iter().map(|x| x / n).collect()
                    })
                    .collect();
                RealMatrix::from_rows(&rows).unwrap()
            })
            .collect();
        let books = CodebookSet::from_books(books).unwrap();
        let t = distance_table(&[0.0; 15], &books).unwrap();
        assert!(t.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn exhaustive_search_and_perfect_match() {
        let books = CodebookSet::random(4, 8, 3, 3).unwrap();
        let (items, _) = grid_items(&books, 40, 8);
        let ids: Vec<u64> = (100..140).collect();
        let index = build_index(&identity_encoder(12), &books, &items, ids).unwrap();
        let t = distance_table(items.row(17), &books).unwrap();
        let res = index.search(&t, 40).unwrap();
        assert_eq!(res.hits.len(), 40);
        assert_eq!(res.hits[0].distance, 0.0);
        assert!(res.hits.iter().take_while(|h| h.distance == 0.0).any(|h| h.item_id == 117));
        for h in &res.hits {
            let i = (h.item_id - 100) as usize;
            let direct: f64 = index
                .item_indices(i)
                .iter()
                .enumerate()
                .map(|(m, &k)| t.get(m, k))
                .sum();
            assert_eq!(h.distance, direct);
        }
        for w in res.hits.windows(2) {
            assert!(hit_order(&w[0], &w[1]) == Ordering::Less);
        }
        assert_eq!(index.search(&t, 1000).unwrap(), res);
        assert_eq!(index.search(&t, 5).unwrap().hits, res.hits[..5]);
        assert!(index.search(&t, 0).is_err());
    }

    #[test]
    fn adc_equals_reconstruction_distance() {
        let books = CodebookSet::random(8, 16, 4, 21).unwrap();
        let items = random_rows(500, 32, 22);
        let queries = random_rows(20, 32, 23);
        let index = build_index(&identity_encoder(32), &books, &items, (0..500).collect()).unwrap();
        for q in 0..20 {
            let t = distance_table(queries.row(q), &books).unwrap();
            let res = index.search(&t, 500).unwrap();
            for h in &res.hits {
                let r = reconstruct(&index.codes()[h.item_id as usize], &books).unwrap();
                let d = squared_distance(queries.row(q), r.row(0));
                assert!((h.distance - d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicate_of_top_hit_is_adjacent() {
        let books = CodebookSet::random(4, 8, 3, 31).unwrap();
        let items = random_rows(60, 12, 32);
        let q = random_rows(1, 12, 33);
        let enc = identity_encoder(12);
        let index = build_index(&enc, &books, &items, (0..60).collect()).unwrap();
        let t = distance_table(q.row(0), &books).unwrap();
        let top = index.search(&t, 1).unwrap().hits[0];
        let mut rows: Vec<Vec<f64>> = items.iter_rows().map(<[f64]>::to_vec).collect();
        rows.push(items.row(top.item_id as usize).to_vec());
        let bigger = build_index(&enc, &books, &RealMatrix::from_rows(&rows).unwrap(), (0..61).collect())
            .unwrap();
        let res = bigger.search(&t, 61).unwrap();
        let a = res.hits.iter().position(|h| h.item_id == top.item_id).unwrap();
        let b = res.hits.iter().position(|h| h.item_id == 60).unwrap();
        assert_eq!(b, a + 1);
        assert_eq!(res.hits[a].distance, res.hits[b].distance);
    }

    #[test]
    fn batch_search_is_schedule_independent() {
        let books = CodebookSet::random(4, 4, 2, 41).unwrap();
        let items = random_rows(200, 8, 42);
        let queries = random_rows(30, 8, 43);
        let index = build_index(&identity_encoder(8), &books, &items, (0..200).collect()).unwrap();
        let serial: Vec<RetrievalResult> = (0..30)
            .map(|q| index.search(&distance_table(queries.row(q), &books).unwrap(), 25).unwrap())
            .collect();
        for threads in [1, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let batch = pool.install(|| index.search_batch(&queries, 25)).unwrap();
            assert_eq!(batch, serial);
        }
    }

    #[test]
    fn corrupt_codes_are_rejected() {
        let books = CodebookSet::random(2, 4, 2, 1).unwrap();
        let err = PQIndex::from_codes(books, vec![PackedCode::from_bytes(vec![0, 0])], vec![0]);
        assert!(matches!(err, Err(Error::CorruptCode(_))));
    }
}
