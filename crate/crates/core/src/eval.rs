//! Retrieval metrics: mAP@R, precision@k and precision-recall curves.
//!
//! A database item is relevant to a query when their label sets intersect.
//! AP@R divides by the number of relevant items found within the top R, and
//! a query with no hit in the top R scores 0.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{encode, EncoderParams};
use crate::error::{ensure, Error, Result};
use crate::index::PQIndex;
use crate::numerics::RealMatrix;

/// Recall levels of the reported precision-recall curve.
pub const PR_GRID_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Rank cutoff `R` for mAP.
    pub cutoff: usize,
    pub ks: Vec<usize>,
    /// Worker threads for per-query work; 0 uses the global pool.
    pub threads: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            cutoff: 100,
            ks: vec![1, 10, 50, 100],
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cutoff: usize,
    pub map_at_r: f64,
    pub precision_at_k: Vec<(usize, f64)>,
    /// `(recall, precision)` on the grid `0.05, 0.10, …, 1.0`.
    pub pr_curve: Vec<(f64, f64)>,
    pub per_query_ap: Vec<f64>,
}

pub fn is_match(query_labels: &[u32], item_labels: &[u32]) -> Result<bool> {
    ensure!(
        !query_labels.is_empty(),
        Evaluation,
        "query has no labels"
    );
    Ok(query_labels.iter().any(|l| item_labels.contains(l)))
}

/// Average precision over the first `cutoff` ranks.
pub fn average_precision(relevance: &[bool], cutoff: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in relevance
        .iter()
        .take(cutoff)
        .enumerate()
        .filter(|(_, &r)| r)
    {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Fraction of relevant items among the first `k` ranks (or the whole
/// ranking when it is shorter than `k`).
pub fn precision_at(relevance: &[bool], k: usize) -> f64 {
    let n = k.min(relevance.len());
    if n == 0 {
        return 0.0;
    }
    relevance[..n].iter().filter(|&&r| r).count() as f64 / n as f64
}

/// `(recall, precision)` after every rank; empty when nothing is relevant.
pub fn pr_points(relevance: &[bool]) -> Vec<(f64, f64)> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return Vec::new();
    }
    let mut hits = 0usize;
    relevance
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            hits += r as usize;
            (hits as f64 / total as f64, hits as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Precision at the first rank whose recall reaches each grid level.
fn pr_on_grid(relevance: &[bool]) -> Option<Vec<f64>> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut out = Vec::with_capacity(PR_GRID_STEPS);
    let mut hits = 0usize;
    let mut rank = 0usize;
    for j in 1..=PR_GRID_STEPS {
        // recall >= j/20, compared in integers
        while hits * PR_GRID_STEPS < j * total {
            hits += relevance[rank] as usize;
            rank += 1;
        }
        out.push(hits as f64 / rank as f64);
    }
    Some(out)
}

/// Aggregates full per-query relevance rankings into a report. The mean is
/// taken in query order.
pub fn report_from_relevance(rankings: &[Vec<bool>], settings: &EvalSettings) -> Result<EvalReport> {
    ensure!(!rankings.is_empty(), Config, "no queries to evaluate");
    ensure!(settings.cutoff >= 1, Config, "cutoff must be at least 1");
    let n = rankings.len() as f64;
    let per_query_ap: Vec<f64> = rankings
        .iter()
        .map(|r| average_precision(r, settings.cutoff))
        .collect();
    let map_at_r = per_query_ap.iter().sum::<f64>() / n;
    let precision_at_k = settings
        .ks
        .iter()
        .map(|&k| (k, rankings.iter().map(|r| precision_at(r, k)).sum::<f64>() / n))
        .collect();
    let mut grid_sum = vec![0.0; PR_GRID_STEPS];
    let mut counted = 0usize;
    for r in rankings {
        if let Some(p) = pr_on_grid(r) {
            counted += 1;
            grid_sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
    }
    let pr_curve = grid_sum
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let recall = (j + 1) as f64 / PR_GRID_STEPS as f64;
            (recall, if counted == 0 { 0.0 } else { s / counted as f64 })
        })
        .collect();
    Ok(EvalReport {
        cutoff: settings.cutoff,
        map_at_r,
        precision_at_k,
        pr_curve,
        per_query_ap,
    })
}

fn with_threads<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(job))
}

/// Ranks the whole index for each embedded query and scores the rankings.
/// `item_labels` maps an index item id to its label set.
pub fn evaluate_embeddings<'a, F>(
    index: &PQIndex,
    queries: &RealMatrix,
    query_labels: &[&[u32]],
    item_labels: F,
    settings: &EvalSettings,
) -> Result<EvalReport>
where
    F: Fn(u64) -> Option<&'a [u32]> + Sync,
{
    ensure!(queries.rows() > 0, Config, "no queries to evaluate");
    ensure!(
        query_labels.len() == queries.rows(),
        Dimension,
        "{} label sets for {} queries",
        query_labels.len(),
        queries.rows()
    );
    let rankings: Result<Vec<Vec<bool>>> = with_threads(settings.threads, || {
        let results = index.search_batch(queries, index.len())?;
        results
            .par_iter()
            .zip(query_labels.par_iter())
            .map(|(res, q)| {
                res.hits
                    .iter()
                    .map(|h| {
                        let labels = item_labels(h.item_id).ok_or_else(|| {
                            Error::Evaluation(format!("no labels for database item {}", h.item_id))
                        })?;
                        is_match(q, labels)
                    })
                    .collect()
            })
            .collect()
    })?;
    report_from_relevance(&rankings?, settings)
}

/// Evaluates `query_indices` of `dataset` against an index whose item ids
/// are indices into the same dataset.
pub fn evaluate(
    index: &PQIndex,
    encoder: &EncoderParams,
    dataset: &Dataset,
    query_indices: &[usize],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    ensure!(!query_indices.is_empty(), Config, "no queries to evaluate");
    let queries = encode(encoder, &dataset.matrix(query_indices))?;
    let labels: Vec<&[u32]> = query_indices.iter().map(|&i| dataset.labels(i)).collect();
    evaluate_embeddings(
        index,
        &queries,
        &labels,
        |id| {
            usize::try_from(id)
                .ok()
                .filter(|&i| i < dataset.len())
                .map(|i| dataset.labels(i))
        },
        settings,
    )
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "queries        {}", self.per_query_ap.len());
        let _ = writeln!(s, "mAP@{:<10} {:.4}", self.cutoff, self.map_at_r);
        for (k, p) in &self.precision_at_k {
            let _ = writeln!(s, "P@{:<12} {:.4}", k, p);
        }
        s
    }

    /// Writes `map.csv`, `p_at_k.csv`, `pr_curve.csv` and `summary.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put("map.csv", format!("cutoff,map\n{},{}\n", self.cutoff, self.map_at_r))?;
        let mut p = String::from("k,precision\n");
        for (k, v) in &self.precision_at_k {
            let _ = writeln!(p, "{k},{v}");
        }
        put("p_at_k.csv", p)?;
        let mut pr = String::from("recall,precision\n");
        for (r, v) in &self.pr_curve {
            let _ = writeln!(pr, "{r},{v}");
        }
        put("pr_curve.csv", pr)?;
        put("summary.txt", self.summary())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{CodebookSet, PackedCode};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn match_rule() {
        assert!(is_match(&[1, 3], &[3, 7]).unwrap());
        assert!(!is_match(&[1], &[2]).unwrap());
        assert!(!is_match(&[1, 2], &[]).unwrap());
        assert!(matches!(is_match(&[], &[1]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[true, true, true], 3), 1.0);
        assert_eq!(average_precision(&[false, false], 2), 0.0);
        let ap = average_precision(&[true, false, true], 3);
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn ap_ignores_ranks_beyond_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut r: Vec<bool> = (0..40).map(|_| rng.random_bool(0.3)).collect();
            let before = average_precision(&r, 10);
            for v in &mut r[10..] {
                *v = rng.random_bool(0.5);
            }
            assert_eq!(average_precision(&r, 10), before);
        }
    }

    #[test]
    fn precision_and_pr_points() {
        let r = [true, false, true, false, false];
        assert_eq!(precision_at(&r, 1), 1.0);
        assert_eq!(precision_at(&r, 4), 0.5);
        assert_eq!(precision_at(&r, 50), 0.4);
        let pts = pr_points(&r);
        assert_eq!(pts.len(), 5);
        assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0));
        // consuming the full ranking ends at recall 1 and precision T/N
        assert_eq!(*pts.last().unwrap(), (1.0, 2.0 / 5.0));
        assert!(pr_points(&[false, false]).is_empty());
    }

    #[test]
    fn report_aggregates_in_order() {
        let rankings = vec![
            vec![true, false, true, false],
            vec![false, true, false, false],
            vec![false, false, false, false],
        ];
        let s = EvalSettings {
            cutoff: 3,
            ks: vec![1, 2],
            threads: 0,
        };
        let rep = report_from_relevance(&rankings, &s).unwrap();
        let expect = [0.5 * (1.0 + 2.0 / 3.0), 0.5, 0.0];
        assert_eq!(rep.per_query_ap, expect);
        assert_eq!(rep.map_at_r, expect.iter().sum::<f64>() / 3.0);
        assert_eq!(rep.precision_at_k, vec![(1, 1.0 / 3.0), (2, 1.0 / 3.0)]);
        assert_eq!(rep.pr_curve.len(), PR_GRID_STEPS);
        assert!((rep.pr_curve[0].0 - 0.05).abs() < 1e-15);
        assert_eq!(rep.pr_curve.last().unwrap().0, 1.0);
        // query 1: recall 0.5 at rank 1, 1.0 at rank 3; query 2: 1.0 at rank 2
        assert_eq!(rep.pr_curve[9].1, 0.5 * (1.0 + 0.5));
        assert_eq!(rep.pr_curve[19].1, 0.5 * (2.0 / 3.0 + 0.5));
        for (r, p) in &rep.pr_curve {
            assert!((0.0..=1.0).contains(r) && (0.0..=1.0).contains(p));
        }
        assert!(report_from_relevance(&[], &s).is_err());
    }

    fn two_book_index(codes: &[[usize; 2]]) -> PQIndex {
        let books = CodebookSet::random(2, 4, 2, 7).unwrap();
        let layout = books.layout();
        let packed: Vec<PackedCode> = codes.iter().map(|c| layout.pack(c).unwrap()).collect();
        PQIndex::from_codes(books, packed, (0..codes.len() as u64).collect()).unwrap()
    }

    #[test]
    fn planted_duplicates_give_perfect_map_at_one() {
        let codes: Vec<[usize; 2]> = (0..16).map(|i| [i % 4, i / 4]).collect();
        let index = two_book_index(&codes);
        let mut rows = Vec::new();
        for c in &codes {
            let mut row = index.books().codeword(0, c[0]).to_vec();
            row.extend_from_slice(index.books().codeword(1, c[1]));
            rows.push(row);
        }
        let queries = RealMatrix::from_rows(&rows).unwrap();
        let labels: Vec<Vec<u32>> = (0..16).map(|i| vec![i]).collect();
        let qlabels: Vec<&[u32]> = labels.iter().map(Vec::as_slice).collect();
        let s = EvalSettings {
            cutoff: 1,
            ks: vec![1],
            threads: 2,
        };
        let rep = evaluate_embeddings(
            &index,
            &queries,
            &qlabels,
            |id| labels.get(id as usize).map(Vec::as_slice),
            &s,
        )
        .unwrap();
        assert_eq!(rep.map_at_r, 1.0);
        assert_eq!(rep.precision_at_k, vec![(1, 1.0)]);
    }

    #[test]
    fn missing_item_labels_are_reported() {
        let index = two_book_index(&[[0, 0], [1, 1]]);
        let q = RealMatrix::zeros(1, 4);
        let err = evaluate_embeddings(&index, &q, &[&[1]], |_| None, &EvalSettings::default());
        assert!(matches!(err, Err(Error::Evaluation(_))));
        let err = evaluate_embeddings(&index, &q, &[&[]], |_| Some(&[1][..]), &EvalSettings::default());
        assert!(matches!(err, Err(Error::Evaluation(_))));
    }

    /// Random codes on balanced 10-class labels score like a random
    /// permutation of the database.
    #[test]
    fn random_codes_score_at_chance() {
        let classes = 10u32;
        let n_db = 1000;
        let n_q = 100;
        let cutoff = 100;
        let db_labels: Vec<Vec<u32>> = (0..n_db).map(|i| vec![i as u32 % classes]).collect();
        let q_labels: Vec<Vec<u32>> = (0..n_q).map(|i| vec![i as u32 % classes]).collect();
        let qref: Vec<&[u32]> = q_labels.iter().map(Vec::as_slice).collect();

        // permutation oracle
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut chance = 0.0;
        let trials = 2000;
        for t in 0..trials {
            let mut order: Vec<usize> = (0..n_db).collect();
            order.shuffle(&mut rng);
            let q = t as u32 % classes;
            let rel: Vec<bool> = order.iter().map(|&i| db_labels[i][0] == q).collect();
            chance += average_precision(&rel, cutoff) / trials as f64;
        }

        let mut maps = Vec::new();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let books = CodebookSet::random(8, 16, 2, seed).unwrap();
            let layout = books.layout();
            let codes: Vec<PackedCode> = (0..n_db)
                .map(|_| {
                    let idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..16)).collect();
                    layout.pack(&idx).unwrap()
                })
                .collect();
            let index = PQIndex::from_codes(books, codes, (0..n_db as u64).collect()).unwrap();
            let data: Vec<f64> = (0..n_q * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let queries = RealMatrix::from_vec(n_q, 16, data).unwrap();
            let s = EvalSettings {
                cutoff,
                ..EvalSettings::default()
            };
            let rep = evaluate_embeddings(
                &index,
                &queries,
                &qref,
                |id| db_labels.get(id as usize).map(Vec::as_slice),
                &s,
            )
            .unwrap();
            maps.push(rep.map_at_r);
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        assert!((mean - chance).abs() < 0.03, "mean {mean} vs chance {chance}");
        assert!((mean - 0.1).abs() < 0.1, "{mean}");
    }

    #[test]
    fn report_files_are_written() {
        let rep = report_from_relevance(&[vec![true, false]], &EvalSettings::default()).unwrap();
        let d = tempfile::tempdir().unwrap();
        rep.write(d.path()).unwrap();
        let map = fs::read_to_string(d.path().join("map.csv")).unwrap();
        assert_eq!(map, "cutoff,map\n100,1\n");
        let pr = fs::read_to_string(d.path().join("pr_curve.csv")).unwrap();
        assert_eq!(pr.lines().count(), PR_GRID_STEPS + 1);
        assert!(d.path().join("p_at_k.csv").exists());
        assert!(fs::read_to_string(d.path().join("summary.txt")).unwrap().contains("mAP@100"));
    }
}
