//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscq::data::{generate_synthetic, Dataset, Split, SyntheticConfig};
use sscq::encoder::{init_encoder, DenseLayer, EncoderConfig, EncoderParams};
use sscq::eval::{evaluate, EvalSettings};
use sscq::index::{build_index, distance_table};
use sscq::losses::{
    codeword_diversity, consistent_contrastive, instance_contrastive, part_neighbor_loss,
    total_loss, Diversity, Fusion, LossConfig, TwoViewBatch,
};
use sscq::numerics::{grad_check, squared_distance, RealMatrix};
use sscq::quantizer::{hard_assign, reconstruct, soft_quantize, CodebookSet};
use sscq::trainer::{train, Model, BOOKS_FILE, ENCODER_FILE, METRICS_FILE};
use sscq::SscqConfig;

type Outcome = Result<String, String>;

const DATA_SEED: u64 = 2024;
const TRAIN_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CUTOFF: usize = 100;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(
        elapsed < budget,
        format!("took {elapsed:.2?}, budget {budget:?}"),
    )
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> RealMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    RealMatrix::from_vec(rows, cols, data).unwrap()
}

fn flatten(enc: &EncoderParams, books: &CodebookSet) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &enc.layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    for b in books.books() {
        out.extend_from_slice(b.as_slice());
    }
    out
}

fn unflatten(x: &[f64], enc: &EncoderParams, books: &CodebookSet) -> (EncoderParams, CodebookSet) {
    let mut at = 0;
    let mut take = |shape: (usize, usize)| {
        let n = shape.0 * shape.1;
        let m = RealMatrix::from_vec(shape.0, shape.1, x[at..at + n].to_vec()).unwrap();
        at += n;
        m
    };
    let layers = enc
        .layers
        .iter()
        .map(|l| DenseLayer {
            weight: take(l.weight.shape()),
            bias: take(l.bias.shape()),
        })
        .collect();
    let books = books.books().iter().map(|b| take(b.shape())).collect();
    (
        EncoderParams { layers },
        CodebookSet::from_books(books).unwrap(),
    )
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let enc = init_encoder(
        &EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![10],
            embedding_dim: 8,
        },
        31,
    )
    .unwrap();
    let books = CodebookSet::random(2, 4, 4, 32).unwrap();
    let batch = TwoViewBatch::new(random_matrix(8, 6, 33)).unwrap();
    let cfg = LossConfig {
        neighbors: 4,
        ..LossConfig::default()
    };
    let point = flatten(&enc, &books);
    let report = grad_check(
        |x| {
            let (e, b) = unflatten(x, &enc, &books);
            let bundle = total_loss(&batch, &e, &b, &cfg, 0.2)?;
            let mut g = Vec::new();
            for (w, bias) in &bundle.encoder_grads {
                g.extend_from_slice(w.as_slice());
                g.extend_from_slice(bias.as_slice());
            }
            for c in &bundle.codebook_grads {
                g.extend_from_slice(c.as_slice());
            }
            Ok((bundle.values.total, g))
        },
        &point,
        1e-6,
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(60))?;
    check(
        report.passed,
        format!(
            "max relative error {:.3e} at coordinate {}",
            report.max_relative_error, report.worst_index
        ),
    )?;
    Ok(format!(
        "{} parameters, max relative error {:.2e}, {:.2?}",
        point.len(),
        report.max_relative_error,
        start.elapsed()
    ))
}

/// Smallest gap between the best and second-best codeword over all books.
fn argmin_margin(row: &[f64], books: &CodebookSet) -> f64 {
    let s = books.sub_dim();
    (0..books.num_books())
        .map(|m| {
            let mut d: Vec<f64> = (0..books.codewords())
                .map(|k| squared_distance(&row[m * s..(m + 1) * s], books.codeword(m, k)))
                .collect();
            d.sort_by(f64::total_cmp);
            d[1] - d[0]
        })
        .fold(f64::INFINITY, f64::min)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let books = CodebookSet::random(8, 16, 4, 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rows = Vec::new();
    while rows.len() < 100 {
        let row: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        if argmin_margin(&row, &books) >= 0.02 {
            rows.push(row);
        }
    }
    let f = RealMatrix::from_rows(&rows).unwrap();
    let (z, _) = soft_quantize(&f, &books, 1e-3).map_err(|e| e.to_string())?;
    let codes = hard_assign(&f, &books).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (i, code) in codes.iter().enumerate() {
        let r = reconstruct(code, &books).map_err(|e| e.to_string())?;
        for (a, b) in z.row(i).iter().zip(r.row(0)) {
            worst = worst.max((a - b).abs());
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    check(worst < 1e-6, format!("max |soft - hard| = {worst:.3e}"))?;
    Ok(format!("max |soft - hard| = {worst:.2e}, {:.2?}", start.elapsed()))
}

/// A rectifier network computing the identity: `relu(x) - relu(-x)`.
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

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let books = CodebookSet::random(8, 16, 4, 51).unwrap();
    let items = random_matrix(500, 32, 52);
    let queries = random_matrix(20, 32, 53);
    let index = build_index(&identity_encoder(32), &books, &items, (0..500).collect())
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for q in 0..20 {
        let table = distance_table(queries.row(q), &books).map_err(|e| e.to_string())?;
        let res = index.search(&table, 500).map_err(|e| e.to_string())?;
        check(res.hits.len() == 500, "search did not return every item")?;
        for h in &res.hits {
            let r = reconstruct(&index.codes()[h.item_id as usize], &books).map_err(|e| e.to_string())?;
            worst = worst.max((h.distance - squared_distance(queries.row(q), r.row(0))).abs());
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    check(worst < 1e-9, format!("max deviation {worst:.3e}"))?;
    Ok(format!("10000 pairs, max deviation {worst:.2e}, {:.2?}", start.elapsed()))
}

fn criterion_4() -> Outcome {
    let pair = random_matrix(2, 6, 61);
    let icz = instance_contrastive(&pair, 0.5).map_err(|e| e.to_string())?;
    check(icz.abs() < 1e-12, format!("L_icz on one pair = {icz}"))?;

    let n_b = 6;
    let z = random_matrix(2 * n_b, 8, 62);
    let pn = part_neighbor_loss(&z, 2, 2 * n_b - 2, 0.5).map_err(|e| e.to_string())?;
    check(pn.abs() < 1e-12, format!("L_pn with N_k = 2N_b-2 is {pn}"))?;

    let rows: Vec<usize> = (0..n_b).flat_map(|i| [i, i]).collect();
    let f = random_matrix(n_b, 8, 63).select_rows(&rows);
    let zq = random_matrix(n_b, 8, 64).select_rows(&rows);
    let cc = consistent_contrastive(&f, &zq, Fusion::Concatenate, 0.2).map_err(|e| e.to_string())?;
    check(cc.abs() < 1e-12, format!("L_cc on identical views = {cc}"))?;

    // 16 codewords ±e_i in 8 dims, each used once by the batch
    let mut basis = Vec::new();
    for i in 0..8 {
        for sign in [1.0, -1.0] {
            let mut r = vec![0.0; 8];
            r[i] = sign;
            basis.push(r);
        }
    }
    let books = CodebookSet::from_books(vec![RealMatrix::from_rows(&basis).unwrap()]).unwrap();
    let cd = codeword_diversity(books.book(0), &books, Diversity::CosineEntropy, 0.2)
        .map_err(|e| e.to_string())?;
    check(
        (cd + 16f64.ln()).abs() < 1e-4,
        format!("L_cd on symmetric fixture = {cd}"),
    )?;
    Ok(format!(
        "L_icz={icz:.1e} L_pn={pn:.1e} L_cc={cc:.1e} L_cd={cd:.4}"
    ))
}

fn dataset() -> Dataset {
    generate_synthetic(&SyntheticConfig {
        seed: DATA_SEED,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn config(seed: u64, loss: LossConfig) -> SscqConfig {
    let mut cfg = SscqConfig {
        loss,
        ..SscqConfig::default()
    };
    cfg.train.seed = seed;
    cfg
}

fn map_of(model: &Model, data: &Dataset) -> f64 {
    let db = data.indices_of(Split::Database);
    let index = build_index(
        &model.encoder,
        &model.books,
        &data.matrix(&db),
        db.iter().map(|&i| i as u64).collect(),
    )
    .unwrap();
    let settings = EvalSettings {
        cutoff: CUTOFF,
        ..EvalSettings::default()
    };
    evaluate(&index, &model.encoder, data, &data.indices_of(Split::Query), &settings)
        .unwrap()
        .map_at_r
}

struct Shared {
    data: Dataset,
    run_dir: tempfile::TempDir,
    full_seed_map: f64,
    c5: Outcome,
}

fn criterion_5() -> Shared {
    let data = dataset();
    let cfg = config(TRAIN_SEEDS[0], LossConfig::default());
    let untrained = map_of(&Model::init(&cfg).unwrap(), &data);
    let run_dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let outcome = train(&data.training_view(), &cfg, Some(run_dir.path()));
    let elapsed = start.elapsed();
    let (trained, c5) = match outcome {
        Err(e) => (f64::NAN, Err(e.to_string())),
        Ok(out) => {
            let trained = map_of(&out.model, &data);
            let first = out.history.first().map_or(f64::NAN, |h| h.total);
            let last = out.history.last().map_or(f64::NAN, |h| h.total);
            let detail = format!(
                "untrained {untrained:.4}, trained {trained:.4}, loss {first:.4} -> {last:.4}, {elapsed:.1?}"
            );
            let verdict = within(elapsed, Duration::from_secs(600))
                .and(check(trained - untrained >= 0.25, "gain over untrained below 0.25"))
                .and(check(trained - 0.1 >= 0.3, "gain over chance below 0.3"))
                .and(check(last < first, "total loss did not decrease"));
            (
                trained,
                verdict.map(|_| detail.clone()).map_err(|e| format!("{e}; {detail}")),
            )
        }
    };
    Shared {
        data,
        run_dir,
        full_seed_map: trained,
        c5,
    }
}

fn criterion_6(shared: &Shared) -> Outcome {
    let mut full = vec![shared.full_seed_map];
    let mut base = Vec::new();
    for (i, &seed) in TRAIN_SEEDS.iter().enumerate() {
        if i > 0 {
            let out = train(
                &shared.data.training_view(),
                &config(seed, LossConfig::default()),
                None,
            )
            .map_err(|e| e.to_string())?;
            full.push(map_of(&out.model, &shared.data));
        }
        let out = train(
            &shared.data.training_view(),
            &config(seed, LossConfig::baseline()),
            None,
        )
        .map_err(|e| e.to_string())?;
        base.push(map_of(&out.model, &shared.data));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mb) = (mean(&full), mean(&base));
    let detail = format!("full mean {mf:.4} {full:.3?}, baseline mean {mb:.4} {base:.3?}");
    check(mf >= mb, detail.clone())?;
    Ok(detail)
}

fn criterion_7(shared: &Shared) -> Outcome {
    let again = tempfile::tempdir().unwrap();
    train(
        &shared.data.training_view(),
        &config(TRAIN_SEEDS[0], LossConfig::default()),
        Some(again.path()),
    )
    .map_err(|e| e.to_string())?;
    let same = |dir: &Path, name: &str| fs::read(dir.join(name)).unwrap();
    for name in [ENCODER_FILE, BOOKS_FILE, METRICS_FILE] {
        check(
            same(shared.run_dir.path(), name) == same(again.path(), name),
            format!("{name} differs between identical runs"),
        )?;
    }
    Ok("checkpoints and metrics are bit-identical".into())
}

/// Ranking by brute-force distance to the exact item vectors, with its own
/// relevance rule and AP.
fn oracle_map(data: &Dataset, db: &[usize], queries: &[usize], cutoff: usize) -> f64 {
    let mut total = 0.0;
    for &q in queries {
        let qv: Vec<f64> = data.item(q).iter().map(|&v| v as f64).collect();
        let mut ranked: Vec<(f64, usize)> = db
            .iter()
            .map(|&i| {
                let d: f64 = data
                    .item(i)
                    .iter()
                    .zip(&qv)
                    .map(|(&a, b)| (a as f64 - b) * (a as f64 - b))
                    .sum();
                (d, i)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut hits, mut sum) = (0.0, 0.0);
        for (rank, &(_, i)) in ranked.iter().take(cutoff).enumerate() {
            if data.labels(i).iter().any(|l| data.labels(q).contains(l)) {
                hits += 1.0;
                sum += hits / (rank + 1) as f64;
            }
        }
        total += if hits > 0.0 { sum / hits } else { 0.0 };
    }
    total / queries.len() as f64
}

fn criterion_8() -> Outcome {
    let (m_books, k, sub) = (4, 8, 3);
    let dim = m_books * sub;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    // codewords exactly representable in f32 so stored items carry no error
    let books: Vec<RealMatrix> = (0..m_books)
        .map(|_| {
            let d = (0..k * sub)
                .map(|_| rng.random_range(-1.0f32..1.0) as f64)
                .collect();
            RealMatrix::from_vec(k, sub, d).unwrap()
        })
        .collect();
    let books = CodebookSet::from_books(books).unwrap();
    let (mut items, mut labels, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..300 {
        for m in 0..m_books {
            let c = rng.random_range(0..k);
            items.extend(books.codeword(m, c).iter().map(|&v| v as f32));
        }
        let mut l = vec![rng.random_range(0..6u32)];
        if i % 7 == 0 {
            l.push(rng.random_range(0..6u32));
        }
        labels.push(l);
        splits.push(if i < 40 { Split::Query } else { Split::Database });
    }
    let data = Dataset::new(dim, items, labels, splits).unwrap();
    let db = data.indices_of(Split::Database);
    let queries = data.indices_of(Split::Query);
    let enc = identity_encoder(dim);
    let index = build_index(
        &enc,
        &books,
        &data.matrix(&db),
        db.iter().map(|&i| i as u64).collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for cutoff in [1, 10, 50, 260] {
        let settings = EvalSettings {
            cutoff,
            ..EvalSettings::default()
        };
        let got = evaluate(&index, &enc, &data, &queries, &settings)
            .map_err(|e| e.to_string())?
            .map_at_r;
        let want = oracle_map(&data, &db, &queries, cutoff);
        check(
            (got - want).abs() <= 1e-12,
            format!("R={cutoff}: evaluate {got} vs oracle {want}"),
        )?;
        detail.push(format!("mAP@{cutoff}={got:.4}"));
    }
    Ok(detail.join(" "))
}

fn main() {
    let shared = criterion_5();
    let results: [(&str, Outcome); 8] = [
        ("gradient correctness", criterion_1()),
        ("quantization limit", criterion_2()),
        ("asymmetric distance identity", criterion_3()),
        ("loss trivial points", criterion_4()),
        ("end-to-end learning signal", shared.c5.clone()),
        ("ablation directionality", criterion_6(&shared)),
        ("determinism", criterion_7(&shared)),
        ("evaluation oracle equivalence", criterion_8()),
    ];
    let mut failures = 0;
    for (n, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS  {detail}", n + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {} ({name}): FAIL  {detail}", n + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
