use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sscq::data::{generate_synthetic, Dataset, Split, SyntheticConfig};
use sscq::eval::{evaluate, EvalSettings};
use sscq::index::{build_index, open_index};
use sscq::losses::{Diversity, Fusion, LossConfig};
use sscq::numerics::RealMatrix;
use sscq::trainer::{load_checkpoint, train as run_training};
use sscq::{Error, SscqConfig};

use crate::manifest::{beside, Recorder};
use crate::{AblateArgs, ConfigArgs, EvalArgs, GenArgs, ImportArgs, IndexArgs, QueryArgs, TrainArgs};

pub const RUN_MANIFEST: &str = "run_manifest.toml";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    /// 2 usage, 3 bad file format, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Dimension(_) => 2,
                Error::Format { .. } | Error::CorruptCode(_) => 3,
                Error::Numeric(_) | Error::Degenerate(_) => 4,
                Error::Evaluation(_) | Error::Io { .. } => 1,
            },
        }
    }
}

type CliResult = Result<(), CliError>;

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(|_| {
        CliError::Usage(format!("unknown split {s:?}; expected train, query or database"))
    })
}

fn resolve_config(args: &ConfigArgs) -> Result<SscqConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => SscqConfig::load(p)?,
        None => SscqConfig::default(),
    };
    for o in &args.overrides {
        cfg.set(o).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// The encoder input width always follows the data.
fn fit_to_data(cfg: &mut SscqConfig, data: &Dataset) -> CliResult {
    if cfg.encoder.input_dim != data.input_dim() {
        log::info!(
            "encoder.input_dim set to {} to match the data",
            data.input_dim()
        );
        cfg.encoder.input_dim = data.input_dim();
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn gen(args: GenArgs, argv: &[String]) -> CliResult {
    let mut rec = Recorder::start("gen", argv);
    rec.seed(args.seed);
    let data = generate_synthetic(&SyntheticConfig {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        class_sep: args.sep,
        noise: args.noise,
        query_fraction: args.query_fraction,
        seed: args.seed,
    })?;
    data.save(&args.out)?;
    log::info!("wrote {} items to {}", data.len(), args.out.display());
    rec.output(&args.out)?;
    rec.finish(&beside(&args.out))
}

pub fn import(args: ImportArgs, argv: &[String]) -> CliResult {
    if args.split.len() != 1 && args.split.len() != args.csv.len() {
        return Err(CliError::Usage(format!(
            "{} --csv files need one --split or {} of them",
            args.csv.len(),
            args.csv.len()
        )));
    }
    let mut rec = Recorder::start("import", argv);
    let (mut items, mut labels, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    let mut dim = None;
    for (i, path) in args.csv.iter().enumerate() {
        let split = parse_split(&args.split[i.min(args.split.len() - 1)])?;
        rec.input(path)?;
        let part = Dataset::import_csv(path, split)?;
        if *dim.get_or_insert(part.input_dim()) != part.input_dim() {
            return Err(CliError::Usage(format!(
                "{} has {} features, earlier files have {}",
                path.display(),
                part.input_dim(),
                dim.unwrap_or(0)
            )));
        }
        for j in 0..part.len() {
            items.extend_from_slice(part.item(j));
            labels.push(part.labels(j).to_vec());
            splits.push(part.split(j));
        }
    }
    let data = Dataset::new(dim.unwrap_or(1), items, labels, splits)?;
    data.save(&args.out)?;
    log::info!("wrote {} items to {}", data.len(), args.out.display());
    rec.output(&args.out)?;
    rec.finish(&beside(&args.out))
}

pub fn train(args: TrainArgs, argv: &[String]) -> CliResult {
    let mut rec = Recorder::start("train", argv);
    let data = Dataset::load(&args.data)?;
    rec.input(&args.data)?;
    let mut cfg = resolve_config(&args.config)?;
    fit_to_data(&mut cfg, &data)?;
    rec.seed(cfg.train.seed);
    rec.config(&cfg);
    let view = data.training_view();
    log::info!("training on {} items for {} epochs", view.len(), cfg.train.epochs);
    let out = run_training(&view, &cfg, Some(&args.out_dir))?;
    if let Some(last) = out.history.last() {
        log::info!("final epoch total loss {:.5}", last.total);
    }
    rec.output(&args.out_dir)?;
    rec.finish(&args.out_dir.join(RUN_MANIFEST))
}

pub fn index(args: IndexArgs, argv: &[String]) -> CliResult {
    let mut rec = Recorder::start("index", argv);
    let (model, manifest) = load_checkpoint(&args.checkpoint)?;
    let data = Dataset::load(&args.data)?;
    rec.input(&args.checkpoint)?;
    rec.input(&args.data)?;
    rec.seed(manifest.seed);
    rec.config(&manifest.config);
    let split = parse_split(&args.split)?;
    let rows = data.indices_of(split);
    if rows.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no {} items",
            args.data.display(),
            args.split
        )));
    }
    let index = build_index(
        &model.encoder,
        &model.books,
        &data.matrix(&rows),
        rows.iter().map(|&i| i as u64).collect(),
    )?;
    index.save(&args.out, &model.encoder, &manifest.config_hash)?;
    log::info!(
        "indexed {} items with {}-bit codes",
        index.len(),
        index.layout().bits()
    );
    rec.output(&args.out)?;
    rec.finish(&args.out.join(RUN_MANIFEST))
}

fn read_vectors(path: &Path, dim: usize) -> Result<RealMatrix, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let offset = record.position().map_or(0, |p| p.byte());
        let bad = |reason: String| {
            CliError::Core(Error::Format {
                path: path.to_path_buf(),
                offset,
                reason,
            })
        };
        if record.len() != dim {
            return Err(bad(format!("row has {} values, index expects {dim}", record.len())));
        }
        let row = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad value {f:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{} holds no vectors", path.display())));
    }
    Ok(RealMatrix::from_rows(&rows)?)
}

fn with_threads<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    if threads == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(job))
}

pub fn query(args: QueryArgs, argv: &[String]) -> CliResult {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let mut rec = Recorder::start("query", argv);
    let (index, encoder, _) = open_index(&args.index)?;
    let vectors = read_vectors(&args.vector_file, encoder.input_dim())?;
    rec.input(&args.index)?;
    rec.input(&args.vector_file)?;
    let embedded = sscq::encoder::encode(&encoder, &vectors)?;
    let results = with_threads(args.threads, || index.search_batch(&embedded, args.k))??;
    let mut text = String::from("query_id,rank,item_id,distance\n");
    for (q, res) in results.iter().enumerate() {
        for (r, h) in res.hits.iter().enumerate() {
            text.push_str(&format!("{q},{},{},{}\n", r + 1, h.item_id, h.distance));
        }
    }
    match &args.out {
        Some(path) => {
            fs::write(path, &text).map_err(|e| io_err(path, e))?;
            rec.output(path)?;
            rec.finish(&beside(path))
        }
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

pub fn eval(args: EvalArgs, argv: &[String]) -> CliResult {
    if args.cutoff == 0 || args.k_list.contains(&0) {
        return Err(CliError::Usage("--cutoff and --k-list values must be at least 1".into()));
    }
    let mut rec = Recorder::start("eval", argv);
    let (index, encoder, _) = open_index(&args.index)?;
    let data = Dataset::load(&args.data)?;
    rec.input(&args.index)?;
    rec.input(&args.data)?;
    let queries = data.indices_of(Split::Query);
    if queries.is_empty() {
        return Err(CliError::Usage(format!("{} has no query items", args.data.display())));
    }
    let settings = EvalSettings {
        cutoff: args.cutoff,
        ks: args.k_list.clone(),
        threads: args.threads,
    };
    let report = evaluate(&index, &encoder, &data, &queries, &settings)?;
    report.write(&args.out_dir)?;
    print!("{}", report.summary());
    rec.output(&args.out_dir)?;
    rec.finish(&args.out_dir.join(RUN_MANIFEST))
}

/// Loss-term subsets in the order of the component table.
const TABLE_ROWS: [(&str, bool, bool, bool, bool); 6] = [
    ("L_icz", false, false, false, false),
    ("L_icz+L_pn", true, false, false, false),
    ("L_icz+L_pn+L_cd", true, true, false, false),
    ("L_icz+L_icf", false, false, true, false),
    ("L_icz+L_icf+L_cc", false, false, true, true),
    ("L_icz+L_pn+L_cd+L_icf+L_cc", true, true, true, true),
];

struct Cell {
    grid: &'static str,
    label: String,
    config: SscqConfig,
}

fn ablation_cells(base: &SscqConfig, grids: &[String], temperatures: &[f64]) -> Result<Vec<Cell>, CliError> {
    let mut cells = Vec::new();
    for grid in grids {
        match grid.as_str() {
            "table" => {
                for (label, pn, cd, icf, cc) in TABLE_ROWS {
                    let mut c = base.clone();
                    let defaults = LossConfig::default();
                    let pick = |on: bool, current: f64, default: f64| {
                        if !on {
                            0.0
                        } else if current > 0.0 {
                            current
                        } else {
                            default
                        }
                    };
                    c.loss.lambda_pn = pick(pn, base.loss.lambda_pn, defaults.lambda_pn);
                    c.loss.lambda_cd = pick(cd, base.loss.lambda_cd, defaults.lambda_cd);
                    c.loss.lambda_cc = pick(cc, base.loss.lambda_cc, defaults.lambda_cc);
                    c.loss.use_icf = icf;
                    cells.push(Cell {
                        grid: "table",
                        label: label.to_string(),
                        config: c,
                    });
                }
            }
            "diversity" => {
                for d in Diversity::ALL {
                    let mut c = base.clone();
                    c.loss.diversity = d;
                    cells.push(Cell {
                        grid: "diversity",
                        label: d.name().to_string(),
                        config: c,
                    });
                }
            }
            "fusion" => {
                for f in Fusion::ALL {
                    let mut c = base.clone();
                    c.loss.fusion = f;
                    cells.push(Cell {
                        grid: "fusion",
                        label: f.name().to_string(),
                        config: c,
                    });
                }
            }
            "temperature" => {
                for name in ["tau_ic", "tau_sq", "tau_cc", "tau_pn"] {
                    for &t in temperatures {
                        let mut c = base.clone();
                        match name {
                            "tau_ic" => c.loss.tau_ic = t,
                            "tau_sq" => c.quantizer.tau_sq = t,
                            "tau_cc" => c.loss.tau_cc = t,
                            _ => c.loss.tau_pn = t,
                        }
                        cells.push(Cell {
                            grid: "temperature",
                            label: format!("{name}={t}"),
                            config: c,
                        });
                    }
                }
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown grid {other:?}; expected table, diversity, fusion or temperature"
                )))
            }
        }
    }
    for c in &cells {
        c.config
            .validate()
            .map_err(|e| CliError::Usage(format!("{} {}: {e}", c.grid, c.label)))?;
    }
    Ok(cells)
}

fn cell_map(data: &Dataset, cfg: &SscqConfig, cutoff: usize) -> Result<f64, CliError> {
    let out = run_training(&data.training_view(), cfg, None)?;
    let db = data.indices_of(Split::Database);
    let index = build_index(
        &out.model.encoder,
        &out.model.books,
        &data.matrix(&db),
        db.iter().map(|&i| i as u64).collect(),
    )?;
    let settings = EvalSettings {
        cutoff,
        ..EvalSettings::default()
    };
    let report = evaluate(
        &index,
        &out.model.encoder,
        data,
        &data.indices_of(Split::Query),
        &settings,
    )?;
    Ok(report.map_at_r)
}

pub fn ablate(args: AblateArgs, argv: &[String]) -> CliResult {
    if args.seeds.is_empty() || args.cutoff == 0 {
        return Err(CliError::Usage("need at least one seed and a positive cutoff".into()));
    }
    let mut rec = Recorder::start("ablate", argv);
    let data = match &args.data {
        Some(p) => {
            rec.input(p)?;
            Dataset::load(p)?
        }
        None => generate_synthetic(&SyntheticConfig {
            seed: args.data_seed,
            ..SyntheticConfig::default()
        })?,
    };
    if data.indices_of(Split::Query).is_empty() || data.indices_of(Split::Database).is_empty() {
        return Err(CliError::Usage("ablation data needs query and database items".into()));
    }
    let mut base = resolve_config(&args.config)?;
    fit_to_data(&mut base, &data)?;
    rec.config(&base);
    let cells = ablation_cells(&base, &args.grids, &args.temperatures)?;

    let out_path: PathBuf = args.out.clone();
    let mut file = fs::File::create(&out_path).map_err(|e| io_err(&out_path, e))?;
    writeln!(file, "grid,label,seed,map").map_err(|e| io_err(&out_path, e))?;
    for cell in &cells {
        for &seed in &args.seeds {
            let mut cfg = cell.config.clone();
            cfg.train.seed = seed;
            let map = cell_map(&data, &cfg, args.cutoff)?;
            log::info!("{} {} seed {seed}: mAP@{} {map:.4}", cell.grid, cell.label, args.cutoff);
            writeln!(file, "{},{},{seed},{map}", cell.grid, cell.label)
                .and_then(|_| file.flush())
                .map_err(|e| io_err(&out_path, e))?;
        }
    }
    rec.output(&out_path)?;
    rec.finish(&beside(&out_path))
}
