use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::json;

use super::config::{
    sub_seed, RunConfig, SEED_LATENT, SEED_MASK_TEST, SEED_MASK_TRAIN, SEED_MASK_VALID, SEED_SAMPLE, SEED_SYNTH,
};
use super::gradcheck::{format_table, gradcheck, GradRow};
use crate::data::{
    apply_mask_entries, load_csv, merged_input, read_mask_file, simulate_missing, split, synth_generate, tail_window,
    write_mask_file, write_synth, CsvSchema, Dataset, HeldOut, MaskSpec, SPLIT_FRACTIONS, SYNTH_CSV, SYNTH_GRAPH,
};
use crate::diffusion::{impute_dataset, Imputer, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evalmetrics::{entries_csv, interpolation_baseline, quantile, score_samples, EvalReport};
use crate::graph::{adjacency_from_csv, adjacency_from_json, build_laplacian_with, identity_graph, LaplacianKind};
use crate::model::{encode, ArchConfig};
use crate::numerics::{write_atomic, Array, ParamSet, RngStream};
use crate::train::{load_checkpoint, log_line, save_checkpoint, train, CheckpointMeta, TrainOutcome, VERSION};

pub const CONFIG_ECHO: &str = "config.toml";
pub const MASK_FILE: &str = "mask.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const IMPUTED_CSV: &str = "imputed.csv";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const IMPUTE_META: &str = "impute_meta.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_ENTRIES: &str = "eval_entries.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const LATENT_CSV: &str = "latent.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_toml()?)
}

/// The dataset named by `data.csv`, windowed at `data.window_len`.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .csv
        .as_ref()
        .ok_or_else(|| Error::Dataset("no dataset path (set data.csv)".into()))?;
    load_csv(
        path,
        &CsvSchema {
            window_len: cfg.data.window_len,
            graph_id: cfg
                .data
                .graph
                .as_ref()
                .map_or("identity".into(), |p| p.display().to_string()),
        },
    )
}

/// The propagation operator for `n` sensors.
pub fn load_laplacian(cfg: &RunConfig, n: usize) -> Result<Array> {
    let graph = match &cfg.data.graph {
        None => {
            warn!("no graph given; the encoder propagates with the identity");
            identity_graph(n)?
        }
        Some(_) if cfg.data.laplacian == LaplacianKind::Identity => identity_graph(n)?,
        Some(p) => {
            let adj = if p.extension().is_some_and(|e| e == "json") {
                adjacency_from_json(p, n)?
            } else {
                adjacency_from_csv(p)?
            };
            if adj.shape() != [n, n] {
                return Err(Error::Graph(format!(
                    "graph has {} nodes but the data has {n} sensors",
                    adj.shape()[0]
                )));
            }
            build_laplacian_with(&adj, cfg.data.laplacian)?
        }
    };
    Ok(graph.laplacian)
}

/// Temporal splits with their evaluation masks and held-out truth.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub held_train: HeldOut,
    pub held_valid: HeldOut,
    pub held_test: HeldOut,
    /// First window of each split in the whole dataset.
    pub offsets: [usize; 3],
}

impl Splits {
    /// Overwrites every held-out truth outside validation, and the stored
    /// value at every evaluation position, with `sentinel`.
    pub fn poison(&mut self, sentinel: f64) {
        self.held_train.poison(sentinel);
        self.held_test.poison(sentinel);
        for ds in [&mut self.train, &mut self.valid, &mut self.test] {
            ds.poison_eval_values(sentinel);
        }
    }

    /// All evaluation entries with window indices into the whole dataset.
    pub fn global_held(&self) -> HeldOut {
        let mut out = HeldOut::default();
        for (held, off) in [
            (&self.held_train, self.offsets[0]),
            (&self.held_valid, self.offsets[1]),
            (&self.held_test, self.offsets[2]),
        ] {
            for ((w, s, t), v) in held.iter() {
                out.insert(w + off, s, t, v);
            }
        }
        out
    }
}

/// Splits first, then masks each split: from `data.mask_file` when set,
/// otherwise by simulation with a seed derived per split.
pub fn prepare_splits(cfg: &RunConfig, ds: &Dataset) -> Result<Splits> {
    let (tr, va, te) = split(ds, SPLIT_FRACTIONS)?;
    let offsets = [0, tr.len(), tr.len() + va.len()];
    let parts = [tr, va, te];
    let masked: Vec<(Dataset, HeldOut)> = match &cfg.data.mask_file {
        Some(p) => {
            let entries = read_mask_file(p)?;
            if let Some(e) = entries.iter().find(|e| e.0 >= ds.len()) {
                return Err(Error::Dataset(format!("mask entry window {} out of range", e.0)));
            }
            parts
                .iter()
                .zip(offsets)
                .map(|(part, off)| {
                    let mine: Vec<_> = entries
                        .iter()
                        .filter(|e| e.0 >= off && e.0 < off + part.len())
                        .map(|&(w, s, t)| (w - off, s, t))
                        .collect();
                    apply_mask_entries(part, &mine)
                })
                .collect::<Result<_>>()?
        }
        None => parts
            .iter()
            .zip([SEED_MASK_TRAIN, SEED_MASK_VALID, SEED_MASK_TEST])
            .map(|(part, key)| simulate_missing(part, &cfg.mask.spec(sub_seed(cfg.seed, key))))
            .collect::<Result<_>>()?,
    };
    let mut it = masked.into_iter();
    let (train, held_train) = it.next().expect("three splits");
    let (valid, held_valid) = it.next().expect("three splits");
    let (test, held_test) = it.next().expect("three splits");
    Ok(Splits {
        train,
        valid,
        test,
        held_train,
        held_valid,
        held_test,
        offsets,
    })
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.synth.validate()?;
    let seed = sub_seed(cfg.seed, SEED_SYNTH);
    let (ds, graph) = synth_generate(&cfg.synth, &mut RngStream::new(seed))?;
    write_synth(out, &ds, &graph, &cfg.synth, seed)?;
    let mut echo = cfg.clone();
    echo.data.csv = Some(out.join(SYNTH_CSV));
    echo.data.graph = Some(out.join(SYNTH_GRAPH));
    echo.data.window_len = cfg.synth.n_steps;
    echo_config(out, &echo)?;
    println!(
        "wrote {} windows of {} sensors to {}",
        ds.len(),
        ds.n_sensors(),
        out.display()
    );
    Ok(())
}

pub fn cmd_mask(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let splits = prepare_splits(cfg, &ds)?;
    create_dir(out)?;
    let held = splits.global_held();
    write_mask_file(&out.join(MASK_FILE), &held)?;
    let mut echo = cfg.clone();
    echo.data.mask_file = Some(out.join(MASK_FILE));
    echo_config(out, &echo)?;
    println!(
        "wrote {} evaluation entries to {}",
        held.len(),
        out.join(MASK_FILE).display()
    );
    Ok(())
}

/// Trains on prepared splits and writes the epoch log, the checkpoint and
/// the config echo into `out`.
pub fn train_on_splits(cfg: &RunConfig, splits: &Splits, laplacian: &Array, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    echo_config(out, cfg)?;
    let arch = cfg.resolved_arch(splits.train.n_sensors());
    let log_path = out.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train(
        &splits.train,
        &splits.valid,
        &splits.held_valid,
        laplacian,
        &arch,
        &cfg.schedule,
        &cfg.train,
        |rec| {
            info!(
                "epoch {}: l1 {:.5} l2 {:.5} kl {:.5} valid_mae {:?}",
                rec.epoch, rec.l1, rec.l2, rec.kl, rec.valid_mae
            );
            writeln!(log, "{}", log_line(rec)?).map_err(|e| Error::io(&log_path, e))
        },
    )?;
    let meta = CheckpointMeta {
        version: VERSION.into(),
        arch,
        schedule: cfg.schedule.clone(),
        train: cfg.train.clone(),
        best_epoch: outcome.best_epoch,
        best_valid_mae: outcome.best_valid_mae,
        extra: json!({ "seed": cfg.seed }),
    };
    save_checkpoint(&checkpoint_dir(cfg, out), &outcome.params, &meta)?;
    Ok(outcome)
}

fn checkpoint_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_DIR))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let ds = load_data(cfg)?;
    let lap = load_laplacian(cfg, ds.n_sensors())?;
    let splits = prepare_splits(cfg, &ds)?;
    let outcome = train_on_splits(cfg, &splits, &lap, out)?;
    match (outcome.best_epoch, outcome.best_valid_mae) {
        (Some(e), Some(m)) => println!("best epoch {e}: validation MAE {m:.6}"),
        _ => println!("trained {} epochs without validation", outcome.log.len()),
    }
    Ok(outcome)
}

/// A loaded model whose architecture and schedule match the config.
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
    pub laplacian: Array,
}

impl Model {
    pub fn load(cfg: &RunConfig, ds: &Dataset) -> Result<Self> {
        let dir = cfg
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("no checkpoint given (use --checkpoint)".into()))?;
        let arch = cfg.resolved_arch(ds.n_sensors());
        let (params, meta) = load_checkpoint(dir, Some(&arch))?;
        if meta.schedule != cfg.schedule {
            return Err(Error::ManifestMismatch {
                field: "schedule".into(),
                found: serde_json::to_string(&meta.schedule)?,
                expected: serde_json::to_string(&cfg.schedule)?,
            });
        }
        Ok(Self {
            arch,
            params,
            schedule: cfg.schedule.build()?,
            laplacian: load_laplacian(cfg, ds.n_sensors())?,
        })
    }

    pub fn imputer(&self) -> Imputer<'_> {
        Imputer {
            arch: &self.arch,
            params: &self.params,
            laplacian: &self.laplacian,
            schedule: &self.schedule,
        }
    }
}

/// Fills every missing cell of the input CSV with its posterior mean.
pub fn cmd_impute(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut ds = load_data(cfg)?;
    let model = Model::load(cfg, &ds)?;
    let src = ds.source.clone().expect("loaded from a file");
    let (n, d) = (ds.n_sensors(), ds.n_steps());
    let regular = ds.len();
    let tail = tail_window(&ds)?;
    if let Some((_, w)) = &tail {
        ds.windows.push(w.clone());
    }
    let rng = RngStream::new(sub_seed(cfg.seed, SEED_SAMPLE));
    let (samples, trace) = impute_dataset(&ds, &model.imputer(), &cfg.eval.options(), &rng)?;
    create_dir(out)?;

    // Row r is read from the window covering it; trailing rows from the tail.
    let locate = |r: usize| -> (usize, usize) {
        match &tail {
            Some((start, _)) if r >= regular * d => (regular, r - start),
            _ => (r / d, r % d),
        }
    };
    let imputed = out.join(IMPUTED_CSV);
    let mut filled = csv::Writer::from_path(&imputed).map_err(|e| Error::io(&imputed, e.into()))?;
    filled.write_record(&src.header)?;
    let mut summary = String::from("row,sensor,mean,p05,p95\n");
    let mut n_filled = 0;
    for (r, cells) in src.cells.iter().enumerate() {
        let (wi, t) = locate(r);
        let s_set = &samples[wi];
        let sn = s_set.shape()[0];
        let mut row = vec![src.times[r].clone()];
        for (s, cell) in cells.iter().enumerate() {
            if !cell.trim().is_empty() {
                row.push(cell.clone());
                continue;
            }
            let mut xs: Vec<f64> = (0..sn)
                .map(|k| ds.denormalize(s, s_set.data()[(k * n + s) * d + t]))
                .collect();
            let mean = xs.iter().sum::<f64>() / sn as f64;
            xs.sort_by(f64::total_cmp);
            summary.push_str(&format!(
                "{r},{},{mean},{},{}\n",
                ds.sensor_names[s],
                quantile(&xs, 0.05),
                quantile(&xs, 0.95)
            ));
            row.push(format!("{mean}"));
            n_filled += 1;
        }
        filled.write_record(&row)?;
    }
    filled.flush().map_err(|e| Error::io(&imputed, e))?;
    write_text(&out.join(SAMPLES_CSV), &summary)?;
    let meta = json!({
        "version": VERSION,
        "n_samples": cfg.eval.n_samples,
        "n_rows": src.cells.len(),
        "n_filled": n_filled,
        "seed": cfg.seed,
        "checkpoint": cfg.checkpoint,
    });
    write_atomic(&out.join(IMPUTE_META), &serde_json::to_vec_pretty(&meta)?)?;
    if let Some(tr) = trace {
        write_text(&out.join(TRACE_CSV), &tr.to_csv())?;
    }
    echo_config(out, cfg)?;
    println!("filled {n_filled} cells; wrote {}", imputed.display());
    Ok(())
}

/// Scores the model on the test split against the interpolation baseline.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let ds = load_data(cfg)?;
    let model = Model::load(cfg, &ds)?;
    let splits = prepare_splits(cfg, &ds)?;
    if splits.test.eval_count() == 0 {
        return Err(Error::Metric("test split has no evaluation entries".into()));
    }
    let rng = RngStream::new(sub_seed(cfg.seed, SEED_SAMPLE));
    let (samples, trace) = impute_dataset(&splits.test, &model.imputer(), &cfg.eval.options(), &rng)?;
    let (mut report, rows) = score_samples(&splits.test, &splits.held_test, &samples, cfg.eval.point)?;
    report.baseline = Some(interpolation_baseline(&splits.test, &splits.held_test)?);
    let mut shown = cfg.clone();
    shown.out = None;
    report.config = serde_json::to_value(&shown)?;
    create_dir(out)?;
    write_atomic(&out.join(EVAL_REPORT), &serde_json::to_vec_pretty(&report)?)?;
    write_text(&out.join(EVAL_ENTRIES), &entries_csv(&rows))?;
    if let Some(tr) = trace {
        write_text(&out.join(TRACE_CSV), &tr.to_csv())?;
    }
    echo_config(out, cfg)?;
    let b = report.baseline.as_ref().expect("attached above");
    println!(
        "MAE {:.6}  CRPS {:.6}  ({} points, {} samples); interpolation MAE {:.6}  CRPS {:.6}",
        report.mae, report.crps_mean, report.n_eval_points, report.n_samples, b.interp_mae, b.interp_crps
    );
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>, corrupt: bool) -> Result<Vec<GradRow>> {
    let rows = gradcheck(cfg.seed, corrupt)?;
    print!("{}", format_table(&rows));
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut csv = String::from("component,n_params,max_rel_error,status\n");
        for r in &rows {
            let err = r.max_rel_error.as_ref().map_or("NaN".to_string(), |e| e.to_string());
            let status = if r.passed() { "pass" } else { "fail" };
            csv.push_str(&format!("{},{},{err},{status}\n", r.component, r.n_params));
        }
        write_text(&dir.join(GRADCHECK_CSV), &csv)?;
        echo_config(dir, cfg)?;
    }
    Ok(rows)
}

/// One latent summary: window, rate, averaged mean, averaged variance.
pub type LatentRow = (usize, f64, f64, f64);

/// Encodes every test window under each point-missing rate and averages
/// the latent mean and variance over all dimensions.
pub fn latent_rows(cfg: &RunConfig, model: &Model, test: &Dataset) -> Result<Vec<LatentRow>> {
    let mut rows = Vec::new();
    for (i, &rate) in cfg.latent.rates.iter().enumerate() {
        let seed = sub_seed(sub_seed(cfg.seed, SEED_LATENT), i as u64);
        let (masked, _) = simulate_missing(test, &MaskSpec::point(rate, seed))?;
        for (wi, w) in masked.windows.iter().enumerate() {
            let lat = encode(&merged_input(w), &model.laplacian, &model.params, &model.arch)?;
            rows.push((wi, rate, lat.mean.mean(), lat.variance().mean()));
        }
    }
    Ok(rows)
}

pub fn cmd_latent_dump(cfg: &RunConfig, out: &Path) -> Result<Vec<LatentRow>> {
    let ds = load_data(cfg)?;
    let model = Model::load(cfg, &ds)?;
    let (_, _, test) = split(&ds, SPLIT_FRACTIONS)?;
    let rows = latent_rows(cfg, &model, &test)?;
    create_dir(out)?;
    let mut csv = String::from("window,rate,mean_avg,var_avg\n");
    for (w, r, m, v) in &rows {
        csv.push_str(&format!("{w},{r},{m},{v}\n"));
    }
    write_text(&out.join(LATENT_CSV), &csv)?;
    echo_config(out, cfg)?;
    for &rate in &cfg.latent.rates {
        let mine: Vec<_> = rows.iter().filter(|r| r.1 == rate).collect();
        let k = mine.len().max(1) as f64;
        println!(
            "rate {rate}: mean_avg {:.6}  var_avg {:.6}",
            mine.iter().map(|r| r.2).sum::<f64>() / k,
            mine.iter().map(|r| r.3).sum::<f64>() / k
        );
    }
    Ok(rows)
}
