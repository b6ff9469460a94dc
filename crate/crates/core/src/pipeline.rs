//! File-level commands: train, finalize, analyze and grid search.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analyze::{
    choose_neurons, compression_report, count_structure, detect_vanilla_units, gradient_lag_profile, render_gate_map,
    CompressionReport, CountScope, GateMap, LagNorm, LagProfile, VanillaUnit,
};
use crate::checkpoint::{Checkpoint, CheckpointState, EpochMetrics};
use crate::config::{parse_toml, Framework, Grid, RunConfig};
use crate::data::{parse_classification, read_text};
use crate::error::{Error, Result};
use crate::lstm::SequenceInput;
use crate::model::{InputSpec, TaskKind};
use crate::train::{finalize, prepare_data, train};

/// Outcome of `train_run`. The checkpoint is on disk even when `aborted`
/// is set; it then holds the last parameters that completed an epoch.
pub struct TrainRun {
    pub checkpoint_path: PathBuf,
    pub checkpoint: Checkpoint,
    pub aborted: Option<Error>,
}

/// Trains a config, appending one JSON line per epoch to the metrics log
/// and saving the checkpoint.
pub fn train_run(cfg: &RunConfig, observer: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainRun> {
    let data = prepare_data(cfg)?;
    let mut log = match &cfg.output.metrics_log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(std::fs::File::create(p)?)
        }
        None => None,
    };
    let mut log_err: Option<std::io::Error> = None;
    let outcome = train(cfg, &data, &mut |m| {
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
        observer(m);
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    outcome.checkpoint.save(&cfg.output.checkpoint)?;
    Ok(TrainRun {
        checkpoint_path: cfg.output.checkpoint.clone(),
        checkpoint: outcome.checkpoint,
        aborted: outcome.aborted,
    })
}

/// `run.ckpt` becomes `run.final.ckpt`; a finalized checkpoint maps to
/// itself.
pub fn finalized_path(path: &Path, ckpt: &Checkpoint) -> PathBuf {
    if ckpt.meta.state == CheckpointState::Finalized {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.final.{}", ext.to_string_lossy()),
        None => format!("{stem}.final"),
    };
    path.with_file_name(name)
}

/// Finalizes the checkpoint at `path` and saves the result to `out`, or
/// next to the input when `out` is `None`.
pub fn finalize_file(path: &Path, out: Option<&Path>) -> Result<(PathBuf, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let done = finalize(&ckpt)?;
    let target = out.map_or_else(|| finalized_path(path, &ckpt), Path::to_path_buf);
    done.save(&target)?;
    Ok((target, done))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeOptions {
    /// Largest lag of the gradient profile.
    pub max_lag: usize,
    /// Neurons per layer in the gate map; every kept neuron when `None`.
    pub map_neurons: Option<usize>,
    pub seed: u64,
    /// Validation sequences averaged in the lag profile.
    pub lag_sequences: usize,
    pub norm: LagNorm,
    /// Output directory; `<checkpoint stem>.analysis` beside the
    /// checkpoint when `None`.
    pub out_dir: Option<PathBuf>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            max_lag: 20,
            map_neurons: None,
            seed: 0,
            lag_sequences: 32,
            norm: LagNorm::L2,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerVanilla {
    pub layer: usize,
    pub units: Vec<VanillaUnit>,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub framework: String,
    pub compression: CompressionReport,
    pub vanilla_units: Vec<LayerVanilla>,
}

impl AnalysisReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("framework: {}\n", self.framework);
        s.push_str(&self.compression.to_text());
        for l in &self.vanilla_units {
            let _ = writeln!(s, "layer {}: {} vanilla units", l.layer, l.units.len());
        }
        s
    }
}

pub struct Analysis {
    pub out_dir: PathBuf,
    pub report: AnalysisReport,
    pub gate_maps: Vec<GateMap>,
    pub lags: Vec<LagProfile>,
}

pub fn gate_map_file(layer: usize) -> String {
    format!("gatemap.l{layer}.csv")
}

pub fn lag_file(layer: usize) -> String {
    format!("lag.l{layer}.csv")
}

fn default_scope(framework: &Framework) -> CountScope {
    match framework {
        Framework::Prune(_) => CountScope::LstmOnly,
        _ => CountScope::AllLayers,
    }
}

/// Compression report of a finalized checkpoint.
pub fn report_of(ckpt: &Checkpoint) -> Result<AnalysisReport> {
    let masks = finalized_masks(ckpt)?;
    Ok(AnalysisReport {
        framework: ckpt.meta.framework.label(),
        compression: compression_report(&ckpt.model, masks, default_scope(&ckpt.meta.framework))?,
        vanilla_units: masks
            .iter()
            .enumerate()
            .map(|(layer, m)| LayerVanilla {
                layer,
                units: detect_vanilla_units(m),
            })
            .collect(),
    })
}

fn finalized_masks(ckpt: &Checkpoint) -> Result<&[crate::lstm::StructureMasks]> {
    match (&ckpt.meta.state, &ckpt.meta.masks) {
        (CheckpointState::Finalized, Some(m)) => Ok(m),
        _ => Err(Error::Contract(
            "checkpoint is not finalized; run `finalize --ckpt <file>` first".into(),
        )),
    }
}

/// Validation sequences for the lag profile, each cut to its last
/// `len` steps.
fn lag_sequences(ckpt: &Checkpoint, dir: &Path, len: usize, count: usize) -> Result<Vec<SequenceInput>> {
    let spec = &ckpt.meta.spec;
    let need_vocab = || {
        ckpt.meta
            .vocab
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("token model without a vocabulary".into()))
    };
    let seqs: Vec<SequenceInput> = match (&spec.input, spec.task) {
        (InputSpec::Dense { .. }, _) => {
            let path = dir.join("valid.json");
            let text = read_text(&path)?;
            let raw: Vec<Vec<Vec<f64>>> = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            raw.into_iter()
                .take(count)
                .map(|s| SequenceInput::Dense(s[s.len().saturating_sub(len)..].to_vec()))
                .collect()
        }
        (_, TaskKind::LanguageModel) => {
            let ids = need_vocab()?.encode(&read_text(&dir.join("valid.txt"))?);
            ids.chunks_exact(len)
                .take(count)
                .map(|c| SequenceInput::Tokens(c.to_vec()))
                .collect()
        }
        _ => {
            let vocab = need_vocab()?;
            let path = dir.join("valid.tsv");
            let text = read_text(&path)?;
            let data = parse_classification(&text, &path.to_string_lossy())?;
            data.examples
                .iter()
                .map(|e| vocab.encode(&e.text))
                .filter(|ids| !ids.is_empty())
                .take(count)
                .map(|ids| SequenceInput::Tokens(ids[ids.len().saturating_sub(len)..].to_vec()))
                .collect()
        }
    };
    if seqs.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no validation sequence of length {len}",
            dir.display()
        )));
    }
    Ok(seqs)
}

/// Writes the compression report, per-layer gate maps and per-layer lag
/// profiles of a finalized checkpoint.
pub fn analyze_run(ckpt_path: &Path, data_dir: &Path, opts: &AnalyzeOptions) -> Result<Analysis> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let report = report_of(&ckpt)?;
    let masks = finalized_masks(&ckpt)?;
    let sequences = lag_sequences(&ckpt, data_dir, opts.max_lag + 1, opts.lag_sequences)?;
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| {
        let stem = ckpt_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        ckpt_path.with_file_name(format!("{stem}.analysis"))
    });
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(out_dir.join("report.txt"), report.to_text())?;

    let mut gate_maps = Vec::new();
    let mut lags = Vec::new();
    let mut map_text = String::new();
    for (layer, m) in masks.iter().enumerate() {
        let neurons = choose_neurons(m, opts.map_neurons, opts.seed.wrapping_add(layer as u64));
        let map = render_gate_map(m, layer, &neurons)?;
        std::fs::write(out_dir.join(gate_map_file(layer)), map.to_csv())?;
        let _ = writeln!(map_text, "layer {layer}\n{}", map.to_text());
        gate_maps.push(map);

        let lag = gradient_lag_profile(&ckpt.model, &sequences, layer, opts.max_lag, opts.norm)?;
        std::fs::write(out_dir.join(lag_file(layer)), lag.to_csv())?;
        lags.push(lag);
    }
    std::fs::write(out_dir.join("gatemap.txt"), map_text)?;
    Ok(Analysis {
        out_dir,
        report,
        gate_maps,
        lags,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Ok,
    Failed(String),
    /// Not run because an earlier point met the stop rule.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: usize,
    pub values: Vec<String>,
    pub seed: Option<u64>,
    pub status: PointStatus,
    pub metric: Option<String>,
    pub quality: Option<f64>,
    pub compression: Option<f64>,
    pub neurons: Option<usize>,
    pub gates: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub keys: Vec<String>,
    pub rows: Vec<GridRow>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, ToString::to_string)
}

impl GridTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("point");
        for k in &self.keys {
            let _ = write!(s, ",{k}");
        }
        s.push_str(",seed,status,metric,quality,compression,neurons,gates\n");
        for r in &self.rows {
            let _ = write!(s, "{}", r.point);
            for v in &r.values {
                let _ = write!(s, ",{v}");
            }
            let status = match &r.status {
                PointStatus::Ok => "ok".to_string(),
                PointStatus::Failed(m) => format!("failed: {}", m.replace([',', '\n'], ";")),
                PointStatus::Skipped => "skipped".to_string(),
            };
            let _ = writeln!(
                s,
                ",{},{status},{},{},{},{},{}",
                opt(&r.seed),
                opt(&r.metric),
                opt(&r.quality),
                opt(&r.compression),
                opt(&r.neurons),
                opt(&r.gates)
            );
        }
        s
    }
}

fn suffixed(p: &Path, i: usize) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(format!(".p{i}"));
    PathBuf::from(s)
}

/// Quality of a run: the validation metric of the kept epoch.
pub fn run_quality(ckpt: &Checkpoint) -> Option<(String, f64)> {
    let t = &ckpt.meta.training;
    let m = match t.best_epoch {
        Some(e) => t.metrics.iter().find(|m| m.epoch == e),
        None => t.metrics.last(),
    }?;
    Some((m.metric.clone(), m.valid_metric))
}

fn run_point(cfg: &RunConfig) -> Result<(Checkpoint, AnalysisReport, PathBuf)> {
    let run = train_run(cfg, &mut |_| {})?;
    if let Some(e) = run.aborted {
        return Err(e);
    }
    let done = finalize(&run.checkpoint)?;
    let path = finalized_path(&run.checkpoint_path, &run.checkpoint);
    done.save(&path)?;
    let report = report_of(&done)?;
    Ok((done, report, path))
}

/// Runs every grid point in order. Point `i` uses seed `seed + i` and
/// writes its checkpoint with a `.p{i}` suffix; a failing point is
/// recorded and the search continues.
pub fn gridsearch(config_path: &Path, grid_path: &Path) -> Result<GridTable> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    let base = parse_toml(&text)?;
    let grid_text =
        std::fs::read_to_string(grid_path).map_err(|e| Error::Config(format!("{}: {e}", grid_path.display())))?;
    let grid = Grid::parse(&grid_text)?;
    // Fail early on a base config that cannot run at all.
    RunConfig::from_value(base.clone())?;
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::with_capacity(grid.points.len());
    let mut stopped = false;
    for (i, point) in grid.points.iter().enumerate() {
        let mut row = GridRow {
            point: i,
            values: point.iter().map(ToString::to_string).collect(),
            seed: None,
            status: PointStatus::Skipped,
            metric: None,
            quality: None,
            compression: None,
            neurons: None,
            gates: None,
            checkpoint: None,
        };
        if stopped {
            rows.push(row);
            continue;
        }
        let cfg = grid.apply(&base, i).and_then(RunConfig::from_value).map(|mut cfg| {
            cfg.seed = cfg.seed.wrapping_add(i as u64);
            cfg.resolve_paths(base_dir);
            cfg.output.checkpoint = suffixed(&cfg.output.checkpoint, i);
            cfg.output.metrics_log = cfg.output.metrics_log.as_deref().map(|p| suffixed(p, i));
            cfg
        });
        match cfg.and_then(|cfg| run_point(&cfg).map(|r| (cfg, r))) {
            Ok((cfg, (ckpt, report, path))) => {
                row.seed = Some(cfg.seed);
                row.status = PointStatus::Ok;
                if let Some((metric, q)) = run_quality(&ckpt) {
                    row.metric = Some(metric);
                    row.quality = Some(q);
                    stopped = grid.stop.is_some_and(|s| s.met(q));
                }
                row.compression = report.compression.compression;
                let counts = ckpt.meta.masks.iter().flatten().map(count_structure);
                let (n, g) = counts.fold((0, 0), |(a, b), (n, g)| (a + n, b + g));
                row.neurons = Some(n);
                row.gates = Some(g);
                row.checkpoint = Some(path);
            }
            Err(e) => row.status = PointStatus::Failed(e.to_string()),
        }
        rows.push(row);
    }
    Ok(GridTable { keys: grid.keys, rows })
}
