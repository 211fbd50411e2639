use std::fs;
use std::path::{Path, PathBuf};

use hwau_core::data::{read_volume, stack_volumes, write_phantom_dataset, write_volume, CaseRecord, Manifest, Split, Volume};
use hwau_core::metrics::{CaseMetrics, MetricReport, ReportRow};
use hwau_core::network::{read_checkpoint, HwaUnetr, ModelConfig};
use hwau_core::train::{evaluate, train};
use hwau_core::{Error, ParamStore};
use serde::Serialize;

use crate::rundir::archive;
use crate::{create_run_dir, CliError, Invocation, RunConfig};

/// What a command produced: its output directory and the text for stdout.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub text: String,
}

/// One configuration of the block ablation, from no blocks to all three.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub hwa: bool,
    pub sgc: bool,
    pub tfm: bool,
}

pub const ABLATION_ROWS: [AblationRow; 4] = [
    AblationRow { hwa: false, sgc: false, tfm: false },
    AblationRow { hwa: false, sgc: false, tfm: true },
    AblationRow { hwa: false, sgc: true, tfm: true },
    AblationRow { hwa: true, sgc: true, tfm: true },
];

impl AblationRow {
    pub fn name(&self) -> String {
        let on: Vec<&str> = [("hwa", self.hwa), ("sgc", self.sgc), ("tfm", self.tfm)]
            .iter()
            .filter(|(_, f)| *f)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }

    pub fn apply(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig { hwa: self.hwa, sgc: self.sgc, tfm: self.tfm, ..model.clone() }
    }
}

pub enum EvalSource {
    Checkpoint(PathBuf),
    /// Directory holding `<case id>/pred<c>.hwav` probability volumes.
    Predictions(PathBuf),
}

/// Writes `count` phantom cases and a split manifest into `out`, or into a
/// fresh run directory when `out` is absent.
pub fn cmd_phantom(cfg: &RunConfig, count: usize, out: Option<&Path>, inv: &Invocation) -> Result<Outcome, CliError> {
    if count == 0 {
        return Err(CliError::Config("phantom: count must be positive".into()));
    }
    let dir = match out {
        Some(d) => {
            if d.exists() && fs::read_dir(d).map_err(Error::from)?.next().is_some() {
                return Err(CliError::Config(format!("phantom: output directory {} is not empty", d.display())));
            }
            fs::create_dir_all(d).map_err(Error::from)?;
            archive(d, cfg, inv)?;
            d.to_path_buf()
        }
        None => create_run_dir(cfg, inv)?,
    };
    let manifest = write_phantom_dataset(&dir, count, &cfg.phantom.spec, cfg.seed)?;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| manifest.of_split(s).count());
    Ok(Outcome {
        text: format!(
            "wrote {count} cases to {} (train {}, val {}, test {})\n",
            dir.join("manifest.txt").display(),
            counts[0],
            counts[1],
            counts[2]
        ),
        run_dir: dir,
    })
}

/// The configured manifest, or a phantom set generated under `run_dir/data`.
fn dataset(cfg: &RunConfig, run_dir: &Path) -> Result<Manifest, CliError> {
    match &cfg.data.manifest {
        Some(p) => Ok(Manifest::read(p).map_err(data_io)?),
        None => Ok(write_phantom_dataset(&run_dir.join("data"), cfg.phantom.count, &cfg.phantom.spec, cfg.seed)?),
    }
}

fn required_manifest(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let p = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Config("data.manifest is required for this command".into()))?;
    Ok(Manifest::read(p).map_err(data_io)?)
}

/// Missing input files are data errors, not configuration errors.
fn data_io(e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Data(io.to_string()),
        other => other,
    }
}

fn cases(manifest: &Manifest, split: Split) -> Result<Vec<CaseRecord>, CliError> {
    Ok(manifest.of_split(split).map(|e| manifest.load(e)).collect::<hwau_core::Result<_>>()?)
}

fn channel_labels(cases: &[CaseRecord]) -> Vec<String> {
    cases.first().map_or_else(Vec::new, |c| c.masks.iter().map(|m| m.label.clone()).collect())
}

/// Loads a checkpoint and checks it against the parameters `model` expects.
pub fn load_checkpoint(model_cfg: &ModelConfig, path: &Path) -> Result<(HwaUnetr, ParamStore<f32>), CliError> {
    let (model, fresh) = HwaUnetr::new(model_cfg.clone(), 0)?;
    let store: ParamStore<f32> = read_checkpoint(path).map_err(data_io)?;
    let expected: Vec<(&str, &[usize])> = fresh.iter().map(|(n, t)| (n, t.shape())).collect();
    let found: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != found {
        let first = expected.iter().zip(&found).find(|(a, b)| a != b);
        return Err(CliError::Config(format!(
            "checkpoint {} does not match the model config ({} vs {} tensors{})",
            path.display(),
            found.len(),
            expected.len(),
            first.map_or(String::new(), |(a, b)| format!("; first difference {} {:?} vs {} {:?}", b.0, b.1, a.0, a.1))
        )));
    }
    Ok((model, store))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    row: &'a ReportRow,
    cases: &'a [CaseMetrics],
}

fn write_report(dir: &Path, rows: &[ReportRow], reports: &[&MetricReport], table: &str) -> Result<(), CliError> {
    let body: Vec<EvalReport> = rows.iter().zip(reports).map(|(row, r)| EvalReport { row, cases: &r.cases }).collect();
    let json = serde_json::to_string_pretty(&body).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(dir.join("report.json"), json + "\n").map_err(Error::from)?;
    fs::write(dir.join("report.md"), table).map_err(Error::from)?;
    Ok(())
}

/// Trains on the train split, validating on the val split each epoch.
pub fn cmd_train(cfg: &RunConfig, inv: &Invocation) -> Result<Outcome, CliError> {
    let dir = create_run_dir(cfg, inv)?;
    let manifest = dataset(cfg, &dir)?;
    let train_cases = cases(&manifest, Split::Train)?;
    let val_cases = cases(&manifest, Split::Val)?;
    let (model, store) = HwaUnetr::new(cfg.model.clone(), cfg.seed)?;
    log::info!(
        "training {} parameters on {} cases ({} validation) into {}",
        store.numel(),
        train_cases.len(),
        val_cases.len(),
        dir.display()
    );
    let out = train(&model, store.cast(), &train_cases, &val_cases, &cfg.train, cfg.seed, Some(&dir))?;
    let last = out.records.last().expect("at least one epoch");
    Ok(Outcome {
        text: format!(
            "{} steps, final loss {:.5}, best epoch {}; outputs in {}\n",
            out.steps,
            last.train_loss,
            out.best_epoch,
            dir.display()
        ),
        run_dir: dir,
    })
}

/// Scores a checkpoint (tiled inference) or stored predictions against the
/// masks of the configured split.
pub fn cmd_eval(cfg: &RunConfig, source: &EvalSource, inv: &Invocation) -> Result<Outcome, CliError> {
    let manifest = required_manifest(cfg)?;
    let split = cfg.eval_split()?;
    let cases = cases(&manifest, split)?;
    if cases.is_empty() {
        return Err(Error::Data(format!("no cases in the {split} split")).into());
    }
    let (report, name) = match source {
        EvalSource::Checkpoint(path) => {
            let (model, store) = load_checkpoint(&cfg.model, path)?;
            (evaluate(&model, &store, &cases, cfg.train.crop, cfg.train.overlap)?, "checkpoint")
        }
        EvalSource::Predictions(dir) => {
            let mut report = MetricReport::default();
            for case in &cases {
                let vols = (0..case.masks.len())
                    .map(|c| read_volume(&dir.join(&case.id).join(format!("pred{c}.hwav"))).map_err(data_io))
                    .collect::<hwau_core::Result<Vec<_>>>()?;
                let probs = stack_volumes(&vols)?;
                report.cases.push(CaseMetrics::evaluate(&case.id, &probs, &case.mask_tensor()?, case.images[0].spacing)?);
            }
            (report, "predictions")
        }
    };
    let run_dir = create_run_dir(cfg, inv)?;
    let row = report.row(name);
    let table = ReportRow::table(std::slice::from_ref(&row), &channel_labels(&cases));
    write_report(&run_dir, &[row], &[&report], &table)?;
    Ok(Outcome { run_dir, text: table })
}

/// Predicts one case from its modality volumes and writes
/// `<run dir>/<id>/pred<c>.hwav` probability volumes.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, volumes: &[PathBuf], id: &str, inv: &Invocation) -> Result<Outcome, CliError> {
    let (model, store) = load_checkpoint(&cfg.model, checkpoint)?;
    if volumes.len() != cfg.model.in_channels {
        return Err(CliError::Config(format!(
            "infer: model takes {} modalities, got {} volumes",
            cfg.model.in_channels,
            volumes.len()
        )));
    }
    let vols = volumes.iter().map(|p| read_volume(p).map_err(data_io)).collect::<hwau_core::Result<Vec<_>>>()?;
    let image = stack_volumes(&vols)?;
    let probs = model.infer_volume(&store, &image, cfg.train.crop, cfg.train.overlap)?;
    let run_dir = create_run_dir(cfg, inv)?;
    let case_dir = run_dir.join(id);
    fs::create_dir_all(&case_dir).map_err(Error::from)?;
    let extents = vols[0].extents;
    let n: usize = extents.iter().product();
    let mut text = String::new();
    for c in 0..cfg.model.out_channels {
        let v = Volume::new(extents, vols[0].spacing, format!("probability-{c}"), probs.data()[c * n..][..n].to_vec())?;
        let path = case_dir.join(format!("pred{c}.hwav"));
        write_volume(&path, &v)?;
        text.push_str(&format!("{}\n", path.display()));
    }
    Ok(Outcome { run_dir, text })
}

/// Trains every [`ABLATION_ROWS`] configuration under one seed and scores
/// each best checkpoint on the evaluation split.
pub fn cmd_ablate(cfg: &RunConfig, inv: &Invocation) -> Result<Outcome, CliError> {
    let run_dir = create_run_dir(cfg, inv)?;
    let manifest = dataset(cfg, &run_dir)?;
    let train_cases = cases(&manifest, Split::Train)?;
    let val_cases = cases(&manifest, Split::Val)?;
    let split = cfg.eval_split()?;
    let eval_cases = cases(&manifest, split)?;
    if eval_cases.is_empty() {
        return Err(Error::Data(format!("no cases in the {split} split")).into());
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for row in ABLATION_ROWS {
        let name = row.name();
        let row_dir = run_dir.join(&name);
        fs::create_dir_all(&row_dir).map_err(Error::from)?;
        let (model, store) = HwaUnetr::new(row.apply(&cfg.model), cfg.seed)?;
        log::info!("ablation row {name}: {} parameters", store.numel());
        let out = train(&model, store.cast(), &train_cases, &val_cases, &cfg.train, cfg.seed, Some(&row_dir))?;
        let report = evaluate(&model, &out.best, &eval_cases, cfg.train.crop, cfg.train.overlap)?;
        rows.push(report.row(&name));
        reports.push(report);
    }
    let table = ReportRow::table(&rows, &channel_labels(&eval_cases));
    write_report(&run_dir, &rows, &reports.iter().collect::<Vec<_>>(), &table)?;
    Ok(Outcome { run_dir, text: table })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_grow_from_none_to_all() {
        let names: Vec<String> = ABLATION_ROWS.iter().map(AblationRow::name).collect();
        assert_eq!(names, ["none", "tfm", "sgc+tfm", "hwa+sgc+tfm"]);
        let full = ABLATION_ROWS[3].apply(&ModelConfig { hwa: false, ..ModelConfig::default() });
        assert!(full.hwa && full.sgc && full.tfm);
    }
}
