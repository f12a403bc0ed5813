//! End-to-end runs shared by the command line and the acceptance suite:
//! fitting a model to a sample set and the five-row module ablation.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Modules, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Example, Model};
use crate::synth::ImageSample;
use crate::train::{csv_err, train, LogRow};

/// Fails with a mismatch naming `image_size` if any sample has another shape.
pub fn check_samples(config: &RunConfig, samples: &[ImageSample]) -> Result<()> {
    let (h, w) = config.encoder.image_size;
    if let Some(s) = samples.iter().find(|s| s.pixels.shape() != [h, w]) {
        return Err(Error::Mismatch {
            field: "image_size".into(),
            expected: format!("{h}x{w}"),
            found: format!("{}x{} ({})", s.pixels.shape()[0], s.pixels.shape()[1], s.id),
        });
    }
    Ok(())
}

/// Encodes every sample once; the encoders are frozen so this is reused
/// across all epochs.
pub fn prepare_examples(model: &Model, samples: &[ImageSample]) -> Result<Vec<Example>> {
    check_samples(model.config(), samples)?;
    samples
        .par_iter()
        .map(|s| Example::new(model.prepare(&s.pixels)?, s.label, &s.mask))
        .collect()
}

/// Builds a fresh model from `config` and trains it on `samples`.
pub fn fit(
    config: RunConfig,
    samples: &[ImageSample],
    on_step: impl FnMut(&LogRow),
) -> Result<(Model, Vec<LogRow>)> {
    let mut model = Model::new(config)?;
    let examples = prepare_examples(&model, samples)?;
    let log = train(&mut model, &examples, on_step)?;
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub modules: Modules,
    /// One entry per seed, in seed order.
    pub image_auroc: Vec<f64>,
    pub pixel_auroc: Vec<f64>,
}

impl AblationRow {
    pub fn mean_image_auroc(&self) -> f64 {
        mean(&self.image_auroc)
    }

    pub fn mean_pixel_auroc(&self) -> f64 {
        mean(&self.pixel_auroc)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains and evaluates every ablation row for every seed on identical data.
/// `on_run` sees `(row name, seed, report)` after each evaluation.
pub fn ablate(
    base: &RunConfig,
    train_set: &[ImageSample],
    eval_set: &[ImageSample],
    seeds: &[u64],
    mut on_run: impl FnMut(&str, u64, &MetricsReport),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    check_samples(base, eval_set)?;
    let mut rows: Vec<AblationRow> = Modules::ablation_rows()
        .into_iter()
        .map(|(name, modules)| AblationRow {
            name,
            modules,
            image_auroc: Vec::new(),
            pixel_auroc: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        for row in &mut rows {
            let config = RunConfig {
                seed,
                modules: row.modules,
                ..base.clone()
            };
            let (model, _) = fit(config, train_set, |_| {})?;
            let (report, _) = evaluate(&model, eval_set)?;
            let undefined =
                || Error::Input("ablation eval set needs both normal and anomalous images".into());
            row.image_auroc.push(report.image_auroc.ok_or_else(undefined)?);
            row.pixel_auroc.push(report.pixel_auroc.ok_or_else(undefined)?);
            on_run(row.name, seed, &report);
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct AblationCsvRow<'a> {
    row: &'a str,
    ctds: bool,
    wcma: bool,
    samoe: bool,
    seeds: usize,
    i_auc: f64,
    p_auc: f64,
}

/// One line per ablation row with seed-averaged I-AUC and P-AUC.
pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    for r in rows {
        w.serialize(AblationCsvRow {
            row: r.name,
            ctds: r.modules.ctds,
            wcma: r.modules.wcma,
            samoe: r.modules.samoe,
            seeds: r.image_auroc.len(),
            i_auc: r.mean_image_auroc(),
            p_auc: r.mean_pixel_auroc(),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
