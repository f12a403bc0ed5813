//! Mini-batch training loop and its CSV loss log.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss::LossReport;
use crate::model::{Example, Model};
use crate::optim::Adam;

/// Seed stream for shuffling and reparameterization noise.
const TRAIN_STREAM: u64 = 0x7472_6169;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Step within the epoch.
    pub step: usize,
    pub global_step: usize,
    pub report: LossReport,
}

#[derive(Serialize)]
struct CsvRow {
    epoch: usize,
    step: usize,
    global: f64,
    focal: f64,
    dice: f64,
    kl: f64,
    rec: f64,
    total: f64,
}

/// Trains `model` in place. `on_step` sees every logged row as it happens.
pub fn train(
    model: &mut Model,
    examples: &[Example],
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if examples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let cfg = model.config().clone();
    let o = &cfg.optim;
    let mut adam = Adam::with_betas(o.lr, o.beta1, o.beta2, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut global_step = 0;
    for epoch in 0..o.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(o.batch).enumerate() {
            let diverged = |component: String| Error::Diverged {
                epoch,
                step,
                component,
            };
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let terms = model
                .batch_loss(&tape, &bound, &batch, &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(what) => diverged(what),
                    other => other,
                })?;
            let report = terms.values();
            if let Some(name) = report.first_non_finite() {
                return Err(diverged(name.to_string()));
            }
            let grads = tape.backward(terms.total()?)?;
            model.params.accumulate(&bound, &grads)?;
            // Experts no image in the batch routed to have a true zero gradient.
            for (_, t) in model.params.iter_mut() {
                if t.grad().is_none() {
                    t.accumulate_grad(&vec![0.0; t.numel()])?;
                }
            }
            adam.step(&mut model.params)?;
            let row = LogRow {
                epoch,
                step,
                global_step,
                report,
            };
            on_step(&row);
            log.push(row);
            global_step += 1;
        }
    }
    Ok(log)
}

pub fn write_loss_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    for r in rows {
        let p = &r.report;
        w.serialize(CsvRow {
            epoch: r.epoch,
            step: r.step,
            global: p.global,
            focal: p.local_focal,
            dice: p.local_dice,
            kl: p.kl,
            rec: p.rec,
            total: p.total(),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}
