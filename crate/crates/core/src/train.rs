//! Mini-batch training with Adam and a per-epoch loss log.

use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, ObjectVocab};
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, LossConfig, O2na};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 5e-4,
            dropout: 0.1,
            seed: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.loss.refine_ratio) {
            return Err(Error::Config(format!(
                "refine ratio {} outside [0, 1]",
                self.loss.refine_ratio
            )));
        }
        self.loss.weights.validate()
    }
}

/// Mean of each logged quantity over one epoch's batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: Vec<f64>,
    pub seconds: f64,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Generic training loop. `loss` builds one batch's scalar objective on the
/// tape and returns it with the values to log. Batches, dropout masks and any
/// randomness drawn through `loss` depend only on `cfg.seed`.
pub fn fit<F, C>(
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    mut loss: F,
    mut on_epoch: C,
) -> Result<Vec<EpochRecord>>
where
    F: for<'a> FnMut(&mut Tape<'a>, &'a ParamStore, &Batch) -> Result<(Var, Vec<f64>)>,
    C: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut adam = AdamState::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut sums: Vec<f64> = Vec::new();
        let mut batches = 0usize;
        for batch in data.epoch(cfg.batch_size, cfg.seed, epoch) {
            let grads = {
                let mut tape = Tape::training(cfg.dropout, step_seed(cfg.seed, step));
                let (l, values) = loss(&mut tape, store, &batch)?;
                if !tape.value(l).item().is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {} at epoch {} step {step}",
                        tape.value(l).item(),
                        epoch + 1
                    )));
                }
                if sums.is_empty() {
                    sums = vec![0.0; values.len()];
                }
                for (s, v) in sums.iter_mut().zip(&values) {
                    *s += v;
                }
                tape.backward(l)?;
                tape.param_grads(store)
            };
            adam.step(store, &grads)?;
            step += 1;
            batches += 1;
        }
        if !store.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters after epoch {}",
                epoch + 1
            )));
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            terms: sums.iter().map(|s| s / batches as f64).collect(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(log)
}

pub const LOSS_COLUMNS: [&str; 6] = ["lp", "op", "og", "cg", "cg_refine", "total"];

/// Trains the captioner; each record's terms follow [`LOSS_COLUMNS`].
pub fn train_o2na<C: FnMut(&EpochRecord)>(
    model: &O2na,
    store: &mut ParamStore,
    data: &Dataset,
    objects: &ObjectVocab,
    cfg: &TrainConfig,
    mut on_epoch: C,
) -> Result<Vec<EpochRecord>> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_4A5C);
    fit(
        store,
        data,
        cfg,
        |tape, st, batch| {
            let (l, b): (Var, LossBreakdown) =
                model.full_loss(tape, st, batch, objects, &cfg.loss, &mut mask_rng)?;
            Ok((l, b.terms().to_vec()))
        },
        |rec| {
            info!(
                "epoch {} total {:.4} ({:.1}s)",
                rec.epoch,
                rec.terms.last().copied().unwrap_or(f64::NAN),
                rec.seconds
            );
            on_epoch(rec)
        },
    )
}

/// Tab-separated loss log: a header row, then one row per epoch. Values use
/// the shortest round-trip decimal form, so equal logs mean bit-equal losses.
pub fn format_loss_log(columns: &[&str], records: &[EpochRecord]) -> String {
    let mut out = format!("epoch\t{}\n", columns.join("\t"));
    for r in records {
        out.push_str(&r.epoch.to_string());
        for v in &r.terms {
            out.push('\t');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    out
}
