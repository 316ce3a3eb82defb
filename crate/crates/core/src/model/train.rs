use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::net::{Batch, GazeNet};
use crate::autodiff::{Tape, Var};
use crate::data::GazeSample;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Mean of `1 − cos` between predicted `[n, 2]` and ground-truth `[n, 2]` directions.
pub fn direction_loss(tape: &mut Tape, target: Var, prediction: Var) -> Result<Var> {
    if tape.value(target).values().chunks(2).any(|d| d[0] == 0.0 && d[1] == 0.0) {
        return Err(Error::invalid("ground-truth direction is zero"));
    }
    tape.cosine_loss(prediction, target)
}

/// Binary cross entropy averaged over every cell.
pub fn heatmap_loss(tape: &mut Tape, target: Var, prediction: Var) -> Result<Var> {
    let (t, p) = (tape.value(target).shape(), tape.value(prediction).shape());
    if t != p {
        return Err(Error::shape("heatmap_loss", format!("target {t:?} vs prediction {p:?}")));
    }
    tape.binary_cross_entropy(prediction, target)
}

/// `ℓ_d + λ·ℓ_h`, or `ℓ_h` alone without mid-layer supervision.
pub fn total_loss(tape: &mut Tape, direction: Var, heatmap: Var, lambda: f64, mid_layer_supervision: bool) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    if !mid_layer_supervision {
        return Ok(heatmap);
    }
    let weighted = tape.scale(heatmap, lambda)?;
    tape.add(direction, weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Direction pathway on the direction loss.
    Direction = 1,
    /// Heatmap pathway on the heatmap loss, direction pathway frozen.
    Heatmap = 2,
    /// Everything on the combined loss.
    Finetune = 3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub loss_d: f64,
    /// Absent while only the direction pathway runs.
    pub loss_h: Option<f64>,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "stage,epoch,loss_d,loss_h,loss,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let lh = r.loss_h.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{:.3}", r.stage, r.epoch, r.loss_d, lh, r.loss, r.seconds);
        }
        out
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage as u8)
    }
}

fn stage_plan(cfg: &TrainConfig) -> Vec<(Stage, usize)> {
    let mut plan = Vec::new();
    if cfg.mid_layer_supervision {
        plan.push((Stage::Direction, cfg.stage1_epochs));
    }
    plan.push((Stage::Heatmap, cfg.stage2_epochs));
    plan.push((Stage::Finetune, cfg.finetune_epochs));
    plan
}

struct StepLosses {
    direction: f64,
    heatmap: Option<f64>,
    total: f64,
}

fn step(net: &mut GazeNet, cfg: &TrainConfig, stage: Stage, batch: &Batch, ids: &[ParamId], adam: &mut Adam) -> Result<StepLosses> {
    let trainable: Vec<bool> = {
        let mut mask = vec![false; net.params.len()];
        ids.iter().for_each(|id| mask[id.0] = true);
        mask
    };
    let mut tape = Tape::new();
    let vars = net.params.bind(&mut tape, |id| trainable[id.0]);
    let target_dir = tape.constant(batch.directions.clone());
    let (ld, lh) = if stage == Stage::Direction {
        let crops = tape.constant(batch.crops.clone());
        let positions = tape.constant(batch.positions.clone());
        let d = net.direction_forward(&mut tape, &vars, crops, positions)?;
        (direction_loss(&mut tape, target_dir, d)?, None)
    } else {
        let out = net.forward(&mut tape, &vars, batch)?;
        let targets = batch.targets.clone().expect("training batches carry targets");
        let target_map = tape.constant(targets);
        let ld = direction_loss(&mut tape, target_dir, out.direction)?;
        (ld, Some(heatmap_loss(&mut tape, target_map, out.heatmap)?))
    };
    let loss = match (stage, lh) {
        (Stage::Direction, _) => ld,
        (Stage::Heatmap, Some(lh)) => lh,
        (Stage::Finetune, Some(lh)) => total_loss(&mut tape, ld, lh, cfg.lambda, cfg.mid_layer_supervision)?,
        _ => unreachable!(),
    };
    let losses = StepLosses {
        direction: tape.value(ld).item(),
        heatmap: lh.map(|v| tape.value(v).item()),
        total: tape.value(loss).item(),
    };
    tape.backward(loss)?;
    net.params.pull_grads(&tape, &vars, ids)?;
    adam.step(&mut net.params.select_mut(ids))?;
    Ok(losses)
}

/// Run the staged schedule. `on_epoch` sees every finished epoch and the network after it.
///
/// Stage 1 trains the direction pathway alone; stage 2 trains the heatmap pathway with
/// the direction pathway frozen; stage 3 fine-tunes everything. Without mid-layer
/// supervision stage 1 is skipped and stage 3 optimizes the heatmap loss only.
pub fn train_staged(
    net: &mut GazeNet,
    samples: &[GazeSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &GazeNet) -> Result<()>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let targets = Some((net.spec.heatmap_resolution, cfg.sigma));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();

    for (stage, epochs) in stage_plan(cfg) {
        let ids = match stage {
            Stage::Direction => net.direction_params(),
            Stage::Heatmap => net.heatmap_params(),
            Stage::Finetune => (0..net.params.len()).map(ParamId).collect(),
        };
        let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
        for epoch in 1..=epochs {
            let start = Instant::now();
            order.shuffle(&mut rng);
            let (mut sd, mut sh, mut st, mut count) = (0.0, 0.0, 0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let picked: Vec<&GazeSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let batch = Batch::new(&picked, if stage == Stage::Direction { None } else { targets })?;
                let losses = step(net, cfg, stage, &batch, &ids, &mut adam).map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("stage {} epoch {epoch}: {what}", stage as u8)),
                    other => other,
                })?;
                if !losses.total.is_finite() {
                    return Err(Error::NonFinite(format!("stage {} epoch {epoch}: loss {}", stage as u8, losses.total)));
                }
                let n = picked.len() as f64;
                sd += losses.direction * n;
                sh += losses.heatmap.unwrap_or(0.0) * n;
                st += losses.total * n;
                count += picked.len();
            }
            let n = count as f64;
            let record = EpochRecord {
                stage: stage as u8,
                epoch,
                loss_d: sd / n,
                loss_h: (stage != Stage::Direction).then_some(sh / n),
                loss: st / n,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_epoch(&record, net)?;
            log.records.push(record);
        }
    }
    Ok(log)
}

/// Gradient of `ℓ_d` and of `λ·ℓ_h` with respect to the direction pathway, computed separately.
pub fn supervision_paths(net: &GazeNet, batch: &Batch, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let ids = net.direction_params();
    let grads = |use_direction: bool| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, |id| ids.contains(&id));
        let out = net.forward(&mut tape, &vars, batch)?;
        let loss = if use_direction {
            let t = tape.constant(batch.directions.clone());
            direction_loss(&mut tape, t, out.direction)?
        } else {
            let targets: Tensor = batch.targets.clone().ok_or_else(|| Error::invalid("batch has no targets"))?;
            let t = tape.constant(targets);
            let lh = heatmap_loss(&mut tape, t, out.heatmap)?;
            tape.scale(lh, lambda)?
        };
        tape.backward(loss)?;
        Ok(ids.iter().flat_map(|id| tape.grad(vars[id.0]).unwrap_or(&[]).to_vec()).collect())
    };
    Ok((grads(true)?, grads(false)?))
}
