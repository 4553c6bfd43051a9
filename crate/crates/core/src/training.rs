//! Teacher pretraining and masked student training.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use digest_nn::optim::{Adam, AdamParams, Lookahead, Optimizer, RAdam};
use digest_nn::{Graph, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CaseRef, Dataset, Sample, Split};
use crate::evaluation::{region_dice, SegmentationModel};
use crate::losses::{student_loss, teacher_pretrain_loss, DiceConfig, LossReport};
use crate::masking::{apply_mask, sample_mask, ModalityMask};
use crate::network::{Network, NetworkConfig};
use crate::{DigestError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Teacher,
    Student,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Lookahead around rectified Adam.
    #[default]
    Ranger,
    Adam,
}

pub const LOOKAHEAD_SYNC: u32 = 6;
pub const LOOKAHEAD_STEP: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub cosine_decay_start_epoch: usize,
    pub optimizer_kind: OptimizerKind,
    pub weight_decay: f64,
    pub crop: [usize; 3],
    pub seed: u64,
    pub phase: Phase,
    pub copy_init: bool,
    /// Weight of the transfer term in the student objective.
    pub ds_weight: f64,
    /// Student sees every modality at every step.
    pub full_mask: bool,
    pub dice: DiceConfig,
    /// Masks drawn per validation case when selecting a student.
    pub val_masks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            lr_initial: 1e-4,
            cosine_decay_start_epoch: 100,
            optimizer_kind: OptimizerKind::Ranger,
            weight_decay: 0.0,
            crop: [128, 128, 128],
            seed: 0,
            phase: Phase::Teacher,
            copy_init: true,
            ds_weight: 1.0,
            full_mask: false,
            dice: DiceConfig::default(),
            val_masks: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DigestError::Config(m));
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs > 0 && !(self.cosine_decay_start_epoch > 0 && self.cosine_decay_start_epoch <= self.epochs) {
            return bad(format!(
                "cosine_decay_start_epoch {} must lie in 1..={}",
                self.cosine_decay_start_epoch, self.epochs
            ));
        }
        if self.crop.contains(&0) {
            return bad(format!("crop {:?} has an empty axis", self.crop));
        }
        if !(self.weight_decay >= 0.0 && self.ds_weight >= 0.0) {
            return bad("weight_decay and ds_weight must be non-negative".into());
        }
        if !(self.dice.smoothing > 0.0) {
            return bad("dice smoothing must be positive".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> Box<dyn Optimizer> {
        let hp = AdamParams {
            weight_decay: self.weight_decay as f32,
            ..AdamParams::default()
        };
        match self.optimizer_kind {
            OptimizerKind::Ranger => Box::new(Lookahead::new(RAdam::new(hp), LOOKAHEAD_SYNC, LOOKAHEAD_STEP)),
            OptimizerKind::Adam => Box::new(Adam::new(hp)),
        }
    }
}

/// Constant rate until `cosine_decay_start_epoch`, then half-cosine decay.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(DigestError::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let start = cfg.cosine_decay_start_epoch;
    if epoch < start {
        return Ok(cfg.lr_initial);
    }
    let span = (cfg.epochs - start) as f64;
    let t = (epoch - start) as f64 / span;
    Ok(cfg.lr_initial * 0.5 * (1.0 + (PI * t).cos()))
}

/// One optimisation step, as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<ModalityMask>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<LossReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Validation Dice (ET, TC, WT).
    pub val_dice: [f64; 3],
    pub val_mean: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation network (the initial one when no epoch ran).
    pub network: Network,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Where training progress goes; `None` keeps logs in memory only.
pub struct LogSink<'a> {
    pub steps: Option<&'a mut dyn Write>,
    pub epochs: Option<&'a mut dyn Write>,
}

impl LogSink<'_> {
    pub fn none() -> Self {
        LogSink {
            steps: None,
            epochs: None,
        }
    }
}

fn write_line<T: Serialize>(w: &mut Option<&mut dyn Write>, item: &T) -> Result<()> {
    if let Some(w) = w.as_deref_mut() {
        let line = serde_json::to_string(item).map_err(|e| DigestError::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| DigestError::io("training log", e))?;
    }
    Ok(())
}

fn seed_mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 31;
    x.wrapping_mul(0x94d0_49bb_1331_11eb)
}

fn batches(cases: &[CaseRef], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Sample>> {
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, 1, epoch as u64)));
    let mut out = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let samples = chunk
            .iter()
            .map(|&i| cases[i].sample(cfg.crop, true, seed_mix(cfg.seed, 2 + epoch as u64, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample {
            id: samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+"),
            input: Tensor::stack_batch(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?,
            target: Tensor::stack_batch(&samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>())?,
        });
    }
    Ok(out)
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DigestError::Divergence {
            step,
            msg: format!("{what} is {v}"),
        })
    }
}

fn apply_grads(
    net: &mut Network,
    g: &Graph,
    bound: &crate::network::BoundParams,
    opt: &mut dyn Optimizer,
    lr: f64,
    step: usize,
) -> Result<()> {
    let grads: Vec<Option<Tensor>> = (0..bound.len()).map(|i| g.grad(bound.var(i)).cloned()).collect();
    for (i, gr) in grads.iter().enumerate() {
        if let Some(t) = gr {
            if !t.all_finite() {
                return Err(DigestError::Divergence {
                    step,
                    msg: format!("non-finite gradient for {}", net.params().name(i)),
                });
            }
        }
    }
    opt.step(net.params_mut(), &grads, lr as f32);
    Ok(())
}

/// Mean Dice per region over `samples`, each under every mask in `masks`.
pub fn validation_dice<M: SegmentationModel>(
    model: &M,
    samples: &[Sample],
    masks: &[Vec<ModalityMask>],
) -> Result<[f64; 3]> {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (s, ms) in samples.iter().zip(masks) {
        for &m in ms {
            let d = region_dice(&model.predict(&apply_mask(&s.input, m)?)?, &s.target)?;
            for j in 0..3 {
                acc[j] += d[j];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok([0.0; 3]);
    }
    Ok(acc.map(|v| v / n as f64))
}

struct Selection {
    best: Option<(usize, f64, Network)>,
}

impl Selection {
    fn offer(&mut self, epoch: usize, score: f64, net: &Network) {
        if self.best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            self.best = Some((epoch, score, net.clone()));
        }
    }
}

fn finish(init: Network, sel: Selection, steps: Vec<StepLog>, epochs: Vec<EpochLog>) -> TrainOutcome {
    match sel.best {
        Some((e, s, net)) => TrainOutcome {
            network: net,
            best_epoch: Some(e),
            best_val: s,
            steps,
            epochs,
        },
        None => TrainOutcome {
            network: init,
            best_epoch: None,
            best_val: f64::NAN,
            steps,
            epochs,
        },
    }
}

/// Trains a teacher on complete inputs with deep supervision against the
/// ground truth and keeps the epoch with the best validation Dice.
pub fn pretrain_teacher(
    dataset: &Dataset,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    sink: &mut LogSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Teacher {
        return Err(DigestError::Config("pretrain_teacher needs phase = \"teacher\"".into()));
    }
    let mut net = Network::new(net_cfg.clone())?;
    let init = net.clone();
    let train = dataset.cases(Split::Train);
    if cfg.epochs > 0 && train.is_empty() {
        return Err(DigestError::Config("no training cases".into()));
    }
    let val = dataset.eval_samples(Split::Val, cfg.crop)?;
    let val_masks = vec![vec![ModalityMask::FULL]; val.len()];
    let mut opt = cfg.optimizer();
    let mut sel = Selection { best: None };
    let (mut steps, mut epochs) = (Vec::new(), Vec::new());
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_schedule(epoch, cfg)?;
        let mut loss_sum = 0.0;
        let batch_list = batches(train, cfg, epoch)?;
        for b in &batch_list {
            net.check_input_shape(b.input.shape())?;
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.input(b.input.clone());
            let vars = net.forward_graph(&mut g, x, &bound)?;
            let outs = vars.collect(&g);
            let (loss, grads) = teacher_pretrain_loss(&outs, &b.target, cfg.dice)?;
            check_finite(step, "teacher loss", loss)?;
            g.backward(vars.aux.iter().copied().zip(grads).collect())?;
            apply_grads(&mut net, &g, &bound, opt.as_mut(), lr, step)?;
            let log = StepLog {
                step,
                epoch,
                lr,
                loss,
                mask: None,
                report: None,
            };
            write_line(&mut sink.steps, &log)?;
            steps.push(log);
            loss_sum += loss;
            step += 1;
        }
        let val_dice = if val.is_empty() {
            [0.0; 3]
        } else {
            validation_dice(&net, &val, &val_masks)?
        };
        let val_mean = val_dice.iter().sum::<f64>() / 3.0;
        sel.offer(epoch, val_mean, &net);
        let e = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / batch_list.len().max(1) as f64,
            val_dice,
            val_mean,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!(
            "teacher epoch {epoch}: loss {:.4}, val Dice ET {:.3} TC {:.3} WT {:.3}",
            e.mean_loss, val_dice[0], val_dice[1], val_dice[2]
        );
        write_line(&mut sink.epochs, &e)?;
        epochs.push(e);
    }
    Ok(finish(init, sel, steps, epochs))
}

/// Builds the student, copying matching teacher weights when `copy_init`.
pub fn init_student(teacher: &Network, student_cfg: &NetworkConfig, copy_init: bool) -> Result<Network> {
    let t = teacher.config();
    let s = student_cfg;
    if (t.in_channels, t.out_channels, t.base_width, t.depth, t.norm_kind)
        != (s.in_channels, s.out_channels, s.base_width, s.depth, s.norm_kind)
    {
        return Err(DigestError::Structure(format!(
            "teacher {t:?} and student {s:?} differ beyond attention blocks"
        )));
    }
    let mut net = Network::new(s.clone())?;
    if copy_init {
        net.init_from(teacher)?;
    }
    Ok(net)
}

/// Trains a student on Bernoulli-masked inputs against the frozen teacher's
/// stage maps plus Dice on its final map.
pub fn train_student(
    dataset: &Dataset,
    teacher: &Network,
    student_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    sink: &mut LogSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Student {
        return Err(DigestError::Config("train_student needs phase = \"student\"".into()));
    }
    let mut net = init_student(teacher, student_cfg, cfg.copy_init)?;
    let init = net.clone();
    let train = dataset.cases(Split::Train);
    if cfg.epochs > 0 && train.is_empty() {
        return Err(DigestError::Config("no training cases".into()));
    }
    let val = dataset.eval_samples(Split::Val, cfg.crop)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, 3, 0));
    let val_masks: Vec<Vec<ModalityMask>> = val
        .iter()
        .map(|_| (0..cfg.val_masks.max(1)).map(|_| sample_mask(&mut mask_rng)).collect())
        .collect();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, 4, 0));
    let mut opt = cfg.optimizer();
    let mut sel = Selection { best: None };
    let (mut steps, mut epochs) = (Vec::new(), Vec::new());
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_schedule(epoch, cfg)?;
        let mut loss_sum = 0.0;
        let batch_list = batches(train, cfg, epoch)?;
        for b in &batch_list {
            net.check_input_shape(b.input.shape())?;
            let mask = if cfg.full_mask {
                ModalityMask::FULL
            } else {
                sample_mask(&mut mask_rng)
            };
            let teacher_aux = teacher.forward(&b.input)?.aux;
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.input(apply_mask(&b.input, mask)?);
            let vars = net.forward_graph(&mut g, x, &bound)?;
            let outs = vars.collect(&g);
            let (report, grads) = student_loss(&teacher_aux, &outs, &b.target, cfg.dice, cfg.ds_weight)?;
            check_finite(step, "student loss", report.l_total)?;
            g.backward(vars.aux.iter().copied().zip(grads).collect())?;
            apply_grads(&mut net, &g, &bound, opt.as_mut(), lr, step)?;
            loss_sum += report.l_total;
            let log = StepLog {
                step,
                epoch,
                lr,
                loss: report.l_total,
                mask: Some(mask),
                report: Some(report),
            };
            write_line(&mut sink.steps, &log)?;
            steps.push(log);
            step += 1;
        }
        let val_dice = if val.is_empty() {
            [0.0; 3]
        } else {
            validation_dice(&net, &val, &val_masks)?
        };
        let val_mean = val_dice.iter().sum::<f64>() / 3.0;
        sel.offer(epoch, val_mean, &net);
        let e = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / batch_list.len().max(1) as f64,
            val_dice,
            val_mean,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!(
            "student epoch {epoch}: loss {:.4}, val Dice ET {:.3} TC {:.3} WT {:.3}",
            e.mean_loss, val_dice[0], val_dice[1], val_dice[2]
        );
        write_line(&mut sink.epochs, &e)?;
        epochs.push(e);
    }
    Ok(finish(init, sel, steps, epochs))
}
