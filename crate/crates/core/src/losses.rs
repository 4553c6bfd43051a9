//! Segmentation and transfer losses.
//!
//! The slice-level functions are generic over the float type so they can be
//! checked in double precision; the tensor wrappers accumulate in `f64` and
//! return `f32` gradients ready to seed a graph.

use digest_nn::Tensor;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::network::StageOutputs;
use crate::{DigestError, Result};

/// Numerator of the soft Dice ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceNumerator {
    /// `2·ΣSR + ε`, so a perfect prediction scores 1.
    #[default]
    Doubled,
    /// `ΣSR + ε`, without the factor two.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiceConfig {
    pub smoothing: f64,
    pub numerator: DiceNumerator,
}

impl Default for DiceConfig {
    fn default() -> Self {
        Self {
            smoothing: 1.0,
            numerator: DiceNumerator::Doubled,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceValue<F> {
    pub loss: F,
    /// Soft Dice ratio per channel, averaged over the batch.
    pub per_channel: Vec<F>,
    /// d loss / d pred, same layout as `pred`.
    pub grad: Vec<F>,
}

/// Soft Dice loss over a `batch × channels × voxels` buffer.
///
/// `1 − mean_{b,j} (c·ΣS·R + ε) / (ΣS² + ΣR² + ε)` with `c` fixed by
/// `cfg.numerator`.
pub fn soft_dice<F: Float>(
    pred: &[F],
    target: &[F],
    batch: usize,
    channels: usize,
    cfg: DiceConfig,
) -> Result<DiceValue<F>> {
    if pred.len() != target.len() {
        return Err(DigestError::Shape(format!(
            "prediction has {} values, target has {}",
            pred.len(),
            target.len()
        )));
    }
    let groups = batch * channels;
    if groups == 0 || !pred.len().is_multiple_of(groups) || pred.is_empty() {
        return Err(DigestError::Shape(format!(
            "{} values cannot be split into {batch} samples of {channels} channels",
            pred.len()
        )));
    }
    if !(cfg.smoothing > 0.0) {
        return Err(DigestError::Config(format!(
            "Dice smoothing must be positive, got {}",
            cfg.smoothing
        )));
    }
    for (i, &p) in pred.iter().enumerate() {
        if !(p >= F::zero() && p <= F::one()) {
            return Err(DigestError::Domain(format!(
                "prediction {i} is {:?}, expected a probability",
                p.to_f64()
            )));
        }
    }
    if let Some(i) = target.iter().position(|t| !t.is_finite()) {
        return Err(DigestError::Domain(format!("target {i} is not finite")));
    }

    let eps = F::from(cfg.smoothing).unwrap();
    let c = match cfg.numerator {
        DiceNumerator::Doubled => F::from(2.0).unwrap(),
        DiceNumerator::Single => F::one(),
    };
    let two = F::from(2.0).unwrap();
    let n = pred.len() / groups;
    let inv_groups = F::one() / F::from(groups).unwrap();

    let mut grad = vec![F::zero(); pred.len()];
    let mut per_channel = vec![F::zero(); channels];
    let mut ratio_sum = F::zero();
    for g in 0..groups {
        let s = &pred[g * n..(g + 1) * n];
        let r = &target[g * n..(g + 1) * n];
        let mut sr = F::zero();
        let mut ss = F::zero();
        let mut rr = F::zero();
        for (&a, &b) in s.iter().zip(r) {
            sr = sr + a * b;
            ss = ss + a * a;
            rr = rr + b * b;
        }
        let num = c * sr + eps;
        let den = ss + rr + eps;
        let ratio = num / den;
        ratio_sum = ratio_sum + ratio;
        per_channel[g % channels] = per_channel[g % channels] + ratio;

        let den2 = den * den;
        for ((gi, &a), &b) in grad[g * n..(g + 1) * n].iter_mut().zip(s).zip(r) {
            *gi = -inv_groups * (c * b * den - num * two * a) / den2;
        }
    }
    let inv_batch = F::one() / F::from(batch).unwrap();
    for v in &mut per_channel {
        *v = *v * inv_batch;
    }
    Ok(DiceValue {
        loss: F::one() - ratio_sum * inv_groups,
        per_channel,
        grad,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferValue<F> {
    pub loss: F,
    pub per_stage: Vec<F>,
    /// Gradient with respect to each student stage map.
    pub grads: Vec<Vec<F>>,
}

/// Stage-wise L1 between teacher and student maps.
///
/// Each stage contributes `(1/N)·Σ_b mean |t − s|` over its channels and
/// voxels; stages are summed. The teacher side is a constant.
pub fn ds_transfer<F: Float>(teacher: &[&[F]], student: &[&[F]], batch: usize) -> Result<TransferValue<F>> {
    if teacher.len() != student.len() {
        return Err(DigestError::Shape(format!(
            "teacher has {} stages, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    if batch == 0 {
        return Err(DigestError::Shape("batch size must be positive".into()));
    }
    let mut per_stage = Vec::with_capacity(teacher.len());
    let mut grads = Vec::with_capacity(teacher.len());
    let mut loss = F::zero();
    for (z, (t, s)) in teacher.iter().zip(student).enumerate() {
        if t.len() != s.len() {
            return Err(DigestError::Shape(format!(
                "stage {z}: teacher map has {} values, student map has {}",
                t.len(),
                s.len()
            )));
        }
        if t.is_empty() || t.len() % batch != 0 {
            return Err(DigestError::Shape(format!(
                "stage {z}: {} values do not split into {batch} samples",
                t.len()
            )));
        }
        let per_sample = t.len() / batch;
        let inv_n = F::one() / F::from(per_sample).unwrap();
        let inv_b = F::one() / F::from(batch).unwrap();
        let mut stage = F::zero();
        for b in 0..batch {
            let range = b * per_sample..(b + 1) * per_sample;
            let mut acc = F::zero();
            for (&tv, &sv) in t[range.clone()].iter().zip(&s[range]) {
                acc = acc + (tv - sv).abs();
            }
            stage = stage + acc * inv_n;
        }
        stage = stage * inv_b;
        let scale = inv_n * inv_b;
        let grad = t
            .iter()
            .zip(s.iter())
            .map(|(&tv, &sv)| {
                let d = sv - tv;
                if d > F::zero() {
                    scale
                } else if d < F::zero() {
                    -scale
                } else {
                    F::zero()
                }
            })
            .collect();
        loss = loss + stage;
        per_stage.push(stage);
        grads.push(grad);
    }
    Ok(TransferValue { loss, per_stage, grads })
}

/// Total objective: transfer term plus segmentation term, unweighted.
pub fn total_loss(l_ds: f64, l_seg: f64) -> f64 {
    l_ds + l_seg
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn narrow(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect()).expect("shape preserved")
}

/// Dice loss of a `B×C×D×H×W` probability map against a same-shape target.
pub fn dice_loss(pred: &Tensor, target: &Tensor, cfg: DiceConfig) -> Result<(DiceValue<f64>, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(DigestError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (b, c, _) = pred.dims5()?;
    let v = soft_dice(&widen(pred), &widen(target), b, c, cfg)?;
    let g = narrow(pred.shape(), &v.grad);
    Ok((v, g))
}

/// Transfer loss between per-stage teacher and student maps.
pub fn ds_transfer_loss(teacher: &[Tensor], student: &[Tensor]) -> Result<(TransferValue<f64>, Vec<Tensor>)> {
    if teacher.len() != student.len() {
        return Err(DigestError::Shape(format!(
            "teacher has {} stages, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut batch = 1;
    for (z, (t, s)) in teacher.iter().zip(student).enumerate() {
        if t.shape() != s.shape() {
            return Err(DigestError::Shape(format!(
                "stage {z}: teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
        batch = t.shape().first().copied().unwrap_or(1);
    }
    let tw: Vec<Vec<f64>> = teacher.iter().map(widen).collect();
    let sw: Vec<Vec<f64>> = student.iter().map(widen).collect();
    let tr: Vec<&[f64]> = tw.iter().map(Vec::as_slice).collect();
    let sr: Vec<&[f64]> = sw.iter().map(Vec::as_slice).collect();
    let v = ds_transfer(&tr, &sr, batch)?;
    let grads = v.grads.iter().zip(student).map(|(g, s)| narrow(s.shape(), g)).collect();
    Ok((v, grads))
}

/// Max-pools a binary `B×C×D×H×W` target by `factor` along every axis.
pub fn downsample_target(target: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, [d, h, w]) = target.dims5()?;
    if factor == 0 || d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(DigestError::Shape(format!("cannot downsample {d}x{h}x{w} by {factor}")));
    }
    if factor == 1 {
        return Ok(target.clone());
    }
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let mut out = Tensor::zeros(&[b, c, od, oh, ow]);
    let src = target.data();
    let dst = out.data_mut();
    for bc in 0..b * c {
        let s = &src[bc * d * h * w..(bc + 1) * d * h * w];
        let o = &mut dst[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        for z in 0..d {
            for y in 0..h {
                let row = &s[(z * h + y) * w..(z * h + y + 1) * w];
                let orow = &mut o[((z / factor) * oh + y / factor) * ow..][..ow];
                for (x, &v) in row.iter().enumerate() {
                    let cell = &mut orow[x / factor];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Deep-supervision loss used to pretrain the teacher.
///
/// Dice of the final map plus the mean Dice of every stage map (the last
/// stage included) against the max-pooled target. Returns the value and one
/// gradient per stage map.
pub fn teacher_pretrain_loss(outputs: &StageOutputs, target: &Tensor, cfg: DiceConfig) -> Result<(f64, Vec<Tensor>)> {
    let n = outputs.aux.len();
    if n == 0 {
        return Err(DigestError::Shape("no stage maps".into()));
    }
    let (mut total, final_grad) = {
        let (v, g) = dice_loss(&outputs.final_map, target, cfg)?;
        (v.loss, g)
    };
    let weight = 1.0 / n as f64;
    let full = target.shape()[2];
    let mut grads = Vec::with_capacity(n);
    for (z, aux) in outputs.aux.iter().enumerate() {
        let size = aux.shape().get(2).copied().unwrap_or(0);
        if size == 0 || !full.is_multiple_of(size) {
            return Err(DigestError::Shape(format!(
                "stage {z} size {size} does not divide target size {full}"
            )));
        }
        let down = downsample_target(target, full / size)?;
        let (v, mut g) = dice_loss(aux, &down, cfg)?;
        total += weight * v.loss;
        g.scale(weight as f32);
        grads.push(g);
    }
    grads.last_mut().expect("n > 0").add_assign(&final_grad)?;
    Ok((total, grads))
}

/// Per-step loss breakdown of the student objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ds: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub per_stage_ds: Vec<f64>,
    pub per_channel_dice: Vec<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_ds.is_finite()
            && self.l_seg.is_finite()
            && self.l_total.is_finite()
            && self.per_stage_ds.iter().all(|v| v.is_finite())
            && self.per_channel_dice.iter().all(|v| v.is_finite())
    }
}

/// Student objective `ds_weight·L_ds + L_seg` and its gradient per stage map.
///
/// With `ds_weight = 1` this is exactly [`total_loss`].
pub fn student_loss(
    teacher_aux: &[Tensor],
    student: &StageOutputs,
    target: &Tensor,
    cfg: DiceConfig,
    ds_weight: f64,
) -> Result<(LossReport, Vec<Tensor>)> {
    let (ds, mut grads) = ds_transfer_loss(teacher_aux, &student.aux)?;
    let (seg, seg_grad) = dice_loss(&student.final_map, target, cfg)?;
    for g in &mut grads {
        g.scale(ds_weight as f32);
    }
    grads
        .last_mut()
        .ok_or_else(|| DigestError::Shape("no stage maps".into()))?
        .add_assign(&seg_grad)?;
    let l_total = if ds_weight == 1.0 {
        total_loss(ds.loss, seg.loss)
    } else {
        ds_weight * ds.loss + seg.loss
    };
    let report = LossReport {
        l_ds: ds.loss,
        l_seg: seg.loss,
        l_total,
        per_stage_ds: ds.per_stage,
        per_channel_dice: seg.per_channel,
    };
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DiceConfig {
        DiceConfig::default()
    }

    #[test]
    fn dice_rejects_out_of_range_prediction() {
        let err = soft_dice(&[1.5f64], &[1.0], 1, 1, cfg()).unwrap_err();
        assert!(matches!(err, DigestError::Domain(_)));
        let err = soft_dice(&[f64::NAN], &[1.0], 1, 1, cfg()).unwrap_err();
        assert!(matches!(err, DigestError::Domain(_)));
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        assert!(soft_dice(&[0.5f64; 4], &[0.0; 3], 1, 1, cfg()).is_err());
        assert!(soft_dice(&[0.5f64; 4], &[0.0; 4], 1, 3, cfg()).is_err());
    }

    #[test]
    fn single_numerator_halves_perfect_score() {
        let p = [1.0f64; 8];
        let strict = DiceConfig {
            numerator: DiceNumerator::Single,
            ..cfg()
        };
        let v = soft_dice(&p, &p, 1, 1, strict).unwrap();
        // (8 + 1) / (16 + 1)
        assert!((v.loss - (1.0 - 9.0 / 17.0)).abs() < 1e-12);
    }

    #[test]
    fn transfer_reports_stage_index() {
        let a = [0.1f64; 4];
        let b = [0.1f64; 3];
        let err = ds_transfer(&[&a, &a], &[&a, &b], 1).unwrap_err();
        assert!(err.to_string().contains("stage 1"), "{err}");
    }

    #[test]
    fn transfer_averages_over_batch() {
        let t = [0.0f64, 0.0, 1.0, 1.0];
        let s = [0.5f64, 0.5, 1.0, 1.0];
        let v = ds_transfer(&[&t], &[&s], 2).unwrap();
        assert!((v.loss - 0.25).abs() < 1e-12);
        assert_eq!(v.grads[0], vec![0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn downsample_keeps_any_foreground() {
        let mut t = Tensor::zeros(&[1, 1, 4, 4, 4]);
        t.data_mut()[63] = 1.0;
        let d = downsample_target(&t, 2).unwrap();
        assert_eq!(d.shape(), &[1, 1, 2, 2, 2]);
        assert_eq!(d.data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(downsample_target(&t, 3).is_err());
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert!((total_loss(0.3, 0.5) - 0.8).abs() < 1e-15);
    }
}
