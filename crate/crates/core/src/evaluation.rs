//! Dice scoring over the 15 modality subsets and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use digest_nn::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::masking::{apply_mask, enumerate_subsets, ModalityMask};
use crate::network::Network;
use crate::{DigestError, Result};

pub const THRESHOLD: f32 = 0.5;
pub const CSV_HEADER: &str = "mask,dice_et,dice_tc,dice_wt";
pub const DECIMALS: usize = 4;

/// Inference cropping: a centred training-size crop, or sliding windows over
/// the whole brain box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sliding_window: bool,
    /// Fraction of each window shared with its neighbour.
    pub overlap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sliding_window: false,
            overlap: 0.5,
        }
    }
}

/// Hard Dice `2|S∩R| / (|S| + |R|)`, 1 when both are empty.
pub fn dice_score(pred: &[bool], target: &[bool]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(DigestError::Shape(format!(
            "prediction has {} voxels, target has {}",
            pred.len(),
            target.len()
        )));
    }
    let (mut inter, mut s, mut r) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(target) {
        inter += (a && b) as usize;
        s += a as usize;
        r += b as usize;
    }
    if s + r == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (s + r) as f64)
}

/// Per-region Dice of one `1×3×D×H×W` probability map against its target.
pub fn region_dice(prob: &Tensor, target: &Tensor) -> Result<[f64; 3]> {
    if prob.shape() != target.shape() {
        return Err(DigestError::Shape(format!(
            "prediction {:?} vs target {:?}",
            prob.shape(),
            target.shape()
        )));
    }
    let (b, c, _) = prob.dims5()?;
    if b != 1 || c != 3 {
        return Err(DigestError::Shape(format!(
            "expected one 3-channel map, got {:?}",
            prob.shape()
        )));
    }
    let n = prob.len() / 3;
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        let p: Vec<bool> = prob.data()[j * n..(j + 1) * n]
            .iter()
            .map(|&v| v >= THRESHOLD)
            .collect();
        let t: Vec<bool> = target.data()[j * n..(j + 1) * n]
            .iter()
            .map(|&v| v >= THRESHOLD)
            .collect();
        *o = dice_score(&p, &t)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub mask: ModalityMask,
    /// ET, TC, WT.
    pub dice: [f64; 3],
}

/// One row per evaluation subset plus the column means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceTable {
    pub rows: Vec<DiceRow>,
    pub mean: [f64; 3],
}

fn column_means(rows: &[DiceRow]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for r in rows {
        for j in 0..3 {
            m[j] += r.dice[j];
        }
    }
    m.map(|v| v / rows.len() as f64)
}

fn round_to(v: f64, decimals: usize) -> f64 {
    format!("{v:.decimals$}").parse().expect("formatted float parses")
}

impl DiceTable {
    /// Checks the subset order and fills in the mean row.
    pub fn from_rows(rows: Vec<DiceRow>) -> Result<Self> {
        let order = enumerate_subsets();
        if rows.len() != order.len() {
            return Err(DigestError::Format(format!(
                "{} rows, expected {}",
                rows.len(),
                order.len()
            )));
        }
        for (i, (r, m)) in rows.iter().zip(order).enumerate() {
            if r.mask != m {
                return Err(DigestError::Format(format!(
                    "row {} is mask {}, expected {m}",
                    i + 1,
                    r.mask
                )));
            }
            if r.dice.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DigestError::Format(format!("row {} has a score outside [0, 1]", i + 1)));
            }
        }
        let mean = column_means(&rows);
        Ok(Self { rows, mean })
    }

    pub fn row(&self, mask: ModalityMask) -> Option<&DiceRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }

    /// Mean score of `region` over the rows selected by `keep`.
    pub fn mean_where(&self, region: usize, keep: impl Fn(ModalityMask) -> bool) -> f64 {
        let sel: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| keep(r.mask))
            .map(|r| r.dice[region])
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }

    /// The table as it reads back from the machine report.
    pub fn rounded(&self) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| DiceRow {
                    mask: r.mask,
                    dice: r.dice.map(|v| round_to(v, DECIMALS)),
                })
                .collect(),
            mean: self.mean.map(|v| round_to(v, DECIMALS)),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let [a, b, c] = r.dice;
            writeln!(s, "{},{a:.4},{b:.4},{c:.4}", r.mask).unwrap();
        }
        let [a, b, c] = self.mean;
        writeln!(s, "mean,{a:.4},{b:.4},{c:.4}").unwrap();
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => {
                return Err(DigestError::Format(format!(
                    "expected header `{CSV_HEADER}`, found {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        let mut mean = None;
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(DigestError::Format(format!("line {}: expected 4 fields", n + 2)));
            }
            let mut dice = [0.0; 3];
            for (d, f) in dice.iter_mut().zip(&fields[1..]) {
                *d = f
                    .parse()
                    .map_err(|e| DigestError::Format(format!("line {}: `{f}`: {e}", n + 2)))?;
            }
            if fields[0] == "mean" {
                mean = Some(dice);
            } else {
                rows.push(DiceRow {
                    mask: fields[0].parse()?,
                    dice,
                });
            }
        }
        let mean = mean.ok_or_else(|| DigestError::Format("missing mean row".into()))?;
        let mut table = Self::from_rows(rows)?;
        let computed = table.mean;
        if computed.iter().zip(&mean).any(|(a, b)| (a - b).abs() > 1e-4) {
            return Err(DigestError::Format(format!(
                "mean row {mean:?} disagrees with column means {computed:?}"
            )));
        }
        table.mean = mean;
        Ok(table)
    }

    /// Aligned text table, one column per modality (`+` present, `-` absent).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:>4} {:>5} {:>4} {:>6}  {:>7} {:>7} {:>7}",
            "T1", "T1ce", "T2", "FLAIR", "ET", "TC", "WT"
        )
        .unwrap();
        for r in &self.rows {
            let b = r.mask.bits().map(|x| if x { "+" } else { "-" });
            let [e, t, w] = r.dice;
            writeln!(
                s,
                "{:>4} {:>5} {:>4} {:>6}  {e:>7.4} {t:>7.4} {w:>7.4}",
                b[0], b[1], b[2], b[3]
            )
            .unwrap();
        }
        let [e, t, w] = self.mean;
        writeln!(s, "{:>22}  {e:>7.4} {t:>7.4} {w:>7.4}", "mean").unwrap();
        s
    }
}

/// Anything that maps a `1×4×D×H×W` input to `1×3×D×H×W` probabilities.
pub trait SegmentationModel {
    fn predict(&self, input: &Tensor) -> Result<Tensor>;
}

impl SegmentationModel for Network {
    fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.final_map)
    }
}

/// Tiles an input larger than the network window with overlapping windows and
/// averages the overlapping probabilities.
pub struct SlidingWindow<'a, M> {
    pub model: &'a M,
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

impl<'a, M: SegmentationModel> SlidingWindow<'a, M> {
    /// Windows of `window` voxels overlapping by `overlap` (in `[0, 1)`).
    pub fn new(model: &'a M, window: [usize; 3], overlap: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&overlap) || window.contains(&0) {
            return Err(DigestError::Config(format!(
                "sliding window {window:?} with overlap {overlap} is invalid"
            )));
        }
        let stride = window.map(|w| ((w as f64 * (1.0 - overlap)).round() as usize).max(1));
        Ok(Self { model, window, stride })
    }
}

/// Window starts along one axis; the last window is flush with the end.
pub fn window_starts(size: usize, window: usize, stride: usize) -> Vec<usize> {
    if size <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..size - window).step_by(stride).collect();
    starts.push(size - window);
    starts
}

fn copy_box(src: &[f32], dims: [usize; 3], start: [usize; 3], size: [usize; 3], channels: usize) -> Vec<f32> {
    let [_, h, w] = dims;
    let n = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(channels * size.iter().product::<usize>());
    for c in 0..channels {
        for z in start[0]..start[0] + size[0] {
            for y in start[1]..start[1] + size[1] {
                let row = c * n + (z * h + y) * w + start[2];
                out.extend_from_slice(&src[row..row + size[2]]);
            }
        }
    }
    out
}

impl<M: SegmentationModel> SegmentationModel for SlidingWindow<'_, M> {
    fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let (b, c, dims) = input.dims5()?;
        if b != 1 {
            return Err(DigestError::Shape(format!("sliding window takes one sample, got {b}")));
        }
        if (0..3).any(|k| dims[k] < self.window[k]) {
            return Err(DigestError::Shape(format!(
                "input {dims:?} is smaller than the window {:?}",
                self.window
            )));
        }
        let [d, h, w] = dims;
        let n = d * h * w;
        let starts: Vec<Vec<usize>> = (0..3)
            .map(|k| window_starts(dims[k], self.window[k], self.stride[k]))
            .collect();
        let mut sum = vec![0.0f32; 3 * n];
        let mut hits = vec![0u32; n];
        let [wd, wh, ww] = self.window;
        for &z0 in &starts[0] {
            for &y0 in &starts[1] {
                for &x0 in &starts[2] {
                    let start = [z0, y0, x0];
                    let patch =
                        Tensor::from_vec(&[1, c, wd, wh, ww], copy_box(input.data(), dims, start, self.window, c))?;
                    let prob = self.model.predict(&patch)?;
                    let p = prob.data();
                    let wn = wd * wh * ww;
                    for z in 0..wd {
                        for y in 0..wh {
                            let dst = ((z0 + z) * h + y0 + y) * w + x0;
                            let src = (z * wh + y) * ww;
                            for x in 0..ww {
                                hits[dst + x] += 1;
                                for j in 0..3 {
                                    sum[j * n + dst + x] += p[j * wn + src + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        for j in 0..3 {
            for (v, &k) in sum[j * n..(j + 1) * n].iter_mut().zip(&hits) {
                *v /= k as f32;
            }
        }
        Ok(Tensor::from_vec(&[1, 3, d, h, w], sum)?)
    }
}

/// Runs `model` on every sample under every subset and averages Dice per
/// region over samples.
pub fn evaluate_subsets<M>(model: &M, samples: &[Sample], parallel: bool) -> Result<DiceTable>
where
    M: SegmentationModel + Sync,
{
    if samples.is_empty() {
        return Err(DigestError::EmptyTestSet);
    }
    let masks = enumerate_subsets();
    let jobs: Vec<(usize, usize)> = (0..masks.len())
        .flat_map(|m| (0..samples.len()).map(move |s| (m, s)))
        .collect();
    let run = |&(m, s): &(usize, usize)| -> Result<[f64; 3]> {
        let x = apply_mask(&samples[s].input, masks[m])?;
        region_dice(&model.predict(&x)?, &samples[s].target)
    };
    let scores: Vec<[f64; 3]> = if parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let rows = masks
        .iter()
        .enumerate()
        .map(|(m, &mask)| {
            let mut dice = [0.0; 3];
            for s in &scores[m * samples.len()..(m + 1) * samples.len()] {
                for j in 0..3 {
                    dice[j] += s[j];
                }
            }
            DiceRow {
                mask,
                dice: dice.map(|v| v / samples.len() as f64),
            }
        })
        .collect();
    DiceTable::from_rows(rows)
}

/// One configuration of the component ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub transfer: bool,
    pub ds_loss: bool,
    pub table: DiceTable,
}

pub fn ablation_csv(entries: &[AblationEntry]) -> String {
    let mut s = String::from("config,k_p,l_ds,dice_et,dice_tc,dice_wt\n");
    for e in entries {
        let [a, b, c] = e.table.mean;
        writeln!(
            s,
            "{},{},{},{a:.4},{b:.4},{c:.4}",
            e.label, e.transfer as u8, e.ds_loss as u8
        )
        .unwrap();
    }
    s
}

pub fn ablation_text(entries: &[AblationEntry]) -> String {
    let width = entries.iter().map(|e| e.label.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    writeln!(
        s,
        "{:<width$}  {:>3} {:>4}  {:>7} {:>7} {:>7}",
        "config", "K_p", "L_ds", "ET", "TC", "WT"
    )
    .unwrap();
    for e in entries {
        let mark = |b: bool| if b { "+" } else { "-" };
        let [a, b, c] = e.table.mean;
        writeln!(
            s,
            "{:<width$}  {:>3} {:>4}  {a:>7.4} {b:>7.4} {c:>7.4}",
            e.label,
            mark(e.transfer),
            mark(e.ds_loss)
        )
        .unwrap();
    }
    s
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub text: PathBuf,
    pub ablation_csv: Option<PathBuf>,
    pub ablation_text: Option<PathBuf>,
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).map_err(|e| DigestError::io(&path, e))?;
    Ok(path)
}

/// Writes `dice.csv` and `dice.txt`, plus `ablation.csv` and `ablation.txt`
/// when ablation entries are given.
pub fn emit_report(table: &DiceTable, ablation: Option<&[AblationEntry]>, out_dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(out_dir).map_err(|e| DigestError::io(out_dir, e))?;
    let mut files = ReportFiles {
        csv: write(out_dir.join("dice.csv"), &table.to_csv())?,
        text: write(out_dir.join("dice.txt"), &table.to_text())?,
        ..ReportFiles::default()
    };
    if let Some(entries) = ablation {
        files.ablation_csv = Some(write(out_dir.join("ablation.csv"), &ablation_csv(entries))?);
        files.ablation_text = Some(write(out_dir.join("ablation.txt"), &ablation_text(entries))?);
    }
    Ok(files)
}
