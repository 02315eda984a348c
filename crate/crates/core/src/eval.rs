//! Sliding-window segmentation, Dice, and k-fold cross-validation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::window_rescale;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::sampler::grid_to_xyz;
use crate::tensor::Tensor;
use crate::train::Predictor;
use crate::volume::{pad_to, Grid3, LabelGrid, Volume, AIR_HU};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    /// Tiles per forward pass.
    pub tile_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { folds: 3, tile_batch: 4 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.folds < 2 {
            errs.push(format!("eval.folds must be >= 2, got {}", self.folds));
        }
        if self.tile_batch == 0 {
            errs.push("eval.tile_batch must be >= 1".into());
        }
        errs
    }
}

/// Tile origins along one axis: stride `p/2`, last tile flush with the end.
pub fn tile_starts(n: usize, p: usize) -> Vec<usize> {
    if n <= p {
        return vec![0];
    }
    let stride = (p / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + p < n).collect();
    starts.push(n - p);
    starts
}

/// Per-voxel class scores, `data[k * len + i]` with `i` x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub dims: [usize; 3],
    pub num_classes: usize,
    pub data: Vec<f32>,
}

impl ClassScores {
    pub fn argmax(&self) -> LabelGrid {
        let len = self.dims.iter().product::<usize>();
        let data = (0..len)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.num_classes {
                    if self.data[k * len + i] > self.data[best * len + i] {
                        best = k;
                    }
                }
                best as u16
            })
            .collect();
        Grid3::new(self.dims, data).expect("dims match")
    }
}

/// Averages tile logits over a windowed image (x-fastest). `predict` maps
/// `[B, 1, X, Y, Z]` tiles to `[B, K, X, Y, Z]` logits. Images smaller than
/// a tile are padded with `pad_value` and cropped back.
pub fn sliding_window_scores(
    image: &Grid3<f32>,
    patch: [usize; 3],
    num_classes: usize,
    tile_batch: usize,
    pad_value: f32,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<ClassScores> {
    let orig = image.dims();
    let (padded, offset) = pad_to(image, patch, pad_value);
    let dims = padded.dims();
    let len = padded.len();
    let per = patch.iter().product::<usize>();
    let starts = [0, 1, 2].map(|a| tile_starts(dims[a], patch[a]));
    let mut origins = Vec::new();
    for &x in &starts[0] {
        for &y in &starts[1] {
            for &z in &starts[2] {
                origins.push([x, y, z]);
            }
        }
    }
    let mut sum = vec![0.0f64; num_classes * len];
    let mut hits = vec![0u32; len];
    let [px, py, pz] = patch;
    for chunk in origins.chunks(tile_batch.max(1)) {
        let mut data = vec![0.0f32; chunk.len() * per];
        for (i, o) in chunk.iter().enumerate() {
            let tile = padded.extract([o[0] as isize, o[1] as isize, o[2] as isize], patch, pad_value);
            grid_to_xyz(&tile, &mut data[i * per..(i + 1) * per]);
        }
        let input = Tensor::new(vec![chunk.len(), 1, px, py, pz], data)?;
        let logits = predict(&input)?;
        if logits.shape() != [chunk.len(), num_classes, px, py, pz] {
            return Err(Error::contract(format!(
                "predictor returned {:?}, expected {:?}",
                logits.shape(),
                [chunk.len(), num_classes, px, py, pz]
            )));
        }
        let l = logits.data();
        for (i, o) in chunk.iter().enumerate() {
            for x in 0..px {
                for y in 0..py {
                    for z in 0..pz {
                        let dst = padded.index(o[0] + x, o[1] + y, o[2] + z);
                        let src = (x * py + y) * pz + z;
                        hits[dst] += 1;
                        for k in 0..num_classes {
                            sum[k * len + dst] += l[(i * num_classes + k) * per + src] as f64;
                        }
                    }
                }
            }
        }
    }
    let olen = orig.iter().product::<usize>();
    let mut out = vec![0.0f32; num_classes * olen];
    for z in 0..orig[2] {
        for y in 0..orig[1] {
            for x in 0..orig[0] {
                let src = padded.index(x + offset[0], y + offset[1], z + offset[2]);
                let dst = image.index(x, y, z);
                // Tiles cover every voxel.
                let h = hits[src] as f64;
                for k in 0..num_classes {
                    out[k * olen + dst] = (sum[k * len + src] / h) as f32;
                }
            }
        }
    }
    Ok(ClassScores {
        dims: orig,
        num_classes,
        data: out,
    })
}

/// Segments a preprocessed volume with a trained backbone and head.
pub fn predict_volume(
    predictor: &Predictor,
    volume: &Volume,
    patch: [usize; 3],
    window: [f32; 2],
    tile_batch: usize,
) -> Result<LabelGrid> {
    let mut image = volume.intensities.clone();
    image.data_mut().iter_mut().for_each(|v| *v = window_rescale(*v, window));
    let scores = sliding_window_scores(
        &image,
        patch,
        predictor.head.num_classes,
        tile_batch,
        window_rescale(AIR_HU, window),
        |t| predictor.logits(t),
    )?;
    Ok(scores.argmax())
}

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1 when both sets are empty.
pub fn dice_score(pred: &LabelGrid, truth: &LabelGrid, class: u16) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::contract(format!(
            "dice over different extents {:?} and {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (a == class, b == class);
        p += a as u64;
        g += b as u64;
        both += (a && b) as u64;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Dice of every foreground class `1..num_classes`.
pub fn class_dice(pred: &LabelGrid, truth: &LabelGrid, num_classes: usize) -> Result<Vec<f64>> {
    (1..num_classes).map(|c| dice_score(pred, truth, c as u16)).collect()
}

/// Shuffles `0..n` with the fold stream and deals it round-robin into `k`
/// test folds (each sorted).
pub fn fold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("{k} folds over {n} volumes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, &[stream::FOLDS]));
    let mut folds = vec![Vec::new(); k];
    for (j, i) in order.into_iter().enumerate() {
        folds[j % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Per-fold, per-class Dice with across-fold mean and population std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub classes: Vec<u16>,
    /// `per_fold[f][c]`: mean Dice of class `classes[c]` over the test volumes of fold `f`.
    pub per_fold: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Mean of `mean` over the foreground classes.
    pub macro_mean: f64,
}

impl DiceReport {
    pub fn from_folds(classes: Vec<u16>, per_fold: Vec<Vec<f64>>) -> Result<Self> {
        if per_fold.is_empty() || per_fold.iter().any(|f| f.len() != classes.len()) {
            return Err(Error::contract("every fold needs one Dice per class"));
        }
        let k = per_fold.len() as f64;
        let mean = mean_rows(&per_fold, classes.len());
        let std = (0..classes.len())
            .map(|c| (per_fold.iter().map(|f| (f[c] - mean[c]).powi(2)).sum::<f64>() / k).sqrt())
            .collect();
        let macro_mean = if mean.is_empty() {
            0.0
        } else {
            mean.iter().sum::<f64>() / mean.len() as f64
        };
        Ok(DiceReport {
            classes,
            per_fold,
            mean,
            std,
            macro_mean,
        })
    }

    /// `fold,class,dice` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,class,dice\n");
        for (f, row) in self.per_fold.iter().enumerate() {
            for (c, d) in self.classes.iter().zip(row) {
                s.push_str(&format!("{f},{c},{d}\n"));
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Column means, shifted by the first row so identical values average exactly.
fn mean_rows(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return vec![f64::NAN; width];
    };
    (0..width)
        .map(|c| first[c] + rows.iter().map(|r| r[c] - first[c]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Runs `train_and_eval(fold, train, test)` for each fold; it returns the
/// foreground Dice of every test volume. A failing fold aborts with
/// [`Error::Fold`].
pub fn cross_validate(
    n: usize,
    k: usize,
    seed: u64,
    num_classes: usize,
    mut train_and_eval: impl FnMut(usize, &[usize], &[usize]) -> Result<Vec<Vec<f64>>>,
) -> Result<DiceReport> {
    let folds = fold_split(n, k, seed)?;
    let width = num_classes.saturating_sub(1);
    let mut per_fold = Vec::with_capacity(k);
    for (f, test) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
        let rows = train_and_eval(f, &train, test).map_err(|e| Error::Fold {
            fold: f,
            source: Box::new(e),
        })?;
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Fold {
                fold: f,
                source: Box::new(Error::contract(format!("expected {width} Dice values per volume"))),
            });
        }
        per_fold.push(mean_rows(&rows, width));
    }
    DiceReport::from_folds((1..num_classes as u16).collect(), per_fold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_cover_and_end_flush() {
        assert_eq!(tile_starts(10, 16), vec![0]);
        assert_eq!(tile_starts(16, 16), vec![0]);
        assert_eq!(tile_starts(40, 16), vec![0, 8, 16, 24]);
        assert_eq!(tile_starts(41, 16), vec![0, 8, 16, 24, 25]);
    }
}
