//! The finetuning protocol: stratified splits, train-split augmentation, the
//! plateau learning-rate schedule with AUPRC model selection, and activation
//! extraction for correlation analysis.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc};
use crate::nn::{softmax, softmax_cross_entropy, Adam, Model};
use crate::scalar::Float;
use crate::svcca::ActivationMatrix;

/// In-memory dataset: NCHW images plus one integer label per image.
#[derive(Clone, Debug)]
pub struct Dataset<S: Float> {
    pub images: Array4<S>,
    pub labels: Vec<usize>,
}

impl<S: Float> Dataset<S> {
    pub fn new(images: Array4<S>, labels: Vec<usize>) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", images.dim().0),
                got: format!("{}", labels.len()),
            });
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of classes, assuming labels are 0..k-1.
    pub fn classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// The rows of `indices` as one NCHW batch.
    pub fn gather(&self, indices: &[usize]) -> Array4<S> {
        self.images.select(Axis(0), indices)
    }

    pub fn labels_for(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Load a `path,label` manifest; image paths resolve relative to the
    /// manifest's directory. With `resize`, each image is center-cropped to a
    /// square and scaled to that side; pixels map to `v/255 - 0.5`.
    pub fn from_manifest(manifest: &Path, channels: usize, resize: Option<u32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!(
                "datasets must have 1 or 3 channels, not {channels}"
            )));
        }
        let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut reader = csv::Reader::from_path(manifest)?;
        let mut images: Vec<Array4<S>> = Vec::new();
        let mut labels = Vec::new();
        for row in reader.records() {
            let row = row?;
            let rel = row.get(0).unwrap_or("");
            let label: usize = row.get(1).unwrap_or("").trim().parse().map_err(|_| {
                Error::format(
                    manifest.display().to_string(),
                    "manifest",
                    format!("label `{}` is not a class index", row.get(1).unwrap_or("")),
                )
            })?;
            let mut img = image::open(dir.join(rel))?;
            if let Some(side) = resize {
                let (w, h) = (img.width(), img.height());
                let s = w.min(h);
                img = img.crop_imm((w - s) / 2, (h - s) / 2, s, s).resize_exact(
                    side,
                    side,
                    image::imageops::FilterType::Triangle,
                );
            }
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut tensor = Array4::zeros((1, channels, h, w));
            if channels == 1 {
                let gray = img.to_luma8();
                for (j, i, p) in gray.enumerate_pixels() {
                    tensor[(0, 0, i as usize, j as usize)] = S::cast(p.0[0] as f64 / 255.0 - 0.5);
                }
            } else {
                let rgb = img.to_rgb8();
                for (j, i, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        tensor[(0, c, i as usize, j as usize)] =
                            S::cast(p.0[c] as f64 / 255.0 - 0.5);
                    }
                }
            }
            if let Some(first) = images.first() {
                if first.dim().2 != h || first.dim().3 != w {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{}x{}", first.dim().2, first.dim().3),
                        got: format!("{h}x{w} in {rel}"),
                    });
                }
            }
            images.push(tensor);
            labels.push(label);
        }
        if images.is_empty() {
            return Err(Error::format(
                manifest.display().to_string(),
                "manifest",
                "no rows",
            ));
        }
        let views: Vec<_> = images.iter().map(|t| t.view()).collect();
        let stacked = concatenate(Axis(0), &views).expect("uniform image shapes");
        Dataset::new(stacked, labels)
    }
}

/// Index lists of a stratified 64/16/20 split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

/// Largest-remainder apportionment of `n` items into 64/16/20 percent.
/// Integer arithmetic throughout; remainder ties resolve in train/val/test
/// order.
pub fn apportion(n: usize) -> [usize; 3] {
    const PERCENT: [usize; 3] = [64, 16, 20];
    let mut counts = [0usize; 3];
    let mut rem: Vec<(usize, usize)> = Vec::new();
    let mut used = 0;
    for (i, pct) in PERCENT.iter().enumerate() {
        let q = pct * n;
        counts[i] = q / 100;
        used += counts[i];
        rem.push((q % 100, i));
    }
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rem.iter().take(n - used) {
        counts[i] += 1;
    }
    counts
}

/// Split `labels` into stratified train/val/test index lists, 64/16/20 per
/// class under largest-remainder rounding, shuffled deterministically by
/// `seed`. Every class needs at least 5 examples so each split stays
/// nonempty.
pub fn make_split(labels: &[usize], seed: u64) -> Result<DataSplit> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(Error::BadSplit {
            reason: "no examples".into(),
        });
    }
    for (&c, members) in &by_class {
        if members.len() < 5 {
            return Err(Error::BadSplit {
                reason: format!(
                    "class {c} has {} examples; the 64/16/20 split needs at least 5",
                    members.len()
                ),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DataSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
        stratified: true,
    };
    for members in by_class.values() {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let [n_train, n_val, _] = apportion(order.len());
        split.train.extend(&order[..n_train]);
        split.val.extend(&order[n_train..n_train + n_val]);
        split.test.extend(&order[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Training-split augmentation: a random integer shift (crop against a zero
/// background) plus a small uniform rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub max_shift: usize,
    pub max_degrees: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            max_shift: 2,
            max_degrees: 10.0,
        }
    }
}

fn bilinear<S: Float>(x: &Array4<S>, b: usize, c: usize, y: f64, xq: f64) -> S {
    let (_, _, h, w) = x.dim();
    let (y0, x0) = (y.floor(), xq.floor());
    let (fy, fx) = (y - y0, xq - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let weight = wy * wx;
            if weight == 0.0 {
                continue;
            }
            let (yi, xi) = (y0 + dy, x0 + dx);
            if yi >= 0.0 && yi < h as f64 && xi >= 0.0 && xi < w as f64 {
                acc += weight * x[(b, c, yi as usize, xi as usize)].as_f64();
            }
        }
    }
    S::cast(acc)
}

/// Shift-and-rotate each image with per-image random draws. Bilinear
/// sampling, zeros outside the frame; zero shift and zero angle reproduce
/// the input bit for bit.
pub fn augment_batch<S: Float>(x: &Array4<S>, aug: &Augment, rng: &mut impl Rng) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h, w));
    let shift = aug.max_shift as i64;
    for b in 0..n {
        let dx = rng.gen_range(-shift..=shift) as f64;
        let dy = rng.gen_range(-shift..=shift) as f64;
        let theta = rng.gen_range(-aug.max_degrees..=aug.max_degrees).to_radians();
        let (sin, cos) = theta.sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    // Inverse map: undo the shift, then the rotation.
                    let yy = i as f64 - dy - cy;
                    let xx = j as f64 - dx - cx;
                    let sy = cos * yy + sin * xx + cy;
                    let sx = -sin * yy + cos * xx + cx;
                    out[(b, ci, i, j)] = bilinear(x, b, ci, sy, sx);
                }
            }
        }
    }
    out
}

/// Hyperparameters of the finetuning protocol: ADAM at 1e-4, batch 64, halve
/// every trainable rate after a 5-epoch AUPRC plateau, stop once the largest
/// trainable rate falls below 1e-7.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub lr_floor: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub aug: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 64,
            patience: 5,
            min_delta: 1e-4,
            lr_floor: 1e-7,
            max_epochs: 200,
            seed: 0,
            augment: true,
            aug: Augment::default(),
        }
    }
}

/// Halve the rate multiplier when the monitored value stops improving by
/// `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub best: f64,
    pub stale: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl PlateauSchedule {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        PlateauSchedule {
            factor: 1.0,
            best: f64::NEG_INFINITY,
            stale: 0,
            patience: patience.max(1),
            min_delta,
        }
    }

    /// Feed one epoch's monitored value; returns true when it halves.
    pub fn observe(&mut self, value: f64) -> bool {
        if value > self.best + self.min_delta {
            self.best = value;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.factor *= 0.5;
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Where the trainer stands after the latest epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub best_auprc: f64,
    pub best_epoch: usize,
    pub plateau: usize,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auprc: f64,
    pub val_auroc: f64,
    pub best: bool,
}

/// Everything a finetuning run produces besides the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auprc: f64,
    pub test_auprc: f64,
    pub test_auroc: f64,
    pub halvings: usize,
    pub diverged: bool,
}

/// Class probabilities for `indices`, evaluated in inference mode.
pub fn predict<S: Float>(
    model: &mut Model<S>,
    data: &Dataset<S>,
    indices: &[usize],
    batch: usize,
) -> Array2<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let x = data.gather(chunk);
        let probs = softmax(&model.infer(&x));
        for r in probs.rows() {
            rows.push(r.iter().map(|v| v.as_f64()).collect());
        }
    }
    let k = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i][j])
}

/// One-vs-rest (AUPRC, AUROC). Binary tasks score the positive class
/// directly; more classes macro-average over one-vs-rest problems.
pub fn prob_metrics(probs: &Array2<f64>, labels: &[usize]) -> Result<(f64, f64)> {
    let k = probs.ncols();
    if k == 2 {
        let scores = probs.column(1).to_vec();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return Ok((auprc(&scores, &pos)?, auroc(&scores, &pos)?));
    }
    let (mut pr, mut roc) = (0.0, 0.0);
    for c in 0..k {
        let scores = probs.column(c).to_vec();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        pr += auprc(&scores, &pos)?;
        roc += auroc(&scores, &pos)?;
    }
    Ok((pr / k as f64, roc / k as f64))
}

/// Run the finetuning protocol on `model`.
///
/// ADAM over every trainable tensor at the plan's relative rates; batches
/// reshuffled each epoch from `cfg.seed`; augmentation touches the training
/// split only. Validation AUPRC both drives the plateau schedule and selects
/// the retained weights, which are restored into `model` before the final
/// test-split evaluation. Stops when the largest trainable rate falls below
/// `lr_floor`, the epoch cap is hit, or the loss leaves the finite range
/// (flagged as `diverged`).
pub fn finetune<S: Float>(
    model: &mut Model<S>,
    data: &Dataset<S>,
    split: &DataSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ExperimentRecord> {
    let max_scale = model.max_scale();
    if max_scale <= 0.0 {
        return Err(Error::Config(
            "the freeze plan leaves no trainable parameters".into(),
        ));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::BadSplit {
            reason: "train and validation splits must be nonempty".into(),
        });
    }
    let mut opt = Adam::new(cfg.lr);
    let mut sched = PlateauSchedule::new(cfg.patience, cfg.min_delta);
    let mut record = ExperimentRecord {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_auprc: 0.0,
        test_auprc: 0.0,
        test_auroc: 0.0,
        halvings: 0,
        diverged: false,
    };
    let mut best_state = model.state_dict();

    'epochs: for epoch in 1..=cfg.max_epochs {
        let lr_now = cfg.lr * max_scale * sched.factor;
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut x = data.gather(chunk);
            if cfg.augment {
                x = augment_batch(&x, &cfg.aug, &mut rng);
            }
            let labels = data.labels_for(chunk);
            let (logits, tape) = model.forward(&x, true);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                record.diverged = true;
                break 'epochs;
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            model.zero_grads();
            model.backward(&tape, &dlogits);
            opt.step(model, sched.factor);
        }
        let probs = predict(model, data, &split.val, cfg.batch);
        let (val_auprc, val_auroc) = prob_metrics(&probs, &data.labels_for(&split.val))?;
        let improved = val_auprc > record.best_val_auprc || record.best_epoch == 0;
        if improved {
            record.best_val_auprc = val_auprc;
            record.best_epoch = epoch;
            best_state = model.state_dict();
        }
        let rec = EpochRecord {
            epoch,
            lr: lr_now,
            train_loss: loss_sum / seen.max(1) as f64,
            val_auprc,
            val_auroc,
            best: improved,
        };
        on_epoch(&rec);
        record.epochs.push(rec);
        if sched.observe(val_auprc) {
            record.halvings += 1;
            if cfg.lr * max_scale * sched.factor < cfg.lr_floor {
                break;
            }
        }
    }
    model.load_state_dict(&best_state)?;
    if !split.test.is_empty() {
        let probs = predict(model, data, &split.test, cfg.batch);
        let (pr, roc) = prob_metrics(&probs, &data.labels_for(&split.test))?;
        record.test_auprc = pr;
        record.test_auroc = roc;
    }
    Ok(record)
}

/// (n, c, h, w) features flattened to the SVCCA convention: one row per
/// (image, spatial position), image-major then row-major over the grid, one
/// column per channel.
pub fn flatten_features<S: Float>(f: &Array4<S>) -> Array2<S> {
    let (n, c, h, w) = f.dim();
    let mut out = Array2::zeros((n * h * w, c));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = (b * h + i) * w + j;
                for ci in 0..c {
                    out[(row, ci)] = f[(b, ci, i, j)];
                }
            }
        }
    }
    out
}

/// Average-pool onto a coarser (th, tw) grid with bins split as evenly as
/// possible. Aligns a fine feature map with a coarser one before vertical
/// correlation.
pub fn adaptive_avg_pool<S: Float>(x: &Array4<S>, th: usize, tw: usize) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let bin = |o: usize, t: usize, len: usize| (o * len / t, ((o + 1) * len).div_ceil(t));
    let mut out = Array4::zeros((n, c, th, tw));
    for b in 0..n {
        for ci in 0..c {
            for oi in 0..th {
                let (i0, i1) = bin(oi, th, h);
                for oj in 0..tw {
                    let (j0, j1) = bin(oj, tw, w);
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        for j in j0..j1 {
                            acc += x[(b, ci, i, j)].as_f64();
                        }
                    }
                    out[(b, ci, oi, oj)] = S::cast(acc / ((i1 - i0) * (j1 - j0)) as f64);
                }
            }
        }
    }
    out
}

/// Eval-mode activation matrices at each cutoff, over `indices` of `data`,
/// computed in batches. With `pool_to`, every map is first average-pooled to
/// that grid so maps of different strides become row-compatible.
pub fn extract_activations<S: Float>(
    model: &mut Model<S>,
    cutoffs: &[usize],
    data: &Dataset<S>,
    indices: &[usize],
    batch: usize,
    pool_to: Option<(usize, usize)>,
) -> Result<Vec<ActivationMatrix<S>>> {
    let mut out = Vec::with_capacity(cutoffs.len());
    for &k in cutoffs {
        let mut parts: Vec<Array2<S>> = Vec::new();
        for chunk in indices.chunks(batch.max(1)) {
            let x = data.gather(chunk);
            let mut f = model.features(&x, k)?;
            if let Some((th, tw)) = pool_to {
                let (_, _, h, w) = f.dim();
                if h != th || w != tw {
                    f = adaptive_avg_pool(&f, th, tw);
                }
            }
            parts.push(flatten_features(&f));
        }
        let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
        let stacked = concatenate(Axis(0), &views).expect("uniform column counts");
        let tag = model.graph.layers[k - 1].name.clone();
        out.push(ActivationMatrix::new(tag, stacked));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, HeadSpec, LayerGraph};
    use crate::surgery::{build_ftl, build_lwft};
    use crate::zoo;
    use ndarray::Array4;

    fn tiny_graph(channels: usize) -> LayerGraph {
        let mut b = GraphBuilder::new("tiny", (channels, 12, 12));
        b.conv("c1", 4, 3, 2, 1, false);
        b.norm("n1");
        b.act("r1");
        b.end_block();
        b.conv("c2", 8, 3, 2, 1, false);
        b.norm("n2");
        b.act("r2");
        b.end_block();
        b.build().unwrap()
    }

    fn mean_shift_data(n_per_class: usize, side: usize, seed: u64) -> Dataset<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * n_per_class;
        let mut images = Array4::<f32>::zeros((n, 1, side, side));
        let mut labels = Vec::with_capacity(n);
        for b in 0..n {
            let class = b % 2;
            let shift = if class == 0 { -0.3 } else { 0.3 };
            for i in 0..side {
                for j in 0..side {
                    images[(b, 0, i, j)] = shift + 0.05 * f32::standard_normal(&mut rng);
                }
            }
            labels.push(class);
        }
        Dataset::new(images, labels).unwrap()
    }

    #[test]
    fn apportionment_matches_hand_rounding() {
        assert_eq!(apportion(25), [16, 4, 5]);
        assert_eq!(apportion(100), [64, 16, 20]);
        assert_eq!(apportion(10), [6, 2, 2]);
        assert_eq!(apportion(5), [3, 1, 1]);
        for n in 5..400 {
            let parts = apportion(n);
            assert_eq!(parts.iter().sum::<usize>(), n);
            assert!(parts.iter().all(|&p| p > 0), "n={n}: {parts:?}");
        }
    }

    #[test]
    fn split_is_stratified_deterministic_and_exhaustive() {
        let labels: Vec<usize> = std::iter::repeat(0)
            .take(40)
            .chain(std::iter::repeat(1).take(35))
            .collect();
        let a = make_split(&labels, 7).unwrap();
        let b = make_split(&labels, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 48);
        assert_eq!(a.val.len(), 12);
        assert_eq!(a.test.len(), 15);
        let count = |ids: &[usize], class: usize| ids.iter().filter(|&&i| labels[i] == class).count();
        assert_eq!([count(&a.train, 0), count(&a.val, 0), count(&a.test, 0)], [26, 6, 8]);
        assert_eq!([count(&a.train, 1), count(&a.val, 1), count(&a.test, 1)], [22, 6, 7]);
        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..75).collect::<Vec<_>>());
        let c = make_split(&labels, 8).unwrap();
        assert_ne!(a.train, c.train, "different seeds should reshuffle");
    }

    #[test]
    fn split_rejects_classes_below_five() {
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1];
        assert!(matches!(
            make_split(&labels, 0),
            Err(Error::BadSplit { .. })
        ));
    }

    #[test]
    fn schedule_halves_exactly_and_crosses_the_floor() {
        let lr0 = 1e-4;
        let floor = 1e-7;
        let mut sched = PlateauSchedule::new(5, 1e-4);
        let mut lrs = vec![lr0 * sched.factor];
        let mut halvings = 0;
        let mut halving_epochs = Vec::new();
        for epoch in 1..10_000 {
            if sched.observe(0.5) {
                halvings += 1;
                halving_epochs.push(epoch);
                let lr = lr0 * sched.factor;
                if lr < floor {
                    break;
                }
                lrs.push(lr);
            }
        }
        assert_eq!(halvings, 10, "1e-4 / 2^10 is the first value below 1e-7");
        for (k, pair) in lrs.windows(2).enumerate() {
            assert_eq!(pair[1], pair[0] / 2.0, "halving {k} must be exact");
        }
        assert_eq!(lrs.len(), 10);
        assert!(*lrs.last().unwrap() >= floor);
        assert!(lr0 * sched.factor < floor);
        // First observe improves; each later tier stagnates for `patience`.
        assert_eq!(halving_epochs, (0..10).map(|k| 6 + 5 * k).collect::<Vec<_>>());
    }

    #[test]
    fn finetune_rejects_a_fully_frozen_plan() {
        let graph = tiny_graph(1);
        let mut plan = build_ftl(&graph, HeadSpec::linear(2)).unwrap();
        for s in &mut plan.freeze.layer_scale {
            *s = 0.0;
        }
        plan.freeze.head_scale = 0.0;
        let mut model = Model::<f32>::from_plan(&plan, 0).unwrap();
        let data = mean_shift_data(8, 12, 0);
        let split = make_split(&data.labels, 0).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            finetune(&mut model, &data, &split, &cfg, |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finetune_lr_trace_under_forced_stagnation() {
        // min_delta of 2 makes every epoch after the first a plateau epoch,
        // whatever AUPRC does, so the rate halves each epoch from the second.
        let graph = tiny_graph(1);
        let plan = build_ftl(&graph, HeadSpec::linear(2)).unwrap();
        let mut model = Model::<f32>::from_plan(&plan, 1).unwrap();
        let data = mean_shift_data(8, 12, 1);
        let split = make_split(&data.labels, 1).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            batch: 16,
            patience: 1,
            min_delta: 2.0,
            max_epochs: 10_000,
            augment: false,
            ..TrainConfig::default()
        };
        let record = finetune(&mut model, &data, &split, &cfg, |_| {}).unwrap();
        assert_eq!(record.halvings, 10);
        assert_eq!(record.epochs.len(), 11, "one improving epoch + ten plateau tiers");
        assert_eq!(record.epochs[0].lr, 1e-4);
        assert_eq!(record.epochs[1].lr, 1e-4);
        for k in 2..11 {
            assert_eq!(record.epochs[k].lr, record.epochs[k - 1].lr / 2.0);
        }
        assert!(record.epochs.last().unwrap().lr >= cfg.lr_floor);
        assert!(!record.diverged);
    }

    #[test]
    fn finetune_learns_a_separable_task() {
        let data = mean_shift_data(30, 12, 3);
        // Oracle: mean intensity alone separates the construction perfectly.
        let means: Vec<f64> = (0..data.len())
            .map(|b| {
                let img = data.images.index_axis(Axis(0), b);
                img.iter().map(|v| *v as f64).sum::<f64>() / img.len() as f64
            })
            .collect();
        let pos: Vec<bool> = data.labels.iter().map(|&l| l == 1).collect();
        assert_eq!(auroc(&means, &pos).unwrap(), 1.0);

        let graph = tiny_graph(1);
        let plan = build_ftl(&graph, HeadSpec::linear(2)).unwrap();
        let mut model = Model::<f32>::from_plan(&plan, 5).unwrap();
        let split = make_split(&data.labels, 5).unwrap();
        let cfg = TrainConfig {
            lr: 5e-3,
            batch: 16,
            max_epochs: 20,
            augment: false,
            ..TrainConfig::default()
        };
        let record = finetune(&mut model, &data, &split, &cfg, |_| {}).unwrap();
        assert!(
            record.best_val_auprc >= 0.99,
            "best val AUPRC {}",
            record.best_val_auprc
        );
        let best_seen = record
            .epochs
            .iter()
            .map(|e| e.val_auprc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(record.best_val_auprc, best_seen);
    }

    #[test]
    fn frozen_layers_are_bit_identical_after_finetune() {
        let graph = zoo::micro((1, 32, 32), &zoo::MICRO_WIDTHS).unwrap();
        let plan = build_lwft(&graph, 1, HeadSpec::linear(2)).unwrap();
        let frozen: Vec<usize> = (0..graph.len())
            .filter(|&i| plan.freeze.layer_scale[i] == 0.0)
            .collect();
        assert!(!frozen.is_empty());
        let mut model = Model::<f32>::from_plan(&plan, 9).unwrap();
        let frozen_names: Vec<String> = frozen
            .iter()
            .map(|&i| graph.layers[i].name.clone())
            .collect();
        let before: Vec<_> = model
            .state_dict()
            .into_iter()
            .filter(|(name, _, _)| frozen_names.iter().any(|f| name.starts_with(f.as_str())))
            .collect();
        assert!(!before.is_empty());
        let data = mean_shift_data(8, 32, 9);
        let split = make_split(&data.labels, 9).unwrap();
        let cfg = TrainConfig {
            batch: 8,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        finetune(&mut model, &data, &split, &cfg, |_| {}).unwrap();
        let after: Vec<_> = model
            .state_dict()
            .into_iter()
            .filter(|(name, _, _)| frozen_names.iter().any(|f| name.starts_with(f.as_str())))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn two_tier_sgd_update_is_exactly_ten_to_one() {
        let graph = zoo::micro((1, 32, 32), &zoo::MICRO_WIDTHS).unwrap();
        let plan = build_lwft(&graph, 2, HeadSpec::linear(2)).unwrap();
        // The head is the top layer at the base rate; the deepest backbone
        // group runs at a tenth of it.
        assert_eq!(plan.freeze.head_scale, 1.0);
        let low = plan
            .freeze
            .layer_scale
            .iter()
            .position(|&s| s == 0.1)
            .unwrap();
        let mut model = Model::<f32>::from_plan(&plan, 11).unwrap();
        let before = model.state_dict();
        model.fill_grads(1.0);
        crate::nn::Sgd::new(1.25).step(&mut model, 1.0);
        let after = model.state_dict();
        let delta_for = |name: String| -> f32 {
            let b = before.iter().find(|(n, _, _)| *n == name).unwrap();
            let a = after.iter().find(|(n, _, _)| *n == name).unwrap();
            (a.2[0] - b.2[0]).abs()
        };
        let delta_top = delta_for("head.fc2.w".into());
        let delta_low = delta_for(format!("{}.w", graph.layers[low].name));
        assert_eq!(delta_top, 1.25f32);
        assert_eq!(delta_low, 0.125f32);
        assert_eq!(delta_top / delta_low, 10.0f32);
    }

    #[test]
    fn augmentation_is_identity_at_zero_and_deterministic() {
        let data = mean_shift_data(2, 12, 21);
        let none = Augment {
            max_shift: 0,
            max_degrees: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = augment_batch(&data.images, &none, &mut rng);
        assert_eq!(same, data.images);

        let aug = Augment::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = augment_batch(&data.images, &aug, &mut r1);
        let b = augment_batch(&data.images, &aug, &mut r2);
        assert_eq!(a, b);
        assert_ne!(a, data.images, "nonzero augmentation should move pixels");
    }

    #[test]
    fn activation_rows_follow_the_sampling_convention() {
        let mut f = Array4::<f32>::zeros((2, 3, 2, 2));
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        f[(b, c, i, j)] = (b * 1000 + c * 100 + i * 10 + j) as f32;
                    }
                }
            }
        }
        let m = flatten_features(&f);
        assert_eq!(m.dim(), (8, 3));
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(0, 2)], 200.0);
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m[(2, 1)], 110.0);
        assert_eq!(m[(4, 0)], 1000.0);
        assert_eq!(m[(7, 2)], 1211.0);
    }

    #[test]
    fn extracted_activations_have_spatial_rows_and_are_deterministic() {
        let graph = tiny_graph(1);
        let plan = build_ftl(&graph, HeadSpec::linear(2)).unwrap();
        let mut model = Model::<f32>::from_plan(&plan, 2).unwrap();
        let data = mean_shift_data(4, 12, 2);
        let idx: Vec<usize> = (0..4).collect();
        let mats = extract_activations(&mut model, &[3, 6], &data, &idx, 2, None).unwrap();
        assert_eq!(mats.len(), 2);
        assert_eq!(mats[0].data.dim(), (4 * 6 * 6, 4));
        assert_eq!(mats[1].data.dim(), (4 * 3 * 3, 8));
        assert_eq!(mats[0].layer, "r1");
        let again = extract_activations(&mut model, &[3, 6], &data, &idx, 4, None).unwrap();
        assert_eq!(mats[0].data, again[0].data);
        assert!(extract_activations(&mut model, &[7], &data, &idx, 2, None).is_err());
        let pooled = extract_activations(&mut model, &[3], &data, &idx, 2, Some((3, 3))).unwrap();
        assert_eq!(pooled[0].data.dim(), (4 * 3 * 3, 4));
    }

    #[test]
    fn adaptive_pool_averages_even_and_uneven_bins() {
        let mut x = Array4::<f64>::zeros((1, 1, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                x[(0, 0, i, j)] = (i * 4 + j) as f64;
            }
        }
        let y = adaptive_avg_pool(&x, 2, 2);
        assert_eq!(y[(0, 0, 0, 0)], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(y[(0, 0, 1, 1)], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);

        let mut z = Array4::<f64>::zeros((1, 1, 3, 3));
        for i in 0..3 {
            for j in 0..3 {
                z[(0, 0, i, j)] = (i * 3 + j) as f64;
            }
        }
        let p = adaptive_avg_pool(&z, 2, 2);
        // Bins overlap on the middle row/column: rows 0..2 and 1..3.
        assert_eq!(p[(0, 0, 0, 0)], (0.0 + 1.0 + 3.0 + 4.0) / 4.0);
        assert_eq!(p[(0, 0, 1, 1)], (4.0 + 5.0 + 7.0 + 8.0) / 4.0);
    }

    #[test]
    fn manifest_roundtrip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = String::from("path,label\n");
        for (i, label) in [0usize, 1, 1, 0].iter().enumerate() {
            let name = format!("img{i}.png");
            let mut img = image::GrayImage::new(6, 6);
            for (x, y, p) in img.enumerate_pixels_mut() {
                p.0[0] = ((i as u32 * 40 + x + y * 6) % 256) as u8;
            }
            img.save(dir.path().join(&name)).unwrap();
            rows.push_str(&format!("{name},{label}\n"));
        }
        let manifest = dir.path().join("manifest.csv");
        std::fs::write(&manifest, rows).unwrap();
        let data = Dataset::<f32>::from_manifest(&manifest, 1, None).unwrap();
        assert_eq!(data.images.dim(), (4, 1, 6, 6));
        assert_eq!(data.labels, vec![0, 1, 1, 0]);
        assert_eq!(data.classes(), 2);
        assert_eq!(data.images[(0, 0, 0, 1)], 1.0 / 255.0 - 0.5);
        assert!(data.images.iter().all(|v| (-0.5..=0.5).contains(v)));

        let resized = Dataset::<f32>::from_manifest(&manifest, 1, Some(4)).unwrap();
        assert_eq!(resized.images.dim(), (4, 1, 4, 4));
    }
}
