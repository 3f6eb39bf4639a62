//! Toy segmentation net, augmentation protocols, and Dice/IoU evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, NodeId, ParamSet};
use crate::diffusion::checkpoint;
use crate::diffusion::sampler::gaussian;
use crate::error::{Error, Result};
use crate::labeled::{self, LabeledImage, Sample, COLOR_CHANNELS, MASK_CHANNEL};
use crate::metrics::{seg_metrics, SegScore};
use crate::nn::Conv;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            seed: 0,
        }
    }
}

/// Two-level encoder–decoder: 3 color channels in, one logit map out.
#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegNetConfig,
    params: ParamSet<f32>,
    enc1a: Conv,
    enc1b: Conv,
    enc2a: Conv,
    enc2b: Conv,
    dec: Conv,
    head: Conv,
}

const SEG_MAGIC: &str = "lesionsynth-segnet v1";

impl SegNet {
    pub fn new(config: SegNetConfig) -> Self {
        let c = config.base_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let enc1a = Conv::new(&mut ps, &mut rng, "enc1a", COLOR_CHANNELS, c, 3);
        let enc1b = Conv::new(&mut ps, &mut rng, "enc1b", c, c, 3);
        let enc2a = Conv::new(&mut ps, &mut rng, "enc2a", c, 2 * c, 3);
        let enc2b = Conv::new(&mut ps, &mut rng, "enc2b", 2 * c, 2 * c, 3);
        let dec = Conv::new(&mut ps, &mut rng, "dec", 3 * c, c, 3);
        let head = Conv::new(&mut ps, &mut rng, "head", c, 1, 1);
        Self {
            config,
            params: ps,
            enc1a,
            enc1b,
            enc2a,
            enc2b,
            dec,
            head,
        }
    }

    pub fn config(&self) -> SegNetConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    /// `x` is `[N, 3, H, W]` with even H, W; returns logits `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &BoundParams, x: NodeId) -> Result<NodeId> {
        let d = g.dims(x);
        if d.len() != 4 || d[1] != COLOR_CHANNELS || d[2] % 2 != 0 || d[3] % 2 != 0 {
            return Err(Error::shape("seg_net", format!("{d:?}, want [N, 3, H, W] with even H, W")));
        }
        let h = self.enc1a.forward(g, p, x)?;
        let h = g.silu(h)?;
        let h = self.enc1b.forward(g, p, h)?;
        let e1 = g.silu(h)?;
        let h = g.mean_pool2x(e1)?;
        let h = self.enc2a.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.enc2b.forward(g, p, h)?;
        let h = g.silu(h)?;
        let up = g.upsample2x(h)?;
        let h = g.concat(&[up, e1], 1)?;
        let h = self.dec.forward(g, p, h)?;
        let h = g.silu(h)?;
        self.head.forward(g, p, h)
    }

    /// Sigmoid probabilities `[N, 1, H, W]` for a `[N, 3, H, W]` batch.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xn = g.constant(x.clone());
        let logits = self.forward(&mut g, &p, xn)?;
        let prob = g.sigmoid(logits)?;
        Ok(g.value(prob).clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(checkpoint::encode(SEG_MAGIC, &config, &self.params))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, params) = checkpoint::decode(SEG_MAGIC, bytes)?;
        let config: SegNetConfig = toml::from_str(&config).map_err(|e| Error::Format {
            what: "segnet checkpoint",
            detail: e.to_string(),
        })?;
        let mut net = Self::new(config);
        if params.len() != net.params.len() {
            return Err(Error::Format {
                what: "segnet checkpoint",
                detail: format!("expected {} tensors, got {}", net.params.len(), params.len()),
            });
        }
        for (_, name, t) in params.iter() {
            net.params.set(name, t.clone())?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Color batch `[N, 3, H, W]` and `{0, 1}` target batch `[N, 1, H, W]`.
fn seg_batch(items: &[&LabeledImage]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let colors: Vec<Tensor<f32>> = items.iter().map(|i| i.color()).collect();
    let masks = items
        .iter()
        .map(|i| Tensor::new(vec![1, i.height(), i.width()], i.mask01()))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&colors)?, Tensor::stack(&masks)?))
}

/// Mean over items of `1 − (2Σpg + 1) / (Σp + Σg + 1)` with `p = σ(logits)`.
pub fn soft_dice_loss(g: &mut Graph<f32>, logits: NodeId, target: NodeId) -> Result<NodeId> {
    let d = g.dims(logits).to_vec();
    if g.dims(target) != d.as_slice() {
        return Err(Error::shape("soft_dice_loss", format!("{d:?} vs {:?}", g.dims(target))));
    }
    let (n, per) = (d[0], d[1..].iter().product::<usize>());
    let p = g.sigmoid(logits)?;
    let ones = g.constant(Tensor::ones(&[per, 1]));
    let row_sum = |g: &mut Graph<f32>, x: NodeId| -> Result<NodeId> {
        let flat = g.reshape(x, &[n, per])?;
        g.matmul(flat, ones)
    };
    let pg = g.mul(p, target)?;
    let inter = row_sum(g, pg)?;
    let sp = row_sum(g, p)?;
    let st = row_sum(g, target)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, 1.0)?;
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, 1.0)?;
    let dice = g.div(num, den)?;
    let mean = g.mean(dice)?;
    let neg = g.scale(mean, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// One spatial/photometric augmentation: optional horizontal flip, integer
/// shift with reflect padding, then brightness scaling of the color channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTransform {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
    pub brightness: f32,
}

pub const MAX_SHIFT: i32 = 3;

impl GeoTransform {
    pub const IDENTITY: Self = Self {
        flip: false,
        dx: 0,
        dy: 0,
        brightness: 1.0,
    };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            dx: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            dy: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            brightness: rng.random_range(0.9f32..=1.1),
        }
    }

    pub fn apply(&self, sample: &LabeledImage) -> LabeledImage {
        let (h, w) = (sample.height(), sample.width());
        let reflect = |i: i64, n: usize| -> usize {
            let n = n as i64;
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - m }) as usize
        };
        let src = sample.tensor().data();
        let mut out = Vec::with_capacity(src.len());
        for c in 0..COLOR_CHANNELS + 1 {
            for y in 0..h {
                let sy = reflect(y as i64 - self.dy as i64, h);
                for x in 0..w {
                    let mut sx = reflect(x as i64 - self.dx as i64, w);
                    if self.flip {
                        sx = w - 1 - sx;
                    }
                    let v = src[c * h * w + sy * w + sx];
                    out.push(if c != MASK_CHANNEL && self.brightness != 1.0 {
                        (((v + 1.0) * 0.5 * self.brightness).min(1.0)) * 2.0 - 1.0
                    } else {
                        v
                    });
                }
            }
        }
        LabeledImage::new(Tensor::new(vec![4, h, w], out).expect("same numel"))
            .expect("four channels")
            .rebinarize_mask()
    }
}

pub fn geo_augment<R: Rng + ?Sized>(sample: &LabeledImage, rng: &mut R) -> LabeledImage {
    GeoTransform::draw(rng).apply(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub net: SegNetConfig,
    pub epochs: usize,
    pub lr: f64,
    /// Epoch at which the learning rate is multiplied by `lr_drop`.
    pub lr_drop_epoch: usize,
    pub lr_drop: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub augment: bool,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            net: SegNetConfig::default(),
            epochs: 30,
            lr: 2e-3,
            lr_drop_epoch: 10,
            lr_drop: 0.1,
            batch_size: 8,
            val_fraction: 0.2,
            augment: true,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.net.base_channels == 0 {
            return Err(Error::Config("epochs, batch_size and base_channels must be positive".into()));
        }
        if self.lr < 0.0 || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("lr must be ≥ 0 and val_fraction in [0, 1)".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegTraining {
    /// Parameters from the epoch with the best validation IoU.
    pub best: SegNet,
    pub best_epoch: usize,
    pub val_iou: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub train_count: usize,
    pub val_count: usize,
}

/// Trains with soft-Dice loss on an 80/20 split (by default). With a single
/// sample the validation set is the training set.
pub fn train_seg(data: &[LabeledImage], cfg: &SegConfig) -> Result<SegTraining> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("segmentation training set is empty"));
    }
    for (i, s) in data.iter().enumerate() {
        if s.mask().iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::invalid(format!("sample {i} has a non-binary mask")));
        }
    }
    let mut rng = seed::stream(cfg.seed, "seg-train", 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64 * cfg.val_fraction).round() as usize).min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&LabeledImage> = train_idx.iter().map(|&i| &data[i]).collect();
    let val: Vec<LabeledImage> = if val_idx.is_empty() {
        train.iter().map(|&s| s.clone()).collect()
    } else {
        val_idx.iter().map(|&i| data[i].clone()).collect()
    };

    let mut net = SegNet::new(cfg.net);
    let mut best = net.clone();
    let (mut best_iou, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let mut val_iou = Vec::with_capacity(cfg.epochs);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in idx.chunks(cfg.batch_size) {
            let items: Vec<LabeledImage> = chunk
                .iter()
                .map(|&i| if cfg.augment { geo_augment(train[i], &mut rng) } else { train[i].clone() })
                .collect();
            let refs: Vec<&LabeledImage> = items.iter().collect();
            let (x, y) = seg_batch(&refs)?;
            let mut g = Graph::new();
            let p = net.params.bind(&mut g);
            let xn = g.constant(x);
            let yn = g.constant(y);
            let logits = net.forward(&mut g, &p, xn)?;
            let loss = soft_dice_loss(&mut g, logits, yn)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("segmentation loss at epoch {epoch}")));
            }
            let grads = p.collect(&g.backward(loss)?);
            net.params.adamw_step(&grads, lr, 0.0)?;
            total += value;
            batches += 1;
        }
        train_loss.push(total / batches as f64);
        let iou = test_seg(&net, &val, cfg.threshold)?.iou;
        val_iou.push(iou);
        if iou > best_iou {
            best_iou = iou;
            best_epoch = epoch;
            best = net.clone();
        }
    }
    Ok(SegTraining {
        best,
        best_epoch,
        val_iou,
        train_loss,
        train_count: train.len(),
        val_count: val_idx.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegEval {
    pub dice: f64,
    pub iou: f64,
    pub per_sample: Vec<SegScore>,
}

/// Binarizes `σ(logits) > threshold` and averages per-sample Dice and IoU.
pub fn test_seg(net: &SegNet, test: &[LabeledImage], threshold: f64) -> Result<SegEval> {
    if test.is_empty() {
        return Err(Error::invalid("segmentation test set is empty"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut per_sample = Vec::with_capacity(test.len());
    for chunk in test.chunks(32) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (x, _) = seg_batch(&refs)?;
        let prob = net.predict(&x)?;
        let plane = chunk[0].plane();
        for (i, s) in chunk.iter().enumerate() {
            let pred: Vec<f32> = prob.data()[i * plane..(i + 1) * plane]
                .iter()
                .map(|&p| if p as f64 > threshold { 1.0 } else { 0.0 })
                .collect();
            per_sample.push(seg_metrics(&pred, &s.mask01())?);
        }
    }
    let n = per_sample.len() as f64;
    Ok(SegEval {
        dice: per_sample.iter().map(|s| s.dice).sum::<f64>() / n,
        iou: per_sample.iter().map(|s| s.iou).sum::<f64>() / n,
        per_sample,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugMode {
    /// A selected real image is swapped for its synthetic draws.
    #[default]
    Replace,
    /// A selected real image is kept and its synthetic draws are appended.
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPlan {
    pub alpha: f64,
    pub r: usize,
    /// Synthetic variants available per real image.
    pub m: usize,
    pub mode: AugMode,
    pub seed: u64,
}

impl Default for AugPlan {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            r: 3,
            m: 3,
            mode: AugMode::Replace,
            seed: 0,
        }
    }
}

impl AugPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.r == 0 || self.r > self.m {
            return Err(Error::Config(format!("need 1 ≤ r ≤ m, got r={} m={}", self.r, self.m)));
        }
        Ok(())
    }
}

/// Per real sample: with probability α, emit `r` of its first `m` synthetic
/// variants drawn without replacement (plus the real one in add mode);
/// otherwise emit the real sample. The result is shuffled.
pub fn augment_dataset(
    real: &[Sample],
    synth: &BTreeMap<String, Vec<Sample>>,
    plan: &AugPlan,
) -> Result<Vec<Sample>> {
    plan.validate()?;
    for s in real {
        let have = synth.get(&s.id).map_or(0, |v| v.len().min(plan.m));
        if have < plan.r {
            return Err(Error::invalid(format!(
                "real sample {} has {have} synthetic variants, need {}",
                s.id, plan.r
            )));
        }
    }
    let mut rng = seed::stream(plan.seed, "augment", 0);
    let mut out = Vec::new();
    for s in real {
        if rng.random_bool(plan.alpha) {
            let pool = &synth[&s.id];
            if plan.mode == AugMode::Add {
                out.push(s.clone());
            }
            for j in index::sample(&mut rng, pool.len().min(plan.m), plan.r) {
                out.push(pool[j].clone());
            }
        } else {
            out.push(s.clone());
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Gaussian-noise color channels (clamped to `[-1, 1]`) paired with the
/// real masks. Image `i` uses stream `(seed, "noise-baseline", i)`.
pub fn noise_baseline(real: &[Sample], seed_value: u64) -> Vec<Sample> {
    real.iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seed::stream(seed_value, "noise-baseline", i as u64);
            let (h, w) = (s.image.height(), s.image.width());
            let color: Tensor<f32> = gaussian(&[COLOR_CHANNELS, h, w], &mut rng).map(|v: f32| v.clamp(-1.0, 1.0));
            let mask = Tensor::new(vec![1, h, w], s.image.mask().to_vec()).expect("plane size");
            let image = LabeledImage::from_parts(&color, &mask).expect("matching dims");
            Sample::new(format!("{}_noise", s.id), image)
        })
        .collect()
}

pub fn images(samples: &[Sample]) -> Vec<LabeledImage> {
    samples.iter().map(|s| s.image.clone()).collect()
}

/// Hash of the training set for manifests.
pub fn dataset_hash(samples: &[Sample]) -> String {
    labeled::hash_samples(samples)
}
