//! FID between feature Gaussians, MS-SSIM, Dice/IoU, and report assembly.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::labeled::{self, LabeledImage};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and unbiased covariance, symmetrized.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::invalid(format!(
            "gaussian stats need at least 2 vectors, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    let n = features.len();
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, count: n })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fid {
    pub value: f64,
    /// `1e-6·I` was added to both covariances because the product was
    /// near-singular.
    pub jittered: bool,
}

pub const FID_JITTER: f64 = 1e-6;

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `tr((Σa^½ Σb Σa^½)^½)` and the smallest/largest eigenvalues of the product.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (f64, f64, f64) {
    let ra = sym_sqrt(a);
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(m).eigenvalues;
    let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (e.iter().map(|v| v.max(0.0).sqrt()).sum(), lo, hi)
}

/// Fréchet distance `‖μa−μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`, clamped at 0.
pub fn fid_detailed(a: &GaussianStats, b: &GaussianStats) -> Result<Fid> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(Error::shape(
            "fid",
            format!("dims {} vs {}", a.mean.len(), b.mean.len()),
        ));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let (mut sa, mut sb) = (a.cov.clone(), b.cov.clone());
    let (mut tr, lo, hi) = trace_sqrt_product(&sa, &sb);
    let jittered = lo <= 1e-12 * hi.max(1.0) && hi > 0.0;
    if jittered {
        for i in 0..d {
            sa[(i, i)] += FID_JITTER;
            sb[(i, i)] += FID_JITTER;
        }
        tr = trace_sqrt_product(&sa, &sb).0;
    }
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * tr;
    Ok(Fid {
        value: value.max(0.0),
        jittered,
    })
}

pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    Ok(fid_detailed(a, b)?.value)
}

/// Standard 5-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of `[-1, 1]` data.
pub const SSIM_RANGE: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimPadding {
    /// Only windows that fit inside the image.
    #[default]
    Valid,
    /// Windows wrap around the borders; output keeps the input size.
    Circular,
}

/// Largest level count (at most 5) whose coarsest scale still fits the window.
pub fn max_ms_ssim_levels(height: usize, width: usize) -> usize {
    let mut levels = 0;
    let mut s = height.min(width);
    while levels < MS_SSIM_WEIGHTS.len() && s >= SSIM_WINDOW {
        levels += 1;
        s /= 2;
    }
    levels
}

/// The first `levels` standard exponents rescaled to sum to 1.
pub fn ms_ssim_weights(levels: usize) -> Result<Vec<f64>> {
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() {
        return Err(Error::invalid(format!("MS-SSIM levels {levels} outside 1..=5")));
    }
    let w = &MS_SSIM_WEIGHTS[..levels];
    let s: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / s).collect())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, win: &[f64], pad: SsimPadding) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = match pad {
        SsimPadding::Valid => (h + 1 - k, w + 1 - k),
        SsimPadding::Circular => (h, w),
    };
    let half = k / 2;
    let col = |x: usize, j: usize| match pad {
        SsimPadding::Valid => x + j,
        SsimPadding::Circular => (x + j + w - half % w) % w,
    };
    let row = |y: usize, i: usize| match pad {
        SsimPadding::Valid => y + i,
        SsimPadding::Circular => (y + i + h - half % h) % h,
    };
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|j| win[j] * plane[y * w + col(x, j)]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * tmp[row(y, i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean contrast-structure and mean SSIM of one plane pair at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, pad: SsimPadding) -> (f64, f64) {
    let win = gaussian_window();
    let c1 = (0.01 * SSIM_RANGE).powi(2);
    let c2 = (0.03 * SSIM_RANGE).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (ma, oh, ow) = filter(a, h, w, &win, pad);
    let (mb, _, _) = filter(b, h, w, &win, pad);
    let (aa, _, _) = filter(&prod(a, a), h, w, &win, pad);
    let (bb, _, _) = filter(&prod(b, b), h, w, &win, pad);
    let (ab, _, _) = filter(&prod(a, b), h, w, &win, pad);
    let n = (oh * ow) as f64;
    let (mut cs_sum, mut ssim_sum) = (0.0, 0.0);
    for i in 0..oh * ow {
        let va = aa[i] - ma[i] * ma[i];
        let vb = bb[i] - mb[i] * mb[i];
        let cov = ab[i] - ma[i] * mb[i];
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma[i] * mb[i] + c1) / (ma[i] * ma[i] + mb[i] * mb[i] + c1);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    (cs_sum / n, ssim_sum / n)
}

fn pool2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let s = plane[2 * y * w + 2 * x]
                + plane[2 * y * w + 2 * x + 1]
                + plane[(2 * y + 1) * w + 2 * x]
                + plane[(2 * y + 1) * w + 2 * x + 1];
            out.push(s / 4.0);
        }
    }
    (out, oh, ow)
}

/// MS-SSIM of `[C, H, W]` tensors, averaged over channels. Negative
/// contrast-structure and SSIM terms are clamped at 0 before exponentiation.
pub fn ms_ssim(a: &Tensor<f32>, b: &Tensor<f32>, weights: &[f64], pad: SsimPadding) -> Result<f64> {
    let d = a.dims();
    if d != b.dims() || d.len() != 3 {
        return Err(Error::shape("ms_ssim", format!("{d:?} vs {:?}", b.dims())));
    }
    let levels = weights.len();
    let max = max_ms_ssim_levels(d[1], d[2]);
    if levels == 0 || levels > max {
        return Err(Error::invalid(format!(
            "{levels} MS-SSIM levels do not fit {}x{} images (max {max})",
            d[1], d[2]
        )));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid("MS-SSIM weights must be non-negative and sum to 1"));
    }
    let plane = d[1] * d[2];
    let mut total = 0.0;
    for c in 0..d[0] {
        let mut pa: Vec<f64> = a.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let mut pb: Vec<f64> = b.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let (mut h, mut w) = (d[1], d[2]);
        let mut value = 1.0;
        for (lvl, &wt) in weights.iter().enumerate() {
            let (cs, ssim) = ssim_terms(&pa, &pb, h, w, pad);
            let term = if lvl + 1 == levels { ssim } else { cs };
            value *= term.max(0.0).powf(wt);
            if lvl + 1 < levels {
                let (na, nh, nw) = pool2(&pa, h, w);
                pb = pool2(&pb, h, w).0;
                pa = na;
                (h, w) = (nh, nw);
            }
        }
        total += value;
    }
    Ok(total / d[0] as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegScore {
    pub dice: f64,
    pub iou: f64,
}

/// Dice and IoU of two `{0, 1}` masks; two empty masks score 1.
pub fn seg_metrics(pred: &[f32], gt: &[f32]) -> Result<SegScore> {
    if pred.len() != gt.len() {
        return Err(Error::shape("seg_metrics", format!("{} vs {}", pred.len(), gt.len())));
    }
    if pred.iter().chain(gt).any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("seg_metrics needs binary {0, 1} masks"));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a == 1.0, b == 1.0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    let union = p + g - inter;
    if union == 0 {
        return Ok(SegScore { dice: 1.0, iou: 1.0 });
    }
    Ok(SegScore {
        dice: 2.0 * inter as f64 / (p + g) as f64,
        iou: inter as f64 / union as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub repeats: usize,
    /// Random within-set pairs averaged for MS-SSIM.
    pub pairs: usize,
    /// `None` uses the most levels the image size allows.
    pub levels: Option<usize>,
    pub padding: SsimPadding,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 3,
            pairs: 64,
            levels: None,
            padding: SsimPadding::Valid,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub tag: String,
    pub repeat: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub count: usize,
    /// `None` when the set is too small to evaluate.
    pub fid: Option<Fid>,
    pub ms_ssim: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

/// Per-image FID embedding: spatial mean and standard deviation of every
/// channel of every extractor layer, shallow to deep. The deepest-layer
/// mean alone (the style token) hardly separates texture from noise.
pub fn fid_embeddings(images: &[LabeledImage], extractor: &FeatureExtractor<f32>) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let batch = labeled::batch(chunk)?;
        let mut g = crate::autodiff::Graph::new();
        let x = g.constant(batch);
        let x = extractor.select_input(&mut g, x)?;
        let f = extractor.features(&mut g, x)?;
        let mut rows = vec![Vec::new(); chunk.len()];
        for &layer in &f.layers {
            let t = g.value(layer);
            let d = t.dims();
            let plane = d[2] * d[3];
            for (n, row) in rows.iter_mut().enumerate() {
                for c in 0..d[1] {
                    let s = (n * d[1] + c) * plane;
                    let v = &t.data()[s..s + plane];
                    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / plane as f64;
                    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
                    row.push(mean);
                    row.push(var.sqrt());
                }
            }
        }
        out.extend(rows);
    }
    Ok(out)
}

/// Mean MS-SSIM over `pairs` random distinct pairs of color images.
pub fn mean_pairwise_ms_ssim<R: Rng + ?Sized>(
    images: &[LabeledImage],
    pairs: usize,
    weights: &[f64],
    pad: SsimPadding,
    rng: &mut R,
) -> Result<Option<f64>> {
    if images.len() < 2 || pairs == 0 {
        return Ok(None);
    }
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..images.len());
        let mut j = rng.random_range(0..images.len() - 1);
        if j >= i {
            j += 1;
        }
        total += ms_ssim(&images[i].color(), &images[j].color(), weights, pad)?;
    }
    Ok(Some(total / pairs as f64))
}

/// FID of every set against the reference and within-set MS-SSIM, for each
/// repeat. The reference itself is evaluated first under the tag `Real`.
/// Repeat `r` of tag `t` draws pairs from `seed::stream(seed, "eval/t", r)`.
pub fn eval_report(
    datasets: &[(String, Vec<LabeledImage>)],
    reference: &[LabeledImage],
    extractor: &FeatureExtractor<f32>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if reference.len() < 2 {
        return Err(Error::invalid("reference set needs at least 2 images"));
    }
    let ref_stats = gaussian_stats(&fid_embeddings(reference, extractor)?)?;
    let (h, w) = (reference[0].height(), reference[0].width());
    let levels = cfg.levels.unwrap_or_else(|| max_ms_ssim_levels(h, w));
    let weights = ms_ssim_weights(levels)?;
    let mut report = MetricsReport::default();
    let sets = std::iter::once(("Real", reference)).chain(datasets.iter().map(|(t, s)| (t.as_str(), s.as_slice())));
    for (tag, set) in sets {
        let hash = labeled::hash_images(set);
        let fid = if set.len() >= 2 {
            Some(fid_detailed(&gaussian_stats(&fid_embeddings(set, extractor)?)?, &ref_stats)?)
        } else {
            None
        };
        for r in 0..cfg.repeats {
            let stream_seed = seed::derive(cfg.seed, &format!("eval/{tag}"), r as u64);
            let mut rng = seed::stream(cfg.seed, &format!("eval/{tag}"), r as u64);
            let mut order: Vec<&LabeledImage> = set.iter().collect();
            order.shuffle(&mut rng);
            let shuffled: Vec<LabeledImage> = order.into_iter().cloned().collect();
            let ms = mean_pairwise_ms_ssim(&shuffled, cfg.pairs, &weights, cfg.padding, &mut rng)?;
            report.rows.push(ReportRow {
                tag: tag.to_string(),
                repeat: r,
                seed: stream_seed,
                dataset_hash: hash.clone(),
                count: set.len(),
                fid,
                ms_ssim: ms,
                dice: None,
                iou: None,
            });
        }
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.6}"))
}

impl MetricsReport {
    pub fn tags(&self) -> Vec<&str> {
        let mut tags: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tags.contains(&r.tag.as_str()) {
                tags.push(&r.tag);
            }
        }
        tags
    }

    pub fn rows_for(&self, tag: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.tag == tag).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tag,repeat,seed,dataset_hash,count,fid,fid_jittered,ms_ssim,dice,iou\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.tag,
                r.repeat,
                r.seed,
                r.dataset_hash,
                r.count,
                opt(r.fid.map(|f| f.value)),
                r.fid.is_some_and(|f| f.jittered),
                opt(r.ms_ssim),
                opt(r.dice),
                opt(r.iou),
            )
            .unwrap();
        }
        s
    }

    /// One line per tag with a sub-column per repeat for each metric.
    pub fn to_table(&self) -> String {
        let repeats = self.rows.iter().map(|r| r.repeat + 1).max().unwrap_or(0);
        let metrics: [(&str, fn(&ReportRow) -> Option<f64>); 4] = [
            ("FID", |r| r.fid.map(|f| f.value)),
            ("MS-SSIM", |r| r.ms_ssim),
            ("Dice", |r| r.dice),
            ("IoU", |r| r.iou),
        ];
        let shown: Vec<_> = metrics
            .iter()
            .filter(|(_, f)| self.rows.iter().any(|r| f(r).is_some()))
            .collect();
        let mut s = format!("{:<22}", "Data type");
        for (name, _) in &shown {
            for r in 0..repeats {
                write!(s, " {:>12}", format!("{name} #{}", r + 1)).unwrap();
            }
        }
        s.push('\n');
        for tag in self.tags() {
            write!(s, "{tag:<22}").unwrap();
            let rows = self.rows_for(tag);
            for (_, f) in &shown {
                for r in 0..repeats {
                    let v = rows.iter().find(|row| row.repeat == r).and_then(|row| f(row));
                    write!(s, " {:>12}", v.map_or("-".to_string(), |v| format!("{v:.4}"))).unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    }

    #[test]
    fn stats_hand_example() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
        let z = gaussian_stats(&vec![vec![1.0, 3.0]; 4]).unwrap();
        assert!(z.cov.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn sample_mean_shrinks_with_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let norms: Vec<f64> = [10, 1000, 100_000]
            .iter()
            .map(|&n| {
                let f: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| normal(&mut rng)).collect()).collect();
                gaussian_stats(&f).unwrap().mean.norm()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    fn diag_stats(mean: &[f64], var: &[f64]) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            count: 10,
        }
    }

    #[test]
    fn fid_matches_diagonal_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d = rng.random_range(1..8);
            let ma: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let mb: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let va: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
            let vb: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
            let want: f64 = (0..d)
                .map(|i| (ma[i] - mb[i]).powi(2) + va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt())
                .sum();
            let got = fid_detailed(&diag_stats(&ma, &va), &diag_stats(&mb, &vb)).unwrap();
            assert!(!got.jittered);
            assert!((got.value - want).abs() < 1e-6, "{} vs {want}", got.value);
        }
    }

    #[test]
    fn fid_self_distance_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [3, 8, 40] {
            // n = 3 gives a rank-deficient 6×6 covariance
            let fa: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| normal(&mut rng)).collect()).collect();
            let fb: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| 2.0 * normal(&mut rng)).collect()).collect();
            let a = gaussian_stats(&fa).unwrap();
            let b = gaussian_stats(&fb).unwrap();
            assert!(fid(&a, &a).unwrap() < 1e-8);
            assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
        }
        let same_mean_shift = fid(&diag_stats(&[0.0, 0.0], &[1.0, 2.0]), &diag_stats(&[3.0, 4.0], &[1.0, 2.0])).unwrap();
        assert!((same_mean_shift - 25.0).abs() < 1e-9);
        assert!(fid(&diag_stats(&[0.0], &[1.0]), &diag_stats(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    /// Direct MS-SSIM: explicit 2-D window sums at every valid position.
    fn ms_ssim_direct(a: &Tensor<f32>, b: &Tensor<f32>, weights: &[f64]) -> f64 {
        let d = a.dims();
        let g1: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let s: f64 = g1.iter().sum();
        let win: Vec<f64> = (0..121).map(|k| g1[k / 11] * g1[k % 11] / (s * s)).collect();
        let (c1, c2) = (0.0004, 0.0036);
        let mut total = 0.0;
        for c in 0..d[0] {
            let take = |t: &Tensor<f32>| -> Vec<f64> {
                t.data()[c * d[1] * d[2]..(c + 1) * d[1] * d[2]].iter().map(|&v| v as f64).collect()
            };
            let (mut pa, mut pb, mut h, mut w) = (take(a), take(b), d[1], d[2]);
            let mut val = 1.0;
            for (lvl, &wt) in weights.iter().enumerate() {
                let (mut cs_sum, mut ss_sum, mut cnt) = (0.0, 0.0, 0.0);
                for y in 0..=h - 11 {
                    for x in 0..=w - 11 {
                        let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for k in 0..121 {
                            let p = (y + k / 11) * w + x + k % 11;
                            ma += win[k] * pa[p];
                            mb += win[k] * pb[p];
                            aa += win[k] * pa[p] * pa[p];
                            bb += win[k] * pb[p] * pb[p];
                            ab += win[k] * pa[p] * pb[p];
                        }
                        let cs = (2.0 * (ab - ma * mb) + c2) / (aa - ma * ma + bb - mb * mb + c2);
                        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                        cs_sum += cs;
                        ss_sum += l * cs;
                        cnt += 1.0;
                    }
                }
                let term = if lvl + 1 == weights.len() { ss_sum / cnt } else { cs_sum / cnt };
                val *= term.max(0.0).powf(wt);
                let down = |p: &[f64]| -> Vec<f64> {
                    (0..(h / 2) * (w / 2))
                        .map(|i| {
                            let (y, x) = (2 * (i / (w / 2)), 2 * (i % (w / 2)));
                            (p[y * w + x] + p[y * w + x + 1] + p[(y + 1) * w + x] + p[(y + 1) * w + x + 1]) / 4.0
                        })
                        .collect()
                };
                pa = down(&pa);
                pb = down(&pb);
                h /= 2;
                w /= 2;
            }
            total += val;
        }
        total / d[0] as f64
    }

    fn rand_img(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Tensor<f32> {
        Tensor::from_fn(&[c, s, s], |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn ms_ssim_identity_and_direct_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_img(&mut rng, 3, 32);
        let w2 = ms_ssim_weights(2).unwrap();
        assert!((ms_ssim(&a, &a, &w2, SsimPadding::Valid).unwrap() - 1.0).abs() < 1e-9);
        for _ in 0..3 {
            let b = a.zip_map(&rand_img(&mut rng, 3, 32), |x, y| 0.7 * x + 0.3 * y).unwrap();
            let fast = ms_ssim(&a, &b, &w2, SsimPadding::Valid).unwrap();
            let direct = ms_ssim_direct(&a, &b, &w2);
            assert!((fast - direct).abs() < 1e-6, "{fast} vs {direct}");
            assert!((fast - ms_ssim(&b, &a, &w2, SsimPadding::Valid).unwrap()).abs() < 1e-12);
        }
        let big_a = rand_img(&mut rng, 1, 48);
        let big_b = big_a.map(|v| 0.5 * v + 0.1);
        let w3 = ms_ssim_weights(3).unwrap();
        let fast = ms_ssim(&big_a, &big_b, &w3, SsimPadding::Valid).unwrap();
        assert!((fast - ms_ssim_direct(&big_a, &big_b, &w3)).abs() < 1e-6);
    }

    #[test]
    fn ms_ssim_constant_images_closed_form() {
        let a = Tensor::full(&[1, 32, 32], 0.2f32);
        let b = Tensor::full(&[1, 32, 32], 0.7f32);
        let w = ms_ssim_weights(2).unwrap();
        let (x, y) = (0.2f32 as f64, 0.7f32 as f64);
        let c1 = 0.0004;
        // zero variances make every contrast-structure term 1
        let want = ((2.0 * x * y + c1) / (x * x + y * y + c1)).powf(w[1]);
        let got = ms_ssim(&a, &b, &w, SsimPadding::Valid).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ms_ssim_level_and_weight_checks() {
        assert_eq!(max_ms_ssim_levels(32, 32), 2);
        assert_eq!(max_ms_ssim_levels(256, 256), 5);
        assert_eq!(max_ms_ssim_levels(10, 64), 0);
        let w = ms_ssim_weights(2).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.0448 / 0.3304).abs() < 1e-12);
        let a = Tensor::zeros(&[1, 32, 32]);
        let err = ms_ssim(&a, &a, &ms_ssim_weights(3).unwrap(), SsimPadding::Valid).unwrap_err();
        assert!(err.to_string().contains("max 2"));
        assert!(ms_ssim(&a, &a, &[0.5, 0.6], SsimPadding::Valid).is_err());
    }

    #[test]
    fn ms_ssim_circular_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_img(&mut rng, 2, 32);
        let b = a.zip_map(&rand_img(&mut rng, 2, 32), |x, y| 0.6 * x + 0.4 * y).unwrap();
        let shift = |t: &Tensor<f32>| {
            Tensor::from_fn(&[2, 32, 32], |i| {
                let (c, y, x) = (i / 1024, (i / 32) % 32, i % 32);
                t.data()[c * 1024 + ((y + 30) % 32) * 32 + (x + 4) % 32]
            })
        };
        let w = ms_ssim_weights(2).unwrap();
        let v0 = ms_ssim(&a, &b, &w, SsimPadding::Circular).unwrap();
        let v1 = ms_ssim(&shift(&a), &shift(&b), &w, SsimPadding::Circular).unwrap();
        assert!((v0 - v1).abs() < 1e-12);
    }

    #[test]
    fn seg_metric_cases() {
        let rect = |x0: usize| -> Vec<f32> {
            (0..64).map(|i| if (x0..x0 + 4).contains(&(i % 8)) && i / 8 < 4 { 1.0 } else { 0.0 }).collect()
        };
        let a = rect(0);
        assert_eq!(seg_metrics(&a, &a).unwrap(), SegScore { dice: 1.0, iou: 1.0 });
        let half = seg_metrics(&a, &rect(2)).unwrap();
        assert_eq!(half.dice, 0.5);
        assert_eq!(half.iou, 1.0 / 3.0);
        assert_eq!(seg_metrics(&a, &rect(4)).unwrap(), SegScore { dice: 0.0, iou: 0.0 });
        assert_eq!(seg_metrics(&[0.0; 4], &[0.0; 4]).unwrap(), SegScore { dice: 1.0, iou: 1.0 });
        assert!(seg_metrics(&[0.5], &[1.0]).is_err());
    }

    #[test]
    fn dice_dominates_iou_and_ignores_pixel_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p: Vec<f32> = (0..50).map(|_| rng.random_bool(0.3) as u8 as f32).collect();
            let g: Vec<f32> = (0..50).map(|_| rng.random_bool(0.3) as u8 as f32).collect();
            let s = seg_metrics(&p, &g).unwrap();
            assert!(s.dice >= s.iou);
            assert_eq!(s.dice == s.iou, s.dice == 0.0 || s.dice == 1.0);
            let mut idx: Vec<usize> = (0..50).collect();
            idx.shuffle(&mut rng);
            let pp: Vec<f32> = idx.iter().map(|&i| p[i]).collect();
            let gg: Vec<f32> = idx.iter().map(|&i| g[i]).collect();
            assert_eq!(seg_metrics(&pp, &gg).unwrap(), s);
        }
    }

    fn toy_set(seed: u64, n: usize, scale: f32) -> Vec<LabeledImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                LabeledImage::new(Tensor::from_fn(&[4, 16, 16], |i| {
                    if i >= 3 * 256 {
                        -1.0
                    } else {
                        (scale * rng.random_range(-1.0f32..1.0)).clamp(-1.0, 1.0)
                    }
                }))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn report_real_row_is_near_zero_and_reproducible() {
        let ext = FeatureExtractor::seeded(0);
        let reference = toy_set(0, 40, 0.5);
        let sets = vec![("Noise".to_string(), toy_set(1, 40, 1.0)), ("Empty".to_string(), vec![])];
        let cfg = EvalConfig {
            pairs: 8,
            ..EvalConfig::default()
        };
        let rep = eval_report(&sets, &reference, &ext, &cfg).unwrap();
        assert_eq!(rep.tags(), vec!["Real", "Noise", "Empty"]);
        assert_eq!(rep.rows_for("Real").len(), 3);
        assert!(rep.rows_for("Real")[0].fid.unwrap().value < 1e-3);
        assert!(rep.rows_for("Noise")[0].fid.unwrap().value > 1e-3);
        assert!(rep.rows_for("Empty")[0].fid.is_none());
        let again = eval_report(&sets, &reference, &ext, &cfg).unwrap();
        assert_eq!(rep.to_csv(), again.to_csv());
        assert!(rep.to_csv().contains("absent"));
        assert!(rep.to_table().contains("MS-SSIM #3"));
    }
}
