//! Loss-guided reverse diffusion that pulls an inpainted image toward the
//! look of its source while keeping its layout and mask.
//!
//! Each guided step predicts the clean image with Tweedie's formula,
//! evaluates a weighted sum of content and style losses on it, and moves the
//! ordinary reverse-step sample against the gradient of that sum with
//! respect to `x_t`. The gradient flows through the denoiser via `x̂0(x_t)`
//! only; the posterior mean term is not differentiated.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Unary};
use crate::diffusion::net::{EpsModel, IMAGE_CHANNELS};
use crate::diffusion::sampler::{gaussian, noise_to, reverse_from_eps, VarianceMode, TWEEDIE_CLAMP};
use crate::diffusion::schedule::{RespacedSchedule, StepCoeffs};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::labeled::{LabeledImage, COLOR_CHANNELS, MASK_CHANNEL};
use crate::repaint::ModelPool;
use crate::seed;
use crate::tensor::{Element, Tensor};

/// Loss weights. `mse` is kept for configuration parity; it only takes
/// effect through [`StyleConfig::fold_mse`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleWeights {
    pub zecon: f64,
    pub vgg: f64,
    pub mse: f64,
    pub sty: f64,
    pub l2: f64,
    pub sem: f64,
    pub rng: f64,
}

impl Default for StyleWeights {
    fn default() -> Self {
        Self {
            zecon: 500.0,
            vgg: 100.0,
            mse: 5000.0,
            sty: 10000.0,
            l2: 10000.0,
            sem: 40000.0,
            rng: 200.0,
        }
    }
}

impl StyleWeights {
    pub fn zero() -> Self {
        Self {
            zecon: 0.0,
            vgg: 0.0,
            mse: 0.0,
            sty: 0.0,
            l2: 0.0,
            sem: 0.0,
            rng: 0.0,
        }
    }

    fn all(&self) -> [f64; 7] {
        [self.zecon, self.vgg, self.mse, self.sty, self.l2, self.sem, self.rng]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    pub weights: StyleWeights,
    /// Multiplier on the (clipped) guidance gradient.
    pub step_scale: f64,
    /// Per-image L2 clip on the guidance gradient.
    pub clip_norm: f64,
    pub temperature: f64,
    /// Spatial locations sampled per layer for the contrastive loss.
    pub locations: usize,
    /// Adds the `mse` weight to the pixel L2 weight.
    pub fold_mse: bool,
    pub variance: VarianceMode,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            weights: StyleWeights::default(),
            step_scale: 0.03,
            clip_norm: 10.0,
            temperature: 0.07,
            locations: 16,
            fold_mse: false,
            variance: VarianceMode::FixedSmall,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl StyleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.all().iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("style weights must be non-negative".into()));
        }
        if !(self.step_scale >= 0.0) || !(self.clip_norm > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config(
                "step_scale must be >= 0, clip_norm and temperature > 0".into(),
            ));
        }
        if self.locations == 0 || self.batch_size == 0 {
            return Err(Error::Config("locations and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn l2_weight(&self) -> f64 {
        if self.fold_mse {
            self.weights.l2 + self.weights.mse
        } else {
            self.weights.l2
        }
    }

    fn active(&self) -> bool {
        let w = &self.weights;
        [w.zecon, w.vgg, w.sty, self.l2_weight(), w.sem, w.rng]
            .iter()
            .any(|&v| v > 0.0)
    }
}

/// Targets of one guided chain, all `[N, 4, H, W]`.
#[derive(Clone, Debug)]
pub struct StyleTargets<E: Element = f32> {
    /// The inpainted image (content target and mask donor).
    pub content: Tensor<E>,
    /// The real image that was inpainted (style target).
    pub source: Tensor<E>,
    /// `x̂0` from the previous guided step, for the semantic term.
    pub prev: Option<Tensor<E>>,
}

impl<E: Element> StyleTargets<E> {
    pub fn new(content: Tensor<E>, source: Tensor<E>) -> Result<Self> {
        let d = content.dims();
        if d.len() != 4 || d[1] != IMAGE_CHANNELS || source.dims() != d {
            return Err(Error::shape(
                "style_targets",
                format!("content {d:?} vs source {:?}", source.dims()),
            ));
        }
        Ok(Self {
            content,
            source,
            prev: None,
        })
    }

    pub fn len(&self) -> usize {
        self.content.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces the mask channel of `x` (`[N, 4, H, W]`) with the content
    /// mask, bit for bit.
    pub fn freeze_mask(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.dims() != self.content.dims() {
            return Err(Error::shape(
                "freeze_mask",
                format!("{:?} vs {:?}", x.dims(), self.content.dims()),
            ));
        }
        let d = x.dims();
        let plane = d[2] * d[3];
        let per = d[1] * plane;
        let mut data = x.data().to_vec();
        for n in 0..d[0] {
            let r = n * per + MASK_CHANNEL * plane..n * per + (MASK_CHANNEL + 1) * plane;
            data[r.clone()].copy_from_slice(&self.content.data()[r]);
        }
        Tensor::new(d.to_vec(), data)
    }
}

/// Contrastive patch loss between two single-item feature stacks. For each
/// layer, `locations` positions are sampled; each sampled feature of `x` is
/// classified against the same position of `x0` (positive) and the other
/// sampled positions (negatives) with cosine logits over `temperature`.
/// Layer losses are averaged over locations and summed over layers.
pub fn zecon_loss<E: Element, R: Rng + ?Sized>(
    g: &mut Graph<E>,
    feat_x: &[NodeId],
    feat_x0: &[NodeId],
    locations: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<NodeId> {
    if feat_x.is_empty() || feat_x.len() != feat_x0.len() {
        return Err(Error::invalid(format!(
            "zecon needs matching non-empty layer lists, got {} and {}",
            feat_x.len(),
            feat_x0.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&a, &b) in feat_x.iter().zip(feat_x0) {
        let d = g.dims(a).to_vec();
        if g.dims(b) != d.as_slice() || d.len() != 4 || d[0] != 1 {
            return Err(Error::shape(
                "zecon",
                format!("{d:?} vs {:?}, want matching [1, C, H, W]", g.dims(b)),
            ));
        }
        let (c, hw) = (d[1], d[2] * d[3]);
        if hw == 0 {
            return Err(Error::invalid("zecon layer has no spatial locations"));
        }
        let pick = index::sample(rng, hw, locations.min(hw)).into_vec();
        let rows = |g: &mut Graph<E>, f: NodeId| -> Result<NodeId> {
            let f = g.reshape(f, &[c, hw])?;
            let f = g.transpose(f)?;
            let f = g.normalize_rows(f)?;
            g.gather_rows(f, pick.clone())
        };
        let q = rows(g, a)?;
        let k = rows(g, b)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / temperature)?;
        let ce = g.softmax_cross_entropy(logits, (0..pick.len()).collect())?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Mean over layers of the per-layer feature MSE.
pub fn content_feature_loss<E: Element>(g: &mut Graph<E>, feat_x: &[NodeId], feat_x0: &[NodeId]) -> Result<NodeId> {
    if feat_x.is_empty() || feat_x.len() != feat_x0.len() {
        return Err(Error::invalid("content loss needs matching non-empty layer lists"));
    }
    let mut total: Option<NodeId> = None;
    for (&a, &b) in feat_x.iter().zip(feat_x0) {
        let m = g.mse(a, b)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    g.scale(total.expect("non-empty"), 1.0 / feat_x.len() as f64)
}

/// `‖a − b‖₂` between two token rows.
pub fn token_distance<E: Element>(g: &mut Graph<E>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    g.norm2(d)
}

/// Mean squared pixel difference.
pub fn pixel_l2_loss<E: Element>(g: &mut Graph<E>, x: NodeId, x_src: NodeId) -> Result<NodeId> {
    g.mse(x, x_src)
}

/// `mean(max(|x| − 1, 0)²)`.
pub fn range_loss<E: Element>(g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
    let a = g.unary(x, Unary::Abs)?;
    let a = g.add_scalar(a, -1.0)?;
    let a = g.unary(a, Unary::Relu)?;
    let a = g.square(a)?;
    g.mean(a)
}

/// Unweighted loss terms, each summed over the batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
}

impl Breakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

fn item<E: Element>(g: &mut Graph<E>, x: NodeId, n: usize) -> Result<NodeId> {
    g.slice(x, 0, n, 1)
}

/// Weighted style objective on `x0_hat` (`[N, 4, H, W]`), summed over the
/// batch so each item's gradient depends only on its own loss. Terms with
/// zero weight are not evaluated. Item `n` samples contrastive locations
/// from `rngs[n]`.
pub fn total_loss<E: Element, R: Rng>(
    g: &mut Graph<E>,
    x0_hat: NodeId,
    targets: &StyleTargets<E>,
    cfg: &StyleConfig,
    extractor: &FeatureExtractor<E>,
    rngs: &mut [R],
) -> Result<(NodeId, Breakdown)> {
    let n = targets.len();
    if g.dims(x0_hat) != targets.content.dims() || rngs.len() != n {
        return Err(Error::shape(
            "total_loss",
            format!("x0_hat {:?}, targets {:?}, {} rngs", g.dims(x0_hat), targets.content.dims(), rngs.len()),
        ));
    }
    let w = &cfg.weights;
    let l2_weight = cfg.l2_weight();
    let mut terms: Vec<(&'static str, f64, NodeId)> = Vec::new();

    let x_in = extractor.select_input(g, x0_hat)?;
    let fx = extractor.features(g, x_in)?;
    let content = g.constant(targets.content.clone());
    let source = g.constant(targets.source.clone());

    if w.zecon > 0.0 || w.vgg > 0.0 {
        let c_in = extractor.select_input(g, content)?;
        let fc = extractor.features(g, c_in)?;
        if w.zecon > 0.0 {
            let mut sum: Option<NodeId> = None;
            for (i, rng) in rngs.iter_mut().enumerate() {
                let a: Vec<NodeId> = fx.layers.iter().map(|&l| item(g, l, i)).collect::<Result<_>>()?;
                let b: Vec<NodeId> = fc.layers.iter().map(|&l| item(g, l, i)).collect::<Result<_>>()?;
                let z = zecon_loss(g, &a, &b, cfg.locations, cfg.temperature, rng)?;
                sum = Some(match sum {
                    None => z,
                    Some(s) => g.add(s, z)?,
                });
            }
            terms.push(("zecon", w.zecon, sum.expect("non-empty batch")));
        }
        if w.vgg > 0.0 {
            let c = content_feature_loss(g, &fx.layers, &fc.layers)?;
            terms.push(("content", w.vgg, g.scale(c, n as f64)?));
        }
    }
    if w.sty > 0.0 {
        let s_in = extractor.select_input(g, source)?;
        let fs = extractor.features(g, s_in)?;
        let mut sum: Option<NodeId> = None;
        for i in 0..n {
            let a = item(g, fx.token, i)?;
            let b = item(g, fs.token, i)?;
            let d = token_distance(g, a, b)?;
            sum = Some(match sum {
                None => d,
                Some(s) => g.add(s, d)?,
            });
        }
        terms.push(("style", w.sty, sum.expect("non-empty batch")));
    }
    if l2_weight > 0.0 {
        let a = g.slice(x0_hat, 1, 0, COLOR_CHANNELS)?;
        let b = g.slice(source, 1, 0, COLOR_CHANNELS)?;
        let m = pixel_l2_loss(g, a, b)?;
        terms.push(("l2", l2_weight, g.scale(m, n as f64)?));
    }
    if w.sem > 0.0 {
        if let Some(prev) = &targets.prev {
            let p = g.constant(prev.clone());
            let p_in = extractor.select_input(g, p)?;
            let fp = extractor.features(g, p_in)?;
            let mut sum: Option<NodeId> = None;
            for i in 0..n {
                let a = item(g, fx.token, i)?;
                let b = item(g, fp.token, i)?;
                let d = token_distance(g, b, a)?;
                sum = Some(match sum {
                    None => d,
                    Some(s) => g.add(s, d)?,
                });
            }
            let neg = g.scale(sum.expect("non-empty batch"), -1.0)?;
            terms.push(("semantic", w.sem, neg));
        }
    }
    if w.rng > 0.0 {
        let a = g.slice(x0_hat, 1, 0, COLOR_CHANNELS)?;
        let r = range_loss(g, a)?;
        terms.push(("range", w.rng, g.scale(r, n as f64)?));
    }

    let mut breakdown = Breakdown::default();
    let mut total: Option<NodeId> = None;
    for (name, weight, node) in terms {
        let v = g.value(node).item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("style loss term `{name}`")));
        }
        breakdown.terms.push((name, v));
        breakdown.total += weight * v;
        let wn = g.scale(node, weight)?;
        total = Some(match total {
            None => wn,
            Some(t) => g.add(t, wn)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(E::zero())),
    };
    Ok((total, breakdown))
}

/// Builds `ε̂(x_t)` and the clamped Tweedie estimate with its mask channel
/// replaced by the content mask.
fn x0_hat_graph<E: Element, M: EpsModel<E> + ?Sized>(
    g: &mut Graph<E>,
    net: &M,
    x_t: NodeId,
    step: &StepCoeffs,
    targets: &StyleTargets<E>,
) -> Result<(NodeId, NodeId)> {
    let n = targets.len();
    let eps = net.eps_graph(g, x_t, &vec![step.timestep; n])?;
    if step.alpha_bar <= 0.0 {
        return Err(Error::invalid("Tweedie estimate needs alpha_bar > 0"));
    }
    let s = g.scale(eps, -(1.0 - step.alpha_bar).sqrt())?;
    let x0 = g.add(x_t, s)?;
    let x0 = g.scale(x0, 1.0 / step.alpha_bar.sqrt())?;
    let x0 = g.clamp(x0, -TWEEDIE_CLAMP, TWEEDIE_CLAMP)?;
    let color = g.slice(x0, 1, 0, COLOR_CHANNELS)?;
    let mask = g.constant(mask_planes(&targets.content)?);
    let x0 = g.concat(&[color, mask], 1)?;
    Ok((eps, x0))
}

fn mask_planes<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let d = x.dims();
    let plane = d[2] * d[3];
    let per = d[1] * plane;
    let mut out = Vec::with_capacity(d[0] * plane);
    for n in 0..d[0] {
        let s = n * per + MASK_CHANNEL * plane;
        out.extend_from_slice(&x.data()[s..s + plane]);
    }
    Tensor::new(vec![d[0], 1, d[2], d[3]], out)
}

/// The guidance objective as a function of `x_t`: total loss of the
/// Tweedie estimate. Exposed for gradient verification.
#[allow(clippy::too_many_arguments)]
pub fn guidance_loss<E: Element, M: EpsModel<E> + ?Sized, R: Rng>(
    g: &mut Graph<E>,
    net: &M,
    x_t: NodeId,
    step: &StepCoeffs,
    targets: &StyleTargets<E>,
    cfg: &StyleConfig,
    extractor: &FeatureExtractor<E>,
    rngs: &mut [R],
) -> Result<(NodeId, Breakdown)> {
    let (_, x0) = x0_hat_graph(g, net, x_t, step, targets)?;
    total_loss(g, x0, targets, cfg, extractor, rngs)
}

/// Result of one guided transition.
#[derive(Clone, Debug)]
pub struct GuidedStep<E: Element = f32> {
    pub x: Tensor<E>,
    pub breakdown: Breakdown,
    /// Items whose guidance was skipped because of a non-finite gradient.
    pub skipped: Vec<bool>,
}

/// Guided transition from respaced position `k` to `k − 1`. Item `n`
/// draws its reverse-step noise and then its contrastive locations from
/// `rngs[n]`. The returned mask channel is the content mask, bit for bit,
/// and `targets.prev` is updated with the new `x̂0`.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step<E: Element, M: EpsModel<E> + ?Sized, R: Rng>(
    net: &M,
    x_t: &Tensor<E>,
    k: usize,
    chain: &RespacedSchedule,
    targets: &mut StyleTargets<E>,
    cfg: &StyleConfig,
    extractor: &FeatureExtractor<E>,
    rngs: &mut [R],
) -> Result<GuidedStep<E>> {
    let n = targets.len();
    if x_t.dims() != targets.content.dims() || rngs.len() != n {
        return Err(Error::shape(
            "guided_reverse_step",
            format!("x {:?}, targets {:?}, {} rngs", x_t.dims(), targets.content.dims(), rngs.len()),
        ));
    }
    let step = chain.step(k)?;
    let mut g = Graph::new();
    let xn = g.input(x_t.clone());
    let (eps, x0) = x0_hat_graph(&mut g, net, xn, &step, targets)?;

    let per = x_t.numel() / n;
    let item_dims = &x_t.dims()[1..];
    let mut moved = Vec::with_capacity(x_t.numel());
    for (i, rng) in rngs.iter_mut().enumerate() {
        let r = i * per..(i + 1) * per;
        let xi = Tensor::new(item_dims.to_vec(), x_t.data()[r.clone()].to_vec())?;
        let ei = Tensor::new(item_dims.to_vec(), g.value(eps).data()[r].to_vec())?;
        moved.extend_from_slice(reverse_from_eps(&xi, &step, &ei, cfg.variance, rng)?.data());
    }

    let mut skipped = vec![false; n];
    let mut breakdown = Breakdown::default();
    if cfg.active() && cfg.step_scale > 0.0 {
        match total_loss(&mut g, x0, targets, cfg, extractor, rngs) {
            Ok((loss, b)) => {
                breakdown = b;
                let grads = g.backward(loss)?;
                if let Some(grad) = grads.get(xn) {
                    let plane = item_dims[1] * item_dims[2];
                    for (i, skip) in skipped.iter_mut().enumerate() {
                        let color = i * per..i * per + COLOR_CHANNELS * plane;
                        let gi = &grad.data()[color.clone()];
                        let norm = gi.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                        if !norm.is_finite() {
                            *skip = true;
                            continue;
                        }
                        let factor = cfg.step_scale * if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
                        let f = E::from_f64_lossy(factor);
                        for (m, &gv) in moved[color].iter_mut().zip(gi) {
                            *m = *m - f * gv;
                        }
                    }
                }
            }
            Err(Error::NonFinite(_)) => skipped.iter_mut().for_each(|s| *s = true),
            Err(e) => return Err(e),
        }
    }
    let x = targets.freeze_mask(&Tensor::new(x_t.dims().to_vec(), moved)?)?;
    targets.prev = Some(g.value(x0).clone());
    Ok(GuidedStep {
        x,
        breakdown,
        skipped,
    })
}

/// Restyled image with per-run diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Styled {
    pub image: LabeledImage,
    /// Guided steps whose guidance was skipped.
    pub skipped_steps: usize,
}

/// Runs a guided chain for a batch sharing one model: forward-noises the
/// inpainted images to the chain's start position, then guides down to 0.
#[allow(clippy::too_many_arguments)]
fn run_batch<M: EpsModel<f32> + ?Sized>(
    net: &M,
    inpainted: &[&LabeledImage],
    sources: &[&LabeledImage],
    chain: &RespacedSchedule,
    cfg: &StyleConfig,
    extractor: &FeatureExtractor<f32>,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Styled>> {
    let content = crate::labeled::batch(inpainted.iter().copied())?;
    let source = crate::labeled::batch(sources.iter().copied())?;
    let mut targets = StyleTargets::new(content, source)?;
    let start = chain.start_position();
    let ab = chain.alpha_bar(start)?;
    let item_dims = targets.content.dims()[1..].to_vec();
    let mut x0 = Vec::with_capacity(targets.content.numel());
    for (img, rng) in inpainted.iter().zip(rngs.iter_mut()) {
        let eps = gaussian::<f32, _>(&item_dims, rng);
        x0.extend_from_slice(noise_to(img.tensor(), &eps, ab)?.data());
    }
    let mut x = targets.freeze_mask(&Tensor::new(targets.content.dims().to_vec(), x0)?)?;
    let mut skipped = vec![0usize; inpainted.len()];
    for k in (1..=start).rev() {
        let s = guided_reverse_step(net, &x, k, chain, &mut targets, cfg, extractor, rngs)?;
        for (c, &sk) in skipped.iter_mut().zip(&s.skipped) {
            *c += sk as usize;
        }
        x = s.x;
    }
    let per = x.numel() / inpainted.len();
    inpainted
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut data: Vec<f32> = x.data()[i * per..(i + 1) * per]
                .iter()
                .map(|v| v.clamp(-1.0, 1.0))
                .collect();
            let plane = img.plane();
            data[MASK_CHANNEL * plane..].copy_from_slice(img.mask());
            Ok(Styled {
                image: LabeledImage::new(Tensor::new(item_dims.clone(), data)?)?,
                skipped_steps: skipped[i],
            })
        })
        .collect()
}

/// Restyles one inpainted image toward its source. The chain starts at
/// `chain.start_position()`.
pub fn stylize<M: EpsModel<f32> + ?Sized, R: Rng + ?Sized>(
    net: &M,
    inpainted: &LabeledImage,
    source: &LabeledImage,
    chain: &RespacedSchedule,
    cfg: &StyleConfig,
    extractor: &FeatureExtractor<f32>,
    rng: &mut R,
) -> Result<Styled> {
    cfg.validate()?;
    check_pair(inpainted, source)?;
    let mut rngs = vec![ChaCha8Rng::seed_from_u64(rng.next_u64())];
    Ok(run_batch(net, &[inpainted], &[source], chain, cfg, extractor, &mut rngs)?.remove(0))
}

fn check_pair(inpainted: &LabeledImage, source: &LabeledImage) -> Result<()> {
    if inpainted.tensor().dims() != source.tensor().dims() {
        return Err(Error::shape(
            "stylize",
            format!("{:?} vs {:?}", inpainted.tensor().dims(), source.tensor().dims()),
        ));
    }
    Ok(())
}

/// One styling job: an inpainted image, its source, and the model to use.
#[derive(Clone, Copy, Debug)]
pub struct StyleJob<'a> {
    pub inpainted: &'a LabeledImage,
    pub source: &'a LabeledImage,
    pub model: usize,
}

/// Restyles every job, batching jobs that share a model. Job `i` uses the
/// stream `seed::stream(cfg.seed, "stylize", i)`, so its output equals
/// [`stylize`] called with that stream.
pub fn stylize_all(
    pool: &(impl ModelPool + ?Sized),
    jobs: &[StyleJob<'_>],
    chain: &RespacedSchedule,
    cfg: &StyleConfig,
    extractor: &FeatureExtractor<f32>,
) -> Result<Vec<Styled>> {
    cfg.validate()?;
    for j in jobs {
        check_pair(j.inpainted, j.source)?;
        pool.model(j.model)?;
    }
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&i| (jobs[i].model, jobs[i].source.height(), jobs[i].source.width(), i));
    let mut out: Vec<Option<Styled>> = vec![None; jobs.len()];
    let key = |i: usize| (jobs[i].model, jobs[i].source.height(), jobs[i].source.width());
    let mut start = 0;
    while start < order.len() {
        let head = key(order[start]);
        let mut end = start;
        while end < order.len() && end - start < cfg.batch_size && key(order[end]) == head {
            end += 1;
        }
        let ids = &order[start..end];
        let inpainted: Vec<&LabeledImage> = ids.iter().map(|&i| jobs[i].inpainted).collect();
        let sources: Vec<&LabeledImage> = ids.iter().map(|&i| jobs[i].source).collect();
        let mut rngs: Vec<ChaCha8Rng> = ids
            .iter()
            .map(|&i| {
                let mut s = seed::stream(cfg.seed, "stylize", i as u64);
                ChaCha8Rng::seed_from_u64(s.next_u64())
            })
            .collect();
        let styled = run_batch(pool.model(head.0)?, &inpainted, &sources, chain, cfg, extractor, &mut rngs)?;
        for (&i, s) in ids.iter().zip(styled) {
            out[i] = Some(s);
        }
        start = end;
    }
    Ok(out.into_iter().map(|s| s.expect("every job styled")).collect())
}
