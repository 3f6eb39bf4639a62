//! Mask-conditioned generation: known pixels are re-noised from the source
//! at every step while the model fills in the rest, with RePaint-style
//! resampling jumps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::net::{EpsModel, IMAGE_CHANNELS};
use crate::diffusion::sampler::{gaussian, noise_to, reverse_from_eps, VarianceMode};
use crate::diffusion::schedule::RespacedSchedule;
use crate::error::{Error, Result};
use crate::labeled::LabeledImage;
use crate::seed;
use crate::tensor::Tensor;

/// Per-pixel keep mask. `true` marks known pixels that are copied from the
/// source; `false` marks pixels to generate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepaintMask {
    known: Vec<bool>,
    height: usize,
    width: usize,
    radius: usize,
}

impl RepaintMask {
    pub fn new(known: Vec<bool>, height: usize, width: usize, radius: usize) -> Result<Self> {
        if known.len() != height * width {
            return Err(Error::shape(
                "repaint_mask",
                format!("{} values for {height}x{width}", known.len()),
            ));
        }
        Ok(Self {
            known,
            height,
            width,
            radius,
        })
    }

    /// Builds the mask from a labeled image's mask channel.
    pub fn from_label(image: &LabeledImage, radius: usize) -> Self {
        let scaled: Vec<f32> = image.mask().iter().map(|v| (v + 1.0) / 2.0).collect();
        binarize_and_dilate(&scaled, image.height(), image.width(), 0.5, radius)
            .expect("labeled image planes match their dims")
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn all_known(&self) -> bool {
        self.known.iter().all(|&k| k)
    }

    /// Nothing is kept, so generation is effectively unconditional.
    pub fn all_unknown(&self) -> bool {
        !self.known.iter().any(|&k| k)
    }

    pub fn unknown_count(&self) -> usize {
        self.known.iter().filter(|&&k| !k).count()
    }

    /// `[1, H, W]` tensor with 1 for known and 0 for unknown pixels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(&[1, self.height, self.width], |i| {
            if self.known[i] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Dilation radius for an image of height `height`: 20 px at 256, scaled
/// and rounded half to even (2.5 at 32 px gives 2).
pub fn scaled_radius(height: usize) -> usize {
    (20.0 * height as f64 / 256.0).round_ties_even() as usize
}

/// Thresholds a `[0, 1]`-scaled label mask, grows the label region by a
/// Chebyshev ball of `radius`, and returns its complement as the keep mask.
pub fn binarize_and_dilate(
    mask: &[f32],
    height: usize,
    width: usize,
    threshold: f32,
    radius: usize,
) -> Result<RepaintMask> {
    if mask.len() != height * width {
        return Err(Error::shape(
            "binarize_and_dilate",
            format!("{} values for {height}x{width}", mask.len()),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let label: Vec<bool> = mask.iter().map(|&v| v >= threshold).collect();
    // separable max filter: rows, then columns
    let mut rows = vec![false; label.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(width - 1);
            rows[y * width + x] = label[y * width + lo..=y * width + hi].iter().any(|&b| b);
        }
    }
    let mut known = vec![true; label.len()];
    for x in 0..width {
        for y in 0..height {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(height - 1);
            if (lo..=hi).any(|yy| rows[yy * width + x]) {
                known[y * width + x] = false;
            }
        }
    }
    RepaintMask::new(known, height, width, radius)
}

/// One move along the respaced chain, between positions `from` and `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
}

impl Transition {
    pub fn is_down(&self) -> bool {
        self.to < self.from
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepaintPlan {
    chain_len: usize,
    jump: usize,
    resample: usize,
    transitions: Vec<Transition>,
}

impl RepaintPlan {
    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn chain_len(&self) -> usize {
        self.chain_len
    }

    pub fn jump(&self) -> usize {
        self.jump
    }

    pub fn resample(&self) -> usize {
        self.resample
    }

    pub fn downs(&self) -> usize {
        self.transitions.iter().filter(|t| t.is_down()).count()
    }

    pub fn ups(&self) -> usize {
        self.transitions.len() - self.downs()
    }
}

/// Descends one position at a time from `chain_len` to 0. After every `j`
/// consecutive down-steps it performs `r − 1` cycles of `j` up-steps
/// followed by `j` down-steps. A trailing block shorter than `j` is not
/// resampled.
pub fn repaint_plan(chain_len: usize, j: usize, r: usize) -> Result<RepaintPlan> {
    if chain_len == 0 || j == 0 || r == 0 {
        return Err(Error::invalid(format!(
            "repaint plan needs chain_len, j, r >= 1 (got {chain_len}, {j}, {r})"
        )));
    }
    if j > chain_len {
        return Err(Error::invalid(format!(
            "jump length {j} exceeds chain length {chain_len}"
        )));
    }
    let mut transitions = Vec::with_capacity(chain_len * (2 * r - 1));
    let mut pos = chain_len;
    let mut run = 0;
    while pos > 0 {
        transitions.push(Transition { from: pos, to: pos - 1 });
        pos -= 1;
        run += 1;
        if run == j {
            run = 0;
            for _ in 1..r {
                for _ in 0..j {
                    transitions.push(Transition { from: pos, to: pos + 1 });
                    pos += 1;
                }
                for _ in 0..j {
                    transitions.push(Transition { from: pos, to: pos - 1 });
                    pos -= 1;
                }
            }
        }
    }
    Ok(RepaintPlan {
        chain_len,
        jump: j,
        resample: r,
        transitions,
    })
}

fn item_dims(x: &Tensor<f32>) -> Result<(usize, [usize; 3])> {
    match *x.dims() {
        [n, c, h, w] if c == IMAGE_CHANNELS => Ok((n, [c, h, w])),
        ref d => Err(Error::shape("repaint", format!("{d:?}, want [N, 4, H, W]"))),
    }
}

fn check_masks(masks: &[&RepaintMask], n: usize, h: usize, w: usize) -> Result<()> {
    if masks.len() != n {
        return Err(Error::shape("repaint", format!("{} masks for {n} items", masks.len())));
    }
    if let Some(m) = masks.iter().find(|m| m.height != h || m.width != w) {
        return Err(Error::shape(
            "repaint",
            format!("mask {}x{} vs image {h}x{w}", m.height, m.width),
        ));
    }
    Ok(())
}

/// Picks `known` where the mask keeps the pixel and `unknown` elsewhere,
/// across all channels.
fn compose(known: &[f32], unknown: &[f32], mask: &RepaintMask, out: &mut Vec<f32>) {
    let plane = mask.known.len();
    for (i, (&a, &b)) in known.iter().zip(unknown).enumerate() {
        out.push(if mask.known[i % plane] { a } else { b });
    }
}

/// Reverse transition from position `k` to `k − 1` for a batch. Item `i`
/// draws its noise from `rngs[i]`: first the reverse-step noise for the
/// unknown region, then the forward noise for the known region. At `k = 1`
/// the known region is the source itself.
#[allow(clippy::too_many_arguments)]
pub fn repaint_step<M: EpsModel<f32> + ?Sized, R: Rng>(
    net: &M,
    x_t: &Tensor<f32>,
    k: usize,
    sources: &Tensor<f32>,
    masks: &[&RepaintMask],
    chain: &RespacedSchedule,
    mode: VarianceMode,
    rngs: &mut [R],
) -> Result<Tensor<f32>> {
    let (n, item) = item_dims(x_t)?;
    if sources.dims() != x_t.dims() || rngs.len() != n {
        return Err(Error::shape(
            "repaint_step",
            format!("x {:?}, sources {:?}, {} rngs", x_t.dims(), sources.dims(), rngs.len()),
        ));
    }
    check_masks(masks, n, item[1], item[2])?;
    let step = chain.step(k)?;
    let eps_hat = net.predict_eps(x_t, &vec![step.timestep; n])?;
    let per = item.iter().product::<usize>();
    let mut out = Vec::with_capacity(x_t.numel());
    for (i, rng) in rngs.iter_mut().enumerate() {
        let range = i * per..(i + 1) * per;
        let xi = Tensor::new(item.to_vec(), x_t.data()[range.clone()].to_vec())?;
        let ei = Tensor::new(item.to_vec(), eps_hat.data()[range.clone()].to_vec())?;
        let unknown = reverse_from_eps(&xi, &step, &ei, mode, rng)?;
        let src = Tensor::new(item.to_vec(), sources.data()[range].to_vec())?;
        let known = if step.alpha_bar_prev >= 1.0 {
            src
        } else {
            noise_to(&src, &gaussian(&item, rng), step.alpha_bar_prev)?
        };
        compose(known.data(), unknown.data(), masks[i], &mut out);
    }
    Tensor::new(x_t.dims().to_vec(), out)
}

/// Forward transition from position `k` to `k + 1`:
/// `√(1−βʹ)·x + √βʹ·ε` with per-item noise.
pub fn renoise_step<R: Rng>(
    x: &Tensor<f32>,
    k: usize,
    chain: &RespacedSchedule,
    rngs: &mut [R],
) -> Result<Tensor<f32>> {
    let (n, item) = item_dims(x)?;
    if rngs.len() != n {
        return Err(Error::shape("renoise_step", format!("{} rngs for {n} items", rngs.len())));
    }
    let beta = chain.step(k + 1)?.beta;
    let (a, b) = ((1.0 - beta).sqrt() as f32, beta.sqrt() as f32);
    let per = item.iter().product::<usize>();
    let mut out = Vec::with_capacity(x.numel());
    for (i, rng) in rngs.iter_mut().enumerate() {
        let z: Tensor<f32> = gaussian(&item, rng);
        let xi = &x.data()[i * per..(i + 1) * per];
        out.extend(xi.iter().zip(z.data()).map(|(&v, &e)| a * v + b * e));
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// Runs a whole plan on a batch that shares one model, starting from pure
/// noise at the top of the chain. Returns raw values; see [`finish`].
#[allow(clippy::too_many_arguments)]
pub fn run_plan<M: EpsModel<f32> + ?Sized, R: Rng>(
    net: &M,
    sources: &Tensor<f32>,
    masks: &[&RepaintMask],
    chain: &RespacedSchedule,
    plan: &RepaintPlan,
    mode: VarianceMode,
    rngs: &mut [R],
) -> Result<Tensor<f32>> {
    let (n, item) = item_dims(sources)?;
    if plan.chain_len() > chain.len() {
        return Err(Error::invalid(format!(
            "plan length {} exceeds chain length {}",
            plan.chain_len(),
            chain.len()
        )));
    }
    let mut init = Vec::with_capacity(sources.numel());
    for rng in rngs.iter_mut() {
        init.extend_from_slice(gaussian::<f32, R>(&item, rng).data());
    }
    let mut x = Tensor::new(vec![n, item[0], item[1], item[2]], init)?;
    for t in plan.transitions() {
        x = if t.is_down() {
            repaint_step(net, &x, t.from, sources, masks, chain, mode, rngs)?
        } else {
            renoise_step(&x, t.from, chain, rngs)?
        };
    }
    Ok(x)
}

/// Pastes the source into the known region, clamps the rest to `[-1, 1]`,
/// and re-binarizes the mask channel at 0.
pub fn finish(raw: &[f32], source: &LabeledImage, mask: &RepaintMask) -> Result<LabeledImage> {
    let mut out = Vec::with_capacity(raw.len());
    let clamped: Vec<f32> = raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    compose(source.tensor().data(), &clamped, mask, &mut out);
    Ok(LabeledImage::new(Tensor::new(source.tensor().dims().to_vec(), out)?)?.rebinarize_mask())
}

/// A set of denoisers indexed by cluster id.
pub trait ModelPool {
    fn count(&self) -> usize;

    /// Errors with [`Error::MissingCheckpoint`] when cluster `id` has no model.
    fn model(&self, id: usize) -> Result<&dyn EpsModel<f32>>;
}

impl<M: EpsModel<f32>> ModelPool for [M] {
    fn count(&self) -> usize {
        self.len()
    }

    fn model(&self, id: usize) -> Result<&dyn EpsModel<f32>> {
        self.get(id)
            .map(|m| m as &dyn EpsModel<f32>)
            .ok_or_else(|| Error::MissingCheckpoint(id.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Synthetic outputs per source image.
    pub samples: usize,
    /// Dilation radius; `None` scales 20 px at 256 to the image height.
    pub radius: Option<usize>,
    pub jump: usize,
    pub resample: usize,
    pub variance: VarianceMode,
    /// Items per network call.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            samples: 3,
            radius: None,
            jump: 5,
            resample: 3,
            variance: VarianceMode::FixedSmall,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.jump == 0 || self.resample == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "samples, jump, resample and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn radius_for(&self, height: usize) -> usize {
        self.radius.unwrap_or_else(|| scaled_radius(height))
    }
}

/// Outputs generated for one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inpainted {
    pub outputs: Vec<LabeledImage>,
    /// Cluster model used for each output.
    pub models: Vec<usize>,
    /// The keep mask covered the whole image, so the source was returned.
    pub all_known: bool,
    /// Nothing was kept, so generation ran unconditionally.
    pub all_unknown: bool,
}

struct Job {
    source: usize,
    model: usize,
    rng: ChaCha8Rng,
}

fn draw_jobs<R: Rng + ?Sized>(
    pool: &(impl ModelPool + ?Sized),
    source: usize,
    samples: usize,
    rng: &mut R,
) -> Vec<Job> {
    (0..samples)
        .map(|_| Job {
            source,
            model: rng.random_range(0..pool.count()),
            rng: ChaCha8Rng::seed_from_u64(rng.next_u64()),
        })
        .collect()
}

fn generate(
    pool: &(impl ModelPool + ?Sized),
    sources: &[LabeledImage],
    jobs_per_source: Vec<Vec<Job>>,
    cfg: &GenerationConfig,
    chain: &RespacedSchedule,
) -> Result<Vec<Inpainted>> {
    cfg.validate()?;
    if pool.count() == 0 {
        return Err(Error::MissingCheckpoint("any".into()));
    }
    let plan = repaint_plan(chain.len(), cfg.jump.min(chain.len()), cfg.resample)?;
    let masks: Vec<RepaintMask> = sources
        .iter()
        .map(|s| RepaintMask::from_label(s, cfg.radius_for(s.height())))
        .collect();
    let mut results: Vec<Inpainted> = jobs_per_source
        .iter()
        .enumerate()
        .map(|(i, jobs)| Inpainted {
            outputs: Vec::with_capacity(jobs.len()),
            models: jobs.iter().map(|j| j.model).collect(),
            all_known: masks[i].all_known(),
            all_unknown: masks[i].all_unknown(),
        })
        .collect();
    let mut slots: Vec<Vec<Option<LabeledImage>>> =
        jobs_per_source.iter().map(|j| vec![None; j.len()]).collect();

    // (source, sample index, job) for everything that needs the network
    let mut pending: Vec<(usize, usize, Job)> = Vec::new();
    for (i, jobs) in jobs_per_source.into_iter().enumerate() {
        for (k, job) in jobs.into_iter().enumerate() {
            if masks[i].all_known() {
                slots[i][k] = Some(sources[i].clone());
            } else {
                pool.model(job.model)?;
                pending.push((i, k, job));
            }
        }
    }
    // group by model and by image size, keeping a deterministic order
    pending.sort_by_key(|(i, k, job)| (job.model, sources[*i].height(), sources[*i].width(), *i, *k));
    let mut start = 0;
    while start < pending.len() {
        let key = |p: &(usize, usize, Job)| (p.2.model, sources[p.0].height(), sources[p.0].width());
        let head = key(&pending[start]);
        let mut end = start;
        while end < pending.len() && end - start < cfg.batch_size && key(&pending[end]) == head {
            end += 1;
        }
        let group = &mut pending[start..end];
        let net = pool.model(head.0)?;
        let batch = crate::labeled::batch(group.iter().map(|(i, _, _)| &sources[*i]))?;
        let group_masks: Vec<&RepaintMask> = group.iter().map(|(i, _, _)| &masks[*i]).collect();
        let mut rngs: Vec<ChaCha8Rng> = group.iter().map(|(_, _, j)| j.rng.clone()).collect();
        let raw = run_plan(net, &batch, &group_masks, chain, &plan, cfg.variance, &mut rngs)?;
        let per = raw.numel() / group.len();
        for (g, (i, k, job)) in group.iter().enumerate() {
            debug_assert_eq!(job.source, *i);
            let out = finish(&raw.data()[g * per..(g + 1) * per], &sources[*i], &masks[*i])?;
            slots[*i][*k] = Some(out);
        }
        start = end;
    }
    for (res, slot) in results.iter_mut().zip(slots) {
        res.outputs = slot.into_iter().map(|o| o.expect("every job filled")).collect();
    }
    Ok(results)
}

/// Generates `cfg.samples` inpaintings of one source. The cluster model for
/// each output is drawn uniformly from the pool.
pub fn inpaint<R: Rng + ?Sized>(
    pool: &(impl ModelPool + ?Sized),
    source: &LabeledImage,
    cfg: &GenerationConfig,
    chain: &RespacedSchedule,
    rng: &mut R,
) -> Result<Inpainted> {
    let jobs = draw_jobs(pool, 0, cfg.samples, rng);
    Ok(generate(pool, std::slice::from_ref(source), vec![jobs], cfg, chain)?.remove(0))
}

/// Inpaints every source, batching network calls across sources. Source
/// `i` uses the stream `seed::stream(cfg.seed, "inpaint", i)`, so its
/// outputs equal those of [`inpaint`] called with that stream.
pub fn inpaint_all(
    pool: &(impl ModelPool + ?Sized),
    sources: &[LabeledImage],
    cfg: &GenerationConfig,
    chain: &RespacedSchedule,
) -> Result<Vec<Inpainted>> {
    let jobs = (0..sources.len())
        .map(|i| {
            let mut rng = seed::stream(cfg.seed, "inpaint", i as u64);
            draw_jobs(pool, i, cfg.samples, &mut rng)
        })
        .collect();
    generate(pool, sources, jobs, cfg, chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, NodeId};
    use crate::diffusion::net::{DenoiserNet, NetConfig};
    use crate::diffusion::schedule::{NoiseSchedule, ScheduleKind};

    struct ZeroEps;

    impl EpsModel<f32> for ZeroEps {
        fn eps_graph(&self, g: &mut Graph<f32>, x: NodeId, _t: &[usize]) -> Result<NodeId> {
            g.scale(x, 0.0)
        }
    }

    fn chain(len: usize) -> RespacedSchedule {
        let base = NoiseSchedule::new(ScheduleKind::Cosine, 20, 1e-3, 0.2).unwrap();
        RespacedSchedule::new(base, len, 0).unwrap()
    }

    fn blob_image(size: usize, cx: usize, cy: usize) -> LabeledImage {
        let plane = size * size;
        LabeledImage::new(Tensor::from_fn(&[4, size, size], |i| {
            let (c, p) = (i / plane, i % plane);
            let (y, x) = (p / size, p % size);
            if c == 3 {
                if x.abs_diff(cx) <= 1 && y.abs_diff(cy) <= 1 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                ((i * 37 % 101) as f32 / 50.0 - 1.0) * 0.9
            }
        }))
        .unwrap()
    }

    /// Brute-force Chebyshev dilation.
    fn dilate_reference(label: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
        (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                (0..h * w).any(|q| label[q] && (q / w).abs_diff(y) <= r && (q % w).abs_diff(x) <= r)
            })
            .collect()
    }

    #[test]
    fn dilation_matches_brute_force() {
        let (h, w) = (7, 9);
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<f32> = (0..h * w).map(|_| if rng.random_bool(0.1) { 1.0 } else { 0.0 }).collect();
            let label: Vec<bool> = mask.iter().map(|&v| v >= 0.5).collect();
            for r in 0..4 {
                let m = binarize_and_dilate(&mask, h, w, 0.5, r).unwrap();
                let want: Vec<bool> = dilate_reference(&label, h, w, r).iter().map(|b| !b).collect();
                assert_eq!(m.known(), want.as_slice());
            }
        }
    }

    #[test]
    fn dilation_examples() {
        let m = binarize_and_dilate(&[0.0; 25], 5, 5, 0.5, 3).unwrap();
        assert!(m.all_known());
        let mut center = [0.0; 25];
        center[12] = 1.0;
        let m = binarize_and_dilate(&center, 5, 5, 0.5, 1).unwrap();
        assert_eq!(m.unknown_count(), 9);
        for y in 1..4 {
            for x in 1..4 {
                assert!(!m.known()[y * 5 + x]);
            }
        }
        assert_eq!(scaled_radius(32), 2);
        assert_eq!(scaled_radius(48), 4);
        assert_eq!(scaled_radius(256), 20);
        assert!(binarize_and_dilate(&center, 5, 5, 1.0, 1).is_err());
    }

    #[test]
    fn plan_examples() {
        let p = repaint_plan(5, 2, 1).unwrap();
        assert_eq!((p.downs(), p.ups()), (5, 0));
        let p = repaint_plan(4, 2, 2).unwrap();
        let dirs: String = p.transitions().iter().map(|t| if t.is_down() { 'd' } else { 'u' }).collect();
        assert_eq!(dirs, "dduudddduudd");
        assert_eq!((p.downs(), p.ups()), (8, 4));
        assert_eq!(p.transitions().last().unwrap().to, 0);
        let p = repaint_plan(120, 10, 5).unwrap();
        assert_eq!(p.downs(), 600);
        assert_eq!(p.ups(), 480);
        assert!(repaint_plan(3, 4, 1).is_err());
    }

    #[test]
    fn all_known_mask_reproduces_source_at_the_end() {
        let src = blob_image(8, 4, 4);
        let sources = crate::labeled::batch([&src]).unwrap();
        let mask = RepaintMask::new(vec![true; 64], 8, 8, 0).unwrap();
        let ch = chain(6);
        let plan = repaint_plan(6, 2, 2).unwrap();
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(1)];
        let raw = run_plan(&ZeroEps, &sources, &[&mask], &ch, &plan, VarianceMode::FixedSmall, &mut rngs).unwrap();
        assert_eq!(raw.data(), src.tensor().data());
    }

    #[test]
    fn checkerboard_step_matches_branch_closed_forms() {
        let src = blob_image(4, 1, 1);
        let sources = crate::labeled::batch([&src]).unwrap();
        let mask = RepaintMask::new((0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect(), 4, 4, 0).unwrap();
        let ch = chain(5);
        let x = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f32 * 0.13).sin());
        let k = 3;
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(9)];
        let out = repaint_step(&ZeroEps, &x, k, &sources, &[&mask], &ch, VarianceMode::None, &mut rngs).unwrap();
        // replay the rng: no reverse noise with VarianceMode::None, then the forward ε
        let mut replay = ChaCha8Rng::seed_from_u64(9);
        let eps: Tensor<f32> = gaussian(&[4, 4, 4], &mut replay);
        let s = ch.step(k).unwrap();
        for i in 0..64 {
            let want = if mask.known()[i % 16] {
                (s.alpha_bar_prev.sqrt() as f32) * src.tensor().data()[i]
                    + ((1.0 - s.alpha_bar_prev).sqrt() as f32) * eps.data()[i]
            } else {
                // ε̂ = 0: x̂0 = x/√ᾱ clipped, then the posterior mean
                let v = x.data()[i] as f64;
                let x0 = (v / s.alpha_bar.sqrt()).clamp(-1.0, 1.0);
                let d = 1.0 - s.alpha_bar;
                (s.alpha_bar_prev.sqrt() * s.beta / d * x0 + s.alpha().sqrt() * (1.0 - s.alpha_bar_prev) / d * v) as f32
            };
            assert!((out.data()[i] - want).abs() < 1e-6, "pixel {i}");
        }
    }

    #[test]
    fn all_unknown_step_equals_unconditional_reverse_step() {
        let src = blob_image(4, 1, 1);
        let sources = crate::labeled::batch([&src]).unwrap();
        let mask = RepaintMask::new(vec![false; 16], 4, 4, 0).unwrap();
        let ch = chain(5);
        let x = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f32 * 0.7).cos());
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(3)];
        let out = repaint_step(&ZeroEps, &x, 4, &sources, &[&mask], &ch, VarianceMode::FixedSmall, &mut rngs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let want = crate::diffusion::sampler::reverse_step(&ZeroEps, &x, 4, &ch, &mut rng, VarianceMode::FixedSmall).unwrap();
        assert_eq!(out, want);
    }

    fn nets(k: usize) -> Vec<DenoiserNet<f32>> {
        (0..k)
            .map(|i| {
                let mut net = DenoiserNet::new(NetConfig { base_channels: 4, seed: i as u64 });
                let dims = net.params().get(net.params().index_of("conv_out.w").unwrap()).dims().to_vec();
                net.params_mut()
                    .set("conv_out.w", Tensor::from_fn(&dims, |j| ((j * 31 % 17) as f32 - 8.0) * 0.02))
                    .unwrap();
                net
            })
            .collect()
    }

    #[test]
    fn inpaint_keeps_known_region_and_is_reproducible() {
        let pool = nets(2);
        let cfg = GenerationConfig {
            samples: 3,
            radius: Some(1),
            jump: 2,
            resample: 2,
            ..GenerationConfig::default()
        };
        let ch = chain(4);
        let sources = vec![blob_image(8, 3, 3), blob_image(8, 5, 2)];
        let all = inpaint_all(pool.as_slice(), &sources, &cfg, &ch).unwrap();
        for (src, res) in sources.iter().zip(&all) {
            assert_eq!(res.outputs.len(), 3);
            let mask = RepaintMask::from_label(src, 1);
            for out in &res.outputs {
                for c in 0..4 {
                    for (p, &known) in mask.known().iter().enumerate() {
                        if known {
                            assert_eq!(out.channel(c)[p].to_bits(), src.channel(c)[p].to_bits());
                        }
                    }
                }
                assert!(out.mask().iter().all(|&v| v == 1.0 || v == -1.0));
            }
            assert_ne!(res.outputs[0], res.outputs[1]);
        }
        // single-source entry point with the same stream gives the same result
        let mut rng = seed::stream(cfg.seed, "inpaint", 1);
        let one = inpaint(pool.as_slice(), &sources[1], &cfg, &ch, &mut rng).unwrap();
        assert_eq!(one, all[1]);
        assert_eq!(all, inpaint_all(pool.as_slice(), &sources, &cfg, &ch).unwrap());
    }

    #[test]
    fn background_only_source_is_returned_unchanged() {
        let pool = nets(1);
        let mut src = blob_image(8, 3, 3).into_tensor().into_vec();
        for v in &mut src[3 * 64..] {
            *v = -1.0;
        }
        let src = LabeledImage::new(Tensor::new(vec![4, 8, 8], src).unwrap()).unwrap();
        let res = inpaint_all(pool.as_slice(), std::slice::from_ref(&src), &GenerationConfig::default(), &chain(4)).unwrap();
        assert!(res[0].all_known);
        assert!(res[0].outputs.iter().all(|o| *o == src));
    }

    #[test]
    fn missing_model_is_named() {
        struct Partial(Vec<Option<ZeroEps>>);
        impl ModelPool for Partial {
            fn count(&self) -> usize {
                self.0.len()
            }
            fn model(&self, id: usize) -> Result<&dyn EpsModel<f32>> {
                match self.0.get(id) {
                    Some(Some(m)) => Ok(m),
                    _ => Err(Error::MissingCheckpoint(id.to_string())),
                }
            }
        }
        let pool = Partial(vec![None, None]);
        let err = inpaint_all(&pool, &[blob_image(8, 3, 3)], &GenerationConfig::default(), &chain(4)).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
