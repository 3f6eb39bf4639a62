//! One function per subcommand. Each returns the files it wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lesionsynth::cluster::{build_registry, cluster_images, ClusterRegistry, LoadedPool, ModelMode};
use lesionsynth::diffusion::{checkpoint, train, RespacedSchedule};
use lesionsynth::features::{ExtractorKind, FeatureExtractor};
use lesionsynth::io::{self, load_samples, save_sample, save_samples, write_atomic};
use lesionsynth::labeled::hash_samples;
use lesionsynth::metrics::eval_report;
use lesionsynth::repaint::inpaint_all;
use lesionsynth::seed;
use lesionsynth::seg::{self, augment_dataset, noise_baseline, test_seg, train_seg, SegNet};
use lesionsynth::style::{stylize_all, StyleJob};
use lesionsynth::toy;
use lesionsynth::{Error, LabeledImage, Sample};

use crate::config::PipelineConfig;
use crate::{CliError, Command};

type StageResult = Result<Vec<PathBuf>, CliError>;

struct Ctx<'a> {
    cfg: &'a mut PipelineConfig,
    out: &'a Path,
    manifest: &'a mut lesionsynth::io::RunManifest,
    inputs: Vec<(String, String)>,
}

impl Ctx<'_> {
    /// Derives and records a stage seed.
    fn seed(&mut self, stage: &str, index: u64) -> u64 {
        let s = seed::derive(self.cfg.seed, stage, index);
        self.manifest.streams.push((format!("{stage}.{index}"), s));
        s
    }

    fn load(&mut self, dir: &Path) -> Result<Vec<Sample>, CliError> {
        let samples = load_samples(dir, self.cfg.size)?;
        if samples.is_empty() {
            return Err(CliError::Validation(format!("{}: no images found", dir.display())));
        }
        self.inputs.push((dir.display().to_string(), hash_samples(&samples)));
        Ok(samples)
    }

    fn input_file(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push((path.display().to_string(), io::hash_file(path)?));
        Ok(())
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.out.join(name);
        write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }

    fn warn(&mut self, w: String) {
        eprintln!("warning: {w}");
        self.manifest.warnings.push(w);
    }

    fn extractor(&mut self) -> Result<FeatureExtractor<f32>, CliError> {
        let f = self.cfg.features.clone();
        match f.kind {
            ExtractorKind::SeededRandomConv => Ok(FeatureExtractor::seeded(f.seed)),
            ExtractorKind::DenoiserTaps => {
                let p = f.checkpoint.ok_or_else(|| {
                    CliError::Validation("features.checkpoint is required for denoiser-taps".into())
                })?;
                self.input_file(&p)?;
                let (net, _) = checkpoint::load(&p)?;
                Ok(FeatureExtractor::denoiser_taps(net, f.timestep))
            }
        }
    }
}

fn abs(out: &Path, rel: Vec<PathBuf>) -> Vec<PathBuf> {
    rel.into_iter().map(|r| out.join(r)).collect()
}

fn parse_mode(mode: &Option<String>, default: ModelMode) -> Result<ModelMode, CliError> {
    match mode {
        Some(m) => Ok(m.parse()?),
        None => Ok(default),
    }
}

fn parse_tagged(items: &[String]) -> Result<Vec<(String, PathBuf)>, CliError> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .filter(|(t, p)| !t.is_empty() && !p.is_empty())
                .map(|(t, p)| (t.to_string(), PathBuf::from(p)))
                .ok_or_else(|| CliError::Validation(format!("expected TAG=DIR, got `{s}`")))
        })
        .collect()
}

/// The real id a synthetic id (`<id>_synth<k>` or `<id>_synth<k>_styled`)
/// was generated from.
pub fn real_id_of(id: &str) -> Option<&str> {
    let base = id.strip_suffix("_styled").unwrap_or(id);
    let (real, k) = base.rsplit_once("_synth")?;
    (!real.is_empty() && !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit())).then_some(real)
}

const MODELS_FILE: &str = "models.csv";
const REGISTRY_FILE: &str = "registry.txt";

/// Loads the denoisers for generation. In full mode a registry is optional.
fn load_pool(
    ctx: &mut Ctx<'_>,
    registry: &Option<PathBuf>,
    models: &Path,
    mode: ModelMode,
) -> Result<LoadedPool, CliError> {
    let reg = match registry {
        Some(p) => {
            ctx.input_file(p)?;
            ClusterRegistry::load(p)?
        }
        None if mode == ModelMode::Full => {
            build_registry(vec![], vec![], &BTreeMap::new(), Some(PathBuf::from("full/model.ckpt")))?
        }
        None => return Err(CliError::Validation("--registry is required in cluster mode".into())),
    };
    let pool = reg.load_pool(mode, models)?;
    let mut files: Vec<PathBuf> = match mode {
        ModelMode::Full => vec![models.join("full/model.ckpt")],
        ModelMode::Cluster => (0..reg.k()).map(|c| models.join(format!("cluster_{c}/model.ckpt"))).collect(),
    };
    files.retain(|f| f.exists());
    for f in files {
        ctx.input_file(&f)?;
    }
    Ok(pool)
}

/// The chain shared by every model in the pool.
fn pool_chain(pool: &LoadedPool) -> Result<RespacedSchedule, CliError> {
    let first = &pool.configs[0];
    for c in &pool.configs[1..] {
        if (c.schedule, c.timesteps, c.respaced_len, c.skip) != (first.schedule, first.timesteps, first.respaced_len, first.skip)
            || c.beta_min != first.beta_min
            || c.beta_max != first.beta_max
        {
            return Err(CliError::Validation("pool models use different noise schedules".into()));
        }
    }
    Ok(first.respaced()?)
}

pub(crate) fn run_stage(
    command: &Command,
    cfg: &mut PipelineConfig,
    out: &Path,
    manifest: &mut lesionsynth::io::RunManifest,
) -> StageResult {
    let mut ctx = Ctx {
        cfg,
        out,
        manifest,
        inputs: Vec::new(),
    };
    let outputs = match command {
        Command::GenToyData { count, size, shifted } => gen_toy(&mut ctx, *count, *size, *shifted),
        Command::Cluster { data, k } => cluster(&mut ctx, data, *k),
        Command::Train {
            data,
            registry,
            cluster,
            init,
            iterations,
        } => train_stage(&mut ctx, data, registry, *cluster, init, *iterations),
        Command::Inpaint {
            data,
            models,
            registry,
            mode,
            samples,
            limit,
        } => inpaint(&mut ctx, data, models, registry, mode, *samples, *limit),
        Command::Stylize {
            data,
            inpainted,
            models,
            registry,
            mode,
        } => stylize(&mut ctx, data, inpainted, models, registry, mode),
        Command::Eval { reference, sets } => eval(&mut ctx, reference, sets),
        Command::SegTrain {
            data,
            synthetic,
            alpha,
            r,
            noise_baseline,
            limit,
        } => seg_train(&mut ctx, data, synthetic, *alpha, *r, *noise_baseline, *limit),
        Command::SegTest { model, data, threshold } => seg_test(&mut ctx, model, data, *threshold),
        Command::Report { eval, segs } => report(&mut ctx, eval, segs),
    };
    let mut text = String::new();
    for (name, hash) in &ctx.inputs {
        writeln!(text, "{name} {hash}").unwrap();
    }
    ctx.manifest.input_hash = io::sha256_hex(text.as_bytes());
    outputs
}

fn gen_toy(ctx: &mut Ctx<'_>, count: Option<usize>, size: Option<usize>, shifted: bool) -> StageResult {
    if let Some(c) = count {
        ctx.cfg.toy.count = c;
    }
    ctx.cfg.toy.size = size.unwrap_or(ctx.cfg.size);
    ctx.cfg.toy.shifted |= shifted;
    ctx.cfg.toy.seed = ctx.seed("gen-toy-data", 0);
    let data = toy::generate(&ctx.cfg.toy)?;
    Ok(abs(ctx.out, save_samples(ctx.out, &data)?))
}

fn cluster(ctx: &mut Ctx<'_>, data: &Path, k: Option<usize>) -> StageResult {
    if let Some(k) = k {
        ctx.cfg.cluster.k = k;
    }
    ctx.cfg.cluster.seed = ctx.seed("cluster", 0);
    let samples = ctx.load(data)?;
    let ext = ctx.extractor()?;
    let images: Vec<LabeledImage> = samples.iter().map(|s| s.image.clone()).collect();
    let km = cluster_images(&images, &ext, &ctx.cfg.cluster)?;
    if !km.converged {
        ctx.warn(format!("k-means stopped after {} iterations without converging", ctx.cfg.cluster.max_iter));
    }
    let assignment: Vec<(String, usize)> = samples.iter().map(|s| s.id.clone()).zip(km.assignment).collect();
    let checkpoints: BTreeMap<usize, PathBuf> = (0..ctx.cfg.cluster.k)
        .map(|c| (c, PathBuf::from(format!("cluster_{c}/model.ckpt"))))
        .collect();
    let reg = build_registry(assignment, km.centroids, &checkpoints, Some(PathBuf::from("full/model.ckpt")))?;
    let p1 = ctx.write(REGISTRY_FILE, &reg.to_index())?;
    let p2 = ctx.write("membership.csv", &reg.membership_csv())?;
    Ok(vec![p1, p2])
}

fn train_stage(
    ctx: &mut Ctx<'_>,
    data: &Path,
    registry: &Option<PathBuf>,
    cluster: Option<usize>,
    init: &Option<PathBuf>,
    iterations: Option<usize>,
) -> StageResult {
    if let Some(it) = iterations {
        ctx.cfg.train.iterations = it;
    }
    let mut samples = ctx.load(data)?;
    let index = match (registry, cluster) {
        (Some(rp), Some(c)) => {
            ctx.input_file(rp)?;
            let reg = ClusterRegistry::load(rp)?;
            if c >= reg.k() {
                return Err(CliError::Validation(format!("cluster {c} of {}", reg.k())));
            }
            let members: std::collections::BTreeSet<&str> = reg.members(c).into_iter().collect();
            samples.retain(|s| members.contains(s.id.as_str()));
            if samples.is_empty() {
                return Err(CliError::Validation(format!("no samples of cluster {c} found in {}", data.display())));
            }
            c as u64 + 1
        }
        _ => 0,
    };
    let mut net = match init {
        Some(p) => {
            ctx.input_file(p)?;
            let (net, init_cfg) = checkpoint::load(p)?;
            ctx.cfg.train.base_channels = init_cfg.base_channels;
            ctx.cfg.train.seed = init_cfg.seed;
            ctx.cfg.train.prediction = init_cfg.prediction;
            net
        }
        None => {
            ctx.cfg.train.seed = ctx.seed("train-init", index);
            ctx.cfg.train.build_net()?
        }
    };
    let mut rng = seed::stream(ctx.cfg.seed, "train-batches", index);
    ctx.manifest
        .streams
        .push((format!("train-batches.{index}"), seed::derive(ctx.cfg.seed, "train-batches", index)));
    let images: Vec<LabeledImage> = samples.iter().map(|s| s.image.clone()).collect();
    let total = ctx.cfg.train.iterations;
    let losses = train(&mut net, &images, &ctx.cfg.train, &mut rng, |i, l| {
        if (i + 1) % 500 == 0 || i + 1 == total {
            eprintln!("train: iteration {}/{total} loss {l:.5}", i + 1);
        }
    })?;
    let ckpt = ctx.out.join("model.ckpt");
    checkpoint::save(&ckpt, &net, &ctx.cfg.train)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l}").unwrap();
    }
    Ok(vec![ckpt, ctx.write("losses.csv", &csv)?])
}

#[allow(clippy::too_many_arguments)]
fn inpaint(
    ctx: &mut Ctx<'_>,
    data: &Path,
    models: &Path,
    registry: &Option<PathBuf>,
    mode: &Option<String>,
    samples: Option<usize>,
    limit: Option<usize>,
) -> StageResult {
    ctx.cfg.model_mode = parse_mode(mode, ctx.cfg.model_mode)?;
    if let Some(s) = samples {
        ctx.cfg.generation.samples = s;
    }
    ctx.cfg.generation.seed = ctx.seed("inpaint", 0);
    let mut sources = ctx.load(data)?;
    if let Some(n) = limit {
        sources.truncate(n);
    }
    let pool = load_pool(ctx, registry, models, ctx.cfg.model_mode)?;
    let chain = pool_chain(&pool)?;
    let images: Vec<LabeledImage> = sources.iter().map(|s| s.image.clone()).collect();
    let results = inpaint_all(&pool, &images, &ctx.cfg.generation, &chain)?;
    let mut outputs = Vec::new();
    let mut csv = String::from("id,source,model\n");
    for (src, res) in sources.iter().zip(&results) {
        if res.all_known {
            ctx.warn(format!("{}: keep mask covers the image, source copied", src.id));
        }
        if res.all_unknown {
            ctx.warn(format!("{}: empty keep mask, generated unconditionally", src.id));
        }
        for (k, (img, model)) in res.outputs.iter().zip(&res.models).enumerate() {
            let id = format!("{}_synth{k}", src.id);
            outputs.extend(abs(ctx.out, save_sample(ctx.out, &id, img)?));
            writeln!(csv, "{id},{},{model}", src.id).unwrap();
        }
    }
    outputs.push(ctx.write(MODELS_FILE, &csv)?);
    Ok(outputs)
}

fn read_models_csv(path: &Path) -> Result<BTreeMap<String, usize>, CliError> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut map = BTreeMap::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let [id, _, model] = parts[..] else {
            return Err(CliError::Validation(format!("{}: bad line `{line}`", path.display())));
        };
        let m = model
            .parse()
            .map_err(|_| CliError::Validation(format!("{}: bad model in `{line}`", path.display())))?;
        map.insert(id.to_string(), m);
    }
    Ok(map)
}

fn stylize(
    ctx: &mut Ctx<'_>,
    data: &Path,
    inpainted: &Path,
    models: &Path,
    registry: &Option<PathBuf>,
    mode: &Option<String>,
) -> StageResult {
    ctx.cfg.model_mode = parse_mode(mode, ctx.cfg.model_mode)?;
    ctx.cfg.style.seed = ctx.seed("stylize", 0);
    let sources: BTreeMap<String, Sample> = ctx.load(data)?.into_iter().map(|s| (s.id.clone(), s)).collect();
    let synth = ctx.load(inpainted)?;
    let model_of = read_models_csv(&inpainted.join(MODELS_FILE))?;
    let pool = load_pool(ctx, registry, models, ctx.cfg.model_mode)?;
    let chain = pool_chain(&pool)?;
    let ext = ctx.extractor()?;
    let mut jobs = Vec::with_capacity(synth.len());
    for s in &synth {
        let real = real_id_of(&s.id)
            .ok_or_else(|| CliError::Validation(format!("`{}` is not named <id>_synth<k>", s.id)))?;
        let src = sources
            .get(real)
            .ok_or_else(|| CliError::Validation(format!("source `{real}` of `{}` not found", s.id)))?;
        let model = match ctx.cfg.model_mode {
            ModelMode::Full => 0,
            ModelMode::Cluster => *model_of.get(&s.id).unwrap_or(&0),
        };
        jobs.push(StyleJob {
            inpainted: &s.image,
            source: &src.image,
            model,
        });
    }
    let styled = stylize_all(&pool, &jobs, &chain, &ctx.cfg.style, &ext)?;
    let mut outputs = Vec::new();
    for (s, st) in synth.iter().zip(&styled) {
        if st.skipped_steps > 0 {
            ctx.warn(format!("{}: guidance skipped on {} steps", s.id, st.skipped_steps));
        }
        outputs.extend(abs(ctx.out, save_sample(ctx.out, &format!("{}_styled", s.id), &st.image)?));
    }
    Ok(outputs)
}

fn eval(ctx: &mut Ctx<'_>, reference: &Path, sets: &[String]) -> StageResult {
    ctx.cfg.eval.seed = ctx.seed("eval", 0);
    let reference: Vec<LabeledImage> = ctx.load(reference)?.into_iter().map(|s| s.image).collect();
    let mut data = Vec::new();
    for (tag, dir) in parse_tagged(sets)? {
        data.push((tag, seg::images(&ctx.load(&dir)?)));
    }
    let ext = ctx.extractor()?;
    let report = eval_report(&data, &reference, &ext, &ctx.cfg.eval)?;
    for r in report.rows.iter().filter(|r| r.repeat == 0) {
        if r.fid.is_some_and(|f| f.jittered) {
            let msg = format!("{}: FID covariance product near-singular, jitter added", r.tag);
            ctx.warn(msg);
        }
    }
    let p1 = ctx.write("metrics.csv", &report.to_csv())?;
    let p2 = ctx.write("metrics.txt", &report.to_table())?;
    print!("{}", report.to_table());
    Ok(vec![p1, p2])
}

#[allow(clippy::too_many_arguments)]
fn seg_train(
    ctx: &mut Ctx<'_>,
    data: &Path,
    synthetic: &Option<PathBuf>,
    alpha: Option<f64>,
    r: Option<usize>,
    noise: bool,
    limit: Option<usize>,
) -> StageResult {
    let seg_seed = ctx.seed("seg-train", 0);
    ctx.cfg.seg.seed = seg_seed;
    ctx.cfg.seg.net.seed = seg_seed;
    let mut samples = ctx.load(data)?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    if noise {
        samples = noise_baseline(&samples, ctx.seed("noise-baseline", 0));
    }
    if let Some(dir) = synthetic {
        if let Some(a) = alpha {
            ctx.cfg.augment.alpha = a;
        }
        if let Some(r) = r {
            ctx.cfg.augment.r = r;
        }
        ctx.cfg.augment.seed = ctx.seed("augment", 0);
        let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
        for s in ctx.load(dir)? {
            let real = real_id_of(&s.id)
                .ok_or_else(|| CliError::Validation(format!("`{}` is not named <id>_synth<k>", s.id)))?
                .to_string();
            groups.entry(real).or_default().push(s);
        }
        samples = augment_dataset(&samples, &groups, &ctx.cfg.augment)?;
    }
    let images = seg::images(&samples);
    let t = train_seg(&images, &ctx.cfg.seg)?;
    let ckpt = ctx.out.join("segnet.ckpt");
    t.best.save(&ckpt)?;
    let mut csv = String::from("epoch,train_loss,val_iou\n");
    for (e, (l, v)) in t.train_loss.iter().zip(&t.val_iou).enumerate() {
        writeln!(csv, "{e},{l},{v}").unwrap();
    }
    let summary = format!(
        "train_count {}\nval_count {}\nbest_epoch {}\nbest_val_iou {}\n",
        t.train_count, t.val_count, t.best_epoch, t.val_iou[t.best_epoch]
    );
    let mut ids = String::new();
    for s in &samples {
        writeln!(ids, "{}", s.id).unwrap();
    }
    Ok(vec![
        ckpt,
        ctx.write("curve.csv", &csv)?,
        ctx.write("summary.txt", &summary)?,
        ctx.write("train_ids.txt", &ids)?,
    ])
}

fn seg_test(ctx: &mut Ctx<'_>, model: &Path, data: &Path, threshold: Option<f64>) -> StageResult {
    if let Some(t) = threshold {
        ctx.cfg.seg.threshold = t;
    }
    ctx.input_file(model)?;
    let net = SegNet::load(model)?;
    let test = ctx.load(data)?;
    let e = test_seg(&net, &seg::images(&test), ctx.cfg.seg.threshold)?;
    let mut csv = String::from("id,dice,iou\n");
    for (s, m) in test.iter().zip(&e.per_sample) {
        writeln!(csv, "{},{},{}", s.id, m.dice, m.iou).unwrap();
    }
    println!("dice {:.4} iou {:.4} over {} images", e.dice, e.iou, test.len());
    Ok(vec![
        ctx.write("per_sample.csv", &csv)?,
        ctx.write("seg_summary.csv", &format!("count,dice,iou\n{},{},{}\n", test.len(), e.dice, e.iou))?,
    ])
}

fn read_seg_summary(dir: &Path) -> Result<(usize, f64, f64), CliError> {
    let p = dir.join("seg_summary.csv");
    let text = fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    let line = text
        .lines()
        .nth(1)
        .ok_or_else(|| CliError::Validation(format!("{}: empty", p.display())))?;
    let v: Vec<&str> = line.split(',').collect();
    let bad = || CliError::Validation(format!("{}: bad row `{line}`", p.display()));
    match v[..] {
        [n, d, i] => Ok((
            n.parse().map_err(|_| bad())?,
            d.parse().map_err(|_| bad())?,
            i.parse().map_err(|_| bad())?,
        )),
        _ => Err(bad()),
    }
}

fn report(ctx: &mut Ctx<'_>, eval: &Option<PathBuf>, segs: &[String]) -> StageResult {
    let mut text = String::new();
    let mut outputs = Vec::new();
    if let Some(p) = eval {
        ctx.input_file(p)?;
        let csv = fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        text.push_str("Generated data quality\n");
        text.push_str(&csv);
        text.push('\n');
    }
    let mut rows: Vec<(String, Vec<(usize, f64, f64)>)> = Vec::new();
    for (tag, dir) in parse_tagged(segs)? {
        ctx.input_file(&dir.join("seg_summary.csv"))?;
        let r = read_seg_summary(&dir)?;
        match rows.iter_mut().find(|(t, _)| *t == tag) {
            Some((_, v)) => v.push(r),
            None => rows.push((tag, vec![r])),
        }
    }
    if !rows.is_empty() {
        let mut csv = String::from("data_type,runs,test_count,dice,iou\n");
        text.push_str(&format!("{:<22} {:>5} {:>8} {:>8}\n", "Data type", "runs", "Dice", "IoU"));
        for (tag, v) in &rows {
            let n = v.len() as f64;
            let dice = v.iter().map(|r| r.1).sum::<f64>() / n;
            let iou = v.iter().map(|r| r.2).sum::<f64>() / n;
            writeln!(csv, "{tag},{},{},{dice},{iou}", v.len(), v[0].0).unwrap();
            text.push_str(&format!("{tag:<22} {:>5} {dice:>8.4} {iou:>8.4}\n", v.len()));
        }
        outputs.push(ctx.write("report.csv", &csv)?);
    }
    if text.is_empty() {
        return Err(CliError::Validation("report needs --eval or --seg inputs".into()));
    }
    print!("{text}");
    outputs.push(ctx.write("report.txt", &text)?);
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_ids_map_back_to_sources() {
        assert_eq!(real_id_of("toy_0001_synth2"), Some("toy_0001"));
        assert_eq!(real_id_of("toy_0001_synth0_styled"), Some("toy_0001"));
        assert_eq!(real_id_of("a_synth_b_synth10"), Some("a_synth_b"));
        assert_eq!(real_id_of("toy_0001"), None);
        assert_eq!(real_id_of("toy_synthx"), None);
    }
}
