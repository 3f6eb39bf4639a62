//! Image+mask embeddings, k-means, and the cluster → checkpoint registry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::checkpoint;
use crate::diffusion::net::{DenoiserNet, EpsModel};
use crate::diffusion::train::TrainConfig;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::labeled::{LabeledImage, COLOR_CHANNELS};
use crate::repaint::ModelPool;
use crate::tensor::Tensor;

/// Concatenated global tokens of an image and of its mask, length `2·D`.
pub fn embed_pair(image: &Tensor<f32>, mask: &Tensor<f32>, extractor: &FeatureExtractor<f32>) -> Result<Vec<f64>> {
    let d = image.dims();
    if d.len() != 3 || d[0] != COLOR_CHANNELS || mask.numel() != d[1] * d[2] {
        return Err(Error::shape(
            "embed_pair",
            format!("image {d:?}, mask {:?}", mask.dims()),
        ));
    }
    let (h, w) = (d[1], d[2]);
    let plane = h * w;
    let c = extractor.in_channels();
    let mut img = image.data().to_vec();
    // missing channels of the image input read as background
    img.resize(c * plane, -1.0);
    let msk: Vec<f32> = (0..c).flat_map(|_| mask.data().iter().copied()).collect();
    let mut data = img;
    data.extend_from_slice(&msk);
    let batch = Tensor::new(vec![2, c, h, w], data)?;
    let tokens = extractor.tokens(&batch)?;
    Ok(tokens.data().iter().map(|&v| v as f64).collect())
}

/// [`embed_pair`] for a labeled image.
pub fn embed_labeled(image: &LabeledImage, extractor: &FeatureExtractor<f32>) -> Result<Vec<f64>> {
    let mask = Tensor::new(vec![1, image.height(), image.width()], image.mask().to_vec())?;
    embed_pair(&image.color(), &mask, extractor)
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower id.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = dist2(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub wcss: Vec<f64>,
    pub converged: bool,
}

/// Draws an index with probability proportional to `weights` using a single
/// uniform number against the running cumulative sum.
fn draw_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>();
    if !(total > 0.0) {
        return ((u * weights.len() as f64) as usize).min(weights.len() - 1);
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if acc > target {
                return i;
            }
        }
    }
    last
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its centroid (taken from a cluster with
/// more than one member) into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &mut [Vec<f64>], counts: &mut [usize]) {
    while let Some(empty) = counts.iter().position(|&n| n == 0) {
        let (far, _) = points
            .iter()
            .enumerate()
            .filter(|&(i, _)| counts[assignment[i]] > 1)
            .map(|(i, p)| (i, dist2(p, &centroids[assignment[i]])))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        debug_assert!(far != usize::MAX, "k <= n guarantees a donor");
        counts[assignment[far]] -= 1;
        assignment[far] = empty;
        counts[empty] = 1;
        centroids[empty] = points[far].clone();
    }
}

fn wcss(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignment).map(|(p, &a)| dist2(p, &centroids[a])).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} needs 1 <= k <= {} points", points.len())));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("embeddings must share one dimension and be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[draw_weighted(&vec![1.0; points.len()], &mut rng)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = points[draw_weighted(&d2, &mut rng)].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &next));
        }
        centroids.push(next);
    }

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let (mut cen, mut counts) = means(points, &assignment, k);
        for (c, n) in cen.iter_mut().zip(&counts) {
            if *n == 0 {
                c.clear();
            }
        }
        if counts.contains(&0) {
            // empty clusters keep a placeholder until repaired
            for (c, old) in cen.iter_mut().zip(&centroids) {
                if c.is_empty() {
                    *c = old.clone();
                }
            }
            repair_empty(points, &mut assignment, &mut cen, &mut counts);
            cen = means(points, &assignment, k).0;
        }
        centroids = cen;
        history.push(wcss(points, &assignment, &centroids));
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    // a final assignment change without a centroid update can leave a cluster empty
    let (_, mut counts) = means(points, &assignment, k);
    if counts.contains(&0) {
        repair_empty(points, &mut assignment, &mut centroids, &mut counts);
        centroids = means(points, &assignment, k).0;
    }
    Ok(KMeans {
        assignment,
        centroids,
        wcss: history,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Scale each embedding to unit length before clustering.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 2,
            max_iter: 100,
            normalize: false,
            seed: 0,
        }
    }
}

/// Embeds every image and runs k-means on the embeddings.
pub fn cluster_images(
    images: &[LabeledImage],
    extractor: &FeatureExtractor<f32>,
    cfg: &ClusterConfig,
) -> Result<KMeans> {
    let mut points: Vec<Vec<f64>> = images
        .iter()
        .map(|im| embed_labeled(im, extractor))
        .collect::<Result<_>>()?;
    if cfg.normalize {
        points.iter_mut().for_each(|p| l2_normalize(p));
    }
    kmeans(&points, cfg.k, cfg.seed, cfg.max_iter)
}

/// Whether generation draws among cluster models or uses the model trained
/// on the whole dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    #[default]
    Cluster,
    Full,
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(Self::Cluster),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown model mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRegistry {
    /// `(sample id, cluster id)` in dataset order.
    assignment: Vec<(String, usize)>,
    centroids: Vec<Vec<f64>>,
    checkpoints: Vec<Option<PathBuf>>,
    full: Option<PathBuf>,
}

const REGISTRY_MAGIC: &str = "lesionsynth-registry v1";

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "registry",
        detail: detail.into(),
    }
}

/// Validates an assignment and attaches checkpoints. Clusters without a
/// checkpoint leave the registry partial; partial registries refuse
/// cluster-mode generation.
pub fn build_registry(
    assignment: Vec<(String, usize)>,
    centroids: Vec<Vec<f64>>,
    checkpoints: &BTreeMap<usize, PathBuf>,
    full: Option<PathBuf>,
) -> Result<ClusterRegistry> {
    let k = centroids.len();
    if k == 0 && full.is_none() {
        return Err(Error::invalid("registry needs clusters or a full-dataset checkpoint"));
    }
    let mut used = vec![false; k];
    for (id, c) in &assignment {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("sample id `{id}` must be non-empty without whitespace")));
        }
        if *c >= k {
            return Err(Error::invalid(format!("sample {id} assigned to cluster {c} of {k}")));
        }
        used[*c] = true;
    }
    if let Some(c) = used.iter().position(|u| !u) {
        return Err(Error::invalid(format!("cluster {c} has no members")));
    }
    if let Some(&c) = checkpoints.keys().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("checkpoint for unknown cluster {c}")));
    }
    Ok(ClusterRegistry {
        assignment,
        centroids,
        checkpoints: (0..k).map(|c| checkpoints.get(&c).cloned()).collect(),
        full,
    })
}

impl ClusterRegistry {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn assignment(&self) -> &[(String, usize)] {
        &self.assignment
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn checkpoint(&self, cluster: usize) -> Option<&Path> {
        self.checkpoints.get(cluster).and_then(|p| p.as_deref())
    }

    pub fn full_checkpoint(&self) -> Option<&Path> {
        self.full.as_deref()
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.assignment.iter().find(|(s, _)| s == id).map(|&(_, c)| c)
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|&&(_, c)| c == cluster)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn set_checkpoint(&mut self, cluster: usize, path: PathBuf) -> Result<()> {
        let slot = self
            .checkpoints
            .get_mut(cluster)
            .ok_or_else(|| Error::invalid(format!("no cluster {cluster}")))?;
        *slot = Some(path);
        Ok(())
    }

    pub fn set_full_checkpoint(&mut self, path: PathBuf) {
        self.full = Some(path);
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.k()).filter(|&c| self.checkpoints[c].is_none()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.k() > 0 && self.missing().is_empty()
    }

    /// Uniform cluster id from `rng`.
    pub fn pick_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if let Some(&c) = self.missing().first() {
            return Err(Error::MissingCheckpoint(c.to_string()));
        }
        if self.k() == 0 {
            return Err(Error::MissingCheckpoint("0".into()));
        }
        Ok(rng.random_range(0..self.k()))
    }

    /// Loads the models needed for `mode`. Relative checkpoint paths are
    /// resolved against `base`.
    pub fn load_pool(&self, mode: ModelMode, base: &Path) -> Result<LoadedPool> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let load = |p: &Path| {
            let p = resolve(p);
            if !p.exists() {
                return Err(Error::MissingCheckpoint(p.display().to_string()));
            }
            checkpoint::load(&p)
        };
        match mode {
            ModelMode::Full => {
                let p = self.full.as_deref().ok_or_else(|| Error::MissingCheckpoint("full".into()))?;
                let (net, cfg) = load(p)?;
                Ok(LoadedPool {
                    nets: vec![net],
                    configs: vec![cfg],
                })
            }
            ModelMode::Cluster => {
                if let Some(&c) = self.missing().first() {
                    return Err(Error::MissingCheckpoint(c.to_string()));
                }
                let mut nets = Vec::with_capacity(self.k());
                let mut configs = Vec::with_capacity(self.k());
                for p in self.checkpoints.iter().flatten() {
                    let (net, cfg) = load(p)?;
                    nets.push(net);
                    configs.push(cfg);
                }
                Ok(LoadedPool { nets, configs })
            }
        }
    }

    pub fn to_index(&self) -> String {
        let mut s = format!("{REGISTRY_MAGIC}\nk {}\n", self.k());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        writeln!(s, "full {}", path(&self.full)).unwrap();
        for (c, p) in self.checkpoints.iter().enumerate() {
            writeln!(s, "checkpoint {c} {}", path(p)).unwrap();
        }
        for (c, cen) in self.centroids.iter().enumerate() {
            let vals: Vec<String> = cen.iter().map(|v| format!("{v:?}")).collect();
            writeln!(s, "centroid {c} {}", vals.join(" ")).unwrap();
        }
        for (id, c) in &self.assignment {
            writeln!(s, "sample {id} {c}").unwrap();
        }
        s
    }

    pub fn from_index(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REGISTRY_MAGIC) {
            return Err(bad("bad magic line"));
        }
        let k: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("k "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing `k` line"))?;
        let parse_path = |s: &str| if s == "-" { None } else { Some(PathBuf::from(s)) };
        let mut full = None;
        let mut checkpoints = BTreeMap::new();
        let mut centroids = vec![Vec::new(); k];
        let mut assignment = Vec::new();
        for line in lines {
            let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in `{line}`")));
            match tag {
                "full" => full = parse_path(rest),
                "checkpoint" => {
                    let (c, p) = rest.split_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
                    if let Some(p) = parse_path(p) {
                        checkpoints.insert(num(c)?, p);
                    }
                }
                "centroid" => {
                    let mut parts = rest.split(' ');
                    let c = num(parts.next().unwrap_or(""))?;
                    let vals = parts
                        .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value in `{line}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    *centroids.get_mut(c).ok_or_else(|| bad(format!("centroid {c} >= k")))? = vals;
                }
                "sample" => {
                    let (id, c) = rest.rsplit_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
                    assignment.push((id.to_string(), num(c)?));
                }
                _ => return Err(bad(format!("unknown tag `{tag}`"))),
            }
        }
        build_registry(assignment, centroids, &checkpoints, full)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_index()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_index(&text)
    }

    /// `sample_id,cluster` rows with a header.
    pub fn membership_csv(&self) -> String {
        let mut s = String::from("sample_id,cluster\n");
        for (id, c) in &self.assignment {
            writeln!(s, "{id},{c}").unwrap();
        }
        s
    }
}

/// Denoisers loaded from a registry, indexed by cluster (a single entry in
/// full mode).
#[derive(Clone, Debug)]
pub struct LoadedPool {
    pub nets: Vec<DenoiserNet<f32>>,
    pub configs: Vec<TrainConfig>,
}

impl ModelPool for LoadedPool {
    fn count(&self) -> usize {
        self.nets.len()
    }

    fn model(&self, id: usize) -> Result<&dyn EpsModel<f32>> {
        self.nets
            .get(id)
            .map(|m| m as &dyn EpsModel<f32>)
            .ok_or_else(|| Error::MissingCheckpoint(id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(n: usize, centers: &[[f64; 3]], spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % centers.len();
            pts.push(
                centers[c]
                    .iter()
                    .map(|&m| m + spread * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect(),
            );
            labels.push(c);
        }
        (pts, labels)
    }

    /// Fraction of points whose cluster's majority label matches their own.
    fn purity(assign: &[usize], labels: &[usize], k: usize) -> f64 {
        let mut hits = 0;
        for c in 0..k {
            let mut counts = BTreeMap::new();
            for (a, l) in assign.iter().zip(labels) {
                if *a == c {
                    *counts.entry(*l).or_insert(0) += 1;
                }
            }
            hits += counts.values().max().copied().unwrap_or(0);
        }
        hits as f64 / labels.len() as f64
    }

    #[test]
    fn k1_gives_the_mean() {
        let (pts, _) = blobs(10, &[[0.0, 1.0, 2.0]], 1.0, 0);
        let km = kmeans(&pts, 1, 0, 10).unwrap();
        for d in 0..3 {
            let mean = pts.iter().map(|p| p[d]).sum::<f64>() / 10.0;
            assert!((km.centroids[0][d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (pts, labels) = blobs(60, &[[0.0; 3], [100.0, 0.0, 0.0]], 1.0, 1);
        for seed in 0..5 {
            let km = kmeans(&pts, 2, seed, 50).unwrap();
            assert_eq!(purity(&km.assignment, &labels, 2), 1.0);
            assert!(km.converged);
        }
    }

    #[test]
    fn wcss_is_non_increasing() {
        let (pts, _) = blobs(200, &[[0.0; 3], [3.0, 0.0, 0.0], [0.0, 3.0, 1.0], [1.0, 1.0, 1.0]], 1.5, 2);
        for seed in 0..10 {
            let km = kmeans(&pts, 6, seed, 100).unwrap();
            for w in km.wcss.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", km.wcss);
            }
        }
    }

    #[test]
    fn duplicated_points_give_the_same_centroids() {
        let (pts, _) = blobs(40, &[[0.0; 3], [4.0, 1.0, 0.0], [0.0, 4.0, 2.0]], 1.0, 3);
        let doubled: Vec<Vec<f64>> = pts.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        for seed in 0..5 {
            let a = kmeans(&pts, 3, seed, 100).unwrap();
            let b = kmeans(&doubled, 3, seed, 100).unwrap();
            for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
                for (x, y) in ca.iter().zip(cb) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permutation_preserves_partition_on_separated_data() {
        let (pts, _) = blobs(45, &[[0.0; 3], [50.0, 0.0, 0.0], [0.0, 50.0, 0.0]], 1.0, 4);
        let a = kmeans(&pts, 3, 0, 50).unwrap();
        let perm: Vec<usize> = (0..pts.len()).rev().collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let b = kmeans(&shuffled, 3, 7, 50).unwrap();
        // same-cluster relation must agree for every pair
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let (pi, pj) = (perm.iter().position(|&p| p == i).unwrap(), perm.iter().position(|&p| p == j).unwrap());
                assert_eq!(a.assignment[i] == a.assignment[j], b.assignment[pi] == b.assignment[pj]);
            }
        }
    }

    #[test]
    fn empty_clusters_are_repaired() {
        // five identical points and one outlier with k = 3 forces a repair
        let mut pts = vec![vec![0.0, 0.0]; 5];
        pts.push(vec![10.0, 0.0]);
        let km = kmeans(&pts, 3, 0, 20).unwrap();
        for c in 0..3 {
            assert!(km.assignment.contains(&c), "{:?}", km.assignment);
        }
        assert!(kmeans(&pts, 7, 0, 20).is_err());
    }

    fn registry(k: usize, with: &[usize], full: bool) -> ClusterRegistry {
        let assignment = (0..2 * k).map(|i| (format!("s{i}"), i % k)).collect();
        let centroids = (0..k).map(|c| vec![c as f64, 0.5]).collect();
        let cks = with.iter().map(|&c| (c, PathBuf::from(format!("c{c}.ckpt")))).collect();
        build_registry(assignment, centroids, &cks, full.then(|| PathBuf::from("full.ckpt"))).unwrap()
    }

    #[test]
    fn registry_round_trip_and_csv() {
        let r = registry(3, &[0, 1, 2], true);
        assert!(r.is_complete());
        assert_eq!(ClusterRegistry::from_index(&r.to_index()).unwrap(), r);
        assert_eq!(r.cluster_of("s4"), Some(1));
        assert_eq!(r.members(2), vec!["s2", "s5"]);
        assert!(r.membership_csv().starts_with("sample_id,cluster\ns0,0\n"));
    }

    #[test]
    fn partial_registry_refuses_generation() {
        let r = registry(3, &[0, 2], false);
        assert!(!r.is_complete());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(r.pick_model(&mut rng), Err(Error::MissingCheckpoint(c)) if c == "1"));
        assert!(matches!(r.load_pool(ModelMode::Cluster, Path::new(".")), Err(Error::MissingCheckpoint(_))));
        assert!(matches!(r.load_pool(ModelMode::Full, Path::new(".")), Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn full_only_registry_is_valid() {
        let r = build_registry(vec![], vec![], &BTreeMap::new(), Some("full.ckpt".into())).unwrap();
        assert_eq!(r.k(), 0);
        assert_eq!(r.full_checkpoint(), Some(Path::new("full.ckpt")));
    }

    #[test]
    fn pick_model_is_uniform_and_reproducible() {
        let r = registry(4, &[0, 1, 2, 3], false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        let draws: Vec<usize> = (0..10_000).map(|_| r.pick_model(&mut rng).unwrap()).collect();
        for &d in &draws {
            counts[d] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
        let mut again = ChaCha8Rng::seed_from_u64(11);
        assert!(draws.iter().all(|&d| d == r.pick_model(&mut again).unwrap()));
        let one = registry(1, &[0], false);
        assert!((0..50).all(|_| one.pick_model(&mut rng).unwrap() == 0));
    }

    #[test]
    fn embed_pair_properties() {
        let ext = FeatureExtractor::seeded(0);
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i * 17) % 13) as f32 / 6.5 - 1.0);
        let mask = Tensor::from_fn(&[1, 8, 8], |i| if i % 8 < 3 { 1.0 } else { -1.0 });
        let a = embed_pair(&img, &mask, &ext).unwrap();
        assert_eq!(a.len(), 2 * ext.token_dim());
        assert_eq!(a, embed_pair(&img, &mask, &ext).unwrap());
        // swap roles: the old mask, replicated, becomes the image
        let mask3 = Tensor::from_fn(&[3, 8, 8], |i| mask.data()[i % 64]);
        let img1 = Tensor::from_fn(&[1, 8, 8], |i| img.data()[i]);
        assert_ne!(a, embed_pair(&mask3, &img1, &ext).unwrap());
    }
}
