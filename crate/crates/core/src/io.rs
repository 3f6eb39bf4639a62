//! Dataset layout on disk, 8-bit codecs, DTF1 sidecars and run manifests.
//!
//! A dataset root holds `images/<id>.png` (RGB), `masks/<id>.png`
//! (grayscale) and optionally `tensors/<id>.dtf1` (lossless `[4, H, W]`).

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labeled::{hex, LabeledImage, Sample};
use crate::tensor::Tensor;

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const TENSORS_DIR: &str = "tensors";

/// Resampling filter shared by dataset loading and evaluation.
pub const RESIZE_FILTER: FilterType = FilterType::CatmullRom;

pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Sorted basenames (without extension) of the PNGs in `root/images`.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(IMAGES_DIR);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Decodes one image/mask pair, resizing both to `size×size` when needed.
pub fn load_pair(root: &Path, id: &str, size: usize) -> Result<LabeledImage> {
    let ip = root.join(IMAGES_DIR).join(format!("{id}.png"));
    let mp = root.join(MASKS_DIR).join(format!("{id}.png"));
    if !mp.exists() {
        return Err(Error::invalid(format!("{id}: missing mask {}", mp.display())));
    }
    let img = image::open(&ip).map_err(|e| image_err(&ip, e))?.to_rgb8();
    let mask = image::open(&mp).map_err(|e| image_err(&mp, e))?.to_luma8();
    if img.dimensions() != mask.dimensions() {
        return Err(Error::invalid(format!(
            "{id}: image {:?} and mask {:?} differ in size",
            img.dimensions(),
            mask.dimensions()
        )));
    }
    let s = size as u32;
    let img = if img.dimensions() == (s, s) {
        img
    } else {
        image::imageops::resize(&img, s, s, RESIZE_FILTER)
    };
    let mask = if mask.dimensions() == (s, s) {
        mask
    } else {
        image::imageops::resize(&mask, s, s, RESIZE_FILTER)
    };
    let plane = size * size;
    let mut data = vec![0.0f32; 4 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = from_u8(p.0[c]);
        }
    }
    for (i, p) in mask.pixels().enumerate() {
        data[3 * plane + i] = if p.0[0] > 127 { 1.0 } else { -1.0 };
    }
    LabeledImage::new(Tensor::new(vec![4, size, size], data)?)
}

/// Every pair under `root` decoded from the 8-bit files.
pub fn load_dataset(root: &Path, size: usize) -> Result<Vec<Sample>> {
    list_ids(root)?
        .into_iter()
        .map(|id| load_pair(root, &id, size).map(|im| Sample::new(id, im)))
        .collect()
}

/// Like [`load_dataset`] but reads the DTF1 sidecar when one exists at the
/// requested size, so pipeline hops stay lossless.
pub fn load_samples(root: &Path, size: usize) -> Result<Vec<Sample>> {
    list_ids(root)?
        .into_iter()
        .map(|id| {
            let tp = root.join(TENSORS_DIR).join(format!("{id}.dtf1"));
            if tp.exists() {
                let bytes = fs::read(&tp).map_err(|e| Error::io(&tp, e))?;
                let t = Tensor::from_dtf1_bytes(&bytes)?;
                if t.dims() == [4, size, size] {
                    return Ok(Sample::new(id, LabeledImage::new(t)?));
                }
            }
            load_pair(root, &id, size).map(|im| Sample::new(id, im))
        })
        .collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `tensors/<id>.dtf1`
/// under `root`; returns the written paths relative to `root`.
pub fn save_sample(root: &Path, id: &str, image: &LabeledImage) -> Result<Vec<PathBuf>> {
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let t = image.tensor().data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(t[i]), to_u8(t[plane + i]), to_u8(t[2 * plane + i])])
    });
    let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = t[3 * plane + y as usize * w + x as usize];
        image::Luma([if v > 0.0 { 255 } else { 0 }])
    });
    let rel = [
        PathBuf::from(IMAGES_DIR).join(format!("{id}.png")),
        PathBuf::from(MASKS_DIR).join(format!("{id}.png")),
        PathBuf::from(TENSORS_DIR).join(format!("{id}.dtf1")),
    ];
    let abs: Vec<PathBuf> = rel.iter().map(|r| root.join(r)).collect();
    for p in &abs {
        create_parent(p)?;
    }
    rgb.save(&abs[0]).map_err(|e| image_err(&abs[0], e))?;
    mask.save(&abs[1]).map_err(|e| image_err(&abs[1], e))?;
    fs::write(&abs[2], image.tensor().to_dtf1_bytes()).map_err(|e| Error::io(&abs[2], e))?;
    Ok(rel.to_vec())
}

pub fn save_samples(root: &Path, samples: &[Sample]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(save_sample(root, &s.id, &s.image)?);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const MANIFEST_MAGIC: &str = "lesionsynth-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Provenance record written once at the end of every CLI stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub master_seed: u64,
    /// `(stream name, derived seed)`.
    pub streams: Vec<(String, u64)>,
    pub input_hash: String,
    /// `(path relative to the output dir, sha256)`, sorted by path.
    pub outputs: Vec<(String, String)>,
    pub warnings: Vec<String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    /// TOML echo of the effective configuration.
    pub config: String,
}

/// Keys that change between otherwise identical runs.
pub const TIMESTAMP_KEYS: [&str; 2] = ["started_unix", "wall_clock_secs"];

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC}\n");
        s += &format!("command = {}\n", self.command);
        s += &format!("argv = {}\n", self.argv.join(" "));
        s += &format!("master_seed = {}\n", self.master_seed);
        s += &format!("input_hash = {}\n", self.input_hash);
        s += &format!("started_unix = {}\n", self.started_unix);
        s += &format!("wall_clock_secs = {:.3}\n", self.wall_clock_secs);
        for (name, seed) in &self.streams {
            s += &format!("stream.{name} = {seed}\n");
        }
        for w in &self.warnings {
            s += &format!("warning = {}\n", w.replace('\n', " "));
        }
        for (path, hash) in &self.outputs {
            s += &format!("output.{path} = {hash}\n");
        }
        s += "[config]\n";
        s += &self.config;
        if !s.ends_with('\n') {
            s.push('\n');
        }
        s
    }

    /// Manifest text with the timestamp lines removed.
    pub fn comparable(text: &str) -> String {
        text.lines()
            .filter(|l| !TIMESTAMP_KEYS.iter().any(|k| l.starts_with(&format!("{k} = "))))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Format {
            what: "manifest",
            detail: d,
        };
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("bad magic line".into()));
        }
        let mut m = RunManifest::default();
        for line in lines.by_ref() {
            if line == "[config]" {
                break;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("bad line `{line}`")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("bad number in `{line}`")));
            match k {
                "command" => m.command = v.to_string(),
                "argv" => m.argv = v.split(' ').filter(|s| !s.is_empty()).map(String::from).collect(),
                "master_seed" => m.master_seed = num(v)?,
                "input_hash" => m.input_hash = v.to_string(),
                "started_unix" => m.started_unix = num(v)?,
                "wall_clock_secs" => {
                    m.wall_clock_secs = v.parse().map_err(|_| bad(format!("bad number in `{line}`")))?
                }
                "warning" => m.warnings.push(v.to_string()),
                _ => {
                    if let Some(name) = k.strip_prefix("stream.") {
                        m.streams.push((name.to_string(), num(v)?));
                    } else if let Some(path) = k.strip_prefix("output.") {
                        m.outputs.push((path.to_string(), v.to_string()));
                    } else {
                        return Err(bad(format!("unknown key `{k}`")));
                    }
                }
            }
        }
        m.config = lines.map(|l| format!("{l}\n")).collect();
        Ok(m)
    }

    /// Hashes every listed output relative to `dir`, sorted by path.
    pub fn record_outputs(&mut self, dir: &Path, paths: &[PathBuf]) -> Result<()> {
        let mut out = Vec::with_capacity(paths.len());
        for p in paths {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            out.push((rel.to_string_lossy().replace('\\', "/"), hash_file(&dir.join(rel))?));
        }
        out.sort();
        out.dedup();
        self.outputs = out;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(size: usize) -> LabeledImage {
        let plane = size * size;
        LabeledImage::new(Tensor::from_fn(&[4, size, size], |i| {
            if i >= 3 * plane {
                if (i % size) < size / 2 { 1.0 } else { -1.0 }
            } else {
                ((i * 37) % 255) as f32 / 127.0 - 1.0
            }
        }))
        .unwrap()
    }

    #[test]
    fn affine_map_and_threshold() {
        assert_eq!(from_u8(255), 1.0);
        assert_eq!(from_u8(0), -1.0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(-1.0), 0);
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join(IMAGES_DIR)).unwrap();
        fs::create_dir_all(root.join(MASKS_DIR)).unwrap();
        GrayImage::from_raw(2, 2, vec![127, 128, 0, 255]).unwrap().save(root.join("masks/b.png")).unwrap();
        RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 128])).save(root.join("images/b.png")).unwrap();
        let b = load_pair(root, "b", 2).unwrap();
        assert_eq!(b.mask(), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(b.channel(0)[0], 1.0);
        assert_eq!(b.channel(1)[0], -1.0);
    }

    #[test]
    fn save_load_quantization_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let a = sample(8);
        save_sample(dir.path(), "x", &a).unwrap();
        let once = load_dataset(dir.path(), 8).unwrap().remove(0).image;
        assert!(a.tensor().max_abs_diff(once.tensor()) <= 1.0 / 127.5 + 1e-6);
        assert_eq!(once.mask(), a.mask());
        let d2 = tempfile::tempdir().unwrap();
        save_sample(d2.path(), "x", &once).unwrap();
        let twice = load_dataset(d2.path(), 8).unwrap().remove(0).image;
        assert_eq!(once, twice);
        let d3 = tempfile::tempdir().unwrap();
        save_sample(d3.path(), "x", &twice).unwrap();
        for f in ["images/x.png", "masks/x.png", "tensors/x.dtf1"] {
            assert_eq!(fs::read(d2.path().join(f)).unwrap(), fs::read(d3.path().join(f)).unwrap());
        }
        let mask = image::open(dir.path().join("masks/x.png")).unwrap().to_luma8();
        assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        // sidecar is lossless
        let exact = load_samples(dir.path(), 8).unwrap().remove(0).image;
        assert_eq!(exact, a);
    }

    #[test]
    fn missing_mask_names_the_basename() {
        let dir = tempfile::tempdir().unwrap();
        save_sample(dir.path(), "lonely", &sample(4)).unwrap();
        fs::remove_file(dir.path().join("masks/lonely.png")).unwrap();
        let err = load_dataset(dir.path(), 4).unwrap_err().to_string();
        assert!(err.contains("lonely"), "{err}");
    }

    #[test]
    fn manifest_round_trip_and_comparison() {
        let m = RunManifest {
            command: "train".into(),
            argv: vec!["train".into(), "--seed".into(), "3".into()],
            master_seed: 3,
            streams: vec![("train".into(), 42)],
            input_hash: "abc".into(),
            outputs: vec![("model.ckpt".into(), "ff".into())],
            warnings: vec!["two\nlines".into()],
            started_unix: 100,
            wall_clock_secs: 1.5,
            config: "[train]\nlr = 0.1\n".into(),
        };
        let text = m.to_text();
        let back = RunManifest::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        let later = RunManifest {
            started_unix: 999,
            wall_clock_secs: 7.0,
            ..m.clone()
        };
        assert_eq!(RunManifest::comparable(&text), RunManifest::comparable(&later.to_text()));
        let dir = tempfile::tempdir().unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(), text);
        assert!(!dir.path().join("manifest.tmp").exists());
    }
}
