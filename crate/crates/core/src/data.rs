//! Synthetic re-identification data and a folder-based loader.
//!
//! Images are kept as 8-bit CHW pixels and normalized on the way into a
//! batch, so a generated set written to disk and read back is bit-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";
/// Identity label of junk / distractor images.
pub const JUNK_ID: i64 = -1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset request: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Appearance of one synthetic person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: i64,
    pub torso_hue: f64,
    pub leg_hue: f64,
    /// Body width relative to the image width.
    pub build_ratio: f64,
    /// bit 0: hat, bit 1: bag, bit 2: torso stripe.
    pub accessories: u8,
}

impl IdentitySpec {
    fn draw(id: i64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            id,
            torso_hue: rng.gen::<f64>(),
            leg_hue: rng.gen::<f64>(),
            build_ratio: rng.gen_range(0.35..0.6),
            accessories: rng.gen_range(0..8),
        }
    }

    /// Coarse appearance signature; distinct identities must differ here.
    fn signature(&self) -> (u32, u32, u32, u8) {
        (
            (self.torso_hue * 1000.0) as u32,
            (self.leg_hue * 1000.0) as u32,
            (self.build_ratio * 1000.0) as u32,
            self.accessories,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub id: i64,
    pub cam: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.split).or_insert(0) += 1;
        }
        m
    }

    pub fn ids(&self, split: Split) -> BTreeSet<i64> {
        self.entries
            .iter()
            .filter(|e| e.split == split && e.id != JUNK_ID)
            .map(|e| e.id)
            .collect()
    }

    /// Parse `relative/path id cam split` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let err = |msg: String| DataError::Manifest { line, msg };
            if fields.len() != 4 {
                return Err(err(format!(
                    "expected 4 fields `path id cam split`, found {}",
                    fields.len()
                )));
            }
            let id = fields[1]
                .parse::<i64>()
                .map_err(|_| err(format!("bad person id {:?}", fields[1])))?;
            if id < JUNK_ID {
                return Err(err(format!("person id {id} is negative")));
            }
            let cam = fields[2]
                .parse::<usize>()
                .map_err(|_| err(format!("bad camera id {:?}", fields[2])))?;
            let split = fields[3].parse::<Split>().map_err(err)?;
            entries.push(ManifestEntry {
                path: fields[0].to_string(),
                id,
                cam,
                split,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# path id cam split\n");
        for e in &self.entries {
            s.push_str(&format!("{} {} {} {}\n", e.path, e.id, e.cam, e.split));
        }
        s
    }

    /// Train ids disjoint from test ids, query and gallery ids overlapping,
    /// and every query id present in the gallery under another camera.
    pub fn check_protocol(&self) -> Result<()> {
        let train = self.ids(Split::Train);
        let query = self.ids(Split::Query);
        let gallery = self.ids(Split::Gallery);
        if let Some(id) = train.iter().find(|id| query.contains(id) || gallery.contains(id)) {
            return Err(DataError::Protocol(format!(
                "identity {id} appears in both train and test splits"
            )));
        }
        if query.intersection(&gallery).next().is_none() {
            return Err(DataError::Protocol(
                "query and gallery identities do not overlap".into(),
            ));
        }
        let mut cams: BTreeMap<i64, BTreeSet<usize>> = BTreeMap::new();
        for e in &self.entries {
            if e.split != Split::Train && e.id != JUNK_ID {
                cams.entry(e.id).or_default().insert(e.cam);
            }
        }
        if let Some((id, _)) = cams.iter().find(|(_, c)| c.len() < 2) {
            return Err(DataError::Protocol(format!(
                "test identity {id} is seen by a single camera"
            )));
        }
        Ok(())
    }
}

/// Per-channel normalization applied when batching.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// (height, width) of every image.
    pub hw: (usize, usize),
    pub norm: Normalization,
    pub entries: Vec<ManifestEntry>,
    /// 8-bit CHW pixels, one vector per entry.
    pub pixels: Vec<Vec<u8>>,
    /// Non-fatal observations made while building the dataset.
    pub notices: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.clone(),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    /// Contiguous class labels for the training identities, in id order.
    pub fn train_label_map(&self) -> BTreeMap<i64, usize> {
        self.manifest()
            .ids(Split::Train)
            .into_iter()
            .enumerate()
            .map(|(label, id)| (id, label))
            .collect()
    }

    pub fn num_train_ids(&self) -> usize {
        self.manifest().ids(Split::Train).len()
    }

    /// Normalized CHW values of one image.
    pub fn image(&self, i: usize) -> Vec<f32> {
        let plane = self.hw.0 * self.hw.1;
        self.pixels[i]
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let c = k / plane;
                (p as f32 / 255.0 - self.norm.mean[c]) / self.norm.std[c]
            })
            .collect()
    }

    /// Normalized `[B×3×H×W]` batch of the given entries.
    pub fn batch<T: Element>(&self, idx: &[usize]) -> Tensor<T> {
        let (h, w) = self.hw;
        let mut data = Vec::with_capacity(idx.len() * 3 * h * w);
        for &i in idx {
            data.extend(self.image(i).into_iter().map(|v| T::of(v as f64)));
        }
        Tensor::new(&[idx.len(), 3, h, w], data).expect("batch shape")
    }

    /// Write images as PNG plus a manifest under `root`.
    pub fn write_folder(&self, root: &Path) -> Result<()> {
        for (e, px) in self.entries.iter().zip(&self.pixels) {
            let path = root.join(&e.path);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            write_png(&path, px, self.hw)?;
        }
        let mpath = root.join(MANIFEST_FILE);
        std::fs::write(&mpath, self.manifest().to_text()).map_err(|source| DataError::Io {
            path: mpath,
            source,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub imgs_per_id: usize,
    pub n_cams: usize,
    pub hw: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train_ids: 50,
            n_test_ids: 64,
            imgs_per_id: 20,
            n_cams: 3,
            hw: (64, 32),
            seed: 7,
        }
    }
}

/// Per-camera imaging conditions.
#[derive(Clone, Debug)]
struct CameraModel {
    brightness: f64,
    hue_shift: f64,
    background: [f64; 3],
    noise: f64,
    jitter: i64,
}

impl CameraModel {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let g = rng.gen_range(0.25..0.75);
        Self {
            brightness: rng.gen_range(0.7..1.2),
            hue_shift: rng.gen_range(-0.06..0.06),
            background: [
                g + rng.gen_range(-0.1..0.1),
                g + rng.gen_range(-0.1..0.1),
                g + rng.gen_range(-0.1..0.1),
            ],
            noise: rng.gen_range(0.02..0.08),
            jitter: rng.gen_range(1..4),
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(person: &IdentitySpec, cam: &CameraModel, hw: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = hw;
    let (hf, wf) = (h as f64, w as f64);
    let dx = rng.gen_range(-cam.jitter..=cam.jitter) as f64;
    let dy = rng.gen_range(-cam.jitter..=cam.jitter) as f64;
    let scale = rng.gen_range(0.92..1.08);
    let torso = hsv(person.torso_hue + cam.hue_shift, 0.8, 0.85);
    let legs = hsv(person.leg_hue + cam.hue_shift, 0.7, 0.6);
    let skin = [0.85, 0.7, 0.55];
    let accent = hsv(person.torso_hue + 0.5, 0.9, 0.9);
    let cx = wf / 2.0 + dx;
    let half = person.build_ratio * wf / 2.0 * scale;
    // vertical layout as fractions of the height
    let y = |f: f64| f * hf * scale + dy + (1.0 - scale) * hf / 2.0;
    let (head_top, head_bot, torso_bot, legs_bot) = (y(0.05), y(0.2), y(0.55), y(0.95));
    let mut rgb = vec![[0.0f64; 3]; h * w];
    for r in 0..h {
        for c in 0..w {
            let (yf, xf) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut col = cam.background;
            if yf >= head_top && yf < head_bot && (xf - cx).abs() < half * 0.45 {
                col = skin;
                if person.accessories & 1 != 0 && yf < head_top + (head_bot - head_top) * 0.35 {
                    col = accent;
                }
            } else if yf >= head_bot && yf < torso_bot && (xf - cx).abs() < half {
                col = torso;
                let mid = (head_bot + torso_bot) / 2.0;
                if person.accessories & 4 != 0 && (yf - mid).abs() < hf * 0.03 {
                    col = [1.0 - torso[0], 1.0 - torso[1], 1.0 - torso[2]];
                }
            } else if yf >= torso_bot && yf < legs_bot && (xf - cx).abs() < half * 0.8 {
                // gap between the legs
                if (xf - cx).abs() > half * 0.12 {
                    col = legs;
                }
            }
            if person.accessories & 2 != 0
                && yf >= y(0.3)
                && yf < y(0.5)
                && xf >= cx + half
                && xf < cx + half + wf * 0.12
            {
                col = [0.35, 0.2, 0.1];
            }
            rgb[r * w + c] = col;
        }
    }
    let mut out = vec![0u8; 3 * h * w];
    for (k, px) in rgb.iter().enumerate() {
        for ch in 0..3 {
            let noise: f64 = rng.gen_range(-1.0..1.0) * cam.noise;
            let v = (px[ch] * cam.brightness + noise).clamp(0.0, 1.0);
            out[ch * h * w + k] = (v * 255.0).round() as u8;
        }
    }
    out
}

/// Render a seeded synthetic set. Training identities get ids
/// `0..n_train_ids`, test identities the following ids; image `j` of an
/// identity is taken by camera `j mod n_cams`. For each test identity the
/// first image of every camera is a query and the rest are gallery.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.n_cams < 2 {
        return Err(DataError::Invalid("at least two cameras are required".into()));
    }
    if cfg.imgs_per_id < cfg.n_cams {
        return Err(DataError::Invalid(format!(
            "imgs_per_id ({}) must be at least n_cams ({})",
            cfg.imgs_per_id, cfg.n_cams
        )));
    }
    if cfg.hw.0 < 8 || cfg.hw.1 < 8 {
        return Err(DataError::Invalid(format!("image size {:?} is too small", cfg.hw)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cams: Vec<CameraModel> = (0..cfg.n_cams).map(|_| CameraModel::draw(&mut rng)).collect();
    let total = cfg.n_train_ids + cfg.n_test_ids;
    let mut people: Vec<IdentitySpec> = Vec::with_capacity(total);
    let mut seen = BTreeSet::new();
    while people.len() < total {
        let p = IdentitySpec::draw(people.len() as i64, &mut rng);
        if seen.insert(p.signature()) {
            people.push(p);
        }
    }
    let mut entries = Vec::new();
    let mut pixels = Vec::new();
    for p in &people {
        let test = p.id as usize >= cfg.n_train_ids;
        for j in 0..cfg.imgs_per_id {
            let cam = j % cfg.n_cams;
            let split = match (test, j < cfg.n_cams) {
                (false, _) => Split::Train,
                (true, true) => Split::Query,
                (true, false) => Split::Gallery,
            };
            entries.push(ManifestEntry {
                path: format!("{}/{:04}_c{}_{:03}.png", split, p.id, cam, j),
                id: p.id,
                cam,
                split,
            });
            pixels.push(render(p, &cams[cam], cfg.hw, &mut rng));
        }
    }
    Ok(Dataset {
        hw: cfg.hw,
        norm: Normalization::default(),
        entries,
        pixels,
        notices: Vec::new(),
    })
}

fn write_png(path: &Path, chw: &[u8], (h, w): (usize, usize)) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let img = |msg: String| DataError::Image {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::create(path).map_err(io)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| img(e.to_string()))?;
    let plane = h * w;
    let mut hwc = vec![0u8; 3 * plane];
    for k in 0..plane {
        for c in 0..3 {
            hwc[3 * k + c] = chw[c * plane + k];
        }
    }
    writer.write_image_data(&hwc).map_err(|e| img(e.to_string()))?;
    writer.finish().map_err(|e| img(e.to_string()))?;
    Ok(())
}

/// Decode an 8-bit gray / RGB / RGBA PNG into CHW RGB pixels, resized to
/// `hw` by nearest-neighbour sampling when needed.
pub fn read_png(path: &Path, hw: (usize, usize)) -> Result<Vec<u8>> {
    let img = |msg: String| DataError::Image {
        path: path.to_path_buf(),
        msg,
    };
    if path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() != Some("png") {
        return Err(img("unsupported image format (expected .png)".into()));
    }
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| img(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| img("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| img(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(img(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(img(format!("unsupported color type {other:?}"))),
    };
    let (sh, sw) = (info.height as usize, info.width as usize);
    let (h, w) = hw;
    let mut out = vec![0u8; 3 * h * w];
    for r in 0..h {
        let sr = r * sh / h;
        for c in 0..w {
            let sc = c * sw / w;
            let base = (sr * sw + sc) * channels;
            for ch in 0..3 {
                let v = if channels < 3 { buf[base] } else { buf[base + ch] };
                out[ch * h * w + r * w + c] = v;
            }
        }
    }
    Ok(out)
}

/// Load the images listed in a manifest, paths relative to `root`.
pub fn load_folder_dataset(
    root: &Path,
    manifest_path: &Path,
    hw: (usize, usize),
    norm: Normalization,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest = DatasetManifest::parse(&text)?;
    let mut notices = Vec::new();
    if manifest.entries.is_empty() {
        notices.push(format!("{} lists no images", manifest_path.display()));
    }
    let pixels = manifest
        .entries
        .iter()
        .map(|e| read_png(&root.join(&e.path), hw))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        hw,
        norm,
        entries: manifest.entries,
        pixels,
        notices,
    })
}

/// Write the manifest text to any writer.
pub fn write_manifest(m: &DatasetManifest, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(m.to_text().as_bytes())
}
