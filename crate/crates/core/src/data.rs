//! Toy whole-slide images, tiling with background filtering, and the
//! on-disk patch dataset.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{data_err, param_err, Error, Result};
use crate::eval::{BENIGN, MALIGNANT};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Mask value per pixel.
pub const MASK_BACKGROUND: u8 = 0;
pub const MASK_BENIGN: u8 = 1;
pub const MASK_MALIGNANT: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_wsi: usize,
    pub malignant_fraction: f64,
    pub wsi_side: usize,
    pub patch_side: usize,
    /// Pixels darker than this (mean over channels) count as background.
    pub background_intensity: f64,
    /// Patches with more than this fraction of background pixels are dropped.
    pub background_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_wsi: 40,
            malignant_fraction: 0.59,
            wsi_side: 256,
            patch_side: 32,
            background_intensity: 0.05,
            background_fraction: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyWsi {
    pub wsi_id: String,
    pub image: Tensor,
    pub label: u8,
    /// Row-major per-pixel class map.
    pub mask: Vec<u8>,
}

impl ToyWsi {
    pub fn side(&self) -> usize {
        self.image.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub patch_id: String,
    pub wsi_id: String,
    pub image: Tensor,
    pub label: u8,
}

/// Generate `n_wsi` slides; `round(n_wsi · malignant_fraction)` of them carry
/// malignant regions.
pub fn generate_toy_wsis(cfg: &DataConfig, rng: &Rng) -> Result<Vec<ToyWsi>> {
    if cfg.n_wsi < 10 {
        return Err(param_err!("need at least 10 slides, got {}", cfg.n_wsi));
    }
    if !(0.0..=1.0).contains(&cfg.malignant_fraction) {
        return Err(param_err!("malignant fraction {} outside [0, 1]", cfg.malignant_fraction));
    }
    let n_mal = (cfg.n_wsi as f64 * cfg.malignant_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..cfg.n_wsi).map(|i| if i < n_mal { MALIGNANT } else { BENIGN }).collect();
    rng.fork(0).shuffle(&mut labels);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &label)| render_wsi(&format!("wsi{i:03}"), label, cfg.wsi_side, &mut rng.fork(1000 + i as u64)))
        .collect())
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2) <= 1.0
    }
}

/// Smooth tissue with low-frequency shading; malignant slides add speckled
/// clusters of denser, darker texture.
fn render_wsi(wsi_id: &str, label: u8, side: usize, rng: &mut Rng) -> ToyWsi {
    let s = side as f64;
    let tissue: Vec<Ellipse> = (0..4)
        .map(|_| Ellipse {
            cy: rng.uniform_range(0.3, 0.7) * s,
            cx: rng.uniform_range(0.3, 0.7) * s,
            ry: rng.uniform_range(0.2, 0.38) * s,
            rx: rng.uniform_range(0.2, 0.38) * s,
        })
        .collect();
    let mut mask: Vec<u8> = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
            if tissue.iter().any(|e| e.contains(y, x)) {
                MASK_BENIGN
            } else {
                MASK_BACKGROUND
            }
        })
        .collect();
    if label == MALIGNANT {
        let tissue_px: Vec<usize> = (0..side * side).filter(|&i| mask[i] == MASK_BENIGN).collect();
        let clusters = 2 + rng.below(2);
        for _ in 0..clusters {
            let c = tissue_px[rng.below(tissue_px.len())];
            let blob = Ellipse {
                cy: (c / side) as f64,
                cx: (c % side) as f64,
                ry: rng.uniform_range(0.18, 0.30) * s,
                rx: rng.uniform_range(0.18, 0.30) * s,
            };
            for (i, m) in mask.iter_mut().enumerate() {
                if *m == MASK_BENIGN && blob.contains((i / side) as f64 + 0.5, (i % side) as f64 + 0.5) {
                    *m = MASK_MALIGNANT;
                }
            }
        }
    }

    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
            let freq = rng.uniform_range(1.0, 2.5) * std::f64::consts::TAU / s;
            (freq * angle.cos(), freq * angle.sin(), rng.uniform_range(0.0, std::f64::consts::TAU))
        })
        .collect();
    let benign_tint = [0.80 + 0.1 * rng.uniform(), 0.55 + 0.1 * rng.uniform(), 0.85];
    let malignant_tint = [0.45, 0.25 + 0.05 * rng.uniform(), 0.70];
    let mut data = Vec::with_capacity(side * side * 3);
    for (i, &m) in mask.iter().enumerate() {
        let (y, x) = ((i / side) as f64, (i % side) as f64);
        let px: [f64; 3] = match m {
            MASK_BACKGROUND => {
                let v = 0.02 * rng.uniform();
                [v, v, v]
            }
            MASK_BENIGN => {
                let shade = waves.iter().map(|(fy, fx, ph)| (fy * y + fx * x + ph).sin()).sum::<f64>() / 3.0;
                let k = 0.75 + 0.2 * shade;
                benign_tint.map(|c| c * k)
            }
            _ => {
                let nucleus = rng.bernoulli(0.15);
                let k = if nucleus { 0.35 } else { 0.8 + 0.4 * rng.uniform() };
                malignant_tint.map(|c| c * k)
            }
        };
        data.extend(px.map(|v| v.clamp(0.0, 1.0)));
    }
    ToyWsi { wsi_id: wsi_id.to_string(), image: Tensor::new(&[side, side, 3], data).expect("slide shape"), label, mask }
}

/// Non-overlapping tiles of `patch_side`, minus background-dominated ones.
/// A tile is malignant when more than half of its tissue pixels are.
pub fn tile_and_filter(wsi: &ToyWsi, patch_side: usize, cfg: &DataConfig) -> Result<Vec<Patch>> {
    let side = wsi.side();
    if patch_side == 0 || !side.is_multiple_of(patch_side) {
        return Err(param_err!("patch side {patch_side} does not divide slide side {side}"));
    }
    let grid = side / patch_side;
    let src = wsi.image.data();
    let mut out = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut pixels = Vec::with_capacity(patch_side * patch_side * 3);
            let (mut dark, mut tissue, mut malignant) = (0, 0, 0);
            for y in gy * patch_side..(gy + 1) * patch_side {
                let row = (y * side + gx * patch_side) * 3;
                let row_px = &src[row..row + patch_side * 3];
                pixels.extend_from_slice(row_px);
                for (k, px) in row_px.chunks(3).enumerate() {
                    if px.iter().sum::<f64>() / 3.0 < cfg.background_intensity {
                        dark += 1;
                    }
                    match wsi.mask[y * side + gx * patch_side + k] {
                        MASK_BENIGN => tissue += 1,
                        MASK_MALIGNANT => {
                            tissue += 1;
                            malignant += 1
                        }
                        _ => {}
                    }
                }
            }
            if dark as f64 > cfg.background_fraction * (patch_side * patch_side) as f64 {
                continue;
            }
            let label = if 2 * malignant > tissue { MALIGNANT } else { BENIGN };
            out.push(Patch {
                patch_id: format!("{}_r{gy}_c{gx}", wsi.wsi_id),
                wsi_id: wsi.wsi_id.clone(),
                image: Tensor::new(&[patch_side, patch_side, 3], pixels)?,
                label,
            });
        }
    }
    Ok(out)
}

/// Real patches of every slide plus slide-level labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub wsi_labels: Vec<(String, u8)>,
    pub patches: Vec<Patch>,
}

impl Dataset {
    pub fn from_wsis(wsis: &[ToyWsi], cfg: &DataConfig) -> Result<Self> {
        let mut patches = Vec::new();
        for w in wsis {
            patches.extend(tile_and_filter(w, cfg.patch_side, cfg)?);
        }
        Ok(Self { wsi_labels: wsis.iter().map(|w| (w.wsi_id.clone(), w.label)).collect(), patches })
    }

    pub fn patches_of<'a>(&'a self, wsi_ids: &'a [String]) -> impl Iterator<Item = &'a Patch> + 'a {
        self.patches.iter().filter(move |p| wsi_ids.contains(&p.wsi_id))
    }

    /// Writes `wsis.csv`, `patches.csv` and one PNG per patch under `patches/`.
    /// Returns every file written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let pdir = dir.join("patches");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut written = Vec::new();
        let wsis_csv = dir.join("wsis.csv");
        let mut w = csv_writer(&wsis_csv)?;
        for (id, label) in &self.wsi_labels {
            w.serialize(WsiRow { wsi_id: id.clone(), label: *label })?;
        }
        w.flush().map_err(|e| Error::io(&wsis_csv, e))?;
        written.push(wsis_csv);
        let patches_csv = dir.join("patches.csv");
        let mut w = csv_writer(&patches_csv)?;
        for p in &self.patches {
            let file = format!("patches/{}.png", p.patch_id);
            save_png(&p.image, &dir.join(&file))?;
            written.push(dir.join(&file));
            w.serialize(PatchRow { patch_id: p.patch_id.clone(), wsi_id: p.wsi_id.clone(), label: p.label, file })?;
        }
        w.flush().map_err(|e| Error::io(&patches_csv, e))?;
        written.push(patches_csv);
        Ok(written)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let wsi_labels = read_csv::<WsiRow>(&dir.join("wsis.csv"))?.into_iter().map(|r| (r.wsi_id, r.label)).collect();
        let patches = read_csv::<PatchRow>(&dir.join("patches.csv"))?
            .into_iter()
            .map(|r| {
                Ok(Patch { image: load_png(&dir.join(&r.file))?, patch_id: r.patch_id, wsi_id: r.wsi_id, label: r.label })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self { wsi_labels, patches };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        for p in &self.patches {
            if !self.wsi_labels.iter().any(|(id, _)| *id == p.wsi_id) {
                return Err(data_err!("patch {} references unknown slide {}", p.patch_id, p.wsi_id));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct WsiRow {
    wsi_id: String,
    label: u8,
}

#[derive(Serialize, Deserialize)]
struct PatchRow {
    patch_id: String,
    wsi_id: String,
    label: u8,
    file: String,
}

/// Full slide image and mask as PNGs (mask scaled to 0/127/254).
pub fn write_wsi_images(wsi: &ToyWsi, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let img = dir.join(format!("{}.png", wsi.wsi_id));
    save_png(&wsi.image, &img)?;
    let side = wsi.side() as u32;
    let mask = GrayImage::from_fn(side, side, |x, y| Luma([wsi.mask[(y * side + x) as usize] * 127]));
    let mask_path = dir.join(format!("{}_mask.png", wsi.wsi_id));
    mask.save(&mask_path)?;
    Ok(vec![img, mask_path])
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

pub(crate) fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(f).deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// 8-bit RGB PNG; values are rounded from `[0, 1]`.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let &[h, w, 3] = img.shape() else {
        return Err(data_err!("PNG output needs H×W×3, got {:?}", img.shape()));
    };
    let d = img.data();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * 3;
        Rgb([q(d[i]), q(d[i + 1]), q(d[i + 2])])
    });
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Round every value to the nearest multiple of 1/255, as a PNG would.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
