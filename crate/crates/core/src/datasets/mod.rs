//! Synthetic shapes-and-captions corpus with exact saliency masks, its
//! on-disk manifest format and deterministic splits.
//!
//! Every image shows one or two coloured shapes on a noisy gray background.
//! The shape configuration (the set of colour/kind pairs) of sample `i` is
//! taken from a seeded permutation of all configurations, so the first
//! `n_configs` samples of a corpus are pairwise distinct. Everything else
//! about a sample is drawn from an RNG keyed on `(seed, i)`.

pub mod netpbm;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SanError};
use crate::params::named_rng;
use crate::tensor::Tensor;
use netpbm::Image8;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const KINDS: [&str; 3] = ["circle", "square", "triangle"];
const RGB: [[u8; 3]; 4] = [[220, 30, 30], [30, 190, 40], [30, 60, 230], [230, 220, 30]];
const PLACEMENT_RETRIES: usize = 100;
const RESEEDS: usize = 8;

pub const MANIFEST: &str = "manifest.jsonl";

/// Generator's record of one rendered shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub color: String,
    pub kind: String,
    /// Top-left corner and side of the bounding box, in pixels.
    pub x: usize,
    pub y: usize,
    pub size: usize,
    /// Number of rendered pixels.
    pub area: usize,
}

impl ShapeRecord {
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color, self.kind)
    }
}

/// One image with its mask and captions. `image` is `[3×H×W]` in `[0,1]`,
/// `mask` is `[H×W]` in `{0,1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub captions: Vec<String>,
    pub shapes: Vec<ShapeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    pub seed: u64,
    pub n_samples: usize,
    pub image_size: usize,
    /// 1 or 2.
    pub max_shapes: usize,
    pub captions_per_image: usize,
    /// Small unmentioned, unmasked specks in palette colours.
    pub distractors: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            seed: 0,
            n_samples: 200,
            image_size: 32,
            max_shapes: 2,
            captions_per_image: 2,
            distractors: 6,
        }
    }
}

/// Colour/kind index pairs making up one configuration, colours distinct.
type Config = Vec<(usize, usize)>;

/// All configurations with up to `max_shapes` shapes in distinct colours, in
/// a fixed enumeration order.
pub fn configurations(max_shapes: usize) -> Vec<Vec<(usize, usize)>> {
    let items: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|c| (0..KINDS.len()).map(move |k| (c, k)))
        .collect();
    let mut out: Vec<Config> = items.iter().map(|&i| vec![i]).collect();
    if max_shapes >= 2 {
        for (a, &ia) in items.iter().enumerate() {
            for &ib in &items[a + 1..] {
                if ia.0 != ib.0 {
                    out.push(vec![ia, ib]);
                }
            }
        }
    }
    out
}

/// Renders the corpus in memory. Pure function of `params`.
pub fn generate_corpus(params: &CorpusParams) -> Result<Vec<Sample>> {
    if params.n_samples == 0 {
        return Err(SanError::Usage("corpus needs at least one sample".into()));
    }
    if !(1..=2).contains(&params.max_shapes) {
        return Err(SanError::Config(format!(
            "max_shapes must be 1 or 2, got {}",
            params.max_shapes
        )));
    }
    if params.captions_per_image == 0 {
        return Err(SanError::Config("captions_per_image must be positive".into()));
    }
    if params.image_size < 16 {
        return Err(SanError::Config("image_size must be at least 16".into()));
    }
    let mut configs = configurations(params.max_shapes);
    configs.shuffle(&mut named_rng(params.seed, "corpus.configurations"));
    (0..params.n_samples)
        .map(|i| {
            let config = &configs[i % configs.len()];
            generate_sample(params, i, config)
        })
        .collect()
}

fn generate_sample(params: &CorpusParams, index: usize, config: &Config) -> Result<Sample> {
    let id = format!("{index:06}");
    for attempt in 0..RESEEDS {
        let mut rng = named_rng(params.seed, &format!("corpus.sample.{index}.{attempt}"));
        if let Some(s) = render(params, &id, config, &mut rng) {
            return Ok(s);
        }
    }
    Err(SanError::Data(format!(
        "sample {id}: could not place {} shapes after {RESEEDS} reseeds",
        config.len()
    )))
}

fn inside(kind: usize, size: usize, u: usize, v: usize) -> bool {
    let half = size as f64 / 2.0;
    let (fu, fv) = (u as f64 + 0.5 - half, v as f64 + 0.5);
    match KINDS[kind] {
        "circle" => fu * fu + (fv - half) * (fv - half) <= half * half,
        "square" => true,
        _ => fu.abs() <= fv / 2.0,
    }
}

fn render(params: &CorpusParams, id: &str, config: &Config, rng: &mut impl Rng) -> Option<Sample> {
    let s = params.image_size;
    let (lo, hi) = ((s * 28) / 100, (s * 42) / 100);
    let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
    for _ in config {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let size = rng.gen_range(lo..=hi);
            let x = rng.gen_range(1..=s - size - 1);
            let y = rng.gen_range(1..=s - size - 1);
            // bounding boxes kept at least two pixels apart
            let clear = boxes.iter().all(|&(bx, by, bs)| {
                x >= bx + bs + 2 || bx >= x + size + 2 || y >= by + bs + 2 || by >= y + size + 2
            });
            if clear {
                placed = Some((x, y, size));
                break;
            }
        }
        boxes.push(placed?);
    }

    let mut rgb = vec![0u8; 3 * s * s];
    for p in 0..s * s {
        let level = (128 + rng.gen_range(-40i32..=40)) as u8;
        rgb[3 * p..3 * p + 3].fill(level);
    }
    for _ in 0..params.distractors {
        for _ in 0..PLACEMENT_RETRIES {
            let d = rng.gen_range(2..=3);
            let (x, y) = (rng.gen_range(0..=s - d), rng.gen_range(0..=s - d));
            let clear = boxes.iter().all(|&(bx, by, bs)| {
                x >= bx + bs + 1 || bx >= x + d + 1 || y >= by + bs + 1 || by >= y + d + 1
            });
            if !clear {
                continue;
            }
            let color = RGB[rng.gen_range(0..RGB.len())];
            for v in y..y + d {
                for u in x..x + d {
                    let p = v * s + u;
                    for (c, &base) in color.iter().enumerate() {
                        rgb[3 * p + c] = (base as i32 + rng.gen_range(-12i32..=12)).clamp(0, 255) as u8;
                    }
                }
            }
            break;
        }
    }
    let mut mask = vec![0u8; s * s];
    let mut shapes = Vec::new();
    for (&(color, kind), &(x, y, size)) in config.iter().zip(&boxes) {
        let mut area = 0;
        for v in 0..size {
            for u in 0..size {
                if !inside(kind, size, u, v) {
                    continue;
                }
                let p = (y + v) * s + x + u;
                for (c, &base) in RGB[color].iter().enumerate() {
                    let jitter = rng.gen_range(-12i32..=12);
                    rgb[3 * p + c] = (base as i32 + jitter).clamp(0, 255) as u8;
                }
                mask[p] = 255;
                area += 1;
            }
        }
        shapes.push(ShapeRecord {
            color: COLORS[color].into(),
            kind: KINDS[kind].into(),
            x,
            y,
            size,
            area,
        });
    }
    let captions = captions(&shapes, params.captions_per_image, rng);
    Some(Sample {
        id: id.to_string(),
        image: image_tensor(s, s, &rgb),
        mask: mask_tensor(s, s, &mask).expect("generator writes 0/255 only"),
        captions,
        shapes,
    })
}

fn relation(a: &ShapeRecord, b: &ShapeRecord) -> &'static str {
    let center = |r: &ShapeRecord| (r.x as f64 + r.size as f64 / 2.0, r.y as f64 + r.size as f64 / 2.0);
    let ((ax, ay), (bx, by)) = (center(a), center(b));
    let (dx, dy) = (bx - ax, by - ay);
    if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            "right of"
        } else {
            "left of"
        }
    } else if dy >= 0.0 {
        "below"
    } else {
        "above"
    }
}

fn captions(shapes: &[ShapeRecord], count: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut templates: Vec<String> = match shapes {
        [one] => {
            let d = one.phrase();
            vec![
                format!("a {d}"),
                format!("there is a {d}"),
                format!("a {d} on a gray background"),
                format!("the image shows a {d}"),
                format!("a single {d}"),
            ]
        }
        [first, second] => {
            let (a, b) = if rng.gen_bool(0.5) { (first, second) } else { (second, first) };
            let (da, db) = (a.phrase(), b.phrase());
            vec![
                format!("a {da} and a {db}"),
                format!("the {db} is {} the {da}", relation(a, b)),
                format!("there is a {da} next to a {db}"),
                format!("a {da} with a {db}"),
                format!("the image shows a {da} and a {db}"),
            ]
        }
        _ => unreachable!("one or two shapes per image"),
    };
    templates.shuffle(rng);
    (0..count).map(|i| templates[i % templates.len()].clone()).collect()
}

fn image_tensor(h: usize, w: usize, rgb: &[u8]) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = f64::from(rgb[3 * p + c]) / 255.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

fn mask_tensor(h: usize, w: usize, gray: &[u8]) -> Result<Tensor> {
    let data = gray
        .iter()
        .map(|&v| match v {
            0 => Ok(0.0),
            255 => Ok(1.0),
            other => Err(SanError::Data(format!("mask value {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_parts(vec![h, w], data))
}

fn image_bytes(t: &Tensor) -> Image8 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut data = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[3 * p + c] = (t.data()[c * h * w + p] * 255.0).round() as u8;
        }
    }
    Image8 {
        width: w,
        height: h,
        channels: 3,
        data,
    }
}

/// Encodes `[H×W]` values in `[0,1]` as an 8-bit PGM raster.
pub fn gray_bytes(t: &Tensor) -> Image8 {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Image8 {
        width: w,
        height: h,
        channels: 1,
        data: t
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shapes: Vec<ShapeRecord>,
}

/// Writes `images/*.ppm`, `masks/*.pgm` and `manifest.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| SanError::io(&p, e))?;
    }
    let mut manifest = Vec::new();
    for s in samples {
        let rec = ManifestRecord {
            id: s.id.clone(),
            image: format!("images/{}.ppm", s.id),
            mask: format!("masks/{}.pgm", s.id),
            captions: s.captions.clone(),
            shapes: s.shapes.clone(),
        };
        netpbm::write(&dir.join(&rec.image), &image_bytes(&s.image))?;
        netpbm::write(&dir.join(&rec.mask), &gray_bytes(&s.mask))?;
        serde_json::to_writer(&mut manifest, &rec).expect("serializable record");
        manifest.push(b'\n');
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| SanError::io(&path, e))?;
    f.write_all(&manifest).map_err(|e| SanError::io(&path, e))?;
    Ok(path)
}

/// Loads every sample listed in a manifest. Paths are relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| SanError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| SanError::Data(format!("{}:{}: {msg}", path.display(), n + 1));
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(at(format!("duplicate id {:?}", rec.id)));
        }
        if rec.captions.is_empty() {
            return Err(at("record has no captions".into()));
        }
        let img = netpbm::read(&base.join(&rec.image)).map_err(|e| at(e.to_string()))?;
        let mask = netpbm::read(&base.join(&rec.mask)).map_err(|e| at(e.to_string()))?;
        if img.channels != 3 || mask.channels != 1 {
            return Err(at("expected a PPM image and a PGM mask".into()));
        }
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(at("image and mask sizes differ".into()));
        }
        out.push(Sample {
            image: image_tensor(img.height, img.width, &img.data),
            mask: mask_tensor(mask.height, mask.width, &mask.data).map_err(|e| at(e.to_string()))?,
            id: rec.id,
            captions: rec.captions,
            shapes: rec.shapes,
        });
    }
    Ok(out)
}

/// Index lists of a three-way split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation of `0..n` cut into contiguous train/val/test slices.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SanError::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut named_rng(seed, "split"));
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_val = (((n as f64) * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}
