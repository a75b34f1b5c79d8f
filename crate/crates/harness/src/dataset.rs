//! Synthetic misaligned scenes.
//!
//! Each scene is a set of colored geometric shapes (axis-aligned rectangles
//! and discs) on a background, rendered from the true mask. The training
//! mask is the same set of shapes with each shape independently shifted by
//! up to `jitter` pixels, reproducing the label drift of generated data:
//! images and supervision disagree in a band around object boundaries and
//! nowhere else.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use segbound::morphology::SemanticMask;
use segbound::npy::{self, NpyArray};
use segbound::rng::RngStream;
use segbound::tensor::Tensor;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disc,
}

/// A shape instance in pixel coordinates. For discs `half_h` is the radius
/// and `half_w` is unused.
#[derive(Clone, Copy, Debug)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub class: usize,
    pub cy: i64,
    pub cx: i64,
    pub half_h: i64,
    pub half_w: i64,
}

impl PlacedShape {
    pub fn contains(&self, y: i64, x: i64) -> bool {
        match self.kind {
            ShapeKind::Rect => {
                (y - self.cy).abs() <= self.half_h && (x - self.cx).abs() <= self.half_w
            }
            ShapeKind::Disc => {
                let dy = y - self.cy;
                let dx = x - self.cx;
                dy * dy + dx * dx <= self.half_h * self.half_h
            }
        }
    }

    pub fn shifted(&self, dy: i64, dx: i64) -> PlacedShape {
        PlacedShape {
            cy: self.cy + dy,
            cx: self.cx + dx,
            ..*self
        }
    }
}

/// Paints shapes in order over a class-0 background; later shapes win.
pub fn rasterize(shapes: &[PlacedShape], height: usize, width: usize) -> Tensor<i32> {
    let mut grid = Tensor::filled(vec![height, width], 0i32);
    for shape in shapes {
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y as i64, x as i64) {
                    grid.set2(y, x, shape.class as i32);
                }
            }
        }
    }
    grid
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GenOptions {
    pub n_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Maximum per-shape mask shift in pixels.
    pub jitter: i64,
    pub seed: u64,
    /// Amplitude of per-pixel color noise.
    pub pixel_noise: f64,
}

impl GenOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.height < 8 || self.width < 8 {
            return Err(HarnessError::Dataset(
                "need at least one scene of at least 8x8".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(HarnessError::Dataset(
                "need a background class plus at least one shape class".into(),
            ));
        }
        if self.jitter < 0 {
            return Err(HarnessError::Dataset("jitter must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// RGB image in [0, 1], `[H, W, 3]`.
    pub image: Tensor<f64>,
    /// Pixel-aligned labels.
    pub true_mask: SemanticMask,
    /// Jittered labels used for supervision.
    pub train_mask: SemanticMask,
}

/// Distinct base color per class; class 0 is a dark background and shape
/// classes walk the hue wheel at the golden angle.
pub fn class_color(class: usize) -> [f64; 3] {
    if class == 0 {
        return [0.15, 0.15, 0.18];
    }
    let hue = ((class - 1) as f64 * 137.508).rem_euclid(360.0);
    hsv_to_rgb(hue, 0.75, 0.85)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn uniform_in(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

/// Mask drift per axis, at most `bound` pixels. Mostly zero or one pixel
/// with occasional larger drift, matching how generated images miss their
/// masks: small local slips with rare bigger excursions.
fn jitter_offset(rng: &mut RngStream, bound: i64) -> i64 {
    if bound == 0 {
        return 0;
    }
    let r = rng.next_f64();
    let magnitude = if r < 0.55 {
        0
    } else if r < 0.85 {
        1.min(bound)
    } else {
        bound
    };
    if magnitude == 0 {
        0
    } else if rng.next_below(2) == 0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Integer in [lo, hi] inclusive.
fn int_in(rng: &mut RngStream, lo: i64, hi: i64) -> i64 {
    if hi <= lo {
        return lo;
    }
    lo + rng.next_below((hi - lo + 1) as u64) as i64
}

/// Generates one scene, consuming draws from the stream in a fixed order:
/// per-class color jitter, shape count, shape parameters, per-shape mask
/// offsets, then pixel noise.
pub fn generate_scene(opts: &GenOptions, rng: &mut RngStream) -> Result<SyntheticScene> {
    let (h, w, classes) = (opts.height, opts.width, opts.num_classes);

    // mild per-scene style variation; large offsets would let the model
    // identify scenes by color and memorize their jittered edges
    let mut colors = Vec::with_capacity(classes);
    for class in 0..classes {
        let base = class_color(class);
        let mut color = [0.0; 3];
        for (o, &b) in color.iter_mut().zip(&base) {
            *o = (b + uniform_in(rng, -0.005, 0.005)).clamp(0.0, 1.0);
        }
        colors.push(color);
    }

    // several mid-sized shapes; overlaps allowed (later shapes win), so
    // scenes carry a mix of shape-background and shape-shape boundaries
    let min_size = (h.min(w) as i64 / 8).max(2);
    let max_size = (h.min(w) as i64 / 4).max(min_size + 1);
    let n_shapes = 2 + rng.next_below(3) as usize;
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind = if rng.next_below(2) == 0 {
            ShapeKind::Rect
        } else {
            ShapeKind::Disc
        };
        let class = 1 + rng.next_below(classes as u64 - 1) as usize;
        let (half_h, half_w) = match kind {
            ShapeKind::Rect => {
                (int_in(rng, min_size, max_size), int_in(rng, min_size, max_size))
            }
            ShapeKind::Disc => {
                let r = int_in(rng, min_size, max_size);
                (r, r)
            }
        };
        // keep the jittered copy inside the frame
        let margin_y = half_h + opts.jitter;
        let margin_x = half_w + opts.jitter;
        let cy = int_in(rng, margin_y, h as i64 - 1 - margin_y);
        let cx = int_in(rng, margin_x, w as i64 - 1 - margin_x);
        shapes.push(PlacedShape {
            kind,
            class,
            cy,
            cx,
            half_h,
            half_w,
        });
    }

    let jittered: Vec<PlacedShape> = shapes
        .iter()
        .map(|s| {
            let dy = jitter_offset(rng, opts.jitter);
            let dx = jitter_offset(rng, opts.jitter);
            s.shifted(dy, dx)
        })
        .collect();

    let true_grid = rasterize(&shapes, h, w);
    let train_grid = rasterize(&jittered, h, w);

    let mut image = Tensor::zeros(vec![h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let color = colors[true_grid.at2(y, x) as usize];
            let px = image.row3_mut(y, x);
            px.copy_from_slice(&color);
        }
    }
    if opts.pixel_noise > 0.0 {
        for v in image.data_mut() {
            *v = (*v + uniform_in(rng, -opts.pixel_noise, opts.pixel_noise)).clamp(0.0, 1.0);
        }
    }

    Ok(SyntheticScene {
        image,
        true_mask: SemanticMask::new(true_grid, classes)?,
        train_mask: SemanticMask::new(train_grid, classes)?,
    })
}

pub fn generate_scenes(opts: &GenOptions) -> Result<Vec<SyntheticScene>> {
    opts.validate()?;
    let mut rng = RngStream::new(opts.seed);
    (0..opts.n_scenes)
        .map(|_| generate_scene(opts, &mut rng))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneFiles {
    pub image: String,
    pub true_mask: String,
    pub train_mask: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub jitter: i64,
    pub seed: u64,
    pub pixel_noise: f64,
    pub scenes: Vec<SceneFiles>,
}

/// Generates and writes a dataset directory: NPY pairs plus manifest.json.
pub fn write_dataset(opts: &GenOptions, dir: impl AsRef<Path>) -> Result<DatasetMeta> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let scenes = generate_scenes(opts)?;
    let mut files = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let entry = SceneFiles {
            image: format!("scene_{i:04}_image.npy"),
            true_mask: format!("scene_{i:04}_true.npy"),
            train_mask: format!("scene_{i:04}_train.npy"),
        };
        npy::write_tensor(dir.join(&entry.image), &scene.image)?;
        npy::write_tensor(dir.join(&entry.true_mask), scene.true_mask.grid())?;
        npy::write_tensor(dir.join(&entry.train_mask), scene.train_mask.grid())?;
        files.push(entry);
    }
    let meta = DatasetMeta {
        height: opts.height,
        width: opts.width,
        num_classes: opts.num_classes,
        jitter: opts.jitter,
        seed: opts.seed,
        pixel_noise: opts.pixel_noise,
        scenes: files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(meta)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetMeta, Vec<SyntheticScene>)> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut scenes = Vec::with_capacity(meta.scenes.len());
    for entry in &meta.scenes {
        let image = match npy::read_tensor(dir.join(&entry.image))? {
            NpyArray::F64(t) => t,
            NpyArray::F32(t) => t.to_f64(),
            other => {
                return Err(HarnessError::Dataset(format!(
                    "{} has non-float dtype {}",
                    entry.image,
                    other.dtype()
                )))
            }
        };
        let true_mask =
            SemanticMask::new(npy::read_tensor(dir.join(&entry.true_mask))?.to_i32()?, meta.num_classes)?;
        let train_mask = SemanticMask::new(
            npy::read_tensor(dir.join(&entry.train_mask))?.to_i32()?,
            meta.num_classes,
        )?;
        scenes.push(SyntheticScene {
            image,
            true_mask,
            train_mask,
        });
    }
    Ok((meta, scenes))
}

/// Fraction of pixels on which the two masks disagree.
pub fn mask_disagreement(a: &SemanticMask, b: &SemanticMask) -> f64 {
    let total = a.grid().len();
    let differing = a
        .grid()
        .data()
        .iter()
        .zip(b.grid().data())
        .filter(|(x, y)| x != y)
        .count();
    differing as f64 / total as f64
}
