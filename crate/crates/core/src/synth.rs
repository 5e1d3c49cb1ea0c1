//! Synthetic shape images for desk-scale experiments.
//!
//! Dataset A is a balanced three-class pretext set (circle, square,
//! triangle). Dataset B reuses the renderer as a lesion set: squares are
//! melanoma, triangles seborrheic keratosis, circles nevi.

use std::path::{Path, PathBuf};

use crate::data::{write_ground_truth, write_metadata, Dataset, Diagnosis, LesionRecord, Origin, Sex};
use crate::imageproc::{preprocess_image, write_netpbm, ImageTensor, PreprocessProfile};
use crate::nn::Rng;
use crate::train::Sample;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> Vec<f32> {
        let mut v = vec![0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    pub fn diagnosis(self) -> Diagnosis {
        match self {
            Shape::Circle => Diagnosis::Nevus,
            Shape::Square => Diagnosis::Melanoma,
            Shape::Triangle => Diagnosis::SeborrheicKeratosis,
        }
    }

    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                // same area as the circle
                let h = r * std::f64::consts::PI.sqrt() / 2.0;
                dx.abs() <= h && dy.abs() <= h
            }
            Shape::Triangle => {
                // upright equilateral triangle, circumradius chosen for equal area
                let rc = r * 1.555;
                let top = cy - rc;
                let base = cy + rc / 2.0;
                if y < top || y > base {
                    return false;
                }
                let half = (y - top) / (base - top) * rc * 3f64.sqrt() / 2.0;
                dx.abs() <= half
            }
        }
    }
}

/// Radius (fraction of the image side) and fill level ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeStyle {
    pub radius: (f64, f64),
    pub level: (f64, f64),
}

impl ShapeStyle {
    pub const PLAIN: ShapeStyle = ShapeStyle {
        radius: (0.17, 0.27),
        level: (150.0, 230.0),
    };

    /// Moves the ranges towards larger, darker lesions; `cue` in [0, 1].
    pub fn larger_darker(cue: f64) -> ShapeStyle {
        let p = ShapeStyle::PLAIN;
        ShapeStyle {
            radius: (p.radius.0 + 0.06 * cue, p.radius.1 + 0.06 * cue),
            level: (p.level.0 - 50.0 * cue, p.level.1 - 50.0 * cue),
        }
    }
}

/// RGB rendering in 0..=255 of one shape on a noisy background.
pub fn render_shape(shape: Shape, size: usize, rng: &mut Rng) -> ImageTensor {
    render_styled(shape, size, ShapeStyle::PLAIN, rng)
}

pub fn render_styled(shape: Shape, size: usize, style: ShapeStyle, rng: &mut Rng) -> ImageTensor {
    let s = size as f64;
    let r = rng.uniform(style.radius.0, style.radius.1) * s;
    let cx = rng.uniform(0.35, 0.65) * s;
    let cy = rng.uniform(0.35, 0.65) * s;
    let bg = [rng.uniform(30.0, 90.0), rng.uniform(30.0, 90.0), rng.uniform(30.0, 90.0)];
    let level = rng.uniform(style.level.0, style.level.1);
    let tint = [rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0)];
    let noise = 10.0;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampling for soft edges
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if shape.contains(x as f64 + ox, y as f64 + oy, cx, cy, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let v = bg[c] * (1.0 - cover) + level * tint[c] * cover + noise * rng.normal();
                data.push(v.clamp(0.0, 255.0).round() as f32);
            }
        }
    }
    ImageTensor::new(size, size, 3, data).expect("rendered image shape")
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub id: String,
    pub shape: Shape,
    pub image: ImageTensor,
}

/// Dataset A: `n` images cycling through the three shapes, in shuffled order.
pub fn pretext_dataset(n: usize, size: usize, seed: u64) -> Vec<SynthImage> {
    let mut rng = Rng::new(seed);
    let mut shapes: Vec<Shape> = (0..n).map(|i| Shape::ALL[i % 3]).collect();
    rng.shuffle(&mut shapes);
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, shape)| SynthImage {
            id: format!("PRE_{i:05}"),
            shape,
            image: render_shape(shape, size, &mut rng),
        })
        .collect()
}

/// One-hot shape samples through a preprocessing profile.
pub fn pretext_samples(images: &[SynthImage], profile: &PreprocessProfile) -> Result<Vec<Sample>> {
    images
        .iter()
        .map(|s| {
            let x = preprocess_image(&s.image, profile, None)?;
            Ok(Sample::new(s.id.clone(), vec![x.into_tensor()], s.shape.one_hot()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionSetConfig {
    pub count: usize,
    pub size: usize,
    /// Fraction of squares (melanoma).
    pub melanoma_fraction: f64,
    /// Fraction of triangles (seborrheic keratosis).
    pub keratosis_fraction: f64,
    /// Strength of the larger/darker melanoma cue, in [0, 1].
    pub melanoma_cue: f64,
    pub seed: u64,
}

impl LesionSetConfig {
    /// Dataset B: 240 images at 32×32 with a 20% melanoma minority.
    pub fn dataset_b(seed: u64) -> Self {
        LesionSetConfig {
            count: 240,
            size: 32,
            melanoma_fraction: 0.20,
            keratosis_fraction: 0.15,
            melanoma_cue: DATASET_B_CUE,
            seed,
        }
    }
}

pub const DATASET_B_CUE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct LesionSet {
    pub dataset: Dataset,
    /// Images in dataset (image_id) order.
    pub images: Vec<ImageTensor>,
}

impl LesionSet {
    pub fn image(&self, image_id: &str) -> Option<&ImageTensor> {
        let idx = self
            .dataset
            .records()
            .binary_search_by(|r| r.image_id.as_str().cmp(image_id))
            .ok()?;
        self.images.get(idx)
    }
}

/// Exact class counts (rounded), labels shuffled, synthetic age and sex.
pub fn lesion_dataset(config: &LesionSetConfig) -> Result<LesionSet> {
    let f = (config.melanoma_fraction, config.keratosis_fraction);
    if !(0.0..=1.0).contains(&f.0) || !(0.0..=1.0).contains(&f.1) || f.0 + f.1 > 1.0 {
        return Err(Error::InvalidArgument(format!("class fractions {f:?} out of range")));
    }
    let n = config.count;
    let mel = (n as f64 * f.0).round() as usize;
    let sk = ((n as f64 * f.1).round() as usize).min(n - mel);
    let mut shapes: Vec<Shape> = std::iter::repeat(Shape::Square)
        .take(mel)
        .chain(std::iter::repeat(Shape::Triangle).take(sk))
        .chain(std::iter::repeat(Shape::Circle).take(n - mel - sk))
        .collect();
    let mut rng = Rng::new(config.seed);
    rng.shuffle(&mut shapes);
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for (i, shape) in shapes.into_iter().enumerate() {
        let id = format!("SYN_{i:05}");
        let mut record = LesionRecord::new(&id, shape.diagnosis());
        record.image_path = PathBuf::from(format!("{id}.ppm"));
        if rng.next_f64() < 0.9 {
            let centre = if shape == Shape::Square { 62.0 } else { 48.0 };
            record.age_years = Some((centre + 12.0 * rng.normal()).clamp(5.0, 90.0).round());
        }
        record.sex = match rng.below(10) {
            0..=4 => Sex::Male,
            5..=8 => Sex::Female,
            _ => Sex::Unknown,
        };
        records.push(record);
        let style = if shape == Shape::Square {
            ShapeStyle::larger_darker(config.melanoma_cue)
        } else {
            ShapeStyle::PLAIN
        };
        images.push(render_styled(shape, config.size, style, &mut rng));
    }
    Ok(LesionSet {
        dataset: Dataset::new(records, Origin::External)?,
        images,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrittenSet {
    pub images_dir: PathBuf,
    pub ground_truth: PathBuf,
    pub metadata: PathBuf,
}

/// Writes `images/<id>.ppm`, `ground_truth.csv` and `metadata.csv` under `dir`.
pub fn write_lesion_set(set: &LesionSet, dir: &Path) -> Result<WrittenSet> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for (record, image) in set.dataset.records().iter().zip(&set.images) {
        write_netpbm(image, &images_dir.join(format!("{}.ppm", record.image_id)))?;
    }
    let ground_truth = dir.join("ground_truth.csv");
    let metadata = dir.join("metadata.csv");
    write_ground_truth(&set.dataset, &ground_truth)?;
    write_metadata(&set.dataset, &metadata)?;
    Ok(WrittenSet {
        images_dir,
        ground_truth,
        metadata,
    })
}
