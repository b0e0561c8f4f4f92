//! Synthetic scene generation and rasterization.
//!
//! Scenes are parameterized shape layouts stored inside the dataset file;
//! images are rendered deterministically from those parameters at load
//! time. The generator also emits an auxiliary-box file imitating the
//! output of a class-agnostic segmenter: the minimum external rectangle of
//! every object mask (optionally jittered), plus configurable counts of
//! background boxes and object fragments as noise.

use ndarray::IxDyn;
use owod_grad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, AuxBoxEntry, AuxFile, AuxRecord, DatasetFile, ImageEntry, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::geometry::{iou, mask_to_box, BBox, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Diamond,
    Ring,
    Cross,
    HollowSquare,
    Stripes,
}

impl ShapeKind {
    /// Is the unit-local point `(u, v)` (both in `[-1, 1]`) inside the shape?
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disc => u * u + v * v <= 1.0,
            ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Ring => {
                let r = (u * u + v * v).sqrt();
                (0.55..=1.0).contains(&r)
            }
            ShapeKind::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            ShapeKind::HollowSquare => u.abs().max(v.abs()) >= 0.55,
            ShapeKind::Stripes => ((v + 1.0) * 2.5) as usize % 2 == 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub cx: f64,
    pub cy: f64,
    /// Half extents, normalized to the canvas.
    pub half_w: f64,
    pub half_h: f64,
}

/// Everything needed to re-render one image deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub instances: Vec<ShapeInstance>,
}

pub fn instance_mask(inst: &ShapeInstance, width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    for r in 0..height {
        for c in 0..width {
            let x = (c as f64 + 0.5) / width as f64;
            let y = (r as f64 + 0.5) / height as f64;
            let u = (x - inst.cx) / inst.half_w;
            let v = (y - inst.cy) / inst.half_h;
            if u.abs() <= 1.0 && v.abs() <= 1.0 && inst.shape.contains(u, v) {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

/// Rasterize a scene to a `[3, height, width]` tensor in `[0, 1]`.
pub fn render_scene(spec: &SceneSpec, width: usize, height: usize) -> Tensor {
    let mut img = Tensor::from_elem(IxDyn(&[3, height, width]), spec.background);
    for inst in &spec.instances {
        let mask = instance_mask(inst, width, height);
        for r in 0..height {
            for c in 0..width {
                if mask.get(r, c) {
                    for ch in 0..3 {
                        img[[ch, r, c]] = inst.color[ch];
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.noise_seed);
        for ch in 0..3 {
            for r in 0..height {
                for c in 0..width {
                    let n: f64 = gauss(&mut rng) * spec.noise_sigma;
                    img[[ch, r, c]] = (img[[ch, r, c]] + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: u32,
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuxNoiseSpec {
    /// Relative jitter applied to emitted object boxes (0 = exact).
    pub jitter: f64,
    /// Extra noise boxes per image on top of the object boxes.
    pub extra_per_image: usize,
    /// Fraction of the extra boxes that are strict sub-boxes of objects;
    /// the rest are background boxes away from every object.
    pub fragment_ratio: f64,
    /// Fraction of the non-fragment extras that half-overlap an object
    /// (merged/offset regions) instead of lying clear of everything.
    #[serde(default)]
    pub near_miss_ratio: f64,
}

impl Default for AuxNoiseSpec {
    fn default() -> Self {
        Self {
            jitter: 0.02,
            extra_per_image: 4,
            fragment_ratio: 0.5,
            near_miss_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_images: usize,
    pub image_size: usize,
    pub known_classes: Vec<ClassDef>,
    #[serde(default)]
    pub distractor_classes: Vec<ClassDef>,
    /// Inclusive range of known-class instances per image.
    pub known_per_image: [usize; 2],
    #[serde(default)]
    pub distractors_per_image: [usize; 2],
    /// Inclusive range of instance half extents, normalized.
    pub size_range: [f64; 2],
    pub background: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub aux: AuxNoiseSpec,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for known in &self.known_classes {
            if self.distractor_classes.iter().any(|d| d.id == known.id) {
                return Err(Error::ConfigMismatch(format!(
                    "class id {} appears in both known and distractor vocabularies",
                    known.id
                )));
            }
        }
        if self.known_classes.is_empty() {
            return Err(Error::ConfigMismatch("no known classes defined".into()));
        }
        if !(0.0..=1.0).contains(&self.aux.fragment_ratio) {
            return Err(Error::ConfigMismatch("fragment_ratio outside [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.aux.near_miss_ratio) {
            return Err(Error::ConfigMismatch("near_miss_ratio outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Generate a dataset and its auxiliary-box file. Deterministic in the seed.
pub fn generate(spec: &SynthSpec) -> Result<(DatasetFile, AuxFile)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;

    let mut images = Vec::with_capacity(spec.num_images);
    let mut annotations = Vec::new();
    let mut aux_records = Vec::with_capacity(spec.num_images);

    for image_id in 0..spec.num_images as u64 {
        let n_known = rng.gen_range(spec.known_per_image[0]..=spec.known_per_image[1]);
        let n_dis = if spec.distractor_classes.is_empty() {
            0
        } else {
            rng.gen_range(spec.distractors_per_image[0]..=spec.distractors_per_image[1])
        };

        let mut instances: Vec<(u32, ShapeInstance)> = Vec::new();
        let mut boxes: Vec<BBox> = Vec::new();
        for k in 0..n_known + n_dis {
            let class = if k < n_known {
                &spec.known_classes[rng.gen_range(0..spec.known_classes.len())]
            } else {
                &spec.distractor_classes[rng.gen_range(0..spec.distractor_classes.len())]
            };
            let mut placed = None;
            for _ in 0..50 {
                let half_w = rng.gen_range(spec.size_range[0]..=spec.size_range[1]);
                let half_h = rng.gen_range(spec.size_range[0]..=spec.size_range[1]);
                let cx = rng.gen_range(half_w + 0.02..1.0 - half_w - 0.02);
                let cy = rng.gen_range(half_h + 0.02..1.0 - half_h - 0.02);
                let proposal = BBox::new(cx, cy, 2.0 * half_w, 2.0 * half_h);
                if boxes.iter().all(|b| iou(b, &proposal) <= 0.2) {
                    placed = Some((cx, cy, half_w, half_h));
                    break;
                }
            }
            let Some((cx, cy, half_w, half_h)) = placed else {
                continue;
            };
            let brightness = rng.gen_range(0.85..1.15);
            let color = [
                (class.color[0] * brightness).clamp(0.0, 1.0),
                (class.color[1] * brightness).clamp(0.0, 1.0),
                (class.color[2] * brightness).clamp(0.0, 1.0),
            ];
            let inst = ShapeInstance {
                shape: class.shape,
                color,
                cx,
                cy,
                half_w,
                half_h,
            };
            let mask = instance_mask(&inst, size, size);
            if !mask.any() {
                continue;
            }
            let bbox = mask_to_box(&mask)?;
            boxes.push(bbox);
            instances.push((class.id, inst));
        }

        let noise_seed = rng.gen::<u64>();
        for ((class_id, _), bbox) in instances.iter().zip(&boxes) {
            annotations.push(Annotation {
                image_id,
                class_id: *class_id,
                bbox: [bbox.cx, bbox.cy, bbox.w, bbox.h],
            });
        }
        images.push(ImageEntry {
            id: image_id,
            width: size,
            height: size,
            scene: SceneSpec {
                background: spec.background,
                noise_sigma: spec.noise_sigma,
                noise_seed,
                instances: instances.iter().map(|(_, i)| i.clone()).collect(),
            },
        });

        // auxiliary boxes: every object box (possibly jittered) + noise
        let mut aux_boxes = Vec::new();
        for bbox in &boxes {
            let jittered = if spec.aux.jitter > 0.0 {
                jitter_box(bbox, spec.aux.jitter, &mut rng)
            } else {
                *bbox
            };
            aux_boxes.push(AuxBoxEntry {
                bbox: [jittered.cx, jittered.cy, jittered.w, jittered.h],
                predicted_iou: Some(rng.gen_range(0.95..1.0)),
                stability: Some(rng.gen_range(0.95..1.0)),
            });
        }
        let n_frag = (spec.aux.extra_per_image as f64 * spec.aux.fragment_ratio).round() as usize;
        let n_bg = spec.aux.extra_per_image - n_frag.min(spec.aux.extra_per_image);
        for _ in 0..n_frag {
            if boxes.is_empty() {
                break;
            }
            let parent = &boxes[rng.gen_range(0..boxes.len())];
            let (px1, py1, px2, py2) = parent.corners();
            let w = parent.w * rng.gen_range(0.4..0.75);
            let h = parent.h * rng.gen_range(0.4..0.75);
            let cx = rng.gen_range(px1 + w / 2.0 + 1e-6..px2 - w / 2.0 - 1e-6);
            let cy = rng.gen_range(py1 + h / 2.0 + 1e-6..py2 - h / 2.0 - 1e-6);
            aux_boxes.push(AuxBoxEntry {
                bbox: [cx, cy, w, h],
                predicted_iou: Some(rng.gen_range(0.95..1.0)),
                stability: Some(rng.gen_range(0.95..1.0)),
            });
        }
        // background-style noise: half-overlapping boxes around objects
        // (merged/offset regions), falling back to detached boxes
        let n_near = (n_bg as f64 * spec.aux.near_miss_ratio).round() as usize;
        'bg: for k in 0..n_bg {
            if k < n_near && !boxes.is_empty() {
                for _ in 0..60 {
                    let parent = &boxes[rng.gen_range(0..boxes.len())];
                    let w = (parent.w * rng.gen_range(0.9..1.3)).min(0.95);
                    let h = (parent.h * rng.gen_range(0.9..1.3)).min(0.95);
                    let dx = parent.w * rng.gen_range(0.3..0.8) * sign(&mut rng);
                    let dy = parent.h * rng.gen_range(0.3..0.8) * sign(&mut rng);
                    let cx = parent.cx + dx;
                    let cy = parent.cy + dy;
                    if cx - w / 2.0 < 0.0 || cx + w / 2.0 > 1.0 || cy - h / 2.0 < 0.0
                        || cy + h / 2.0 > 1.0
                    {
                        continue;
                    }
                    let candidate = BBox::new(cx, cy, w, h);
                    let worst = boxes
                        .iter()
                        .map(|b| iou(b, &candidate))
                        .fold(0.0f64, f64::max);
                    let contained = boxes.iter().any(|b| contains(b, &candidate));
                    if (0.08..=0.45).contains(&worst) && !contained {
                        aux_boxes.push(AuxBoxEntry {
                            bbox: [cx, cy, w, h],
                            predicted_iou: Some(rng.gen_range(0.95..1.0)),
                            stability: Some(rng.gen_range(0.95..1.0)),
                        });
                        continue 'bg;
                    }
                }
            }
            for _ in 0..100 {
                let w = rng.gen_range(0.08..0.3);
                let h = rng.gen_range(0.08..0.3);
                let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
                let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
                let candidate = BBox::new(cx, cy, w, h);
                let clear = boxes
                    .iter()
                    .all(|b| iou(b, &candidate) < 0.05 && !contains(b, &candidate));
                if clear {
                    aux_boxes.push(AuxBoxEntry {
                        bbox: [cx, cy, w, h],
                        predicted_iou: Some(rng.gen_range(0.95..1.0)),
                        stability: Some(rng.gen_range(0.95..1.0)),
                    });
                    continue 'bg;
                }
            }
        }
        aux_records.push(AuxRecord {
            image_id,
            boxes: aux_boxes,
        });
    }

    let mut categories: Vec<crate::data::Category> = spec
        .known_classes
        .iter()
        .chain(spec.distractor_classes.iter())
        .map(|c| crate::data::Category {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    categories.sort_by_key(|c| c.id);

    Ok((
        DatasetFile {
            schema_version: SCHEMA_VERSION,
            categories,
            images,
            annotations,
        },
        AuxFile {
            schema_version: SCHEMA_VERSION,
            records: aux_records,
        },
    ))
}

fn sign(rng: &mut ChaCha20Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn contains(outer: &BBox, inner: &BBox) -> bool {
    let (ox1, oy1, ox2, oy2) = outer.corners();
    let (ix1, iy1, ix2, iy2) = inner.corners();
    ix1 >= ox1 && iy1 >= oy1 && ix2 <= ox2 && iy2 <= oy2
}

fn jitter_box(b: &BBox, jitter: f64, rng: &mut ChaCha20Rng) -> BBox {
    let cx = (b.cx + rng.gen_range(-jitter..jitter) * b.w).clamp(0.0, 1.0);
    let cy = (b.cy + rng.gen_range(-jitter..jitter) * b.h).clamp(0.0, 1.0);
    let w = (b.w * (1.0 + rng.gen_range(-jitter..jitter))).clamp(1e-3, 1.0);
    let h = (b.h * (1.0 + rng.gen_range(-jitter..jitter))).clamp(1e-3, 1.0);
    BBox::new(cx, cy, w, h)
}
