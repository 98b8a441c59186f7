//! Deterministic multi-object scenes with box annotations.
//!
//! Each scene is generated from its own SplitMix64 stream seeded with
//! `seed ^ scene_index`, where indices run over the concatenation
//! train, val, test_id, test_ood. Generation order therefore does not
//! matter and any single scene can be regenerated in isolation.

use std::fs;
use std::io::Write;
use std::path::Path;

use diffcore::Tensor;
use rand::{Rng, RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class id carried by shapes outside the in-distribution label set.
pub const OOD_CLASS: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Plus,
    Ring,
    Star,
    DiagonalCross,
    Crescent,
}

impl ShapeKind {
    pub const ID_DEFAULT: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Plus,
    ];
    pub const OOD_DEFAULT: [ShapeKind; 4] = [
        ShapeKind::Ring,
        ShapeKind::Star,
        ShapeKind::DiagonalCross,
        ShapeKind::Crescent,
    ];

    /// Membership test in box-local coordinates `u, v ∈ [-1, 1]`
    /// (`v` grows downwards, like image rows).
    pub fn contains(self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Circle => r2 <= 1.0,
            ShapeKind::Square => true,
            ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Plus => u.abs() <= 0.3 || v.abs() <= 0.3,
            ShapeKind::Ring => (0.3025..=1.0).contains(&r2),
            ShapeKind::Star => star_contains(u, v),
            ShapeKind::DiagonalCross => {
                let half_width = 0.25 * std::f64::consts::SQRT_2;
                (u - v).abs() <= half_width || (u + v).abs() <= half_width
            }
            ShapeKind::Crescent => r2 <= 1.0 && (u - 0.45).powi(2) + (v + 0.1).powi(2) > 0.75 * 0.75,
        }
    }
}

fn star_contains(u: f64, v: f64) -> bool {
    // Ten-vertex outline, outer radius 1, inner radius 0.42, tip pointing up.
    let verts: Vec<(f64, f64)> = (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { 1.0 } else { 0.42 };
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: i32,
    pub shape: ShapeKind,
    /// Normalized center `(cx, cy)`.
    pub center: (f64, f64),
    /// Normalized `(w, h)`.
    pub size: (f64, f64),
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn is_in_distribution(&self) -> bool {
        self.class_id >= 0
    }

    /// Box `(x0, y0, x1, y1)` clipped to the unit square.
    pub fn clipped_box(&self) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center;
        let (w, h) = self.size;
        (
            (cx - w / 2.0).max(0.0),
            (cy - h / 2.0).max(0.0),
            (cx + w / 2.0).min(1.0),
            (cy + h / 2.0).min(1.0),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
    pub is_ood: bool,
}

impl Scene {
    /// Multi-hot label vector over the in-distribution classes.
    pub fn labels(&self, num_classes: usize) -> Vec<bool> {
        let mut y = vec![false; num_classes];
        for o in self.objects.iter().filter(|o| o.is_in_distribution()) {
            y[o.class_id as usize] = true;
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 2000,
            val: 200,
            test_id: 500,
            test_ood: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub image_size: usize,
    pub counts: SplitCounts,
    pub num_classes: usize,
    /// Inclusive range of shapes per scene.
    pub objects_per_scene: (usize, usize),
    /// Range of the normalized object side length.
    pub size_range: (f64, f64),
    /// Class `n` is drawn as `id_shapes[n]`.
    pub id_shapes: Vec<ShapeKind>,
    pub ood_shapes: Vec<ShapeKind>,
    /// Probability that an in-distribution scene also carries one
    /// unannotated foreign shape.
    pub distractor_prob: f64,
    pub noise_amplitude: f64,
}

pub const BASE_GRAY: f64 = 0.5;
const COLOR_JITTER: f64 = 0.1;
const PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.2],
    [0.15, 0.3, 0.9],
    [0.95, 0.85, 0.1],
];

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::standard(42, 160, 4, SplitCounts::default())
    }
}

impl DatasetSpec {
    pub fn standard(seed: u64, image_size: usize, num_classes: usize, counts: SplitCounts) -> Self {
        DatasetSpec {
            seed,
            image_size,
            counts,
            num_classes,
            objects_per_scene: (1, 4),
            size_range: (0.15, 0.45),
            id_shapes: ShapeKind::ID_DEFAULT.iter().copied().take(num_classes).collect(),
            ood_shapes: ShapeKind::OOD_DEFAULT.to_vec(),
            distractor_prob: 0.3,
            noise_amplitude: 0.04,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_shapes.is_empty() {
            return Err(Error::config("id_shapes is empty"));
        }
        if self.ood_shapes.is_empty() && self.counts.test_ood > 0 {
            return Err(Error::config("ood_shapes is empty but counts.test_ood > 0"));
        }
        if self.id_shapes.len() != self.num_classes {
            return Err(Error::config(format!(
                "num_classes is {} but {} id_shapes are listed",
                self.num_classes,
                self.id_shapes.len()
            )));
        }
        if let Some(s) = self.id_shapes.iter().find(|s| self.ood_shapes.contains(s)) {
            return Err(Error::config(format!("shape {s:?} is listed as both ID and OOD")));
        }
        if self.image_size < 32 {
            return Err(Error::config("image_size must be at least 32"));
        }
        let (lo, hi) = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return Err(Error::config("objects_per_scene must satisfy 1 <= min <= max"));
        }
        let (slo, shi) = self.size_range;
        if !(slo > 0.0 && slo <= shi && shi <= 1.0) {
            return Err(Error::config("size_range must satisfy 0 < min <= max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::config("distractor_prob must be in [0,1]"));
        }
        if !(0.0..0.5).contains(&self.noise_amplitude) {
            return Err(Error::config("noise_amplitude must be in [0,0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test_id: Vec<Scene>,
    pub test_ood: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestId => &self.test_id,
            Split::TestOod => &self.test_ood,
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
        test_id: generate_split(spec, Split::TestId)?,
        test_ood: generate_split(spec, Split::TestOod)?,
    })
}

/// Scenes of one split. Splits occupy consecutive global scene indices in
/// the order train, val, test_id, test_ood, so any subset can be generated
/// on its own.
pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Scene>> {
    spec.validate()?;
    let c = spec.counts;
    let (start, n) = match split {
        Split::Train => (0, c.train),
        Split::Val => (c.train, c.val),
        Split::TestId => (c.train + c.val, c.test_id),
        Split::TestOod => (c.train + c.val + c.test_id, c.test_ood),
    };
    let ood = split == Split::TestOod;
    Ok((start..start + n).map(|i| generate_scene(spec, i, ood)).collect())
}

/// Scene `index` of the concatenated split sequence.
pub fn generate_scene(spec: &DatasetSpec, index: usize, ood: bool) -> Scene {
    let mut rng = SplitMix64::seed_from_u64(spec.seed ^ index as u64);
    let (lo, hi) = spec.objects_per_scene;
    let n = rng.random_range(lo..=hi);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n + 1);
    for _ in 0..n {
        let obj = if ood {
            sample_ood_object(spec, &objects, &mut rng)
        } else {
            let class = rng.random_range(0..spec.num_classes);
            sample_object(spec, &objects, class as i32, spec.id_shapes[class], PALETTE[class % PALETTE.len()], &mut rng)
        };
        objects.push(obj);
    }
    if !ood && !spec.ood_shapes.is_empty() && rng.random_bool(spec.distractor_prob) {
        let obj = sample_ood_object(spec, &objects, &mut rng);
        objects.push(obj);
    }
    let image = rasterize(&objects, spec.image_size, spec.noise_amplitude, &mut rng);
    Scene {
        image,
        objects,
        is_ood: ood,
    }
}

fn sample_ood_object(spec: &DatasetSpec, placed: &[SceneObject], rng: &mut SplitMix64) -> SceneObject {
    let shape = spec.ood_shapes[rng.random_range(0..spec.ood_shapes.len())];
    // Foreign shapes reuse the in-distribution palette so that shape, not
    // color, separates them.
    let base = PALETTE[rng.random_range(0..spec.num_classes.min(PALETTE.len()))];
    sample_object(spec, placed, OOD_CLASS, shape, base, rng)
}

fn overlap_fraction(a: &SceneObject, b: &SceneObject) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.clipped_box();
    let (bx0, by0, bx1, by1) = b.clipped_box();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let smaller = ((ax1 - ax0) * (ay1 - ay0)).min((bx1 - bx0) * (by1 - by0));
    iw * ih / smaller
}

fn sample_object(
    spec: &DatasetSpec,
    placed: &[SceneObject],
    class_id: i32,
    shape: ShapeKind,
    base: [f64; 3],
    rng: &mut SplitMix64,
) -> SceneObject {
    let (slo, shi) = spec.size_range;
    let side = if slo < shi { rng.random_range(slo..shi) } else { slo };
    let color = base.map(|c| (c * (1.0 + rng.random_range(-COLOR_JITTER..COLOR_JITTER))).clamp(0.0, 1.0));
    let half = side / 2.0;
    let mut obj = SceneObject {
        class_id,
        shape,
        center: (0.5, 0.5),
        size: (side, side),
        color,
    };
    // Rejection-sample the placement to keep occlusion moderate; the last
    // attempt is kept if none qualifies.
    for _ in 0..20 {
        let cx = if half < 0.5 { rng.random_range(half..1.0 - half) } else { 0.5 };
        let cy = if half < 0.5 { rng.random_range(half..1.0 - half) } else { 0.5 };
        obj.center = (cx, cy);
        if placed.iter().all(|p| overlap_fraction(p, &obj) < 0.25) {
            break;
        }
    }
    obj
}

/// Renders `objects` back-to-front over a noisy gray background.
///
/// A pixel belongs to a shape when its center, mapped into the object's box,
/// passes [`ShapeKind::contains`], so drawn pixels never leave the box.
pub fn rasterize<R: Rng + ?Sized>(objects: &[SceneObject], size: usize, noise: f64, rng: &mut R) -> Tensor {
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for px in 0..plane {
        for c in 0..3 {
            let jitter = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            data[c * plane + px] = BASE_GRAY + jitter;
        }
    }
    for obj in objects {
        let (x0, y0, x1, y1) = obj.clipped_box();
        let (cx, cy) = obj.center;
        let (hw, hh) = (obj.size.0 / 2.0, obj.size.1 / 2.0);
        let col_lo = (x0 * size as f64).floor() as usize;
        let col_hi = ((x1 * size as f64).ceil() as usize).min(size);
        let row_lo = (y0 * size as f64).floor() as usize;
        let row_hi = ((y1 * size as f64).ceil() as usize).min(size);
        for row in row_lo..row_hi {
            let y = (row as f64 + 0.5) / size as f64;
            if y < y0 || y > y1 {
                continue;
            }
            for col in col_lo..col_hi {
                let x = (col as f64 + 0.5) / size as f64;
                if x < x0 || x > x1 {
                    continue;
                }
                if obj.shape.contains((x - cx) / hw, (y - cy) / hh) {
                    for (c, &v) in obj.color.iter().enumerate() {
                        data[c * plane + row * size + col] = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("rasterized values are finite")
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    split: String,
    image_size: usize,
    scenes: Vec<AnnotatedScene>,
}

#[derive(Serialize, Deserialize)]
struct AnnotatedScene {
    file: String,
    is_ood: bool,
    objects: Vec<BoxAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct BoxAnnotation {
    class_id: i32,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

/// Binary PPM (P6, 8-bit) encoding of a `[3,S,S]` image in `[0,1]`.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for px in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + px]));
        }
    }
    out
}

/// Decodes an 8-bit binary PPM into a `[3,H,W]` image in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Usage(format!("not a P6 image: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("missing P6 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("only 8-bit images with positive size are supported"));
    }
    let pixels = bytes.get(pos + 1..pos + 1 + 3 * w * h).ok_or_else(|| bad("pixel data cut short"))?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (px, rgb) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + px] = f64::from(rgb[c]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

pub fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Writes one directory per split with PPM images and an `annotations.json`.
pub fn write_dataset(dataset: &Dataset, image_size: usize, dir: &Path) -> Result<()> {
    for split in Split::ALL {
        let split_dir = dir.join(split.name());
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        let mut scenes = Vec::new();
        for (i, scene) in dataset.split(split).iter().enumerate() {
            let file = format!("{i:05}.ppm");
            let path = split_dir.join(&file);
            fs::write(&path, encode_ppm(&scene.image)).map_err(|e| Error::io(&path, e))?;
            scenes.push(AnnotatedScene {
                file,
                is_ood: scene.is_ood,
                objects: scene
                    .objects
                    .iter()
                    .map(|o| BoxAnnotation {
                        class_id: o.class_id,
                        cx: o.center.0,
                        cy: o.center.1,
                        w: o.size.0,
                        h: o.size.1,
                    })
                    .collect(),
            });
        }
        let ann = AnnotationFile {
            split: split.name().to_string(),
            image_size,
            scenes,
        };
        let path = split_dir.join("annotations.json");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &ann)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec::standard(
            7,
            64,
            4,
            SplitCounts {
                train: 20,
                val: 5,
                test_id: 5,
                test_ood: 5,
            },
        )
    }

    #[test]
    fn ppm_decode_inverts_encode_on_byte_values() {
        let scene = &generate_dataset(&small_spec()).unwrap().train[0];
        let bytes = encode_ppm(&scene.image);
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.shape(), scene.image.shape());
        assert_eq!(encode_ppm(&back), bytes);
        assert!(decode_ppm(b"P5\n2 2\n255\n0000").is_err());
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn same_seed_same_scenes() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 8;
        assert_ne!(generate_dataset(&other).unwrap().train, a.train);
    }

    #[test]
    fn scene_generation_is_order_independent() {
        let spec = small_spec();
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(generate_scene(&spec, 23, false), d.val[3]);
        assert_eq!(generate_scene(&spec, 31, true), d.test_ood[1]);
    }

    #[test]
    fn id_only_config_is_valid() {
        let mut spec = small_spec();
        spec.ood_shapes.clear();
        spec.counts.test_ood = 0;
        let d = generate_dataset(&spec).unwrap();
        assert!(d.test_ood.is_empty());
        assert!(d.train.iter().all(|s| s.objects.iter().all(|o| o.class_id >= 0)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut spec = small_spec();
        spec.id_shapes.clear();
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
        let mut spec = small_spec();
        spec.ood_shapes.clear();
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
        let mut spec = small_spec();
        spec.ood_shapes.push(ShapeKind::Circle);
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn empty_scene_is_background_only() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let img = rasterize(&[], 48, 0.04, &mut rng);
        assert!(img.data().iter().all(|v| (v - BASE_GRAY).abs() <= 0.04));
    }

    #[test]
    fn centered_circle_geometry() {
        let obj = SceneObject {
            class_id: 0,
            shape: ShapeKind::Circle,
            center: (0.5, 0.5),
            size: (0.5, 0.5),
            color: [0.9, 0.1, 0.2],
        };
        let s = 64;
        let mut rng = SplitMix64::seed_from_u64(2);
        let img = rasterize(std::slice::from_ref(&obj), s, 0.04, &mut rng);
        for (c, &v) in obj.color.iter().enumerate() {
            assert_eq!(img.at(&[c, s / 2, s / 2]), v);
            for (r, q) in [(0, 0), (0, s - 1), (s - 1, 0), (s - 1, s - 1)] {
                assert!((img.at(&[c, r, q]) - BASE_GRAY).abs() <= 0.04);
            }
        }
    }

    #[test]
    fn shapes_differ_from_each_other() {
        let all = [ShapeKind::ID_DEFAULT, ShapeKind::OOD_DEFAULT].concat();
        let mask = |k: ShapeKind| -> Vec<bool> {
            (0..32 * 32)
                .map(|i| k.contains((i % 32) as f64 / 15.5 - 1.0, (i / 32) as f64 / 15.5 - 1.0))
                .collect()
        };
        for (i, &a) in all.iter().enumerate() {
            let ma = mask(a);
            assert!(ma.iter().filter(|&&b| b).count() > 100, "{a:?} too thin");
            for &b in &all[i + 1..] {
                let diff = ma.iter().zip(mask(b)).filter(|(x, y)| **x != *y).count();
                assert!(diff > 60, "{a:?} vs {b:?} nearly identical");
            }
        }
    }

    #[test]
    fn ppm_header_and_size() {
        let mut rng = SplitMix64::seed_from_u64(3);
        let img = rasterize(&[], 32, 0.0, &mut rng);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), b"P6\n32 32\n255\n".len() + 3 * 32 * 32);
        assert_eq!(bytes[bytes.len() - 1], 128);
    }
}
