//! Deterministic synthetic RGB/thermal frame pairs with a known field-of-view
//! ratio between the two sensors.
//!
//! World coordinates are RGB canvas pixels. The thermal camera sees the
//! centered window of extent `(s·H, s·W)` and samples it at `(Ht, Wt)`; it
//! renders heat rather than color, so the two modalities differ in content
//! as well as geometry.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apl::GAMMA_BINS;
use crate::detect::BBox;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Subsamples per pixel side.
const SUPERSAMPLE: usize = 4;
/// Value-noise lattice spacing in world pixels.
const NOISE_CELL: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// Point-in-shape test for a shape of extent `size` centered at the origin.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let r = size / 2.0;
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at the top, base along the bottom edge.
            Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub class_id: usize,
    /// Center `(x, y)` at time t.
    pub center: (f64, f64),
    pub size: f64,
    /// Displacement per frame; the t−1 center is `center − velocity`.
    pub velocity: (f64, f64),
    pub rgb_color: [f64; 3],
    pub heat: f64,
}

impl ObjectSpec {
    fn center_at(&self, prev: bool) -> (f64, f64) {
        if prev {
            (
                self.center.0 - self.velocity.0,
                self.center.1 - self.velocity.1,
            )
        } else {
            self.center
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.center.0, self.center.1, self.size, self.size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// `(H, W)`
    pub canvas: (usize, usize),
    pub objects: Vec<ObjectSpec>,
    pub true_scale: f64,
    /// `(Ht, Wt)`
    pub thermal_resolution: (usize, usize),
    /// 1 is daylight, 0 is dark.
    pub illumination: f64,
}

/// Generator settings for random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub canvas: usize,
    pub thermal: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,
    pub min_illumination: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            thermal: 32,
            min_objects: 1,
            max_objects: 3,
            min_size: 10.0,
            max_size: 22.0,
            max_speed: 3.0,
            min_illumination: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb_prev: Tensor<f32>,
    pub rgb_curr: Tensor<f32>,
    /// `[1, Ht, Wt]` in `[0, 1]`.
    pub th_prev: Tensor<f32>,
    pub th_curr: Tensor<f32>,
    /// Boxes in RGB pixel coordinates at time t.
    pub annotations: Vec<Annotation>,
    pub true_scale: f64,
}

/// One of the eight symmetries of the square: optional transposition
/// followed by optional mirroring along each axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Symmetry {
    pub transpose: bool,
    pub horizontal: bool,
    pub vertical: bool,
}

impl Symmetry {
    pub fn from_bits(bits: u8) -> Self {
        Self {
            transpose: bits & 1 != 0,
            horizontal: bits & 2 != 0,
            vertical: bits & 4 != 0,
        }
    }

    /// Source pixel `(y, x)` of output pixel `(y, x)` in a square `n × n` image.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let y = if self.vertical { n - 1 - y } else { y };
        let x = if self.horizontal { n - 1 - x } else { x };
        if self.transpose {
            (x, y)
        } else {
            (y, x)
        }
    }

    fn apply_box(self, b: BBox, n: f64) -> BBox {
        let (mut cx, mut cy, mut w, mut h) = (b.cx, b.cy, b.w, b.h);
        if self.transpose {
            (cx, cy, w, h) = (cy, cx, h, w);
        }
        if self.horizontal {
            cx = n - cx;
        }
        if self.vertical {
            cy = n - cy;
        }
        BBox::new(cx, cy, w, h)
    }

    fn apply_image(self, t: &Tensor<f32>) -> Tensor<f32> {
        let n = t.shape()[1];
        Tensor::from_fn(t.shape(), |i| {
            let (c, y, x) = (i / (n * n), i / n % n, i % n);
            let (sy, sx) = self.source(y, x, n);
            t.data()[(c * n + sy) * n + sx]
        })
    }
}

impl SamplePair {
    /// Applies a symmetry of the square to every frame and box. The thermal
    /// window stays centered, so the scale label is unchanged. Frames must be
    /// square.
    pub fn transformed(&self, sym: Symmetry) -> Self {
        let n = self.rgb_curr.shape()[2] as f64;
        Self {
            rgb_prev: sym.apply_image(&self.rgb_prev),
            rgb_curr: sym.apply_image(&self.rgb_curr),
            th_prev: sym.apply_image(&self.th_prev),
            th_curr: sym.apply_image(&self.th_curr),
            annotations: self
                .annotations
                .iter()
                .map(|a| Annotation {
                    bbox: sym.apply_box(a.bbox, n),
                    class_id: a.class_id,
                })
                .collect(),
            true_scale: self.true_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(invalid("split", format!("unknown split {s:?}"))),
        }
    }
}

/// Smoothly interpolated lattice noise in `[0, 1]`, defined over world
/// coordinates so every sensor samples the same field.
struct ValueNoise {
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(seed: u64, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = (w as f64 / NOISE_CELL).ceil() as usize + 2;
        let rows = (h as f64 / NOISE_CELL).ceil() as usize + 2;
        Self {
            cols,
            values: (0..rows * cols).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = ((x / NOISE_CELL).max(0.0), (y / NOISE_CELL).max(0.0));
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - fx) + v(iy, ix + 1) * fx;
        let bottom = v(iy + 1, ix) * (1.0 - fx) + v(iy + 1, ix + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

struct World<'a> {
    spec: &'a SceneSpec,
    noise: ValueNoise,
    tint: [f64; 3],
}

impl<'a> World<'a> {
    fn new(spec: &'a SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
        let tint = [0; 3].map(|_| rng.gen_range(0.5..1.0));
        Self {
            spec,
            noise: ValueNoise::new(spec.seed, spec.canvas.0, spec.canvas.1),
            tint,
        }
    }

    /// Topmost object covering `(x, y)`; later objects are painted over earlier ones.
    fn object_at(&self, x: f64, y: f64, prev: bool) -> Option<&ObjectSpec> {
        self.spec.objects.iter().rev().find(|o| {
            let (cx, cy) = o.center_at(prev);
            o.shape.contains(x - cx, y - cy, o.size)
        })
    }

    fn color(&self, x: f64, y: f64, prev: bool) -> [f64; 3] {
        match self.object_at(x, y, prev) {
            Some(o) => o.rgb_color,
            None => {
                let n = 0.2 + 0.5 * self.noise.at(x, y);
                self.tint.map(|t| t * n)
            }
        }
    }

    fn heat(&self, x: f64, y: f64, prev: bool) -> f64 {
        match self.object_at(x, y, prev) {
            Some(o) => o.heat,
            None => 0.1 + 0.15 * self.noise.at(x, y),
        }
    }
}

/// Mean of `f` over a `SUPERSAMPLE²` grid inside the square `[x0, x0+sx] × [y0, y0+sy]`.
fn area_mean<const N: usize>(
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
    f: impl Fn(f64, f64) -> [f64; N],
) -> [f64; N] {
    let mut acc = [0.0; N];
    for i in 0..SUPERSAMPLE {
        for j in 0..SUPERSAMPLE {
            let x = x0 + (j as f64 + 0.5) * sx / SUPERSAMPLE as f64;
            let y = y0 + (i as f64 + 0.5) * sy / SUPERSAMPLE as f64;
            for (a, v) in acc.iter_mut().zip(f(x, y)) {
                *a += v;
            }
        }
    }
    acc.map(|a| a / (SUPERSAMPLE * SUPERSAMPLE) as f64)
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        let (ht, wt) = self.thermal_resolution;
        if h == 0 || w == 0 || ht == 0 || wt == 0 || ht > h || wt > w {
            return Err(invalid(
                "scene",
                format!(
                    "canvas {:?} with thermal {:?}",
                    self.canvas, self.thermal_resolution
                ),
            ));
        }
        if !GAMMA_BINS.contains(&self.true_scale) {
            return Err(invalid(
                "scene",
                format!("scale {} is not a bin value", self.true_scale),
            ));
        }
        if !(0.0..=1.0).contains(&self.illumination) {
            return Err(invalid(
                "scene",
                format!("illumination {}", self.illumination),
            ));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size > 0.0) || !(0.0..=1.0).contains(&o.heat) {
                return Err(invalid(
                    "scene",
                    format!("object {i}: size {} heat {}", o.size, o.heat),
                ));
            }
            for prev in [false, true] {
                let (cx, cy) = o.center_at(prev);
                let r = o.size / 2.0;
                if cx - r < 0.0 || cy - r < 0.0 || cx + r > w as f64 || cy + r > h as f64 {
                    return Err(invalid("scene", format!("object {i} leaves the canvas")));
                }
            }
        }
        Ok(())
    }

    /// Random scene; object classes continue the round-robin from `class_cursor`.
    pub fn sample(seed: u64, config: &SynthConfig, class_cursor: &mut usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let canvas = config.canvas as f64;
        let count = rng.gen_range(config.min_objects..=config.max_objects);
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
        for _ in 0..count {
            let shape = Shape::ALL[*class_cursor % Shape::ALL.len()];
            *class_cursor += 1;
            let mut candidate = None;
            for _ in 0..64 {
                let size = rng.gen_range(config.min_size..=config.max_size);
                let velocity = (
                    rng.gen_range(-config.max_speed..=config.max_speed),
                    rng.gen_range(-config.max_speed..=config.max_speed),
                );
                let margin_x = size / 2.0 + velocity.0.abs();
                let margin_y = size / 2.0 + velocity.1.abs();
                let center = (
                    rng.gen_range(margin_x..=canvas - margin_x),
                    rng.gen_range(margin_y..=canvas - margin_y),
                );
                let o = ObjectSpec {
                    shape,
                    class_id: shape.class_id(),
                    center,
                    size,
                    velocity,
                    rgb_color: [0; 3].map(|_| rng.gen_range(0.0..1.0)),
                    heat: rng.gen_range(0.55..1.0),
                };
                let clear = objects.iter().all(|p| p.bbox().iou(&o.bbox()) < 0.05);
                candidate = Some(o);
                if clear {
                    break;
                }
            }
            objects.extend(candidate);
        }
        Self {
            seed,
            canvas: (config.canvas, config.canvas),
            objects,
            true_scale: GAMMA_BINS[rng.gen_range(0..GAMMA_BINS.len())],
            thermal_resolution: (config.thermal, config.thermal),
            illumination: rng.gen_range(config.min_illumination..=1.0),
        }
    }

    /// Top-left corner and extent of the thermal field of view in world pixels.
    pub fn thermal_window(&self) -> (f64, f64, f64, f64) {
        let (h, w) = (self.canvas.0 as f64, self.canvas.1 as f64);
        let s = self.true_scale;
        ((h - s * h) / 2.0, (w - s * w) / 2.0, s * h, s * w)
    }
}

fn render_rgb(world: &World, prev: bool) -> Tensor<f32> {
    let (h, w) = world.spec.canvas;
    let mut data = vec![0.0f32; 3 * h * w];
    let light = world.spec.illumination;
    for y in 0..h {
        for x in 0..w {
            let c = area_mean(x as f64, y as f64, 1.0, 1.0, |px, py| {
                world.color(px, py, prev)
            });
            for (ch, v) in c.iter().enumerate() {
                data[ch * h * w + y * w + x] = (v * light) as f32;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("rgb shape")
}

fn render_thermal(world: &World, prev: bool) -> Tensor<f32> {
    let (ht, wt) = world.spec.thermal_resolution;
    let (top, left, eh, ew) = world.spec.thermal_window();
    let (sy, sx) = (eh / ht as f64, ew / wt as f64);
    let mut data = vec![0.0f32; ht * wt];
    for v in 0..ht {
        for u in 0..wt {
            let [heat] = area_mean(
                left + u as f64 * sx,
                top + v as f64 * sy,
                sx,
                sy,
                |px, py| [world.heat(px, py, prev)],
            );
            data[v * wt + u] = heat as f32;
        }
    }
    Tensor::new(vec![1, ht, wt], data).expect("thermal shape")
}

/// Heat field on the RGB pixel grid refined `refine` times per side,
/// `[1, H·refine, W·refine]`.
pub fn render_heat_on_canvas(spec: &SceneSpec, prev: bool, refine: usize) -> Result<Tensor<f32>> {
    spec.validate()?;
    if refine == 0 {
        return Err(invalid(
            "render_heat_on_canvas",
            "refine must be at least 1",
        ));
    }
    let world = World::new(spec);
    let (h, w) = (spec.canvas.0 * refine, spec.canvas.1 * refine);
    let step = 1.0 / refine as f64;
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let [heat] = area_mean(x as f64 * step, y as f64 * step, step, step, |px, py| {
                [world.heat(px, py, prev)]
            });
            data[y * w + x] = heat as f32;
        }
    }
    Tensor::new(vec![1, h, w], data)
}

pub fn render(spec: &SceneSpec) -> Result<SamplePair> {
    spec.validate()?;
    let world = World::new(spec);
    Ok(SamplePair {
        rgb_prev: render_rgb(&world, true),
        rgb_curr: render_rgb(&world, false),
        th_prev: render_thermal(&world, true),
        th_curr: render_thermal(&world, false),
        annotations: spec
            .objects
            .iter()
            .map(|o| Annotation {
                bbox: o.bbox(),
                class_id: o.class_id,
            })
            .collect(),
        true_scale: spec.true_scale,
    })
}

/// Scene specs of one split; the two splits draw from disjoint seed streams.
pub fn dataset_specs(n: usize, seed: u64, split: Split, config: &SynthConfig) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    let mut cursor = 0;
    (0..n)
        .map(|_| {
            let s = rng.gen::<u64>();
            SceneSpec::sample(s, config, &mut cursor)
        })
        .collect()
}

pub fn make_dataset(
    n: usize,
    seed: u64,
    split: Split,
    config: &SynthConfig,
) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(invalid("make_dataset", "n must be at least 1"));
    }
    dataset_specs(n, seed, split, config)
        .par_iter()
        .map(render)
        .collect()
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
    true_scale: f64,
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn write_pnm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let planar = to_bytes(t);
    let (subtype, color, bytes) = if c == 3 {
        let interleaved = (0..h * w * 3)
            .map(|i| planar[(i % 3) * h * w + i / 3])
            .collect();
        (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
            interleaved,
        )
    } else {
        (
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
            planar,
        )
    };
    let file = fs::File::create(path)?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(&bytes, w as u32, h as u32, color)?;
    Ok(())
}

fn read_pnm(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = if channels == 3 {
        img.into_rgb8().into_raw()
    } else {
        img.into_luma8().into_raw()
    };
    let data = (0..channels * h * w)
        .map(|i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            bytes[p * channels + ch] as f32 / 255.0
        })
        .collect();
    Tensor::new(vec![channels, h, w], data)
}

fn sample_paths(dir: &Path, id: usize) -> [PathBuf; 5] {
    [
        "rgb_t.ppm",
        "rgb_tm1.ppm",
        "th_t.pgm",
        "th_tm1.pgm",
        "ann.json",
    ]
    .map(|suffix| dir.join(format!("{id:05}_{suffix}")))
}

/// Writes `<root>/<split>/<id>_{rgb_t,rgb_tm1}.ppm`, `<id>_{th_t,th_tm1}.pgm`
/// and `<id>_ann.json`.
pub fn write_dataset(root: &Path, split: Split, samples: &[SamplePair]) -> Result<()> {
    let dir = root.join(split.as_str());
    fs::create_dir_all(&dir)?;
    for (id, s) in samples.iter().enumerate() {
        let [rgb_t, rgb_tm1, th_t, th_tm1, ann] = sample_paths(&dir, id);
        write_pnm(&rgb_t, &s.rgb_curr)?;
        write_pnm(&rgb_tm1, &s.rgb_prev)?;
        write_pnm(&th_t, &s.th_curr)?;
        write_pnm(&th_tm1, &s.th_prev)?;
        let file = AnnotationFile {
            boxes: s
                .annotations
                .iter()
                .map(|a| [a.bbox.cx, a.bbox.cy, a.bbox.w, a.bbox.h])
                .collect(),
            classes: s.annotations.iter().map(|a| a.class_id).collect(),
            true_scale: s.true_scale,
        };
        fs::write(ann, serde_json::to_string(&file)?)?;
    }
    Ok(())
}

/// Loads every sample of a split written by [`write_dataset`], in id order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<SamplePair>> {
    let dir = root.join(split.as_str());
    let mut out = Vec::new();
    for id in 0.. {
        let [rgb_t, rgb_tm1, th_t, th_tm1, ann] = sample_paths(&dir, id);
        if !ann.exists() {
            break;
        }
        let file: AnnotationFile = serde_json::from_str(&fs::read_to_string(&ann)?)?;
        if file.boxes.len() != file.classes.len() {
            return Err(Error::Format {
                what: "annotation",
                msg: format!(
                    "{}: {} boxes, {} classes",
                    ann.display(),
                    file.boxes.len(),
                    file.classes.len()
                ),
            });
        }
        out.push(SamplePair {
            rgb_prev: read_pnm(&rgb_tm1, 3)?,
            rgb_curr: read_pnm(&rgb_t, 3)?,
            th_prev: read_pnm(&th_tm1, 1)?,
            th_curr: read_pnm(&th_t, 1)?,
            annotations: file
                .boxes
                .iter()
                .zip(&file.classes)
                .map(|(b, &c)| Annotation {
                    bbox: BBox::new(b[0], b[1], b[2], b[3]),
                    class_id: c,
                })
                .collect(),
            true_scale: file.true_scale,
        });
    }
    if out.is_empty() {
        return Err(invalid(
            "load_split",
            format!("no samples under {}", dir.display()),
        ));
    }
    Ok(out)
}
