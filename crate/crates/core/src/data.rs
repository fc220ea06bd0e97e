//! Procedural scenes with dense labels, labeled-fraction splits and the
//! two augmentation pipelines.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;
use crate::tasks::{BoundaryMap, DepthMap, Map, SegMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// Scene distribution. Domains A and B share classes and differ in palette,
/// noise and object size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of shapes per scene.
    pub num_shapes: (usize, usize),
    pub kinds: Vec<ShapeKind>,
    /// Number of classes including background (class 0).
    pub class_count: usize,
    /// (near, far); all depths lie in (near, far].
    pub depth_range: (f64, f64),
    pub texture_noise_std: f64,
    pub palette_shift: f64,
    /// Shape half-extent as a fraction of the image side, (min, max).
    pub size_range: (f64, f64),
}

impl DomainParams {
    pub fn domain_a(size: usize, classes: usize) -> Self {
        Self {
            height: size,
            width: size,
            num_shapes: (2, 4),
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            class_count: classes,
            depth_range: (1.0, 10.0),
            texture_noise_std: 0.03,
            palette_shift: 0.0,
            size_range: (0.15, 0.35),
        }
    }

    pub fn domain_b(size: usize, classes: usize) -> Self {
        Self {
            palette_shift: 0.25,
            texture_noise_std: 0.06,
            size_range: (0.08, 0.22),
            ..Self::domain_a(size, classes)
        }
    }

    pub fn by_name(name: &str, size: usize, classes: usize) -> Result<Self> {
        match name {
            "a" | "A" => Ok(Self::domain_a(size, classes)),
            "b" | "B" => Ok(Self::domain_b(size, classes)),
            _ => Err(Error::Config(format!("unknown domain `{name}` (expected a or b)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (near, far) = self.depth_range;
        let bad = |m: &str| Err(Error::Config(format!("domain params: {m}")));
        if !(near.is_finite() && far.is_finite() && near > 0.0 && near < far) {
            return bad("need 0 < near < far");
        }
        if self.class_count < 2 || self.class_count > 255 {
            return bad("class_count must be in 2..=255");
        }
        if self.height < 2 || self.width < 2 {
            return bad("image must be at least 2x2");
        }
        if self.num_shapes.0 > self.num_shapes.1 {
            return bad("num_shapes range is inverted");
        }
        if self.num_shapes.1 > 0 && self.kinds.is_empty() {
            return bad("no shape kinds");
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("size_range must satisfy 0 < min <= max <= 1");
        }
        if !(self.texture_noise_std >= 0.0 && self.texture_noise_std.is_finite() && self.palette_shift.is_finite()) {
            return bad("noise and palette shift must be finite, noise non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// [3, H, W] in [0, 1].
    pub image: Tensor,
    pub depth: DepthMap,
    pub seg: SegMap,
    pub boundary: BoundaryMap,
}

impl SyntheticSample {
    pub fn height(&self) -> usize {
        self.seg.height
    }

    pub fn width(&self) -> usize {
        self.seg.width
    }
}

/// Marks pixels with a 4-neighbour of a different class.
pub fn boundary_from_seg(seg: &SegMap) -> BoundaryMap {
    let (h, w) = (seg.height, seg.width);
    let mut out = Map::filled(h, w, 0u8);
    for y in 0..h {
        for x in 0..w {
            let c = seg.at(y, x);
            let edge = (y > 0 && seg.at(y - 1, x) != c)
                || (y + 1 < h && seg.at(y + 1, x) != c)
                || (x > 0 && seg.at(y, x - 1) != c)
                || (x + 1 < w && seg.at(y, x + 1) != c);
            out.set(y, x, edge as u8);
        }
    }
    out
}

const PALETTE: [[f64; 3]; 8] = [
    [0.35, 0.35, 0.40],
    [0.80, 0.25, 0.20],
    [0.20, 0.65, 0.30],
    [0.25, 0.35, 0.80],
    [0.85, 0.75, 0.20],
    [0.70, 0.30, 0.75],
    [0.20, 0.75, 0.75],
    [0.90, 0.55, 0.35],
];

fn class_color(class: usize) -> [f64; 3] {
    let base = PALETTE[class % PALETTE.len()];
    let cycle = (class / PALETTE.len()) as f64;
    base.map(|v| (v + 0.13 * cycle).rem_euclid(1.0))
}

struct Shape {
    class: u8,
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    d0: f64,
    gy: f64,
    gx: f64,
}

impl Shape {
    fn covers(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let (dy, dx) = ((py - self.cy) / self.ry, (px - self.cx) / self.rx);
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    fn depth_at(&self, y: usize, x: usize) -> f64 {
        self.d0 + self.gy * (y as f64 + 0.5 - self.cy) + self.gx * (x as f64 + 0.5 - self.cx)
    }

    fn area(&self, h: usize, w: usize) -> usize {
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| self.covers(y, x)).count()
    }
}

/// Background is a receding floor plane; every shape sits strictly in front of it.
pub fn background_depth(params: &DomainParams, y: usize) -> f64 {
    let (near, far) = params.depth_range;
    far - 0.35 * (far - near) * y as f64 / (params.height - 1) as f64
}

const MAX_PLACEMENT_TRIES: usize = 32;

/// Renders one scene. Deterministic in `(seed, params)`.
pub fn gen_scene(seed: u64, params: &DomainParams) -> SyntheticSample {
    let (h, w) = (params.height, params.width);
    let (near, far) = params.depth_range;
    let range = far - near;
    let mut rng = seed::rng(seed, 0x5CE7E);
    let side = h.min(w) as f64;

    let count = rng.gen_range(params.num_shapes.0..=params.num_shapes.1);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..MAX_PLACEMENT_TRIES {
            let ry = rng.gen_range(params.size_range.0..=params.size_range.1) * side;
            let rx = rng.gen_range(params.size_range.0..=params.size_range.1) * side;
            let planar = rng.gen_bool(0.5);
            // the planar ramp never moves depth by more than 0.1 * range across the shape
            let slope = if planar { 0.1 * range / (2.0 * ry.max(rx)) } else { 0.0 };
            let shape = Shape {
                class: rng.gen_range(1..params.class_count) as u8,
                kind: params.kinds[rng.gen_range(0..params.kinds.len())],
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                ry,
                rx,
                d0: near + rng.gen_range(0.15..0.5) * range,
                gy: rng.gen_range(-slope..=slope),
                gx: rng.gen_range(-slope..=slope),
            };
            if shape.area(h, w) > 0 {
                shapes.push(shape);
                break;
            }
        }
    }

    let mut depth = Map::filled(h, w, 0.0);
    let mut seg = Map::filled(h, w, 0u8);
    for y in 0..h {
        let bg = background_depth(params, y);
        for x in 0..w {
            let (mut d, mut c) = (bg, 0u8);
            for s in &shapes {
                if s.covers(y, x) {
                    let sd = s.depth_at(y, x);
                    if sd < d {
                        d = sd;
                        c = s.class;
                    }
                }
            }
            depth.set(y, x, d);
            seg.set(y, x, c);
        }
    }

    let noise = Normal::new(0.0, params.texture_noise_std).expect("validated std");
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let color = class_color(seg.at(y, x) as usize);
            let shade = 1.0 - 0.5 * (depth.at(y, x) - near) / range;
            for (ch, base) in color.iter().enumerate() {
                let v = base * shade + params.palette_shift + noise.sample(&mut rng);
                image[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let boundary = boundary_from_seg(&seg);
    SyntheticSample { image: Tensor::new(&[3, h, w], image).expect("finite render"), depth, seg, boundary }
}

/// Generates `n` scenes; scene `i` uses seed `mix(seed, i)`.
pub fn generate(n: usize, seed: u64, params: &DomainParams) -> Result<Vec<SyntheticSample>> {
    params.validate()?;
    Ok((0..n).map(|i| gen_scene(seed::mix(seed, i as u64), params)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
}

/// Seeded permutation of `0..n`; labeled subsets are its prefixes.
pub fn split_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, 0x5B117));
    idx
}

/// Number of labeled samples for a fraction, guarding against `0.1 * 30 = 3.0000000000000004`.
pub fn split_len(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

pub fn make_splits(n: usize, spec: SplitSpec) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Domain("make_splits needs a non-empty dataset".into()));
    }
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::Domain(format!("labeled fraction {} outside (0, 1]", spec.fraction)));
    }
    let mut perm = split_permutation(n, spec.seed);
    perm.truncate(split_len(n, spec.fraction));
    Ok(perm)
}

pub const SCALE_CHOICES: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

/// A concrete draw of the target-task augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetAug {
    pub flip: bool,
    pub scale: f64,
    /// Top-left of the output window in scaled coordinates; negative means padding.
    pub offset: (i64, i64),
}

impl TargetAug {
    pub fn identity() -> Self {
        Self { flip: false, scale: 1.0, offset: (0, 0) }
    }

    pub fn draw(h: usize, w: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, 0xA06);
        let flip = rng.gen_bool(0.5);
        let scale = SCALE_CHOICES[rng.gen_range(0..SCALE_CHOICES.len())];
        let mut off = |n: usize| {
            let scaled = scaled_len(n, scale) as i64;
            let n = n as i64;
            if scaled >= n {
                rng.gen_range(0..=scaled - n)
            } else {
                -rng.gen_range(0..=n - scaled)
            }
        };
        let oy = off(h);
        let ox = off(w);
        Self { flip, scale, offset: (oy, ox) }
    }

    /// Continuous source coordinate of output pixel `i` along an axis of length `n`.
    fn source(&self, i: usize, n: usize, offset: i64, flipped: bool) -> f64 {
        let scaled = scaled_len(n, self.scale) as i64;
        let pos = (i as i64 + offset).clamp(0, scaled - 1);
        let pos = if flipped { scaled - 1 - pos } else { pos };
        ((pos as f64 + 0.5) / self.scale - 0.5).clamp(0.0, (n - 1) as f64)
    }

    /// Nearest source pixel for output `(y, x)`.
    pub fn preimage(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let sy = self.source(y, h, self.offset.0, false);
        let sx = self.source(x, w, self.offset.1, self.flip);
        (nearest(sy, h), nearest(sx, w))
    }
}

fn scaled_len(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

fn nearest(s: f64, n: usize) -> usize {
    // round half down so that exact `.5` sources stay stable across platforms
    ((s + 0.5 - 1e-9).floor().max(0.0) as usize).min(n - 1)
}

fn bilinear_axis(s: f64, n: usize) -> (usize, usize, f64) {
    let i0 = (s.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

fn resample_bilinear(planes: &[f64], count: usize, h: usize, w: usize, aug: &TargetAug) -> Vec<f64> {
    let ys: Vec<_> = (0..h).map(|y| bilinear_axis(aug.source(y, h, aug.offset.0, false), h)).collect();
    let xs: Vec<_> = (0..w).map(|x| bilinear_axis(aug.source(x, w, aug.offset.1, aug.flip), w)).collect();
    let mut out = vec![0.0; count * h * w];
    for p in 0..count {
        let src = &planes[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[p * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn resample_nearest<T: Copy>(map: &Map<T>, aug: &TargetAug) -> Map<T> {
    let (h, w) = (map.height, map.width);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = aug.preimage(y, x, h, w);
            data.push(map.at(sy, sx));
        }
    }
    Map { height: h, width: w, data }
}

/// Applies one augmentation draw congruently to the image and every label map.
pub fn apply_target_aug(sample: &SyntheticSample, aug: &TargetAug) -> SyntheticSample {
    let (h, w) = (sample.height(), sample.width());
    let image = resample_bilinear(sample.image.data(), 3, h, w, aug);
    let mut depth = resample_bilinear(&sample.depth.data, 1, h, w, aug);
    for d in &mut depth {
        *d /= aug.scale;
    }
    SyntheticSample {
        image: Tensor::new(&[3, h, w], image).expect("finite resample"),
        depth: Map { height: h, width: w, data: depth },
        seg: resample_nearest(&sample.seg, aug),
        boundary: resample_nearest(&sample.boundary, aug),
    }
}

/// Flip, scale from {0.5, 0.75, ..., 2.0}, then crop or pad back to the input size.
pub fn target_augment(sample: &SyntheticSample, seed: u64) -> SyntheticSample {
    apply_target_aug(sample, &TargetAug::draw(sample.height(), sample.width(), seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropGeometry {
    pub crop_h: usize,
    pub crop_w: usize,
    /// Distance between the two views' corners on both axes.
    pub offset: usize,
}

impl CropGeometry {
    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.crop_h >= 1 && self.crop_w >= 1 && self.crop_h + self.offset <= h && self.crop_w + self.offset <= w
    }
}

/// Photometric jitter applied to each view independently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewJitter {
    pub flip: bool,
    /// Brightness offset and contrast factor are drawn within `±strength`.
    pub strength: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for ViewJitter {
    fn default() -> Self {
        Self { flip: true, strength: 0.2, blur_prob: 0.5, blur_sigma: (0.1, 1.0) }
    }
}

impl ViewJitter {
    pub fn disabled() -> Self {
        Self { flip: false, strength: 0.0, blur_prob: 0.0, blur_sigma: (0.1, 1.0) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_q: Tensor,
    pub view_k: Tensor,
    /// Top-left (row, col) of each crop in the source image.
    pub corner_q: (usize, usize),
    pub corner_k: (usize, usize),
}

pub fn ssl_augment_pair(image: &Tensor, geom: &CropGeometry, seed: u64) -> Result<ViewPair> {
    ssl_augment_pair_with(image, geom, &ViewJitter::default(), seed)
}

pub fn ssl_augment_pair_with(image: &Tensor, geom: &CropGeometry, jitter: &ViewJitter, seed: u64) -> Result<ViewPair> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("ssl_augment_pair expects [C, H, W], got {:?}", image.shape())));
    };
    if !geom.fits(h, w) {
        return Err(Error::Domain(format!(
            "crop {}x{} with offset {} does not fit a {h}x{w} image",
            geom.crop_h, geom.crop_w, geom.offset
        )));
    }
    let mut rng = seed::rng(seed, 0x55A);
    let y0 = rng.gen_range(0..=h - geom.crop_h - geom.offset);
    let x0 = rng.gen_range(0..=w - geom.crop_w - geom.offset);
    let corner_q = (y0, x0);
    let corner_k = (y0 + geom.offset, x0 + geom.offset);
    let view_q = jitter_view(crop(image.data(), c, h, w, corner_q, geom), c, geom, jitter, &mut rng);
    let view_k = jitter_view(crop(image.data(), c, h, w, corner_k, geom), c, geom, jitter, &mut rng);
    Ok(ViewPair { view_q, view_k, corner_q, corner_k })
}

fn crop(src: &[f64], c: usize, h: usize, w: usize, (y0, x0): (usize, usize), g: &CropGeometry) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * g.crop_h * g.crop_w);
    for ch in 0..c {
        for y in y0..y0 + g.crop_h {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&src[row + x0..row + x0 + g.crop_w]);
        }
    }
    out
}

fn jitter_view(mut v: Vec<f64>, c: usize, g: &CropGeometry, j: &ViewJitter, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (g.crop_h, g.crop_w);
    // fixed draw order keeps views reproducible whatever is enabled
    let flip = rng.gen_bool(0.5) && j.flip;
    let brightness = rng.gen_range(-1.0..=1.0) * j.strength;
    let contrast = 1.0 + rng.gen_range(-1.0..=1.0) * j.strength;
    let blur = rng.gen::<f64>() < j.blur_prob;
    let sigma = rng.gen_range(j.blur_sigma.0..=j.blur_sigma.1);
    if flip {
        for row in v.chunks_mut(w) {
            row.reverse();
        }
    }
    if j.strength > 0.0 {
        for plane in v.chunks_mut(h * w) {
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            for p in plane {
                *p = ((*p - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
            }
        }
    }
    if blur {
        v = gaussian_blur(&v, c, h, w, sigma);
    }
    Tensor::new(&[c, h, w], v).expect("finite view")
}

/// Separable Gaussian blur with edge replication, radius `ceil(3 sigma)`.
pub fn gaussian_blur(src: &[f64], planes: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let tap = |i: usize, d: i64, n: usize| (i as i64 + d).clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = (-r..=r).zip(&k).map(|(d, kv)| kv * src[base + y * w + tap(x, d, w)]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = (-r..=r).zip(&k).map(|(d, kv)| kv * tmp[base + tap(y, d, h) * w + x]).sum();
            }
        }
    }
    out
}

const DUMP_FORMAT: &str = "cotrain-scenes-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    count: usize,
    height: usize,
    width: usize,
    /// Per-sample f64 planes in file order.
    layout: Vec<String>,
    seed: Option<u64>,
    params: Option<DomainParams>,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` (little-endian f64: image, depth, seg, boundary per sample) and a JSON sidecar.
pub fn save_split(path: &Path, samples: &[SyntheticSample], seed: Option<u64>, params: Option<&DomainParams>) -> Result<()> {
    let (h, w) = samples.first().map_or((0, 0), |s| (s.height(), s.width()));
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Shape("all samples in a split must share a size".into()));
        }
        let planes = s.image.data().iter().chain(&s.depth.data).copied();
        let labels = s.seg.data.iter().chain(&s.boundary.data).map(|&v| v as f64);
        for v in planes.chain(labels) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    let meta = Sidecar {
        format: DUMP_FORMAT.into(),
        count: samples.len(),
        height: h,
        width: w,
        layout: ["image:3", "depth:1", "seg:1", "boundary:1"].map(String::from).to_vec(),
        seed,
        params: params.cloned(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Vec<SyntheticSample>> {
    let meta: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if meta.format != DUMP_FORMAT {
        return Err(bad(format!("unsupported format `{}`", meta.format)));
    }
    let (h, w) = (meta.height, meta.width);
    let per = 6 * h * w;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != meta.count * per * 8 {
        return Err(bad(format!("expected {} bytes, found {}", meta.count * per * 8, bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let label = |v: f64| -> Result<u8> {
        if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
            Ok(v as u8)
        } else {
            Err(bad(format!("label value {v} is not a class index")))
        }
    };
    let mut samples = Vec::with_capacity(meta.count);
    for chunk in values.chunks_exact(per.max(1)).take(meta.count) {
        let hw = h * w;
        let image = Tensor::new(&[3, h, w], chunk[..3 * hw].to_vec())?;
        let depth = Map::new(h, w, chunk[3 * hw..4 * hw].to_vec())?;
        let seg = Map::new(h, w, chunk[4 * hw..5 * hw].iter().map(|&v| label(v)).collect::<Result<_>>()?)?;
        let boundary = Map::new(h, w, chunk[5 * hw..].iter().map(|&v| label(v)).collect::<Result<_>>()?)?;
        samples.push(SyntheticSample { image, depth, seg, boundary });
    }
    Ok(samples)
}
