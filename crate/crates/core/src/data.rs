//! Keypoint annotations, the procedural training set, Gaussian heatmap
//! targets, heatmap decoding and geometric augmentation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_2d, HeatmapStack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 2.0;

/// One person sample in image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub image_id: String,
    pub joints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_head: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_torso: Option<f64>,
    pub center: [f64; 2],
    pub scale: f64,
}

impl KeypointAnnotation {
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("record '{}': {m}", self.image_id)));
        if self.joints.len() != self.visible.len() {
            return bad(format!(
                "{} joints but {} visibility flags",
                self.joints.len(),
                self.visible.len()
            ));
        }
        if self.joints.is_empty() {
            return bad("no joints".into());
        }
        if self.norm_head.is_none() && self.norm_torso.is_none() {
            return bad("neither norm_head nor norm_torso is present".into());
        }
        let finite = self
            .joints
            .iter()
            .flatten()
            .chain(&self.center)
            .chain([&self.scale])
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite coordinate".into());
        }
        for n in [self.norm_head, self.norm_torso].into_iter().flatten() {
            if !n.is_finite() || n < 0.0 {
                return bad(format!("invalid normalization length {n}"));
            }
        }
        Ok(())
    }
}

/// Records accepted from an annotation file plus the ones that were skipped.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<KeypointAnnotation>,
    /// `(record index, reason)`.
    pub errors: Vec<(usize, String)>,
}

pub fn parse_annotations(text: &str) -> Result<LoadReport> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("annotation file must be a JSON array: {e}")))?;
    let mut report = LoadReport::default();
    for (i, v) in values.into_iter().enumerate() {
        match serde_json::from_value::<KeypointAnnotation>(v) {
            Ok(a) => match a.validate() {
                Ok(()) => report.records.push(a),
                Err(e) => report.errors.push((i, e.to_string())),
            },
            Err(e) => report.errors.push((i, e.to_string())),
        }
    }
    Ok(report)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<LoadReport> {
    parse_annotations(&fs::read_to_string(path)?)
}

pub fn save_annotations(path: impl AsRef<Path>, annos: &[KeypointAnnotation]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(annos)?)?;
    Ok(())
}

/// An image `[3, W, W]` with values in `[0, 1]` and its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub anno: KeypointAnnotation,
}

impl Sample {
    pub fn image_size(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Joint order of the procedural skeleton; a `J`-joint set emits the first `J`.
pub const SYNTH_JOINT_NAMES: [&str; 16] = [
    "head_top",
    "upper_neck",
    "r_wrist",
    "l_wrist",
    "r_elbow",
    "l_elbow",
    "r_shoulder",
    "l_shoulder",
    "r_ankle",
    "l_ankle",
    "r_knee",
    "l_knee",
    "r_hip",
    "l_hip",
    "thorax",
    "pelvis",
];

/// Left/right pairs swapped by a horizontal flip.
pub const SYNTH_FLIP_PAIRS: [(usize, usize); 6] = [(2, 3), (4, 5), (6, 7), (8, 9), (10, 11), (12, 13)];

const PALETTE: [[f64; 3]; 16] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 1.0, 0.5],
    [1.0, 0.0, 0.5],
    [0.5, 1.0, 0.0],
    [0.0, 0.5, 1.0],
    [0.6, 0.6, 0.6],
    [1.0, 0.6, 0.6],
    [0.6, 1.0, 0.6],
    [0.6, 0.6, 1.0],
];

pub fn joint_color(j: usize) -> [f64; 3] {
    PALETTE[j % PALETTE.len()]
}

pub fn flip_pairs(joints: usize) -> Vec<(usize, usize)> {
    SYNTH_FLIP_PAIRS
        .iter()
        .copied()
        .filter(|&(a, b)| a < joints && b < joints)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub joints: usize,
    /// Blob standard deviation in image pixels.
    pub blob_sigma: f64,
}

impl SynthConfig {
    pub fn new(image_size: usize, joints: usize) -> Self {
        Self {
            image_size,
            joints,
            blob_sigma: 1.5 * image_size as f64 / 64.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.joints > SYNTH_JOINT_NAMES.len() {
            return Err(Error::Config(format!(
                "synthetic joints must be in 1..=16, got {}",
                self.joints
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        Ok(())
    }
}

fn dir(angle_deg: f64) -> [f64; 2] {
    let a = angle_deg.to_radians();
    [a.sin(), -a.cos()]
}

fn at(p: [f64; 2], len: f64, d: [f64; 2]) -> [f64; 2] {
    [p[0] + len * d[0], p[1] + len * d[1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// All 16 skeleton points in image pixels, plus the torso length.
fn skeleton(rng: &mut ChaCha8Rng, size: f64, compact: bool) -> ([[f64; 2]; 16], f64) {
    let (t_lo, t_hi, py) = if compact {
        (0.22, 0.28, 0.56)
    } else {
        (0.36, 0.44, 0.86)
    };
    let t = rng.random_range(t_lo..t_hi) * size;
    let theta = rng.random_range(-20.0..20.0);
    let pelvis = [
        (0.5 + rng.random_range(-0.05..0.05)) * size,
        (py + rng.random_range(-0.03..0.03)) * size,
    ];
    let up = dir(theta);
    let perp = [-up[1], up[0]];
    let neck = at(pelvis, t, up);
    let thorax = at(pelvis, 0.75 * t, up);
    let head = at(neck, 0.42 * t, dir(theta + rng.random_range(-25.0..25.0)));
    let mut p = [[0.0; 2]; 16];
    p[0] = head;
    p[1] = neck;
    p[14] = thorax;
    p[15] = pelvis;
    for (k, side) in [(0usize, -1.0), (1, 1.0)] {
        let shoulder = at(at(neck, side * 0.3 * t, perp), 0.08 * t, [-up[0], -up[1]]);
        let a1 = theta + side * rng.random_range(20.0..170.0);
        let elbow = at(shoulder, 0.45 * t, dir(a1));
        let a2 = a1 + side * rng.random_range(-90.0..90.0);
        let wrist = at(elbow, 0.42 * t, dir(a2));
        let hip = at(pelvis, side * 0.2 * t, perp);
        let k1 = theta + 180.0 - side * rng.random_range(-10.0..35.0);
        let knee = at(hip, 0.5 * t, dir(k1));
        let ankle = at(knee, 0.48 * t, dir(k1 + side * rng.random_range(-10.0..25.0)));
        p[2 + k] = wrist;
        p[4 + k] = elbow;
        p[6 + k] = shoulder;
        p[8 + k] = ankle;
        p[10 + k] = knee;
        p[12 + k] = hip;
    }
    (p, dist(neck, pelvis))
}

/// Per-sample generator: the run seed selects the key, the index the stream.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Renders one procedural sample.
pub fn synth_sample(cfg: &SynthConfig, seed: u64, index: u64) -> Sample {
    let mut rng = sample_rng(seed, index);
    let size = cfg.image_size as f64;
    let margin = 2.0 * cfg.blob_sigma;
    let inside = |q: &[f64; 2]| q.iter().all(|&v| v >= margin && v <= size - 1.0 - margin);
    let compact = cfg.joints > 8;
    let mut draw = skeleton(&mut rng, size, compact);
    for _ in 0..64 {
        if draw.0[..cfg.joints].iter().all(inside) {
            break;
        }
        draw = skeleton(&mut rng, size, compact);
    }
    let (pts, torso) = draw;
    let joints: Vec<[f64; 2]> = pts[..cfg.joints].to_vec();
    let visible: Vec<bool> = joints.iter().map(inside).collect();
    let image = render_blobs(cfg, &joints, &visible);
    Sample {
        image,
        anno: KeypointAnnotation {
            image_id: format!("synth_{index:06}"),
            joints,
            visible,
            norm_head: Some(dist(pts[0], pts[1])),
            norm_torso: Some(torso),
            center: [size / 2.0, size / 2.0],
            scale: size / 200.0,
        },
    }
}

/// One colored Gaussian blob per visible joint, combined by per-channel maximum.
pub fn render_blobs(cfg: &SynthConfig, joints: &[[f64; 2]], visible: &[bool]) -> Tensor {
    let w = cfg.image_size;
    let s = cfg.blob_sigma;
    let mut img = Tensor::zeros(&[3, w, w]);
    let reach = (4.0 * s).ceil() as isize;
    let data = img.data_mut();
    for (j, (p, &vis)) in joints.iter().zip(visible).enumerate() {
        if !vis {
            continue;
        }
        let color = joint_color(j);
        let (cx, cy) = (p[0].round() as isize, p[1].round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(w as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let d2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2);
                let v = (-d2 / (2.0 * s * s)).exp();
                for (ch, &c) in color.iter().enumerate() {
                    let i = (ch * w + y as usize) * w + x as usize;
                    data[i] = data[i].max(c * v);
                }
            }
        }
    }
    img
}

/// `n` procedural samples with indices `offset..offset + n`.
pub fn synth_range(cfg: &SynthConfig, seed: u64, offset: usize, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((offset..offset + n)
        .map(|i| synth_sample(cfg, seed, i as u64))
        .collect())
}

pub fn synth_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    synth_range(cfg, seed, 0, n)
}

pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Invalid(format!("expected a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (image.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Loads an 8-bit grayscale or RGB PNG as a `[3,H,W]` tensor in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Loads `<dir>/<image_id>.png` for every accepted record of an annotation file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Vec<Sample>, LoadReport)> {
    let path = path.as_ref();
    let mut report = load_annotations(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for anno in std::mem::take(&mut report.records) {
        let image = load_png(dir.join(format!("{}.png", anno.image_id)))?;
        report.records.push(anno.clone());
        samples.push(Sample { image, anno });
    }
    Ok((samples, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianEncodeConfig {
    /// Standard deviation in grid units.
    pub sigma: f64,
    pub amplitude: f64,
    pub size: usize,
}

impl GaussianEncodeConfig {
    pub fn new(sigma: f64, size: usize) -> Result<Self> {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::Config(format!("gaussian sigma must be > 0, got {sigma}")));
        }
        Ok(Self {
            sigma,
            amplitude: 1.0,
            size,
        })
    }
}

/// Target maps `[J, S, S]` for joints given in grid coordinates `(x = column, y = row)`.
///
/// Joints outside the grid produce a zero map and come back not visible.
pub fn encode_gaussian(joints: &[[f64; 2]], visible: &[bool], cfg: &GaussianEncodeConfig) -> (Tensor, Vec<bool>) {
    let s = cfg.size;
    let mut out = Tensor::zeros(&[joints.len(), s, s]);
    let mut vis = visible.to_vec();
    let lim = s as f64 - 0.5;
    let two_var = 2.0 * cfg.sigma * cfg.sigma;
    for (j, p) in joints.iter().enumerate() {
        if !vis[j] {
            continue;
        }
        if !(p[0] >= -0.5 && p[0] < lim && p[1] >= -0.5 && p[1] < lim) {
            vis[j] = false;
            continue;
        }
        let map = &mut out.data_mut()[j * s * s..(j + 1) * s * s];
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2);
                map[y * s + x] = cfg.amplitude * (-d2 / two_var).exp();
            }
        }
    }
    (out, vis)
}

/// Target maps for an annotation whose image is `image_size` pixels wide.
pub fn encode_annotation(
    anno: &KeypointAnnotation,
    image_size: usize,
    cfg: &GaussianEncodeConfig,
) -> (Tensor, Vec<bool>) {
    let f = cfg.size as f64 / image_size as f64;
    let grid: Vec<[f64; 2]> = anno.joints.iter().map(|p| [p[0] * f, p[1] * f]).collect();
    encode_gaussian(&grid, &anno.visible, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedJoint {
    pub x: f64,
    pub y: f64,
    /// The map was constant; the grid center is returned.
    pub degenerate: bool,
}

/// Argmax plus a quarter-pixel step toward the larger neighbour on each axis.
pub fn decode_map(map: &[f64], size: usize) -> DecodedJoint {
    let first = map[0];
    if map.iter().all(|&v| v == first) {
        let c = size as f64 / 2.0;
        return DecodedJoint {
            x: c,
            y: c,
            degenerate: true,
        };
    }
    let (r, c) = argmax_2d(map, size);
    let step = |lo: Option<f64>, hi: Option<f64>| match (lo, hi) {
        (Some(a), Some(b)) if b > a => 0.25,
        (Some(a), Some(b)) if a > b => -0.25,
        _ => 0.0,
    };
    let at = |r: usize, c: usize| map[r * size + c];
    let dx = step(
        c.checked_sub(1).map(|cc| at(r, cc)),
        (c + 1 < size).then(|| at(r, c + 1)),
    );
    let dy = step(
        r.checked_sub(1).map(|rr| at(rr, c)),
        (r + 1 < size).then(|| at(r + 1, c)),
    );
    DecodedJoint {
        x: c as f64 + dx,
        y: r as f64 + dy,
        degenerate: false,
    }
}

/// Grid-coordinate peaks of every joint map.
pub fn decode_heatmap(h: &HeatmapStack) -> Vec<DecodedJoint> {
    (0..h.joints()).map(|j| decode_map(h.map(j), h.size())).collect()
}

/// Decoded peaks rescaled to image pixels.
pub fn decode_to_image(h: &HeatmapStack, image_size: usize) -> Vec<[f64; 2]> {
    let f = image_size as f64 / h.size() as f64;
    decode_heatmap(h).iter().map(|d| [d.x * f, d.y * f]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 80.0,
            scale: (0.5, 1.5),
            flip_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        scale: 1.0,
        flip: false,
    };

    pub fn draw(ranges: &AugmentRanges, rng: &mut impl Rng) -> Self {
        let r = ranges.max_rotation_deg;
        Self {
            rotation_deg: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
            scale: if ranges.scale.0 < ranges.scale.1 {
                rng.random_range(ranges.scale.0..=ranges.scale.1)
            } else {
                ranges.scale.0
            },
            flip: rng.random_bool(ranges.flip_prob),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Row-major `2x3` matrix taking source pixels to augmented pixels:
    /// rotate and scale about the image center, then mirror when flipping.
    pub fn matrix(&self, size: usize) -> [[f64; 3]; 2] {
        let c = (size as f64 - 1.0) / 2.0;
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (a, b) = (self.scale * cos, self.scale * sin);
        let mut m = [[a, -b, c - a * c + b * c], [b, a, c - b * c - a * c]];
        if self.flip {
            let w = size as f64 - 1.0;
            m[0] = [-m[0][0], -m[0][1], w - m[0][2]];
        }
        m
    }
}

pub fn apply_affine(m: &[[f64; 3]; 2], p: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
    ]
}

fn invert_affine(m: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    [
        [a, b, -(a * m[0][2] + b * m[1][2])],
        [c, d, -(c * m[0][2] + d * m[1][2])],
    ]
}

fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * px(x0, y0) + fx * px(x0 + 1.0, y0))
        + fy * ((1.0 - fx) * px(x0, y0 + 1.0) + fx * px(x0 + 1.0, y0 + 1.0))
}

/// Applies `params` to a sample. Flipping swaps the given left/right joint pairs.
pub fn augment_with(sample: &Sample, params: &AugmentParams, pairs: &[(usize, usize)]) -> Sample {
    if params.is_identity() {
        return sample.clone();
    }
    let s = sample.image.shape();
    let (h, w) = (s[1], s[2]);
    let m = params.matrix(w);
    let inv = invert_affine(&m);
    let mut image = Tensor::zeros(s);
    for c in 0..3 {
        let src = &sample.image.data()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = apply_affine(&inv, [x as f64, y as f64]);
                image.data_mut()[(c * h + y) * w + x] = bilinear(src, h, w, p[0], p[1]);
            }
        }
    }
    let mut anno = sample.anno.clone();
    let lim = w as f64 - 1.0;
    for (p, v) in anno.joints.iter_mut().zip(anno.visible.iter_mut()) {
        *p = apply_affine(&m, *p);
        if !(p[0] >= 0.0 && p[0] <= lim && p[1] >= 0.0 && p[1] <= lim) {
            *v = false;
        }
    }
    if params.flip {
        for &(a, b) in pairs {
            anno.joints.swap(a, b);
            anno.visible.swap(a, b);
        }
    }
    anno.norm_head = anno.norm_head.map(|n| n * params.scale);
    anno.norm_torso = anno.norm_torso.map(|n| n * params.scale);
    anno.scale *= params.scale;
    Sample { image, anno }
}

/// Draws augmentation parameters from `seed` and applies them.
pub fn augment(sample: &Sample, ranges: &AugmentRanges, seed: u64) -> (Sample, AugmentParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::draw(ranges, &mut rng);
    let pairs = flip_pairs(sample.anno.num_joints());
    (augment_with(sample, &params, &pairs), params)
}
