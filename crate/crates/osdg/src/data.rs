//! Data plumbing: a deterministic synthetic multi-domain open-set benchmark
//! generator, a directory-manifest loader, channel normalization, stratified
//! splitting, and batch assembly.
//!
//! The synthetic generator realizes "domain" as a style recipe with three
//! separable nuisance axes: background texture, foreground palette, and
//! global contrast/brightness. Source recipes can correlate texture and
//! palette with the class label; a held-out recipe breaks those links, so a
//! model that leans on color or background fails there while a shape-driven
//! model transfers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Arr;
use crate::error::{Error, Result};
use crate::imgio;
use crate::types::{LabelSpace, SampleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Ring,
    Ellipse,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
            ShapeKind::Ring => "ring",
            ShapeKind::Ellipse => "ellipse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    Plain,
    HorizontalWaves,
    DiagonalWaves,
    Checker,
}

/// A domain's style recipe. `class_color_link` / `class_texture_link` are
/// the probabilities that a sample's background hue code / background
/// texture parameters are tied to its class instead of drawn uniformly;
/// links near 1 plant a background shortcut that only holds inside that
/// domain. Foreground colors are always drawn uniformly from the palette,
/// so shape is the one cue that survives every domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainRecipe {
    pub name: String,
    pub texture: TextureKind,
    /// Ambient color cast added to the background pattern.
    pub bg_tint: [f64; 3],
    pub fg_palette: Vec<[f64; 3]>,
    pub class_color_link: f64,
    pub class_texture_link: f64,
    /// Degrees by which the background hue pairs rotate inside the
    /// equal-luma chroma plane. Shifts the channel statistics a model sees
    /// while leaving grayscale edge maps untouched.
    pub hue_shift: f64,
    pub stroke_jitter: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub known: Vec<ShapeKind>,
    pub unknown: Vec<ShapeKind>,
    pub domains: Vec<DomainRecipe>,
    pub samples_per_class_per_domain: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.known.len() < 2 {
            return Err(Error::config("need at least 2 known shape classes"));
        }
        for u in &self.unknown {
            if self.known.contains(u) {
                return Err(Error::config(format!(
                    "shape {:?} cannot be both known and unknown",
                    u.name()
                )));
            }
        }
        if self.domains.len() < 2 {
            return Err(Error::config("need at least 2 domains"));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(Error::config("samples_per_class_per_domain must be >= 1"));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size must be >= 8"));
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.domains.len() {
            return Err(Error::config("domain names must be unique"));
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        let names: Vec<&str> = self.known.iter().map(|k| k.name()).collect();
        LabelSpace::new(&names)
    }
}

/// Foreground palette shared by every benchmark domain. All entries sit far
/// from the background luma (0.44) so shape contours stay crisp in
/// grayscale edge maps regardless of which color a sample draws.
const BENCH_PALETTE: [[f64; 3]; 7] = [
    [0.95, 0.90, 0.20],
    [0.92, 0.45, 0.85],
    [0.35, 0.90, 0.95],
    [0.98, 0.98, 0.98],
    [0.10, 0.12, 0.15],
    [0.90, 0.62, 0.25],
    [0.55, 0.95, 0.35],
];

/// Background hue pairs, one per code. Every color has BT.601 luma 0.44, so
/// the background pattern is pure chroma: loud to an RGB model, invisible
/// in a grayscale edge map.
const BG_HUE_CODES: [[[f64; 3]; 2]; 4] = [
    [[0.255, 0.524, 0.494], [0.625, 0.356, 0.386]],
    [[0.473, 0.385, 0.640], [0.407, 0.495, 0.240]],
    [[0.332, 0.460, 0.619], [0.548, 0.420, 0.261]],
    [[0.594, 0.342, 0.543], [0.286, 0.538, 0.337]],
];

/// Distinct background codes; classes map onto them modulo this count, and
/// unlinked domains draw codes uniformly from the same range.
const NUM_BG_CODES: usize = BG_HUE_CODES.len();

/// Orthonormal basis of the zero-luma plane: directions along which a color
/// can move without changing its BT.601 luma.
fn chroma_basis() -> ([f64; 3], [f64; 3]) {
    const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
    let mut b1 = [1.0, -LUMA[0] / LUMA[1], 0.0];
    let n1 = b1.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in b1.iter_mut() {
        *v /= n1;
    }
    let nl = LUMA.iter().map(|v| v * v).sum::<f64>().sqrt();
    let l = [LUMA[0] / nl, LUMA[1] / nl, LUMA[2] / nl];
    let b2 = [
        l[1] * b1[2] - l[2] * b1[1],
        l[2] * b1[0] - l[0] * b1[2],
        l[0] * b1[1] - l[1] * b1[0],
    ];
    (b1, b2)
}

/// Rotate a color around neutral gray inside the zero-luma plane, keeping
/// its luma component untouched.
fn chroma_rotate(color: [f64; 3], angle_deg: f64) -> [f64; 3] {
    let (b1, b2) = chroma_basis();
    let g = 0.44;
    let v = [color[0] - g, color[1] - g, color[2] - g];
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let u1 = dot(&v, &b1);
    let u2 = dot(&v, &b2);
    let a = angle_deg.to_radians();
    let (r1, r2) = (u1 * a.cos() - u2 * a.sin(), u1 * a.sin() + u2 * a.cos());
    let mut out = [0.0; 3];
    for c in 0..3 {
        let residual = v[c] - u1 * b1[c] - u2 * b2[c];
        out[c] = g + r1 * b1[c] + r2 * b2[c] + residual;
    }
    out
}

/// A domain's background pair for a hue code, after the recipe's chroma
/// rotation.
fn domain_hue_pair(recipe: &DomainRecipe, hue_code: usize) -> [[f64; 3]; 2] {
    let pair = BG_HUE_CODES[hue_code];
    if recipe.hue_shift == 0.0 {
        pair
    } else {
        [
            chroma_rotate(pair[0], recipe.hue_shift),
            chroma_rotate(pair[1], recipe.hue_shift),
        ]
    }
}

/// The standard benchmark: 4 known + 3 unknown shapes, two source-style
/// domains ("src_a", "src_b") whose background texture geometry (wave
/// frequency, checker cell size) correlates with the class, and one held-out
/// domain ("target") drawing the same texture parameters uniformly, so the
/// background is familiar but carries no class information and the global
/// style is shifted. Background hue codes are drawn uniformly in every
/// domain; they are a shared style nuisance, not a cue, and each domain
/// rotates them by its own angle inside the equal-luma chroma plane.
pub fn benchmark_spec(image_size: usize, samples_per_class_per_domain: usize, seed: u64) -> SyntheticSpec {
    let palette = BENCH_PALETTE.to_vec();
    SyntheticSpec {
        known: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross],
        unknown: vec![ShapeKind::Star, ShapeKind::Ring, ShapeKind::Ellipse],
        domains: vec![
            DomainRecipe {
                name: "src_a".to_string(),
                texture: TextureKind::HorizontalWaves,
                bg_tint: [-0.02, 0.00, 0.05],
                fg_palette: palette.clone(),
                class_color_link: 0.0,
                class_texture_link: 0.93,
                hue_shift: 0.0,
                stroke_jitter: 0.6,
                contrast: 1.0,
                brightness: 0.04,
                noise: 0.012,
            },
            DomainRecipe {
                name: "src_b".to_string(),
                texture: TextureKind::Checker,
                bg_tint: [0.05, 0.00, -0.04],
                fg_palette: palette.clone(),
                class_color_link: 0.0,
                class_texture_link: 0.93,
                hue_shift: 8.0,
                stroke_jitter: 0.6,
                contrast: 1.06,
                brightness: -0.02,
                noise: 0.012,
            },
            DomainRecipe {
                name: "target".to_string(),
                texture: TextureKind::Checker,
                bg_tint: [-0.01, 0.03, -0.01],
                fg_palette: palette,
                class_color_link: 0.0,
                class_texture_link: 0.0,
                hue_shift: 15.0,
                stroke_jitter: 0.6,
                contrast: 0.94,
                brightness: -0.05,
                noise: 0.015,
            },
        ],
        samples_per_class_per_domain,
        image_size,
        seed,
    }
}

/// Domain names the benchmark treats as the single training source.
pub const BENCH_SOURCES: [&str; 2] = ["src_a", "src_b"];
/// The benchmark's held-out evaluation domain.
pub const BENCH_TARGET: &str = "target";

type Vec2 = (f64, f64);

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    (a.0 - b.0, a.1 - b.1)
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

fn rotate(p: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    (c * p.0 - s * p.1, s * p.0 + c * p.1)
}

/// Signed distance to a simple polygon; negative inside.
fn sdf_polygon(p: Vec2, verts: &[Vec2]) -> f64 {
    let n = verts.len();
    let mut d = dot(sub(p, verts[0]), sub(p, verts[0]));
    let mut s = 1.0;
    let mut j = n - 1;
    for i in 0..n {
        let e = sub(verts[j], verts[i]);
        let w = sub(p, verts[i]);
        let t = (dot(w, e) / dot(e, e)).clamp(0.0, 1.0);
        let b = (w.0 - e.0 * t, w.1 - e.1 * t);
        d = d.min(dot(b, b));
        let c0 = p.1 >= verts[i].1;
        let c1 = p.1 < verts[j].1;
        let c2 = e.0 * w.1 > e.1 * w.0;
        if (c0 && c1 && c2) || (!c0 && !c1 && !c2) {
            s = -s;
        }
        j = i;
    }
    s * d.sqrt()
}

fn regular_polygon(center: Vec2, radius: f64, sides: usize, rot: f64, jitter: &[f64]) -> Vec<Vec2> {
    (0..sides)
        .map(|k| {
            let ang = rot + k as f64 * 2.0 * PI / sides as f64;
            let r = radius * (1.0 + jitter[k % jitter.len()]);
            (center.0 + r * ang.cos(), center.1 + r * ang.sin())
        })
        .collect()
}

fn star_polygon(center: Vec2, radius: f64, rot: f64, jitter: &[f64]) -> Vec<Vec2> {
    (0..10)
        .map(|k| {
            let ang = rot + k as f64 * PI / 5.0;
            let base = if k % 2 == 0 { radius } else { radius * 0.32 };
            let r = base * (1.0 + jitter[k % jitter.len()]);
            (center.0 + r * ang.cos(), center.1 + r * ang.sin())
        })
        .collect()
}

fn cross_polygon(center: Vec2, radius: f64, rot: f64) -> Vec<Vec2> {
    let w = radius * 0.38;
    let r = radius;
    let local: [Vec2; 12] = [
        (w, w), (w, r), (-w, r), (-w, w), (-r, w), (-r, -w),
        (-w, -w), (-w, -r), (w, -r), (w, -w), (r, -w), (r, w),
    ];
    local
        .iter()
        .map(|&p| {
            let q = rotate(p, rot);
            (center.0 + q.0, center.1 + q.1)
        })
        .collect()
}

/// Per-sample geometry, fixed once all random choices are drawn.
enum Geometry {
    Circle { c: Vec2, r: f64 },
    Ring { c: Vec2, r: f64 },
    Ellipse { c: Vec2, a: f64, b: f64, rot: f64 },
    Polygon { verts: Vec<Vec2> },
}

impl Geometry {
    fn sdf(&self, p: Vec2) -> f64 {
        match self {
            Geometry::Circle { c, r } => {
                let d = sub(p, *c);
                dot(d, d).sqrt() - r
            }
            Geometry::Ring { c, r } => {
                let d = sub(p, *c);
                (dot(d, d).sqrt() - r * 0.80).abs() - r * 0.16
            }
            Geometry::Ellipse { c, a, b, rot } => {
                let d = rotate(sub(p, *c), -rot);
                let k = ((d.0 / a) * (d.0 / a) + (d.1 / b) * (d.1 / b)).sqrt();
                (k - 1.0) * a.min(*b)
            }
            Geometry::Polygon { verts } => sdf_polygon(p, verts),
        }
    }
}

fn texture_value(kind: TextureKind, x: f64, y: f64, freq: f64, phase: f64, cell: usize) -> f64 {
    match kind {
        TextureKind::Plain => 0.5,
        TextureKind::HorizontalWaves => 0.5 + 0.5 * (2.0 * PI * (freq * y + phase)).sin(),
        TextureKind::DiagonalWaves => 0.5 + 0.5 * (2.0 * PI * (freq * (x + y) * 0.7071 + phase)).sin(),
        TextureKind::Checker => {
            let cx = (x * cell as f64).floor() as i64;
            let cy = (y * cell as f64).floor() as i64;
            if (cx + cy).rem_euclid(2) == 0 {
                0.15
            } else {
                0.85
            }
        }
    }
}

fn render_sample(
    spec: &SyntheticSpec,
    recipe: &DomainRecipe,
    class_index: usize,
    label: usize,
    shape: ShapeKind,
    sample_index: usize,
    domain_index: usize,
) -> SampleRecord {
    render_sample_coded(spec, recipe, class_index, label, shape, sample_index, domain_index).0
}

/// Like `render_sample` but also reports the background texture and hue
/// codes the sample actually drew, so tests can check link statistics
/// without decoding them from pixels.
fn render_sample_coded(
    spec: &SyntheticSpec,
    recipe: &DomainRecipe,
    class_index: usize,
    label: usize,
    shape: ShapeKind,
    sample_index: usize,
    domain_index: usize,
) -> (SampleRecord, usize, usize) {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((domain_index as u64 * 16 + class_index as u64) << 32) | sample_index as u64);

    // background texture parameters, optionally class-coded
    let tex_linked = rng.gen::<f64>() < recipe.class_texture_link;
    let tex_code = if tex_linked {
        class_index % NUM_BG_CODES
    } else {
        rng.gen_range(0..NUM_BG_CODES)
    };
    let freq = 1.6 + tex_code as f64 * 0.6 + rng.gen_range(-0.05..0.05);
    let phase = tex_code as f64 * 0.8 + rng.gen_range(-0.1..0.1);
    let cell = 2 + tex_code;

    // background hue code, optionally class-coded
    let hue_linked = rng.gen::<f64>() < recipe.class_color_link;
    let hue_code = if hue_linked {
        class_index % NUM_BG_CODES
    } else {
        rng.gen_range(0..NUM_BG_CODES)
    };
    let bg_pair = domain_hue_pair(recipe, hue_code);

    // foreground color is class-independent everywhere
    let color_idx = rng.gen_range(0..recipe.fg_palette.len());
    let mut fg = recipe.fg_palette[color_idx];
    for ch in fg.iter_mut() {
        *ch = (*ch + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
    }

    // geometry
    let half = n as f64 / 2.0;
    let c: Vec2 = (
        half + rng.gen_range(-0.08..0.08) * n as f64,
        half + rng.gen_range(-0.08..0.08) * n as f64,
    );
    let radius = n as f64 * 0.30 * (1.0 + recipe.stroke_jitter * rng.gen_range(-0.15..0.15));
    let rot = rng.gen_range(0.0..(2.0 * PI));
    let jitter: Vec<f64> = (0..4)
        .map(|_| recipe.stroke_jitter * rng.gen_range(-0.06..0.06))
        .collect();
    let geom = match shape {
        ShapeKind::Circle => Geometry::Circle { c, r: radius },
        ShapeKind::Ring => Geometry::Ring { c, r: radius },
        ShapeKind::Ellipse => Geometry::Ellipse { c, a: radius, b: radius * 0.42, rot },
        ShapeKind::Square => Geometry::Polygon {
            verts: regular_polygon(c, radius, 4, rot, &jitter),
        },
        ShapeKind::Triangle => Geometry::Polygon {
            verts: regular_polygon(c, radius * 1.1, 3, rot, &jitter),
        },
        ShapeKind::Cross => Geometry::Polygon {
            verts: cross_polygon(c, radius, rot),
        },
        ShapeKind::Star => Geometry::Polygon {
            verts: star_polygon(c, radius, rot, &jitter),
        },
    };

    let mut image = Arr::zeros(IxDyn(&[3, n, n]));
    let mut mask = Arr::zeros(IxDyn(&[n, n]));
    let aa = 1.0; // anti-aliasing band in pixels
    for y in 0..n {
        for x in 0..n {
            let p: Vec2 = (x as f64 + 0.5, y as f64 + 0.5);
            let t = texture_value(
                recipe.texture,
                p.0 / n as f64,
                p.1 / n as f64,
                freq,
                phase,
                cell,
            );
            let d = geom.sdf(p);
            let alpha = (0.5 - d / aa).clamp(0.0, 1.0);
            if alpha >= 0.5 {
                mask[[y, x]] = 1.0;
            }
            for ch in 0..3 {
                let bg = bg_pair[0][ch] + t * (bg_pair[1][ch] - bg_pair[0][ch]) + recipe.bg_tint[ch];
                image[[ch, y, x]] = bg * (1.0 - alpha) + fg[ch] * alpha;
            }
        }
    }

    // global style and pixel noise
    for y in 0..n {
        for x in 0..n {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * recipe.noise;
            for ch in 0..3 {
                let v = image[[ch, y, x]];
                let styled = (v - 0.5) * recipe.contrast + 0.5 + recipe.brightness + noise;
                image[[ch, y, x]] = styled.clamp(0.0, 1.0);
            }
        }
    }

    let record = SampleRecord {
        id: format!("{}_{}_{:04}", recipe.name, shape.name(), sample_index),
        image,
        label,
        class_name: shape.name().to_string(),
        domain: recipe.name.clone(),
        mask: Some(mask),
        edge: None,
    };
    (record, tex_code, hue_code)
}

/// Generate the full dataset: every class (known and unknown) in every
/// domain, each sample carrying its exact rasterization mask. Deterministic
/// per (seed, domain, class, index), so any subset can be regenerated
/// byte-identically in any order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let label_space = spec.label_space()?;
    let mut all_classes: Vec<(usize, ShapeKind, usize)> = Vec::new();
    for (i, k) in spec.known.iter().enumerate() {
        all_classes.push((i, *k, label_space.id_of(k.name()).expect("known class")));
    }
    for (j, u) in spec.unknown.iter().enumerate() {
        all_classes.push((spec.known.len() + j, *u, label_space.unknown_token()));
    }

    let mut out = Vec::with_capacity(spec.domains.len() * all_classes.len() * spec.samples_per_class_per_domain);
    for (d, recipe) in spec.domains.iter().enumerate() {
        for (class_index, shape, label) in &all_classes {
            for i in 0..spec.samples_per_class_per_domain {
                out.push(render_sample(spec, recipe, *class_index, *label, *shape, i, d));
            }
        }
    }
    Ok(out)
}

/// Persist samples in the manifest layout: `<root>/<domain>/<class>/<id>.png`
/// plus exact masks under `<root>/masks/...` and the known-class list in
/// `<root>/known_classes.txt`.
pub fn write_dataset(root: &Path, samples: &[SampleRecord], label_space: &LabelSpace) -> Result<()> {
    for s in samples {
        let dir = root.join(&s.domain).join(&s.class_name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        imgio::save_rgb(&dir.join(format!("{}.png", s.id)), &s.image)?;
        if let Some(mask) = &s.mask {
            let mdir = root.join("masks").join(&s.domain).join(&s.class_name);
            std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
            imgio::save_gray(&mdir.join(format!("{}.png", s.id)), mask)?;
        }
    }
    let list = label_space.known_classes().join("\n");
    let path = root.join("known_classes.txt");
    std::fs::write(&path, list + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// A scanned dataset directory: all samples from all domains, with target
/// classes outside the known list mapped to the unknown sentinel.
#[derive(Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub label_space: LabelSpace,
    pub domains: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

/// One manifest row, used for the persisted index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub domain: String,
    pub class_name: String,
    pub label: usize,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.extension().map(|e| e == "png").unwrap_or(false) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Scan `<root>/<domain>/<class>/<image>.png`. Directories named `masks` and
/// `edges` are sidecar stores, not domains. Scanning order is sorted, so the
/// sample list is deterministic.
pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let list_path = root.join("known_classes.txt");
    let list = std::fs::read_to_string(&list_path).map_err(|e| Error::io(&list_path, e))?;
    let known: Vec<&str> = list.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let label_space = LabelSpace::new(&known)?;

    let mut domains = Vec::new();
    let mut samples = Vec::new();
    for domain_dir in sorted_subdirs(root)? {
        let domain = domain_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if domain == "masks" || domain == "edges" {
            continue;
        }
        let class_dirs = sorted_subdirs(&domain_dir)?;
        if class_dirs.is_empty() {
            return Err(Error::data(format!(
                "domain directory {} contains no class directories",
                domain_dir.display()
            )));
        }
        let mut count = 0usize;
        for class_dir in class_dirs {
            let class_name = class_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let label = label_space
                .id_of(&class_name)
                .unwrap_or_else(|| label_space.unknown_token());
            for img_path in sorted_pngs(&class_dir)? {
                let id = img_path
                    .file_stem()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                let image = imgio::load_rgb(&img_path)?;
                samples.push(SampleRecord {
                    id,
                    image,
                    label,
                    class_name: class_name.clone(),
                    domain: domain.clone(),
                    mask: None,
                    edge: None,
                });
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::data(format!(
                "domain {} has no images",
                domain_dir.display()
            )));
        }
        domains.push(domain);
    }
    if domains.is_empty() {
        return Err(Error::data(format!("no domain directories under {}", root.display())));
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        label_space,
        domains,
        samples,
    })
}

impl Manifest {
    pub fn index(&self) -> Vec<IndexEntry> {
        self.samples
            .iter()
            .map(|s| IndexEntry {
                id: s.id.clone(),
                domain: s.domain.clone(),
                class_name: s.class_name.clone(),
                label: s.label,
            })
            .collect()
    }

    pub fn domain_samples(&self, domain: &str) -> Vec<SampleRecord> {
        self.samples.iter().filter(|s| s.domain == domain).cloned().collect()
    }

    /// Known-class samples from the given source domains: the training pool.
    pub fn source_training_set(&self, sources: &[String]) -> Result<Vec<SampleRecord>> {
        let unknown = self.label_space.unknown_token();
        let pool: Vec<SampleRecord> = self
            .samples
            .iter()
            .filter(|s| sources.contains(&s.domain) && s.label != unknown)
            .cloned()
            .collect();
        if pool.is_empty() {
            return Err(Error::data(format!(
                "no known-class samples found in source domains {:?}",
                sources
            )));
        }
        Ok(pool)
    }
}

/// Filter an in-memory sample list the same way `source_training_set` does.
pub fn training_pool(
    samples: &[SampleRecord],
    sources: &[&str],
    label_space: &LabelSpace,
) -> Result<Vec<SampleRecord>> {
    let unknown = label_space.unknown_token();
    let pool: Vec<SampleRecord> = samples
        .iter()
        .filter(|s| sources.contains(&s.domain.as_str()) && s.label != unknown)
        .cloned()
        .collect();
    if pool.is_empty() {
        return Err(Error::data(format!(
            "no known-class samples in source domains {:?}",
            sources
        )));
    }
    for class_id in 0..label_space.num_known() {
        if !pool.iter().any(|s| s.label == class_id) {
            return Err(Error::data(format!(
                "source pool has no samples of class {:?}",
                label_space.name_of(class_id).unwrap_or("?")
            )));
        }
    }
    Ok(pool)
}

/// Per-channel normalization statistics fitted on the training pool and
/// stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalizer {
    pub fn fit(samples: &[SampleRecord]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("cannot fit a normalizer on zero samples"));
        }
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let mut count = 0usize;
        for s in samples {
            let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let v = s.image[[c, y, x]];
                        sum[c] += v;
                        sumsq[c] += v * v;
                    }
                }
            }
            count += h * w;
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / count as f64;
            let var = (sumsq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt().max(1e-6);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &Arr) -> Arr {
        let mut out = image.clone();
        let (h, w) = (image.shape()[1], image.shape()[2]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x]] = (image[[c, y, x]] - self.mean[c]) / self.std[c];
                }
            }
        }
        out
    }
}

/// Seeded stratified split: per class, a shuffled `val_fraction` share goes
/// to validation. Returns (train indices, val indices).
pub fn stratified_split(
    samples: &[SampleRecord],
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idxs) in by_class {
        // Fisher-Yates on the per-class index list
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        let n_val = ((idxs.len() as f64) * val_fraction).ceil() as usize;
        let n_val = n_val.min(idxs.len().saturating_sub(1));
        val.extend_from_slice(&idxs[..n_val]);
        train.extend_from_slice(&idxs[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Shuffle training indices and cut them into batches. Full batches only
/// when the pool is at least one batch; a smaller pool yields a single
/// all-sample batch.
pub fn make_batches(indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = indices.to_vec();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    if order.len() < batch_size {
        return vec![order];
    }
    order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Stack the chosen samples into a normalized BxCxHxW batch. Refuses
/// unknown-labeled samples: training must never observe them.
pub fn assemble_batch(
    samples: &[SampleRecord],
    indices: &[usize],
    normalizer: &Normalizer,
    label_space: &LabelSpace,
) -> Result<(Arr, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::data("cannot assemble an empty batch"));
    }
    let (h, w) = (
        samples[indices[0]].image.shape()[1],
        samples[indices[0]].image.shape()[2],
    );
    let mut batch = Arr::zeros(IxDyn(&[indices.len(), 3, h, w]));
    let mut labels = Vec::with_capacity(indices.len());
    for (bi, &si) in indices.iter().enumerate() {
        let s = &samples[si];
        if s.label >= label_space.unknown_token() {
            return Err(Error::data(format!(
                "sample {} carries a non-known label {} and cannot be trained on",
                s.id, s.label
            )));
        }
        let img = normalizer.apply(&s.image);
        if img.shape() != [3, h, w] {
            return Err(Error::shape(format!(
                "sample {} has shape {:?}, batch expects 3x{}x{}",
                s.id,
                s.image.shape(),
                h,
                w
            )));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    batch[[bi, c, y, x]] = img[[c, y, x]];
                }
            }
        }
        labels.push(s.label);
    }
    Ok((batch, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        let mut spec = benchmark_spec(16, 3, 7);
        spec.samples_per_class_per_domain = 3;
        spec
    }

    #[test]
    fn sample_counts_match_the_grid() {
        let mut spec = tiny_spec();
        spec.samples_per_class_per_domain = 25;
        spec.domains.truncate(2);
        let samples = generate_synthetic(&spec).unwrap();
        assert_eq!(samples.len(), 350, "(4+3) classes x 25 x 2 domains");
        assert!(samples.iter().all(|s| s.mask.is_some()));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image, "sample {} must be byte-identical", x.id);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn domains_differ_in_mean_pixel_statistics() {
        let spec = tiny_spec();
        let samples = generate_synthetic(&spec).unwrap();
        let mut means: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in &samples {
            let m = s.image.sum() / s.image.len() as f64;
            let e = means.entry(s.domain.clone()).or_insert((0.0, 0));
            e.0 += m;
            e.1 += 1;
        }
        let vals: Vec<f64> = means.values().map(|(sum, n)| sum / *n as f64).collect();
        for i in 0..vals.len() {
            for j in (i + 1)..vals.len() {
                assert!(
                    (vals[i] - vals[j]).abs() >= 0.015,
                    "domain style gap too small: {} vs {}",
                    vals[i],
                    vals[j]
                );
            }
        }
    }

    #[test]
    fn masks_are_exact_foreground_indicators() {
        let spec = tiny_spec();
        let samples = generate_synthetic(&spec).unwrap();
        // masks are plausible: nonempty interior, not the whole frame
        for s in samples.iter().take(21) {
            let mask = s.mask.as_ref().unwrap();
            let fg = mask.sum();
            let total = mask.len() as f64;
            assert!(fg > 4.0, "sample {} mask nearly empty", s.id);
            assert!(fg < 0.8 * total, "sample {} mask covers the frame", s.id);
        }
    }

    #[test]
    fn unknown_classes_carry_the_sentinel_label() {
        let spec = tiny_spec();
        let ls = spec.label_space().unwrap();
        let samples = generate_synthetic(&spec).unwrap();
        for s in &samples {
            if ["star", "ring", "ellipse"].contains(&s.class_name.as_str()) {
                assert_eq!(s.label, ls.unknown_token());
            } else {
                assert_eq!(s.label, ls.id_of(&s.class_name).unwrap());
            }
        }
    }

    #[test]
    fn spec_rejects_overlapping_class_lists() {
        let mut spec = tiny_spec();
        spec.unknown.push(ShapeKind::Circle);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dataset_write_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let ls = spec.label_space().unwrap();
        let samples = generate_synthetic(&spec).unwrap();
        write_dataset(dir.path(), &samples, &ls).unwrap();

        let manifest = load_manifest(dir.path()).unwrap();
        assert_eq!(manifest.label_space, ls);
        assert_eq!(manifest.domains.len(), 3);
        assert_eq!(manifest.samples.len(), samples.len());

        // index round-trip: persist, reload, rescan, compare
        let index = manifest.index();
        let json = serde_json::to_string(&index).unwrap();
        let back: Vec<IndexEntry> = serde_json::from_str(&json).unwrap();
        let rescanned = load_manifest(dir.path()).unwrap();
        assert_eq!(back, rescanned.index());
    }

    #[test]
    fn manifest_maps_unknown_directories_to_the_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let ls = spec.label_space().unwrap();
        let samples = generate_synthetic(&spec).unwrap();
        write_dataset(dir.path(), &samples, &ls).unwrap();
        let manifest = load_manifest(dir.path()).unwrap();
        for s in &manifest.samples {
            if s.class_name == "star" {
                assert_eq!(s.label, manifest.label_space.unknown_token());
            }
            if s.class_name == "circle" {
                assert_eq!(s.label, 0);
            }
        }
    }

    #[test]
    fn empty_domain_directory_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("known_classes.txt"), "a\nb\n").unwrap();
        std::fs::create_dir_all(dir.path().join("lonely")).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn training_pool_excludes_unknowns_and_target_domains() {
        let spec = tiny_spec();
        let ls = spec.label_space().unwrap();
        let samples = generate_synthetic(&spec).unwrap();
        let pool = training_pool(&samples, &BENCH_SOURCES, &ls).unwrap();
        assert!(pool.iter().all(|s| s.label < ls.unknown_token()));
        assert!(pool.iter().all(|s| s.domain != BENCH_TARGET));
        assert_eq!(pool.len(), 4 * 3 * 2);
    }

    #[test]
    fn normalizer_zeroes_the_mean_and_scales_the_spread() {
        let spec = tiny_spec();
        let samples = generate_synthetic(&spec).unwrap();
        let norm = Normalizer::fit(&samples).unwrap();
        // re-estimate on normalized images
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for s in &samples {
            let img = norm.apply(&s.image);
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        sum += img[[c, y, x]];
                        sumsq += img[[c, y, x]] * img[[c, y, x]];
                        count += 1;
                    }
                }
            }
        }
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 0.05, "pooled variance near 1, got {}", var);
    }

    #[test]
    fn stratified_split_is_seeded_and_respects_fractions() {
        let spec = tiny_spec();
        let ls = spec.label_space().unwrap();
        let samples = generate_synthetic(&spec).unwrap();
        let pool = training_pool(&samples, &BENCH_SOURCES, &ls).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (train, val) = stratified_split(&pool, 0.25, &mut rng);
        assert_eq!(train.len() + val.len(), pool.len());
        for class in 0..4 {
            let v = val.iter().filter(|&&i| pool[i].label == class).count();
            assert_eq!(v, 2, "ceil(0.25 * 6) = 2 validation samples per class");
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let (train2, val2) = stratified_split(&pool, 0.25, &mut rng2);
        assert_eq!((train, val), (train2, val2));
    }

    #[test]
    fn batches_cover_the_pool_without_unknowns() {
        let spec = tiny_spec();
        let ls = spec.label_space().unwrap();
        let samples = generate_synthetic(&spec).unwrap();
        let pool = training_pool(&samples, &BENCH_SOURCES, &ls).unwrap();
        let norm = Normalizer::fit(&pool).unwrap();
        let idx: Vec<usize> = (0..pool.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches = make_batches(&idx, 8, &mut rng);
        assert_eq!(batches.len(), pool.len() / 8);
        let (x, labels) = assemble_batch(&pool, &batches[0], &norm, &ls).unwrap();
        assert_eq!(x.shape(), &[8, 3, 16, 16]);
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn assemble_batch_refuses_unknown_labels() {
        let spec = tiny_spec();
        let ls = spec.label_space().unwrap();
        let samples = generate_synthetic(&spec).unwrap();
        let unknown_idx = samples
            .iter()
            .position(|s| s.label == ls.unknown_token())
            .unwrap();
        let norm = Normalizer::fit(&samples).unwrap();
        let err = assemble_batch(&samples, &[unknown_idx], &norm, &ls).unwrap_err();
        assert!(err.to_string().contains("cannot be trained on"), "{}", err);
    }

    #[test]
    fn small_pools_fall_back_to_one_batch() {
        let idx = vec![0, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batches = make_batches(&idx, 8, &mut rng);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 3);
    }

    #[test]
    fn source_texture_link_holds_and_target_breaks_it() {
        let spec = benchmark_spec(16, 40, 11);
        let mut tex_rates: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut hue_rates: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (d, recipe) in spec.domains.iter().enumerate() {
            for (class_index, shape) in spec.known.iter().enumerate() {
                for i in 0..spec.samples_per_class_per_domain {
                    let (_, tex, hue) = render_sample_coded(
                        &spec,
                        recipe,
                        class_index,
                        class_index,
                        *shape,
                        i,
                        d,
                    );
                    let t = tex_rates.entry(recipe.name.clone()).or_insert((0, 0));
                    if tex == class_index % NUM_BG_CODES {
                        t.0 += 1;
                    }
                    t.1 += 1;
                    let h = hue_rates.entry(recipe.name.clone()).or_insert((0, 0));
                    if hue == class_index % NUM_BG_CODES {
                        h.0 += 1;
                    }
                    h.1 += 1;
                }
            }
        }
        let rate = |m: &BTreeMap<String, (usize, usize)>, d: &str| {
            let (hit, total) = m[d];
            hit as f64 / total as f64
        };
        assert!(
            rate(&tex_rates, "src_a") > 0.85,
            "src_a texture link too weak: {}",
            rate(&tex_rates, "src_a")
        );
        assert!(
            rate(&tex_rates, "src_b") > 0.85,
            "src_b texture link too weak: {}",
            rate(&tex_rates, "src_b")
        );
        assert!(
            rate(&tex_rates, "target") < 0.5,
            "target must break the texture link, got {}",
            rate(&tex_rates, "target")
        );
        for d in ["src_a", "src_b", "target"] {
            assert!(
                rate(&hue_rates, d) < 0.5,
                "hue codes must stay unlinked in {d}, got {}",
                rate(&hue_rates, d)
            );
        }
    }

    #[test]
    fn background_geometry_is_legible_in_chroma() {
        // Denser checker cells must produce more strong chroma transitions
        // between horizontally adjacent background pixels. The transition is
        // measured as the pixel difference projected on the sample's own hue
        // pair axis, so every hue code contributes on the same scale.
        let spec = benchmark_spec(16, 60, 7);
        let d_idx = spec.domains.iter().position(|d| d.name == "target").unwrap();
        let recipe = &spec.domains[d_idx];
        let mut per_code = vec![(0.0f64, 0usize); NUM_BG_CODES];
        for (class_index, shape) in spec.known.iter().enumerate() {
            for i in 0..spec.samples_per_class_per_domain {
                let (s, tex, hue) = render_sample_coded(
                    &spec,
                    recipe,
                    class_index,
                    class_index,
                    *shape,
                    i,
                    d_idx,
                );
                let pair = domain_hue_pair(recipe, hue);
                let delta: Vec<f64> = (0..3).map(|c| pair[1][c] - pair[0][c]).collect();
                let norm2: f64 = delta.iter().map(|v| v * v).sum();
                let mask = s.mask.as_ref().unwrap();
                let mut hits = 0usize;
                let mut pairs = 0usize;
                for y in 0..16 {
                    for x in 0..15 {
                        if mask[[y, x]] < 0.5 && mask[[y, x + 1]] < 0.5 {
                            let proj: f64 = (0..3)
                                .map(|c| (s.image[[c, y, x + 1]] - s.image[[c, y, x]]) * delta[c])
                                .sum::<f64>()
                                / norm2;
                            if proj.abs() > 0.35 {
                                hits += 1;
                            }
                            pairs += 1;
                        }
                    }
                }
                per_code[tex].0 += hits as f64 / pairs as f64;
                per_code[tex].1 += 1;
            }
        }
        let means: Vec<f64> = per_code.iter().map(|(sum, n)| sum / *n as f64).collect();
        for w in means.windows(2) {
            assert!(
                w[1] > w[0] + 0.02,
                "transition rate must grow with the cell code, got {means:?}"
            );
        }
    }

    #[test]
    fn chroma_rotation_preserves_luma_and_amplitude() {
        let luma = |c: [f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        let norm = |c: [f64; 3], g: f64| {
            ((c[0] - g).powi(2) + (c[1] - g).powi(2) + (c[2] - g).powi(2)).sqrt()
        };
        for pair in BG_HUE_CODES {
            for color in pair {
                for angle in [10.0, 30.0, 137.0] {
                    let r = chroma_rotate(color, angle);
                    assert!(
                        (luma(r) - luma(color)).abs() < 1e-12,
                        "rotation changed luma: {color:?} -> {r:?}"
                    );
                    assert!(
                        (norm(r, 0.44) - norm(color, 0.44)).abs() < 1e-12,
                        "rotation changed chroma amplitude: {color:?} -> {r:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn background_pattern_is_invisible_in_grayscale() {
        let spec = benchmark_spec(16, 4, 13);
        let samples = generate_synthetic(&spec).unwrap();
        // background luma should be near-constant per image: the texture
        // lives in chroma only, so edge maps see just the shape contour.
        // The most deviant pixels are dropped first because anti-aliased
        // contour pixels blend foreground color while sitting outside the
        // binary mask.
        for s in &samples {
            let mask = s.mask.as_ref().unwrap();
            let mut lumas = Vec::new();
            for y in 0..16 {
                for x in 0..16 {
                    if mask[[y, x]] < 0.5 {
                        lumas.push(
                            0.299 * s.image[[0, y, x]]
                                + 0.587 * s.image[[1, y, x]]
                                + 0.114 * s.image[[2, y, x]],
                        );
                    }
                }
            }
            let mid = {
                let mut v = lumas.clone();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            };
            lumas.sort_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()));
            let keep = &lumas[..lumas.len() * 85 / 100];
            let mean: f64 = keep.iter().sum::<f64>() / keep.len() as f64;
            let var: f64 =
                keep.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / keep.len() as f64;
            let recipe = spec.domains.iter().find(|d| d.name == s.domain).unwrap();
            let budget = 4.0 * recipe.noise * recipe.noise + 2e-4;
            assert!(
                var < budget,
                "{}: background luma variance {var} exceeds {budget}",
                s.id
            );
        }
    }
}
