//! Procedural stand-ins for clothed people.
//!
//! A figure is a 2D articulated shape (head, torso, arms, legs, shoes) whose
//! parts carry per-figure palettes and textures, plus one unique glyph on the
//! torso. Textures live in part-local coordinates, so a figure keeps its look
//! across poses and backgrounds while the silhouette moves.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkGroup;
use crate::error::{ensure, Error, Result};
use crate::mask::{apply_mask, sample_training_mask, Mask, MaskBranch, MaskSpec};
use crate::raster::Raster;
use crate::util::{create_dir, fnv1a64, read_json, write_json};

/// The six appearance types a reference can describe, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartLabel {
    UpperClothes,
    LowerClothes,
    WholeBodyClothes,
    HairHeadwear,
    Face,
    Shoes,
}

impl PartLabel {
    pub const ALL: [PartLabel; 6] = [
        PartLabel::UpperClothes,
        PartLabel::LowerClothes,
        PartLabel::WholeBodyClothes,
        PartLabel::HairHeadwear,
        PartLabel::Face,
        PartLabel::Shoes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PartLabel::UpperClothes => "upper_clothes",
            PartLabel::LowerClothes => "lower_clothes",
            PartLabel::WholeBodyClothes => "whole_body_clothes",
            PartLabel::HairHeadwear => "hair_headwear",
            PartLabel::Face => "face",
            PartLabel::Shoes => "shoes",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn noun(self) -> &'static str {
        match self {
            PartLabel::UpperClothes => "top",
            PartLabel::LowerClothes => "trousers",
            PartLabel::WholeBodyClothes => "dress",
            PartLabel::HairHeadwear => "hair",
            PartLabel::Face => "face",
            PartLabel::Shoes => "shoes",
        }
    }
}

impl fmt::Display for PartLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PartLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown part label {s:?}")))
    }
}

const COLORS: [(&str, [f32; 3]); 12] = [
    ("red", [0.85, 0.15, 0.15]),
    ("orange", [0.95, 0.55, 0.10]),
    ("yellow", [0.95, 0.85, 0.20]),
    ("green", [0.20, 0.65, 0.25]),
    ("teal", [0.10, 0.60, 0.60]),
    ("blue", [0.20, 0.35, 0.85]),
    ("navy", [0.10, 0.12, 0.40]),
    ("purple", [0.55, 0.25, 0.70]),
    ("pink", [0.95, 0.55, 0.75]),
    ("brown", [0.50, 0.30, 0.15]),
    ("white", [0.95, 0.95, 0.92]),
    ("black", [0.08, 0.08, 0.10]),
];

const SKIN: [(&str, [f32; 3]); 4] =
    [("light", [0.96, 0.80, 0.68]), ("tan", [0.85, 0.64, 0.45]), ("brown", [0.60, 0.40, 0.26]), ("dark", [0.36, 0.24, 0.16])];

/// Number of distinct backgrounds [`render_background`] knows.
pub const NUM_BACKGROUNDS: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Dots,
}

impl Texture {
    const ALL: [Texture; 5] =
        [Texture::Solid, Texture::HorizontalStripes, Texture::VerticalStripes, Texture::Checker, Texture::Dots];

    fn adjective(self) -> &'static str {
        match self {
            Texture::Solid => "plain",
            Texture::HorizontalStripes => "horizontally striped",
            Texture::VerticalStripes => "vertically striped",
            Texture::Checker => "checkered",
            Texture::Dots => "dotted",
        }
    }
}

/// Palette and procedural texture of one part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartStyle {
    pub primary: [f32; 3],
    pub secondary: [f32; 3],
    pub color_name: String,
    pub texture: Texture,
    /// Texture period in 64-pixel canvas units.
    pub period: f32,
}

impl PartStyle {
    fn color_at(&self, u: f32, v: f32) -> [f32; 3] {
        let p = self.period;
        let cell = |t: f32| (t / p).floor() as i64;
        let second = match self.texture {
            Texture::Solid => false,
            Texture::HorizontalStripes => cell(v).rem_euclid(2) == 1,
            Texture::VerticalStripes => cell(u).rem_euclid(2) == 1,
            Texture::Checker => (cell(u) + cell(v)).rem_euclid(2) == 1,
            Texture::Dots => {
                let du = u - (cell(u) as f32 + 0.5) * p;
                let dv = v - (cell(v) as f32 + 0.5) * p;
                du * du + dv * dv < (p * 0.3) * (p * 0.3)
            }
        };
        if second {
            self.secondary
        } else {
            self.primary
        }
    }
}

/// Body proportions, as multipliers on the nominal figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub head: f32,
    pub torso_width: f32,
    pub torso_height: f32,
    pub limbs: f32,
}

/// Identity of a synthetic person: what they wear and how they are built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureSpec {
    pub figure_id: String,
    pub parts: BTreeMap<PartLabel, PartStyle>,
    /// Seeds the unique 5×5 glyph drawn on the torso.
    pub glyph_seed: u64,
    pub glyph_color: [f32; 3],
    pub proportions: Proportions,
}

impl FigureSpec {
    /// Random outfit for `figure_id`; the glyph seed is a hash of the id.
    pub fn random<R: Rng + ?Sized>(figure_id: &str, rng: &mut R) -> Self {
        let style = |rng: &mut R, textured: bool| {
            let (name, primary) = *COLORS.choose(rng).unwrap();
            let secondary = loop {
                let (_, c) = *COLORS.choose(rng).unwrap();
                if c != primary {
                    break c;
                }
            };
            let texture = if textured { *Texture::ALL.choose(rng).unwrap() } else { Texture::Solid };
            PartStyle { primary, secondary, color_name: name.to_string(), texture, period: rng.random_range(3.0..5.0) }
        };
        let mut parts = BTreeMap::new();
        if rng.random_bool(0.3) {
            parts.insert(PartLabel::WholeBodyClothes, style(rng, true));
        } else {
            parts.insert(PartLabel::UpperClothes, style(rng, true));
            parts.insert(PartLabel::LowerClothes, style(rng, true));
        }
        let textured_hair = rng.random_bool(0.3);
        parts.insert(PartLabel::HairHeadwear, style(rng, textured_hair));
        parts.insert(PartLabel::Shoes, style(rng, false));
        let (skin_name, skin) = *SKIN.choose(rng).unwrap();
        parts.insert(
            PartLabel::Face,
            PartStyle { primary: skin, secondary: skin, color_name: skin_name.to_string(), texture: Texture::Solid, period: 4.0 },
        );
        let host = if parts.contains_key(&PartLabel::WholeBodyClothes) { PartLabel::WholeBodyClothes } else { PartLabel::UpperClothes };
        let host_primary = parts[&host].primary;
        let glyph_color = loop {
            let (_, c) = *COLORS.choose(rng).unwrap();
            if c != host_primary {
                break c;
            }
        };
        FigureSpec {
            figure_id: figure_id.to_string(),
            parts,
            glyph_seed: fnv1a64(figure_id.as_bytes()),
            glyph_color,
            proportions: Proportions {
                head: rng.random_range(0.9..1.1),
                torso_width: rng.random_range(0.9..1.1),
                torso_height: rng.random_range(0.9..1.1),
                limbs: rng.random_range(0.9..1.1),
            },
        }
    }

    /// The part that carries the glyph.
    pub fn glyph_part(&self) -> PartLabel {
        if self.parts.contains_key(&PartLabel::WholeBodyClothes) {
            PartLabel::WholeBodyClothes
        } else {
            PartLabel::UpperClothes
        }
    }

    pub fn labels(&self) -> Vec<PartLabel> {
        self.parts.keys().copied().collect()
    }

    pub fn caption(&self, label: PartLabel) -> String {
        let s = &self.parts[&label];
        format!("a figure wearing {} {} {}", s.color_name, s.texture.adjective(), label.noun())
    }

    /// Template prompt covering every part.
    pub fn prompt(&self) -> String {
        let items: Vec<String> = self
            .parts
            .iter()
            .map(|(l, s)| format!("{} {} {}", s.color_name, s.texture.adjective(), l.noun()))
            .collect();
        format!("a figure wearing {}", items.join(", "))
    }

    fn glyph_bits(&self) -> [bool; 25] {
        let mut bits = [false; 25];
        let mut h = self.glyph_seed;
        for (i, b) in bits.iter_mut().enumerate() {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407 + i as u64);
            *b = (h >> 33) & 1 == 1;
        }
        bits[12] = true;
        bits
    }

    fn validate(&self) -> Result<()> {
        let whole = self.parts.contains_key(&PartLabel::WholeBodyClothes);
        let split = self.parts.contains_key(&PartLabel::UpperClothes) || self.parts.contains_key(&PartLabel::LowerClothes);
        ensure!(!(whole && split), "figure {} mixes whole-body and upper/lower clothes", self.figure_id);
        ensure!(whole || split, "figure {} wears no clothes", self.figure_id);
        Ok(())
    }
}

/// Pose in 64-pixel canvas units and degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Horizontal shift of the body axis, in `[-8, 8]`.
    pub offset_x: f32,
    /// Vertical shift, in `[-3, 3]`.
    pub offset_y: f32,
    /// Arm angles away from the body axis, in `[15, 80]`.
    pub left_arm_deg: f32,
    pub right_arm_deg: f32,
    /// Half-angle between the legs, in `[0, 25]`.
    pub leg_spread_deg: f32,
}

impl Pose {
    pub fn neutral() -> Self {
        Pose { offset_x: 0.0, offset_y: 0.0, left_arm_deg: 30.0, right_arm_deg: 30.0, leg_spread_deg: 8.0 }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Pose {
            offset_x: rng.random_range(-8.0..=8.0),
            offset_y: rng.random_range(-3.0..=3.0),
            left_arm_deg: rng.random_range(15.0..=80.0),
            right_arm_deg: rng.random_range(15.0..=80.0),
            leg_spread_deg: rng.random_range(0.0..=25.0),
        }
    }

    /// A pose that differs clearly from `other` in placement and limbs.
    pub fn random_distinct<R: Rng + ?Sized>(rng: &mut R, other: &Pose) -> Self {
        loop {
            let p = Pose::random(rng);
            let shift = (p.offset_x - other.offset_x).abs();
            let limbs = (p.left_arm_deg - other.left_arm_deg).abs() + (p.right_arm_deg - other.right_arm_deg).abs();
            if shift >= 5.0 && limbs >= 30.0 {
                return p;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f32, lo: f32, hi: f32| v.is_finite() && v >= lo && v <= hi;
        ensure!(within(self.offset_x, -8.0, 8.0), "offset_x {} outside [-8, 8]", self.offset_x);
        ensure!(within(self.offset_y, -3.0, 3.0), "offset_y {} outside [-3, 3]", self.offset_y);
        ensure!(within(self.left_arm_deg, 15.0, 80.0), "left_arm_deg {} outside [15, 80]", self.left_arm_deg);
        ensure!(within(self.right_arm_deg, 15.0, 80.0), "right_arm_deg {} outside [15, 80]", self.right_arm_deg);
        ensure!(within(self.leg_spread_deg, 0.0, 25.0), "leg_spread_deg {} outside [0, 25]", self.leg_spread_deg);
        Ok(())
    }
}

/// A rendered figure with its per-part and whole-body masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFigure {
    pub image: Raster,
    pub parts: BTreeMap<PartLabel, Mask>,
    pub silhouette: Mask,
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Capsule { ax: f32, ay: f32, bx: f32, by: f32, r: f32 },
    Disc { cx: f32, cy: f32, r: f32, below: Option<f32>, above: Option<f32> },
}

impl Shape {
    /// Part-local texture coordinates if the point is covered.
    fn local(&self, x: f32, y: f32) -> Option<(f32, f32)> {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => (x >= x0 && x < x1 && y >= y0 && y < y1).then(|| (x - x0, y - y0)),
            Shape::Capsule { ax, ay, bx, by, r } => {
                let (dx, dy) = (bx - ax, by - ay);
                let len = (dx * dx + dy * dy).sqrt();
                let (ux, uy) = (dx / len, dy / len);
                let (px, py) = (x - ax, y - ay);
                let along = px * ux + py * uy;
                let across = -px * uy + py * ux;
                let t = along.clamp(0.0, len);
                let (cx, cy) = (ax + ux * t, ay + uy * t);
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                (d2 <= r * r).then(|| (across + r, along))
            }
            Shape::Disc { cx, cy, r, below, above } => {
                let inside = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
                let cut = below.is_some_and(|b| y < b) || above.is_some_and(|a| y >= a);
                (inside && !cut).then(|| (x - cx + r, y - cy + r))
            }
        }
    }
}

struct Primitive {
    label: PartLabel,
    shape: Shape,
    glyph_host: bool,
}

fn layout(spec: &FigureSpec, pose: &Pose) -> Vec<Primitive> {
    let p = &spec.proportions;
    let whole = spec.parts.contains_key(&PartLabel::WholeBodyClothes);
    let top = if whole { PartLabel::WholeBodyClothes } else { PartLabel::UpperClothes };
    let bottom = if whole { PartLabel::WholeBodyClothes } else { PartLabel::LowerClothes };
    let cx = 32.0 + pose.offset_x;
    let head_r = 5.5 * p.head;
    let head_cy = 4.0 + head_r + pose.offset_y;
    let neck = head_cy + head_r + 0.5;
    let tw = 14.0 * p.torso_width;
    let th = 17.0 * p.torso_height;
    let hip = neck + th;
    let arm_len = 13.0 * p.limbs;
    let leg_len = 19.0 * p.limbs;
    let dir = |deg: f32, side: f32| {
        let a = deg.to_radians();
        (side * a.sin(), a.cos())
    };
    let mut prims = Vec::new();
    for side in [-1.0f32, 1.0] {
        let (dx, dy) = dir(pose.leg_spread_deg, side);
        let (ax, ay) = (cx + side * tw * 0.25, hip - 1.0);
        let (bx, by) = (ax + dx * leg_len, ay + dy * leg_len);
        prims.push(Primitive { label: bottom, shape: Shape::Capsule { ax, ay, bx, by, r: 3.2 }, glyph_host: false });
        prims.push(Primitive {
            label: PartLabel::Shoes,
            shape: Shape::Disc { cx: bx + side * 1.5, cy: by + 1.5, r: 3.0, below: None, above: None },
            glyph_host: false,
        });
    }
    prims.push(Primitive {
        label: top,
        shape: Shape::Rect { x0: cx - tw / 2.0, y0: neck, x1: cx + tw / 2.0, y1: hip },
        glyph_host: true,
    });
    for (side, deg) in [(-1.0f32, pose.left_arm_deg), (1.0, pose.right_arm_deg)] {
        let (dx, dy) = dir(deg, side);
        let (ax, ay) = (cx + side * (tw / 2.0 + 0.5), neck + 2.5);
        prims.push(Primitive {
            label: top,
            shape: Shape::Capsule { ax, ay, bx: ax + dx * arm_len, by: ay + dy * arm_len, r: 2.3 },
            glyph_host: false,
        });
    }
    let hairline = head_cy - 0.25 * head_r;
    prims.push(Primitive {
        label: PartLabel::Face,
        shape: Shape::Disc { cx, cy: head_cy, r: head_r, below: Some(hairline), above: None },
        glyph_host: false,
    });
    prims.push(Primitive {
        label: PartLabel::HairHeadwear,
        shape: Shape::Disc { cx, cy: head_cy, r: head_r + 1.0, below: None, above: Some(hairline) },
        glyph_host: false,
    });
    prims
}

/// Background `id` at canvas position `(y, x)` in 64-pixel units.
pub fn render_background(id: u32, y: f32, x: f32, seed: u64) -> [f32; 3] {
    match id % NUM_BACKGROUNDS {
        0 => [0.82, 0.82, 0.80],
        1 => [0.30, 0.32, 0.34],
        2 => {
            let t = y / 64.0;
            [0.55 + 0.3 * t, 0.70, 0.85 - 0.2 * t]
        }
        3 => {
            let t = x / 64.0;
            [0.60, 0.75 - 0.2 * t, 0.55 + 0.2 * t]
        }
        4 => {
            if ((x + y) / 6.0).floor() as i64 % 2 == 0 {
                [0.86, 0.80, 0.68]
            } else {
                [0.78, 0.72, 0.60]
            }
        }
        5 => {
            if ((x / 16.0).floor() as i64 + (y / 16.0).floor() as i64) % 2 == 0 {
                [0.62, 0.62, 0.62]
            } else {
                [0.48, 0.48, 0.48]
            }
        }
        6 => [0.88, 0.70, 0.55],
        _ => {
            let cell = ((y / 4.0).floor() as u64) * 64 + (x / 4.0).floor() as u64;
            let h = fnv1a64(&(seed ^ cell.wrapping_mul(0x9e37_79b9)).to_le_bytes());
            let g = 0.45 + 0.2 * ((h % 1000) as f32 / 1000.0);
            [g, g, g + 0.05]
        }
    }
}

/// Renders `spec` in `pose` over `background` at `size × size` pixels.
///
/// Pure in `(spec, pose, background, seed)`; values are snapped to the 8-bit grid.
pub fn generate_figure(spec: &FigureSpec, pose: &Pose, background: u32, size: usize, seed: u64) -> Result<RenderedFigure> {
    ensure!(size >= 16, "image size must be at least 16 pixels, got {size}");
    ensure!(background < NUM_BACKGROUNDS, "background id {background} outside 0..{NUM_BACKGROUNDS}");
    pose.validate()?;
    spec.validate()?;
    let prims = layout(spec, pose);
    let glyph = spec.glyph_bits();
    let unit = 64.0 / size as f32;
    let mut parts: BTreeMap<PartLabel, Mask> = spec.parts.keys().map(|&l| (l, Mask::zeros(size, size))).collect();
    let mut silhouette = Mask::zeros(size, size);
    let mut image = Raster::filled(size, size, 0.0);
    for py in 0..size {
        for px in 0..size {
            let (y, x) = ((py as f32 + 0.5) * unit, (px as f32 + 0.5) * unit);
            let hit = prims.iter().rev().find_map(|p| p.shape.local(x, y).map(|uv| (p, uv)));
            let rgb = match hit {
                None => render_background(background, y, x, seed),
                Some((prim, (u, v))) => {
                    silhouette.set(py, px, true);
                    parts.get_mut(&prim.label).expect("layout only uses worn parts").set(py, px, true);
                    let style = &spec.parts[&prim.label];
                    let mut c = style.color_at(u, v);
                    if prim.glyph_host {
                        if let Shape::Rect { x0, x1, y0, y1 } = prim.shape {
                            let cell = 1.6;
                            let gu = u - ((x1 - x0) / 2.0 - 2.5 * cell);
                            let gv = v - ((y1 - y0) * 0.4 - 2.5 * cell);
                            if (0.0..5.0 * cell).contains(&gu) && (0.0..5.0 * cell).contains(&gv) {
                                let (gx, gy) = ((gu / cell) as usize, (gv / cell) as usize);
                                if glyph[gy * 5 + gx] {
                                    c = spec.glyph_color;
                                }
                            }
                        }
                    }
                    c
                }
            };
            image.set_pixel(py, px, rgb);
        }
    }
    Ok(RenderedFigure { image: image.quantized(), parts, silhouette })
}

/// One part-level reference: an image and the region of the part inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePart {
    pub label: PartLabel,
    pub image: Raster,
    pub mask: Mask,
    pub caption: String,
}

impl ReferencePart {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.mask.is_empty(), "reference {} has an empty mask", self.label);
        ensure!(
            self.mask.height() == self.image.height() && self.mask.width() == self.image.width(),
            "reference {} mask does not match its image size",
            self.label
        );
        Ok(())
    }
}

/// Everything needed for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub figure_id: String,
    pub target: Raster,
    pub occluded_input: Raster,
    pub source_mask: Mask,
    pub references: Vec<ReferencePart>,
    pub prompt: String,
    pub mask_branch: MaskBranch,
    pub meta: SampleMeta,
}

/// Provenance of a sample, persisted as `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub figure_id: String,
    pub pose: Pose,
    pub background: u32,
    pub reference_pose: Pose,
    pub reference_background: u32,
    pub caption: String,
    pub seed: u64,
    pub mask_branch: MaskBranch,
}

fn references_from(spec: &FigureSpec, view: &RenderedFigure) -> Vec<ReferencePart> {
    view.parts
        .iter()
        .filter(|(_, m)| !m.is_empty())
        .map(|(&label, m)| ReferencePart { label, image: view.image.clone(), mask: m.clone(), caption: spec.caption(label) })
        .collect()
}

fn distinct_background<R: Rng + ?Sized>(rng: &mut R, other: u32) -> u32 {
    (other + rng.random_range(1..NUM_BACKGROUNDS)) % NUM_BACKGROUNDS
}

/// Occluded target plus references rendered from a different pose and background.
pub fn build_training_pair<R: Rng + ?Sized>(spec: &FigureSpec, rng: &mut R, mask_spec: &MaskSpec, size: usize) -> Result<TrainingSample> {
    let seed: u64 = rng.random();
    let pose = Pose::random(rng);
    let background = rng.random_range(0..NUM_BACKGROUNDS);
    let reference_pose = Pose::random_distinct(rng, &pose);
    let reference_background = distinct_background(rng, background);
    let target = generate_figure(spec, &pose, background, size, seed)?;
    let reference = generate_figure(spec, &reference_pose, reference_background, size, seed ^ 1)?;
    let (branch, source_mask) = sample_training_mask(&target.silhouette, rng, mask_spec)?;
    let occluded_input = apply_mask(&target.image, &source_mask, 0.0)?;
    let prompt = spec.prompt();
    Ok(TrainingSample {
        figure_id: spec.figure_id.clone(),
        target: target.image,
        occluded_input,
        source_mask,
        references: references_from(spec, &reference),
        meta: SampleMeta {
            figure_id: spec.figure_id.clone(),
            pose,
            background,
            reference_pose,
            reference_background,
            caption: prompt.clone(),
            seed,
            mask_branch: branch,
        },
        prompt,
        mask_branch: branch,
    })
}

/// What a synthetic benchmark group was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupProvenance {
    pub source_figure_id: String,
    pub reference_figure_id: String,
    pub source_background: u32,
    pub reference_background: u32,
    pub glyph_part: PartLabel,
    /// The glyph-bearing part in the source view.
    pub glyph_part_mask: Mask,
}

/// Same person, new pose and background; the source mask hides the glyph-bearing part.
pub fn build_benchmark_group<R: Rng + ?Sized>(
    spec: &FigureSpec,
    group_id: &str,
    rng: &mut R,
    size: usize,
) -> Result<(BenchmarkGroup, GroupProvenance)> {
    let seed: u64 = rng.random();
    let pose = Pose::random(rng);
    let background = rng.random_range(0..NUM_BACKGROUNDS);
    let reference_pose = Pose::random_distinct(rng, &pose);
    let reference_background = distinct_background(rng, background);
    let source = generate_figure(spec, &pose, background, size, seed)?;
    let reference = generate_figure(spec, &reference_pose, reference_background, size, seed ^ 1)?;
    let glyph_part = spec.glyph_part();
    let glyph_part_mask = source.parts[&glyph_part].clone();
    let source_mask = glyph_part_mask.dilate(1);
    let mut references = references_from(spec, &reference);
    // The part that was hidden goes first, for runs limited to one reference.
    references.sort_by_key(|r| (r.label != glyph_part, r.label));
    let group = BenchmarkGroup {
        group_id: group_id.to_string(),
        source: apply_mask(&source.image, &source_mask, 0.0)?,
        source_mask,
        references,
        prompt: Some(spec.prompt()),
        ground_truth: source.image,
    };
    Ok((
        group,
        GroupProvenance {
            source_figure_id: spec.figure_id.clone(),
            reference_figure_id: spec.figure_id.clone(),
            source_background: background,
            reference_background,
            glyph_part,
            glyph_part_mask,
        },
    ))
}

/// Writes `dir/{target,occluded,mask}.png`, `refs/`, and `meta.json`.
pub fn write_training_sample(dir: &Path, sample: &TrainingSample) -> Result<()> {
    let refs = dir.join("refs");
    create_dir(&refs)?;
    sample.target.save_png(&dir.join("target.png"))?;
    sample.occluded_input.save_png(&dir.join("occluded.png"))?;
    sample.source_mask.save_png(&dir.join("mask.png"))?;
    for r in &sample.references {
        r.image.save_png(&refs.join(format!("{}.png", r.label)))?;
        r.mask.save_png(&refs.join(format!("{}_mask.png", r.label)))?;
    }
    write_json(&dir.join("meta.json"), &sample.meta)
}

/// Inverse of [`write_training_sample`].
pub fn read_training_sample(dir: &Path) -> Result<TrainingSample> {
    let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
    let target = Raster::load_png(&dir.join("target.png"))?;
    let occluded_input = Raster::load_png(&dir.join("occluded.png"))?;
    let source_mask = Mask::load_png(&dir.join("mask.png"))?;
    let mut references = Vec::new();
    for label in PartLabel::ALL {
        let path = dir.join("refs").join(format!("{label}.png"));
        if path.exists() {
            let mask = Mask::load_png(&dir.join("refs").join(format!("{label}_mask.png")))?;
            references.push(ReferencePart { label, image: Raster::load_png(&path)?, mask, caption: String::new() });
        }
    }
    Ok(TrainingSample {
        figure_id: meta.figure_id.clone(),
        target,
        occluded_input,
        source_mask,
        references,
        prompt: meta.caption.clone(),
        mask_branch: meta.mask_branch,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(id: &str, seed: u64) -> FigureSpec {
        FigureSpec::random(id, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn mean_color(img: &Raster, m: &Mask) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(y, x) {
                    let p = img.pixel(y, x);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
        }
        acc.map(|v| v / m.count() as f64)
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec("fig00001", 1);
        let pose = Pose::random(&mut ChaCha8Rng::seed_from_u64(9));
        let a = generate_figure(&s, &pose, 7, 64, 5).unwrap();
        let b = generate_figure(&s, &pose, 7, 64, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn part_masks_are_disjoint_and_inside_silhouette() {
        for seed in 0..20 {
            let s = spec(&format!("f{seed}"), seed);
            let pose = Pose::random(&mut ChaCha8Rng::seed_from_u64(seed + 100));
            let r = generate_figure(&s, &pose, (seed % 8) as u32, 64, seed).unwrap();
            let masks: Vec<&Mask> = r.parts.values().collect();
            for (i, a) in masks.iter().enumerate() {
                assert!(a.is_subset_of(&r.silhouette));
                for b in &masks[i + 1..] {
                    assert!(a.intersect(b).is_empty());
                }
            }
        }
    }

    #[test]
    fn whole_body_excludes_upper_and_lower() {
        for seed in 0..50 {
            let s = spec("x", seed);
            let whole = s.parts.contains_key(&PartLabel::WholeBodyClothes);
            let split = s.parts.contains_key(&PartLabel::UpperClothes) || s.parts.contains_key(&PartLabel::LowerClothes);
            assert!(whole ^ split);
            assert_eq!(s.parts.len(), 5 - usize::from(whole));
        }
    }

    #[test]
    fn pattern_follows_the_figure_not_the_pose() {
        let s = spec("fig00002", 2);
        let a = generate_figure(&s, &Pose::neutral(), 0, 64, 1).unwrap();
        let pose = Pose { offset_x: 7.0, offset_y: -2.0, left_arm_deg: 60.0, right_arm_deg: 45.0, leg_spread_deg: 15.0 };
        let b = generate_figure(&s, &pose, 3, 64, 1).unwrap();
        for label in s.labels() {
            let (ma, mb) = (mean_color(&a.image, &a.parts[&label]), mean_color(&b.image, &b.parts[&label]));
            for c in 0..3 {
                assert!((ma[c] - mb[c]).abs() <= 0.05, "{label} channel {c}: {} vs {}", ma[c], mb[c]);
            }
        }
    }

    #[test]
    fn glyph_changes_stay_inside_its_part() {
        let a = spec("fig00003", 3);
        let mut b = a.clone();
        b.glyph_seed ^= 0xdead_beef;
        let pose = Pose::neutral();
        let ra = generate_figure(&a, &pose, 1, 64, 0).unwrap();
        let rb = generate_figure(&b, &pose, 1, 64, 0).unwrap();
        let part = &ra.parts[&a.glyph_part()];
        let mut differing = 0;
        for y in 0..64 {
            for x in 0..64 {
                if ra.image.pixel(y, x) != rb.image.pixel(y, x) {
                    differing += 1;
                    assert!(part.get(y, x), "pixel ({y},{x}) changed outside the glyph part");
                }
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn invalid_pose_is_rejected() {
        let s = spec("f", 0);
        let pose = Pose { left_arm_deg: 120.0, ..Pose::neutral() };
        assert!(generate_figure(&s, &pose, 0, 64, 0).is_err());
    }

    #[test]
    fn training_pair_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut grid = 0;
        let n = 1000;
        let mask_spec = MaskSpec::default();
        let specs: Vec<FigureSpec> = (0..10).map(|i| spec(&format!("f{i}"), i)).collect();
        for i in 0..n {
            let s = &specs[i % specs.len()];
            let sample = build_training_pair(s, &mut rng, &mask_spec, 32).unwrap();
            if i < 50 {
                assert_eq!(apply_mask(&sample.target, &sample.source_mask, 0.0).unwrap(), sample.occluded_input);
                assert!(sample.references.iter().all(|r| PartLabel::ALL.contains(&r.label) && r.validate().is_ok()));
                assert_ne!(sample.meta.background, sample.meta.reference_background);
                assert_ne!(sample.meta.pose, sample.meta.reference_pose);
            }
            grid += usize::from(sample.mask_branch == MaskBranch::Grid);
        }
        let p = grid as f64 / n as f64;
        assert!((p - 0.5).abs() <= 0.05, "grid share {p}");
    }

    #[test]
    fn benchmark_group_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..10 {
            let s = spec(&format!("bench{i}"), 40 + i);
            let (g, prov) = build_benchmark_group(&s, &format!("g{i}"), &mut rng, 64).unwrap();
            assert_eq!(prov.source_figure_id, prov.reference_figure_id);
            assert_ne!(prov.source_background, prov.reference_background);
            assert!(!g.source_mask.intersect(&prov.glyph_part_mask).is_empty());
            assert_eq!(g.references[0].label, prov.glyph_part);
            g.validate().unwrap();
        }
    }

    #[test]
    fn sample_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec("fig00009", 9);
        let sample = build_training_pair(&s, &mut ChaCha8Rng::seed_from_u64(1), &MaskSpec::default(), 32).unwrap();
        write_training_sample(dir.path(), &sample).unwrap();
        let back = read_training_sample(dir.path()).unwrap();
        assert_eq!(back.target, sample.target);
        assert_eq!(back.occluded_input, sample.occluded_input);
        assert_eq!(back.source_mask, sample.source_mask);
        assert_eq!(back.references.len(), sample.references.len());
        assert_eq!(back.meta, sample.meta);
    }

    #[test]
    fn labels_parse_back() {
        for l in PartLabel::ALL {
            assert_eq!(l.as_str().parse::<PartLabel>().unwrap(), l);
        }
        assert!("hat".parse::<PartLabel>().is_err());
    }
}
