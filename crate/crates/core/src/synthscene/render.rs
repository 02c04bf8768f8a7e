//! Scene composition and rasterization.
//!
//! A scene class places its first motif (the anchor) and arranges every
//! other motif (the satellites) around it according to the class rule. The
//! renderer is built so that the rule changes only *where* pixels are
//! painted, never *how many*: motif supports are realized before placement,
//! arrangements never overlap or clip at the canvas edge, and all placement
//! randomness scales with the class noise level. Paired classes that share
//! motifs therefore match in color statistics and differ only in layout.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthscene::{ArrangementRule, MotifKind, MotifSpec, RuleKind, SceneClassSpec};

/// Background color before noise.
pub const BACKGROUND: [u8; 3] = [78, 80, 84];
/// Long extent of stripes.
const STRIPE_LEN: i32 = 32;
/// Long extent of wavy bands.
const WAVY_LEN: i32 = 30;
/// Peak vertical deviation of a wavy band.
const WAVY_AMP: f32 = 3.0;
/// Period of the wavy band sine, in pixels.
const WAVY_PERIOD: f32 = 16.0;
/// Checker cell side of texture fields.
const CHECKER_CELL: i32 = 2;
/// Gap between stacked or gridded elements of one motif.
const ELEM_GAP: i32 = 2;
/// Pixels kept free around the composed arrangement.
const CANVAS_MARGIN: i32 = 1;

/// One paintable primitive.
#[derive(Clone, Debug)]
pub(crate) enum Shape {
    Disk { r: i32 },
    Rect { w: i32, h: i32 },
    Checker { w: i32, h: i32 },
    Wavy { len: i32, thick: i32, phase: f32 },
}

impl Shape {
    /// Half extents of the axis-aligned bounding box.
    fn half(&self) -> (f32, f32) {
        match *self {
            Shape::Disk { r } => (r as f32 + 0.5, r as f32 + 0.5),
            Shape::Rect { w, h } | Shape::Checker { w, h } => (w as f32 / 2.0, h as f32 / 2.0),
            Shape::Wavy { len, thick, .. } => {
                (len as f32 / 2.0, thick as f32 / 2.0 + WAVY_AMP)
            }
        }
    }

    fn half_diag(&self) -> f32 {
        let (hw, hh) = self.half();
        (hw * hw + hh * hh).sqrt()
    }
}

/// An element with its center in canvas coordinates.
#[derive(Clone, Debug)]
pub(crate) struct PlacedElement {
    pub shape: Shape,
    pub cx: f32,
    pub cy: f32,
    pub color: [u8; 3],
}

/// A fully placed scene, ready to rasterize.
pub(crate) struct Scene {
    pub elems: Vec<PlacedElement>,
}

/// A realized motif before placement: element offsets are relative to the
/// motif center.
struct MotifInstance {
    color: [u8; 3],
    elems: Vec<(f32, f32, Shape)>,
    half_w: f32,
    half_h: f32,
}

impl MotifInstance {
    fn from_elems(color: [u8; 3], elems: Vec<(f32, f32, Shape)>) -> Self {
        let (mut hw, mut hh) = (0.0f32, 0.0f32);
        for (dx, dy, s) in &elems {
            let (ehw, ehh) = s.half();
            hw = hw.max(dx.abs() + ehw);
            hh = hh.max(dy.abs() + ehh);
        }
        MotifInstance {
            color,
            elems,
            half_w: hw,
            half_h: hh,
        }
    }

    fn half_diag(&self) -> f32 {
        (self.half_w * self.half_w + self.half_h * self.half_h).sqrt()
    }

    /// Largest element bounding-half-diagonal; sets ring radii.
    fn max_elem_half_diag(&self) -> f32 {
        self.elems
            .iter()
            .map(|(_, _, s)| s.half_diag())
            .fold(0.0, f32::max)
    }
}

fn sample_color(spec: &MotifSpec, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let j = spec.color_jitter as i32;
    let mut c = [0u8; 3];
    for (out, mean) in c.iter_mut().zip(spec.color) {
        let v = mean as i32 + rng.gen_range(-j..=j);
        *out = v.clamp(0, 255) as u8;
    }
    c
}

/// Builds a motif's elements in local coordinates. `wobble` (pixels) and
/// `noise01` (unitless, both driven by the class noise level) jitter element
/// positions without risking overlap.
fn realize(spec: &MotifSpec, wobble: f32, noise01: f32, rng: &mut ChaCha8Rng) -> MotifInstance {
    let color = sample_color(spec, rng);
    let size = rng.gen_range(spec.size_lo..=spec.size_hi) as i32;
    let count = rng.gen_range(spec.count_lo..=spec.count_hi) as i32;
    let mut elems: Vec<(f32, f32, Shape)> = Vec::new();
    match spec.kind {
        MotifKind::Stripe => {
            // `count` parallel bars of thickness `size`, stacked vertically.
            let pitch = (size + ELEM_GAP) as f32;
            let y0 = -pitch * (count - 1) as f32 / 2.0;
            for i in 0..count {
                let shape = Shape::Rect { w: STRIPE_LEN, h: size };
                elems.push((0.0, y0 + i as f32 * pitch, shape));
            }
        }
        MotifKind::BlobCluster => {
            // Disks on a ring wide enough that neighbors cannot touch.
            let chord = (2 * size + ELEM_GAP) as f32;
            let rc = if count <= 1 {
                0.0
            } else {
                chord / (2.0 * (std::f32::consts::PI / count as f32).sin())
            };
            for i in 0..count {
                let a = i as f32 / count.max(1) as f32 * std::f32::consts::TAU;
                let jx = rng.gen_range(-1.0..=1.0) * (wobble * 0.5).min(1.0);
                let jy = rng.gen_range(-1.0..=1.0) * (wobble * 0.5).min(1.0);
                elems.push((rc * a.cos() + jx, rc * a.sin() + jy, Shape::Disk { r: size }));
            }
        }
        MotifKind::GridOfSquares => {
            let cols = (count as f32).sqrt().ceil() as i32;
            let rows = (count + cols - 1) / cols;
            let pitch = (size + ELEM_GAP) as f32;
            let x0 = -pitch * (cols - 1) as f32 / 2.0;
            let y0 = -pitch * (rows - 1) as f32 / 2.0;
            for i in 0..count {
                let (r, c) = (i / cols, i % cols);
                elems.push((
                    x0 + c as f32 * pitch,
                    y0 + r as f32 * pitch,
                    Shape::Rect { w: size, h: size },
                ));
            }
        }
        MotifKind::WavyBand => {
            let pitch = size as f32 + 2.0 * WAVY_AMP + ELEM_GAP as f32;
            let y0 = -pitch * (count - 1) as f32 / 2.0;
            for i in 0..count {
                let phase = rng.gen_range(0.0..std::f32::consts::TAU) * noise01;
                let shape = Shape::Wavy { len: WAVY_LEN, thick: size, phase };
                elems.push((0.0, y0 + i as f32 * pitch, shape));
            }
        }
        MotifKind::TextureField => {
            // One even-sided checkerboard: exactly half its pixels paint.
            let side = 2 * size;
            elems.push((0.0, 0.0, Shape::Checker { w: side, h: side }));
        }
    }
    MotifInstance::from_elems(color, elems)
}

fn unit(angle_deg: f32) -> (f32, f32) {
    let a = angle_deg.to_radians();
    (a.cos(), a.sin())
}

/// Satellite placement relative to the anchor center at the origin.
/// Returns element positions in arrangement coordinates.
fn place_satellite(
    rule: &ArrangementRule,
    sat_index: usize,
    anchor: &MotifInstance,
    sat: &MotifInstance,
    wobble: f32,
    noise01: f32,
    rng: &mut ChaCha8Rng,
) -> Vec<(f32, f32, Shape)> {
    // Later satellites fan out so multiple satellites never collide.
    let angle = rule.angle_deg as f32 + sat_index as f32 * 120.0;
    let (dx, dy) = unit(angle);
    let (px, py) = (-dy, dx);
    let along = |m: &MotifInstance| m.half_w * dx.abs() + m.half_h * dy.abs();
    let perp = |m: &MotifInstance| m.half_w * px.abs() + m.half_h * py.abs();
    let offset = rule.offset as f32;

    let block = |dist: f32, slide_amp: f32, rng: &mut ChaCha8Rng| -> (f32, f32) {
        let slide = rng.gen_range(-1.0..=1.0) * slide_amp;
        (dist * dx + slide * px, dist * dy + slide * py)
    };

    match rule.kind {
        RuleKind::AdjacentOn => {
            // Flush against the anchor side, sliding along it.
            let dist = along(anchor) + along(sat) + 1.0 + offset;
            let slide_amp = (perp(anchor) - perp(sat)).max(0.0) * noise01;
            let (cx, cy) = block(dist, slide_amp, rng);
            sat.elems
                .iter()
                .map(|(ex, ey, s)| (cx + ex, cy + ey, s.clone()))
                .collect()
        }
        RuleKind::ParallelTo => {
            let gap = rng.gen_range(-1.0..=1.0) * 2.0 * noise01;
            let dist = along(anchor) + along(sat) + offset.max(2.0) + gap;
            let slide_amp = (perp(anchor) - perp(sat)).max(0.0) * 0.5 * noise01;
            let (cx, cy) = block(dist, slide_amp, rng);
            if sat.elems.len() > 1 {
                // Re-lay multi-element satellites into a line parallel to
                // the anchor side they face. The pitch floor keeps neighbors
                // apart even when both jitter toward each other.
                let k = sat.elems.len();
                let e_half = sat.max_elem_half_diag();
                let min_pitch = 2.0 * e_half + ELEM_GAP as f32 + 2.0 * noise01;
                let natural = (2.0 * perp(anchor) - 2.0 * e_half).max(0.0);
                let pitch = (natural / (k - 1) as f32).max(min_pitch);
                let span = pitch * (k - 1) as f32;
                let start = -span / 2.0;
                sat.elems
                    .iter()
                    .enumerate()
                    .map(|(i, (_, _, s))| {
                        let t = start + pitch * i as f32;
                        let jx = rng.gen_range(-1.0..=1.0) * noise01;
                        let jy = rng.gen_range(-1.0..=1.0) * noise01;
                        (cx + t * px + jx, cy + t * py + jy, s.clone())
                    })
                    .collect()
            } else {
                sat.elems
                    .iter()
                    .map(|(ex, ey, s)| (cx + ex, cy + ey, s.clone()))
                    .collect()
            }
        }
        RuleKind::Surrounds => {
            // Elements evenly spaced on a tight ring around the anchor.
            let e_half = sat.max_elem_half_diag();
            let radius = anchor.half_diag() + e_half + 2.0 + offset;
            let k = sat.elems.len();
            let spacing = 360.0 / k as f32;
            sat.elems
                .iter()
                .enumerate()
                .map(|(i, (_, _, s))| {
                    let aj = rng.gen_range(-1.0..=1.0) * 4.0 * noise01;
                    let rj = rng.gen_range(-1.0..=1.0) * noise01;
                    let (ux, uy) = unit(angle + i as f32 * spacing + aj);
                    ((radius + rj) * ux, (radius + rj) * uy, s.clone())
                })
                .collect()
        }
        RuleKind::ScatteredNear => {
            // Same ring base as Surrounds, but with shuffled order, skewed
            // radii, and angular jitter wide enough to clump neighbors and
            // open holes: near the anchor, irregular. The outer radius never
            // exceeds the Surrounds worst case, so fit margins are shared.
            let e_half = sat.max_elem_half_diag();
            let radius = anchor.half_diag() + e_half + 2.0 + offset;
            let k = sat.elems.len();
            let spacing = 360.0 / k as f32;
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(rng);
            sat.elems
                .iter()
                .enumerate()
                .map(|(i, (_, _, s))| {
                    let aj = rng.gen_range(-1.0..=1.0) * 0.5 * spacing * noise01;
                    let rj = rng.gen_range(-2.0..=6.0) * noise01;
                    let (ux, uy) = unit(angle + order[i] as f32 * spacing + aj);
                    ((radius + rj) * ux, (radius + rj) * uy, s.clone())
                })
                .collect()
        }
        RuleKind::Independent => {
            // A detached block on the 45-degree diagonal from the rule
            // direction, far enough that the supports cannot meet.
            let (ux, uy) = unit(angle + 45.0);
            // The separation margin covers the worst-case inward jitter.
            let dist = anchor.half_diag() + sat.half_diag() + 2.0 + offset + wobble * 1.5;
            let jx = rng.gen_range(-1.0..=1.0) * wobble;
            let jy = rng.gen_range(-1.0..=1.0) * wobble;
            let (cx, cy) = (dist * ux + jx, dist * uy + jy);
            sat.elems
                .iter()
                .map(|(ex, ey, s)| (cx + ex, cy + ey, s.clone()))
                .collect()
        }
    }
}

/// Realizes and places every motif of `class`. Fails if the arrangement
/// cannot fit on the canvas, before anything is painted.
pub(crate) fn compose_scene(
    class: &SceneClassSpec,
    image_size: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    // Pixel noise of ±n shifts element positions by up to n/2 pixels; the
    // wider unitless jitters saturate at n = 8.
    let wobble = class.noise_level as f32 * 0.5;
    let noise01 = (class.noise_level as f32 / 8.0).min(1.0);
    let instances: Vec<MotifInstance> = class
        .motifs
        .iter()
        .map(|m| realize(m, wobble, noise01, rng))
        .collect();

    let anchor = &instances[class.rule.anchor];
    let mut placed: Vec<PlacedElement> = anchor
        .elems
        .iter()
        .map(|(ex, ey, s)| PlacedElement {
            shape: s.clone(),
            cx: *ex,
            cy: *ey,
            color: anchor.color,
        })
        .collect();
    for (si, &mi) in class.rule.satellites.iter().enumerate() {
        let sat = &instances[mi];
        for (cx, cy, shape) in place_satellite(&class.rule, si, anchor, sat, wobble, noise01, rng)
        {
            placed.push(PlacedElement {
                shape,
                cx,
                cy,
                color: sat.color,
            });
        }
    }

    // Union bounds of the arrangement.
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
    for e in &placed {
        let (hw, hh) = e.shape.half();
        lo_x = lo_x.min(e.cx - hw);
        lo_y = lo_y.min(e.cy - hh);
        hi_x = hi_x.max(e.cx + hw);
        hi_y = hi_y.max(e.cy + hh);
    }
    let span = image_size as f32 - 2.0 * CANVAS_MARGIN as f32;
    if hi_x - lo_x > span || hi_y - lo_y > span {
        return Err(Error::Config(format!(
            "class {}: arrangement {:.0}x{:.0} exceeds the {image_size}x{image_size} canvas",
            class.id,
            hi_x - lo_x,
            hi_y - lo_y
        )));
    }

    // Center the arrangement, then wander within the remaining slack.
    let free_x = (span - (hi_x - lo_x)) / 2.0;
    let free_y = (span - (hi_y - lo_y)) / 2.0;
    let wander_x = (rng.gen_range(-1.0..=1.0) * wobble).clamp(-free_x, free_x);
    let wander_y = (rng.gen_range(-1.0..=1.0) * wobble).clamp(-free_y, free_y);
    let shift_x = image_size as f32 / 2.0 - (lo_x + hi_x) / 2.0 + wander_x;
    let shift_y = image_size as f32 / 2.0 - (lo_y + hi_y) / 2.0 + wander_y;
    for e in &mut placed {
        e.cx += shift_x;
        e.cy += shift_y;
    }
    Ok(Scene { elems: placed })
}

fn paint(canvas: &mut [u8], size: i32, elem: &PlacedElement) {
    let mut put = |x: i32, y: i32| {
        if x >= 0 && y >= 0 && x < size && y < size {
            let p = ((y * size + x) * 3) as usize;
            canvas[p..p + 3].copy_from_slice(&elem.color);
        }
    };
    let (cx, cy) = (elem.cx, elem.cy);
    match elem.shape {
        Shape::Disk { r } => {
            let (icx, icy) = (cx.round() as i32, cy.round() as i32);
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy <= r * r {
                        put(icx + dx, icy + dy);
                    }
                }
            }
        }
        Shape::Rect { w, h } => {
            let x0 = (cx - w as f32 / 2.0).round() as i32;
            let y0 = (cy - h as f32 / 2.0).round() as i32;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    put(x, y);
                }
            }
        }
        Shape::Checker { w, h } => {
            let x0 = (cx - w as f32 / 2.0).round() as i32;
            let y0 = (cy - h as f32 / 2.0).round() as i32;
            for y in 0..h {
                for x in 0..w {
                    if (x / CHECKER_CELL + y / CHECKER_CELL) % 2 == 0 {
                        put(x0 + x, y0 + y);
                    }
                }
            }
        }
        Shape::Wavy { len, thick, phase } => {
            let x0 = (cx - len as f32 / 2.0).round() as i32;
            for i in 0..len {
                let t = (i as f32 + phase) / WAVY_PERIOD * std::f32::consts::TAU;
                let yc = cy + WAVY_AMP * t.sin();
                let y0 = (yc - thick as f32 / 2.0).round() as i32;
                for y in y0..y0 + thick {
                    put(x0 + i, y);
                }
            }
        }
    }
}

/// Paints a composed scene and applies per-pixel noise.
pub(crate) fn rasterize(
    scene: &Scene,
    image_size: u32,
    noise_level: u8,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let size = image_size as i32;
    let mut canvas = Vec::with_capacity((size * size * 3) as usize);
    for _ in 0..size * size {
        canvas.extend_from_slice(&BACKGROUND);
    }
    for elem in &scene.elems {
        paint(&mut canvas, size, elem);
    }
    let n = noise_level as i32;
    for v in canvas.iter_mut() {
        let d = rng.gen_range(-n..=n);
        *v = (*v as i32 + d).clamp(0, 255) as u8;
    }
    canvas
}

/// Renders one image of `class` from an explicit RNG stream.
pub fn render_image(
    class: &SceneClassSpec,
    image_size: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u8>> {
    let scene = compose_scene(class, image_size, rng)?;
    Ok(rasterize(&scene, image_size, class.noise_level, rng))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// The RNG stream of image `index` of `class_id`: a pure function of the
/// triple, so any generation order produces identical pixels.
pub fn image_rng(seed: u64, class_id: u32, index: u32) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(seed ^ ((class_id as u64) << 32)) ^ index as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}
