//! Procedural scene classes and dataset persistence.
//!
//! A scene class is a set of motifs (what appears together) plus an
//! arrangement rule (how it is laid out). Classes built from the same motifs
//! under different rules form *arrangement pairs*: identical in color
//! statistics, distinguishable only by spatial structure. Datasets are
//! written as binary PPM images plus a tab-separated index, both
//! deterministic functions of the manifest.

mod render;

pub use render::{image_rng, render_image, BACKGROUND};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use crate::backbone::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::image_io::{self, atomic_write};
use crate::tensor::Tensor;

/// What a motif paints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotifKind {
    Stripe,
    BlobCluster,
    GridOfSquares,
    WavyBand,
    TextureField,
}

impl MotifKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MotifKind::Stripe => "stripe",
            MotifKind::BlobCluster => "blob-cluster",
            MotifKind::GridOfSquares => "grid-of-squares",
            MotifKind::WavyBand => "wavy-band",
            MotifKind::TextureField => "texture-field",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "stripe" => MotifKind::Stripe,
            "blob-cluster" => MotifKind::BlobCluster,
            "grid-of-squares" => MotifKind::GridOfSquares,
            "wavy-band" => MotifKind::WavyBand,
            "texture-field" => MotifKind::TextureField,
            other => return Err(Error::Config(format!("unknown motif kind `{other}`"))),
        })
    }
}

/// How satellites relate to the anchor motif.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleKind {
    AdjacentOn,
    ParallelTo,
    Surrounds,
    ScatteredNear,
    Independent,
}

impl RuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::AdjacentOn => "adjacent-on",
            RuleKind::ParallelTo => "parallel-to",
            RuleKind::Surrounds => "surrounds",
            RuleKind::ScatteredNear => "scattered-near",
            RuleKind::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "adjacent-on" => RuleKind::AdjacentOn,
            "parallel-to" => RuleKind::ParallelTo,
            "surrounds" => RuleKind::Surrounds,
            "scattered-near" => RuleKind::ScatteredNear,
            "independent" => RuleKind::Independent,
            other => return Err(Error::Config(format!("unknown rule kind `{other}`"))),
        })
    }
}

/// Dataset split membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::Config(format!("unknown split `{other}`"))),
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One repeated object kind: color distribution plus size/count ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotifSpec {
    pub kind: MotifKind,
    /// Mean RGB of painted pixels.
    pub color: [u8; 3],
    /// Per-channel uniform color jitter, sampled once per image.
    pub color_jitter: u8,
    pub size_lo: u32,
    pub size_hi: u32,
    pub count_lo: u32,
    pub count_hi: u32,
}

impl MotifSpec {
    fn validate(&self, ctx: &str) -> Result<()> {
        if self.size_lo == 0 || self.size_lo > self.size_hi {
            return Err(Error::Config(format!(
                "{ctx}: size range {}..{} is empty",
                self.size_lo, self.size_hi
            )));
        }
        if self.count_lo == 0 || self.count_lo > self.count_hi {
            return Err(Error::Config(format!(
                "{ctx}: count range {}..{} is empty",
                self.count_lo, self.count_hi
            )));
        }
        Ok(())
    }
}

/// Spatial law binding the anchor motif to each satellite motif.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArrangementRule {
    pub kind: RuleKind,
    /// Index of the anchor motif in the class motif list.
    pub anchor: usize,
    /// Indices of the satellite motifs, in placement order.
    pub satellites: Vec<usize>,
    /// Extra distance between anchor and satellites, in pixels.
    pub offset: u32,
    /// Direction of the arrangement, degrees clockwise from +x.
    pub angle_deg: u32,
}

impl ArrangementRule {
    fn validate(&self, n_motifs: usize, ctx: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        seen.insert(self.anchor);
        for &s in &self.satellites {
            if !seen.insert(s) {
                return Err(Error::Config(format!(
                    "{ctx}: rule references motif {s} twice"
                )));
            }
        }
        if self.satellites.is_empty() {
            return Err(Error::Config(format!("{ctx}: rule binds no motif pair")));
        }
        if let Some(&bad) = seen.iter().find(|&&i| i >= n_motifs) {
            return Err(Error::Config(format!(
                "{ctx}: rule references motif {bad}, but the class has {n_motifs}"
            )));
        }
        if seen.len() != n_motifs {
            return Err(Error::Config(format!(
                "{ctx}: rule must bind every motif of the class"
            )));
        }
        if self.angle_deg >= 360 {
            return Err(Error::Config(format!(
                "{ctx}: angle {} out of [0, 360)",
                self.angle_deg
            )));
        }
        Ok(())
    }
}

/// A scene class: what appears and how it is arranged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneClassSpec {
    pub id: u32,
    pub split: Split,
    pub motifs: Vec<MotifSpec>,
    pub rule: ArrangementRule,
    /// Pixel noise amplitude (8-bit counts); also scales placement wobble.
    pub noise_level: u8,
}

impl SceneClassSpec {
    fn validate(&self) -> Result<()> {
        let ctx = format!("class {}", self.id);
        if self.motifs.len() < 2 {
            return Err(Error::Config(format!(
                "{ctx}: needs at least 2 motifs, has {}",
                self.motifs.len()
            )));
        }
        for (i, m) in self.motifs.iter().enumerate() {
            m.validate(&format!("{ctx} motif {i}"))?;
        }
        self.rule.validate(self.motifs.len(), &ctx)
    }
}

/// Everything needed to generate a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: u32,
    pub images_per_class: u32,
    pub classes: Vec<SceneClassSpec>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.image_size as usize != IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size must be {IMAGE_SIZE}, got {}",
                self.image_size
            )));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("manifest declares no classes".into()));
        }
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if !ids.insert(c.id) {
                return Err(Error::Config(format!("duplicate class id {}", c.id)));
            }
            c.validate()?;
        }
        Ok(())
    }

    /// Class ids assigned to `split`, in manifest order.
    pub fn split_class_ids(&self, split: Split) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Arrangement pairs
// ---------------------------------------------------------------------------

/// Builds two classes over the same motifs that differ only in arrangement:
/// equal co-occurrence and color statistics, different layout.
pub fn make_arrangement_pair(
    ids: (u32, u32),
    split: Split,
    motifs: Vec<MotifSpec>,
    rule_a: ArrangementRule,
    rule_b: ArrangementRule,
    noise_level: u8,
) -> Result<[SceneClassSpec; 2]> {
    if rule_a == rule_b {
        return Err(Error::InvalidArgument(
            "arrangement pair needs two distinct rules over the shared motifs".into(),
        ));
    }
    let a = SceneClassSpec {
        id: ids.0,
        split,
        motifs: motifs.clone(),
        rule: rule_a,
        noise_level,
    };
    let b = SceneClassSpec {
        id: ids.1,
        split,
        motifs,
        rule: rule_b,
        noise_level,
    };
    a.validate()?;
    b.validate()?;
    Ok([a, b])
}

// ---------------------------------------------------------------------------
// Manifest text format
// ---------------------------------------------------------------------------

/// Serializes a manifest as flat `key = value` lines with dotted keys.
pub fn manifest_to_text(m: &DatasetManifest) -> String {
    let mut out = String::new();
    out.push_str(&format!("seed = {}\n", m.seed));
    out.push_str(&format!("image_size = {}\n", m.image_size));
    out.push_str(&format!("images_per_class = {}\n", m.images_per_class));
    for (ci, c) in m.classes.iter().enumerate() {
        let p = format!("class.{ci}");
        out.push('\n');
        out.push_str(&format!("{p}.id = {}\n", c.id));
        out.push_str(&format!("{p}.split = {}\n", c.split));
        out.push_str(&format!("{p}.noise = {}\n", c.noise_level));
        out.push_str(&format!("{p}.rule.kind = {}\n", c.rule.kind.as_str()));
        out.push_str(&format!("{p}.rule.anchor = {}\n", c.rule.anchor));
        let sats: Vec<String> = c.rule.satellites.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("{p}.rule.satellites = {}\n", sats.join(",")));
        out.push_str(&format!("{p}.rule.offset = {}\n", c.rule.offset));
        out.push_str(&format!("{p}.rule.angle = {}\n", c.rule.angle_deg));
        for (mi, mo) in c.motifs.iter().enumerate() {
            let q = format!("{p}.motif.{mi}");
            out.push_str(&format!("{q}.kind = {}\n", mo.kind.as_str()));
            out.push_str(&format!(
                "{q}.color = {},{},{}\n",
                mo.color[0], mo.color[1], mo.color[2]
            ));
            out.push_str(&format!("{q}.jitter = {}\n", mo.color_jitter));
            out.push_str(&format!("{q}.size = {}..{}\n", mo.size_lo, mo.size_hi));
            out.push_str(&format!("{q}.count = {}..{}\n", mo.count_lo, mo.count_hi));
        }
    }
    out
}

fn parse_range(v: &str, key: &str) -> Result<(u32, u32)> {
    let (lo, hi) = v
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("{key}: expected `lo..hi`, got `{v}`")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<u32>()
            .map_err(|_| Error::Config(format!("{key}: bad number `{s}`")))
    };
    Ok((parse(lo)?, parse(hi)?))
}

fn parse_color(v: &str, key: &str) -> Result<[u8; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key}: expected `r,g,b`, got `{v}`")));
    }
    let mut c = [0u8; 3];
    for (o, p) in c.iter_mut().zip(&parts) {
        *o = p
            .parse::<u8>()
            .map_err(|_| Error::Config(format!("{key}: channel `{p}` not in 0..=255")))?;
    }
    Ok(c)
}

/// Parses the flat `key = value` manifest format.
pub fn manifest_from_text(text: &str) -> Result<DatasetManifest> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("manifest line {}: missing `=`", ln + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "manifest line {}: duplicate key `{}`",
                ln + 1,
                k.trim()
            )));
        }
    }
    let take = |map: &mut BTreeMap<String, String>, key: &str| -> Result<String> {
        map.remove(key)
            .ok_or_else(|| Error::Config(format!("manifest missing key `{key}`")))
    };
    let parse_u64 = |v: &str, key: &str| -> Result<u64> {
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: bad number `{v}`")))
    };

    let seed = parse_u64(&take(&mut map, "seed")?, "seed")?;
    let image_size = parse_u64(&take(&mut map, "image_size")?, "image_size")? as u32;
    let images_per_class =
        parse_u64(&take(&mut map, "images_per_class")?, "images_per_class")? as u32;

    let n_classes = map
        .keys()
        .filter_map(|k| {
            k.strip_prefix("class.")
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse::<usize>().ok())
        })
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);

    let mut classes = Vec::with_capacity(n_classes);
    for ci in 0..n_classes {
        let p = format!("class.{ci}");
        let id = parse_u64(&take(&mut map, &format!("{p}.id"))?, "id")? as u32;
        let split = Split::parse(&take(&mut map, &format!("{p}.split"))?)?;
        let noise = parse_u64(&take(&mut map, &format!("{p}.noise"))?, "noise")?;
        if noise > 64 {
            return Err(Error::Config(format!("{p}.noise: {noise} exceeds 64")));
        }
        let kind = RuleKind::parse(&take(&mut map, &format!("{p}.rule.kind"))?)?;
        let anchor = parse_u64(&take(&mut map, &format!("{p}.rule.anchor"))?, "anchor")? as usize;
        let sats_raw = take(&mut map, &format!("{p}.rule.satellites"))?;
        let satellites = sats_raw
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("{p}.rule.satellites: bad `{s}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let offset = parse_u64(&take(&mut map, &format!("{p}.rule.offset"))?, "offset")? as u32;
        let angle = parse_u64(&take(&mut map, &format!("{p}.rule.angle"))?, "angle")? as u32;

        let n_motifs = map
            .keys()
            .filter_map(|k| {
                k.strip_prefix(&format!("{p}.motif."))
                    .and_then(|r| r.split('.').next())
                    .and_then(|i| i.parse::<usize>().ok())
            })
            .max()
            .map(|m| m + 1)
            .unwrap_or(0);
        let mut motifs = Vec::with_capacity(n_motifs);
        for mi in 0..n_motifs {
            let q = format!("{p}.motif.{mi}");
            let kind = MotifKind::parse(&take(&mut map, &format!("{q}.kind"))?)?;
            let color = parse_color(&take(&mut map, &format!("{q}.color"))?, &q)?;
            let jitter = parse_u64(&take(&mut map, &format!("{q}.jitter"))?, "jitter")?;
            if jitter > 64 {
                return Err(Error::Config(format!("{q}.jitter: {jitter} exceeds 64")));
            }
            let (size_lo, size_hi) = parse_range(&take(&mut map, &format!("{q}.size"))?, &q)?;
            let (count_lo, count_hi) = parse_range(&take(&mut map, &format!("{q}.count"))?, &q)?;
            motifs.push(MotifSpec {
                kind,
                color,
                color_jitter: jitter as u8,
                size_lo,
                size_hi,
                count_lo,
                count_hi,
            });
        }
        classes.push(SceneClassSpec {
            id,
            split,
            motifs,
            rule: ArrangementRule {
                kind,
                anchor,
                satellites,
                offset,
                angle_deg: angle,
            },
            noise_level: noise as u8,
        });
    }
    if let Some(k) = map.keys().next() {
        return Err(Error::Config(format!("manifest has unknown key `{k}`")));
    }
    let manifest = DatasetManifest {
        seed,
        image_size,
        images_per_class,
        classes,
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    atomic_write(path, manifest_to_text(m).as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    manifest_from_text(&text).map_err(|e| match e {
        Error::Config(msg) => Error::data(path, msg),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// Default manifest
// ---------------------------------------------------------------------------

fn motif(kind: MotifKind, color: [u8; 3], size: (u32, u32), count: (u32, u32)) -> MotifSpec {
    MotifSpec {
        kind,
        color,
        color_jitter: 10,
        size_lo: size.0,
        size_hi: size.1,
        count_lo: count.0,
        count_hi: count.1,
    }
}

fn rule(kind: RuleKind, offset: u32, angle_deg: u32) -> ArrangementRule {
    ArrangementRule {
        kind,
        anchor: 0,
        satellites: vec![1],
        offset,
        angle_deg,
    }
}

const NOISE: u8 = 8;

fn stripe(color: [u8; 3]) -> MotifSpec {
    motif(MotifKind::Stripe, color, (4, 5), (1, 1))
}
fn blobs(color: [u8; 3]) -> MotifSpec {
    motif(MotifKind::BlobCluster, color, (2, 3), (5, 7))
}
fn squares(color: [u8; 3]) -> MotifSpec {
    motif(MotifKind::GridOfSquares, color, (3, 4), (4, 6))
}
fn wavy(color: [u8; 3]) -> MotifSpec {
    motif(MotifKind::WavyBand, color, (3, 4), (1, 1))
}
fn texture(color: [u8; 3]) -> MotifSpec {
    motif(MotifKind::TextureField, color, (7, 8), (1, 1))
}

const RED: [u8; 3] = [200, 60, 50];
const ORANGE: [u8; 3] = [220, 140, 40];
const YELLOW: [u8; 3] = [210, 200, 60];
const GREEN: [u8; 3] = [70, 180, 80];
const TEAL: [u8; 3] = [50, 180, 170];
const BLUE: [u8; 3] = [60, 110, 210];
const PURPLE: [u8; 3] = [140, 80, 200];
const PINK: [u8; 3] = [220, 100, 170];
const BROWN: [u8; 3] = [150, 100, 60];
const GRAY: [u8; 3] = [160, 160, 165];
const WHITE: [u8; 3] = [230, 230, 225];
const DARK_GREEN: [u8; 3] = [40, 110, 60];
const SLATE: [u8; 3] = [90, 90, 95];

/// The standard 24-class benchmark: 12 train / 6 val / 6 test classes.
/// Every duo shares its motifs and pairs arrangements whose pooled
/// statistics match (a ring and a scatter at the same base radius, or two
/// lines differing only in direction), so bag-of-features metrics have no
/// shortcut inside a duo. The train split carries the same two duo kinds,
/// which forces episodic training to discriminate by arrangement.
pub fn default_manifest() -> DatasetManifest {
    let pair = |ids, split, motifs: [MotifSpec; 2], ra, rb| -> [SceneClassSpec; 2] {
        make_arrangement_pair(ids, split, motifs.to_vec(), ra, rb, NOISE)
            .expect("default pairs are valid")
    };
    let single = |id, split, motifs: [MotifSpec; 2], r| SceneClassSpec {
        id,
        split,
        motifs: motifs.to_vec(),
        rule: r,
        noise_level: NOISE,
    };

    let mut classes = Vec::new();
    // Train: two ring-vs-scatter duos, two line-angle duos, four singles.
    classes.extend(pair(
        (0, 1),
        Split::Train,
        [stripe(DARK_GREEN), squares(WHITE)],
        rule(RuleKind::Surrounds, 0, 0),
        rule(RuleKind::ScatteredNear, 0, 0),
    ));
    classes.extend(pair(
        (2, 3),
        Split::Train,
        [blobs(WHITE), squares(SLATE)],
        rule(RuleKind::Surrounds, 1, 30),
        rule(RuleKind::ScatteredNear, 1, 0),
    ));
    classes.extend(pair(
        (4, 5),
        Split::Train,
        [texture(GREEN), wavy(RED)],
        rule(RuleKind::ParallelTo, 6, 90),
        rule(RuleKind::ParallelTo, 6, 0),
    ));
    classes.extend(pair(
        (6, 7),
        Split::Train,
        [blobs(ORANGE), squares(TEAL)],
        rule(RuleKind::ParallelTo, 8, 90),
        rule(RuleKind::ParallelTo, 8, 0),
    ));
    classes.push(single(
        8,
        Split::Train,
        [texture(YELLOW), blobs(BLUE)],
        rule(RuleKind::AdjacentOn, 0, 0),
    ));
    classes.push(single(
        9,
        Split::Train,
        [squares(RED), blobs(GREEN)],
        rule(RuleKind::Independent, 4, 45),
    ));
    classes.push(single(
        10,
        Split::Train,
        [
            stripe(PURPLE),
            motif(MotifKind::BlobCluster, GRAY, (2, 2), (3, 4)),
        ],
        rule(RuleKind::AdjacentOn, 0, 90),
    ));
    classes.push(single(
        11,
        Split::Train,
        [stripe(BROWN), texture(PINK)],
        rule(RuleKind::ParallelTo, 8, 90),
    ));
    // Val: two pairs and two singles.
    classes.extend(pair(
        (12, 13),
        Split::Val,
        [
            motif(MotifKind::BlobCluster, GREEN, (2, 3), (4, 5)),
            squares(ORANGE),
        ],
        rule(RuleKind::Surrounds, 0, 0),
        rule(RuleKind::ScatteredNear, 0, 0),
    ));
    classes.extend(pair(
        (14, 15),
        Split::Val,
        [blobs(PINK), squares(BROWN)],
        rule(RuleKind::ParallelTo, 8, 90),
        rule(RuleKind::ParallelTo, 8, 0),
    ));
    classes.push(single(
        16,
        Split::Val,
        [texture(GRAY), blobs(RED)],
        rule(RuleKind::AdjacentOn, 0, 0),
    ));
    classes.push(single(
        17,
        Split::Val,
        [
            wavy(WHITE),
            motif(MotifKind::BlobCluster, DARK_GREEN, (2, 2), (5, 7)),
        ],
        rule(RuleKind::ScatteredNear, 0, 0),
    ));
    // Test: three pairs, no singles.
    classes.extend(pair(
        (18, 19),
        Split::Test,
        [stripe(GRAY), squares(RED)],
        rule(RuleKind::Surrounds, 0, 0),
        rule(RuleKind::ScatteredNear, 0, 0),
    ));
    classes.extend(pair(
        (20, 21),
        Split::Test,
        [
            motif(MotifKind::BlobCluster, YELLOW, (2, 2), (4, 5)),
            squares(BLUE),
        ],
        rule(RuleKind::ParallelTo, 8, 90),
        rule(RuleKind::ParallelTo, 8, 0),
    ));
    classes.extend(pair(
        (22, 23),
        Split::Test,
        [wavy(TEAL), squares(PURPLE)],
        rule(RuleKind::Surrounds, 1, 0),
        rule(RuleKind::ScatteredNear, 1, 0),
    ));

    DatasetManifest {
        seed: 7,
        image_size: IMAGE_SIZE as u32,
        images_per_class: 60,
        classes,
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Name of the dataset index file.
pub const INDEX_FILE: &str = "index.tsv";
/// Name of the manifest copy stored with a generated dataset.
pub const MANIFEST_FILE: &str = "manifest.cfg";

fn image_rel_path(class_id: u32, index: u32) -> String {
    format!("class_{class_id:02}/img_{index:03}.ppm")
}

/// Generates every image plus the index file under `out_dir`. All placements
/// are validated before the first write.
pub fn generate_dataset(manifest: &DatasetManifest, out_dir: &Path) -> Result<usize> {
    manifest.validate()?;
    // Dry-run pass: compose every scene so canvas-overflow errors surface
    // before anything touches the disk.
    for class in &manifest.classes {
        for index in 0..manifest.images_per_class {
            let mut rng = image_rng(manifest.seed, class.id, index);
            render::compose_scene(class, manifest.image_size, &mut rng).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{msg} (image {index})")),
                other => other,
            })?;
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut index_lines = String::new();
    let mut written = 0usize;
    for class in &manifest.classes {
        let class_dir = out_dir.join(format!("class_{:02}", class.id));
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        for index in 0..manifest.images_per_class {
            let mut rng = image_rng(manifest.seed, class.id, index);
            let pixels = render_image(class, manifest.image_size, &mut rng)?;
            let rel = image_rel_path(class.id, index);
            image_io::write_ppm(
                &out_dir.join(&rel),
                manifest.image_size as usize,
                manifest.image_size as usize,
                &pixels,
            )?;
            index_lines.push_str(&format!("{rel}\t{}\t{}\n", class.id, class.split));
            written += 1;
        }
    }
    save_manifest(&out_dir.join(MANIFEST_FILE), manifest)?;
    atomic_write(&out_dir.join(INDEX_FILE), index_lines.as_bytes())?;
    Ok(written)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// All images of one class, in index order.
#[derive(Debug)]
pub struct LoadedClass {
    pub class_id: u32,
    pub images: Vec<Tensor>,
}

/// Classes of one split, in index order.
#[derive(Debug, Default)]
pub struct SplitImages {
    pub classes: Vec<LoadedClass>,
}

impl SplitImages {
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    /// Flattens to (images, dense labels 0..n_classes) for batch training.
    pub fn stacked(&self) -> (Vec<Tensor>, Vec<u32>) {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (li, c) in self.classes.iter().enumerate() {
            for img in &c.images {
                images.push(img.clone());
                labels.push(li as u32);
            }
        }
        (images, labels)
    }
}

/// A dataset decoded to tensors, grouped by split and class.
#[derive(Debug)]
pub struct LoadedDataset {
    pub train: SplitImages,
    pub val: SplitImages,
    pub test: SplitImages,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> &SplitImages {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Reads a generated dataset back into `[3, 64, 64]` tensors in [0, 1].
/// Reads one dataset image: a 64x64 binary PPM converted to a planar
/// `[3, 64, 64]` tensor, interleaved rows to channel planes, scaled by
/// exactly 1/255.
pub fn load_image_tensor(path: &Path) -> Result<Tensor> {
    let ppm = image_io::read_ppm(path)?;
    if ppm.width != IMAGE_SIZE || ppm.height != IMAGE_SIZE {
        return Err(Error::data(
            path,
            format!(
                "expected {IMAGE_SIZE}x{IMAGE_SIZE} pixels, got {}x{}",
                ppm.width, ppm.height
            ),
        ));
    }
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in ppm.pixels.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * hw + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data)
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let index_path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut dataset = LoadedDataset {
        train: SplitImages::default(),
        val: SplitImages::default(),
        test: SplitImages::default(),
    };
    for (ln, raw) in text.lines().enumerate() {
        let mut parts = raw.split('\t');
        let (rel, id_str, split_str) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) if parts.next().is_none() => (a, b, c),
            _ => {
                return Err(Error::data(
                    &index_path,
                    format!("line {}: expected `path\\tclass\\tsplit`", ln + 1),
                ))
            }
        };
        let class_id: u32 = id_str.parse().map_err(|_| {
            Error::data(&index_path, format!("line {}: bad class id `{id_str}`", ln + 1))
        })?;
        let split = Split::parse(split_str)
            .map_err(|_| Error::data(&index_path, format!("line {}: bad split `{split_str}`", ln + 1)))?;

        let img_path = dir.join(rel);
        let tensor = load_image_tensor(&img_path)?;

        let bucket = match split {
            Split::Train => &mut dataset.train,
            Split::Val => &mut dataset.val,
            Split::Test => &mut dataset.test,
        };
        match bucket.classes.iter_mut().find(|c| c.class_id == class_id) {
            Some(c) => c.images.push(tensor),
            None => bucket.classes.push(LoadedClass {
                class_id,
                images: vec![tensor],
            }),
        }
    }
    if dataset.train.classes.is_empty()
        && dataset.val.classes.is_empty()
        && dataset.test.classes.is_empty()
    {
        return Err(Error::data(&index_path, "index lists no images"));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest() -> DatasetManifest {
        DatasetManifest {
            seed: 3,
            image_size: IMAGE_SIZE as u32,
            images_per_class: 3,
            classes: vec![
                SceneClassSpec {
                    id: 0,
                    split: Split::Train,
                    motifs: vec![stripe(GRAY), squares(RED)],
                    rule: rule(RuleKind::AdjacentOn, 0, 90),
                    noise_level: 8,
                },
                SceneClassSpec {
                    id: 1,
                    split: Split::Test,
                    motifs: vec![blobs(BLUE), squares(YELLOW)],
                    rule: rule(RuleKind::Surrounds, 0, 0),
                    noise_level: 8,
                },
            ],
        }
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = default_manifest();
        let text = manifest_to_text(&m);
        let back = manifest_from_text(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_rejects_duplicate_ids_and_bad_rules() {
        let mut m = tiny_manifest();
        m.classes[1].id = 0;
        assert!(m.validate().is_err());

        let mut m = tiny_manifest();
        m.classes[0].rule.satellites = vec![5];
        assert!(m.validate().is_err());

        let mut m = tiny_manifest();
        m.classes[0].motifs.truncate(1);
        assert!(m.validate().is_err());

        let mut m = tiny_manifest();
        m.image_size = 32;
        assert!(m.validate().is_err());
    }

    #[test]
    fn default_manifest_shape() {
        let m = default_manifest();
        m.validate().unwrap();
        assert_eq!(m.classes.len(), 24);
        assert_eq!(m.split_class_ids(Split::Train).len(), 12);
        assert_eq!(m.split_class_ids(Split::Val).len(), 6);
        assert_eq!(m.split_class_ids(Split::Test).len(), 6);
        assert_eq!(m.images_per_class, 60);
        // Split lists are pairwise disjoint.
        let mut all: Vec<u32> = m.classes.iter().map(|c| c.id).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 24);
    }

    #[test]
    fn identical_rules_are_rejected_for_pairs() {
        let r = rule(RuleKind::AdjacentOn, 0, 90);
        let err = make_arrangement_pair(
            (0, 1),
            Split::Test,
            vec![stripe(GRAY), squares(RED)],
            r.clone(),
            r,
            8,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn rules_differing_only_by_angle_form_a_valid_pair() {
        let pair = make_arrangement_pair(
            (0, 1),
            Split::Val,
            vec![blobs(PINK), squares(BROWN)],
            rule(RuleKind::ParallelTo, 8, 90),
            rule(RuleKind::ParallelTo, 8, 0),
            8,
        )
        .unwrap();
        assert_ne!(pair[0].rule, pair[1].rule);
    }

    #[test]
    fn rendering_is_deterministic_per_seed_triple() {
        let m = tiny_manifest();
        let a = render_image(&m.classes[0], 64, &mut image_rng(m.seed, 0, 1)).unwrap();
        let b = render_image(&m.classes[0], 64, &mut image_rng(m.seed, 0, 1)).unwrap();
        assert_eq!(a, b);
        let c = render_image(&m.classes[0], 64, &mut image_rng(m.seed, 0, 2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_fixed_motifs_render_identical_images() {
        let fixed = |kind, color| MotifSpec {
            kind,
            color,
            color_jitter: 0,
            size_lo: 3,
            size_hi: 3,
            count_lo: 4,
            count_hi: 4,
        };
        let class = SceneClassSpec {
            id: 0,
            split: Split::Train,
            motifs: vec![
                fixed(MotifKind::Stripe, GRAY),
                fixed(MotifKind::GridOfSquares, RED),
            ],
            rule: rule(RuleKind::ScatteredNear, 0, 0),
            noise_level: 0,
        };
        let a = render_image(&class, 64, &mut image_rng(9, 0, 0)).unwrap();
        let b = render_image(&class, 64, &mut image_rng(9, 0, 55)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_default_class_fits_the_canvas_under_stress() {
        let m = default_manifest();
        for class in &m.classes {
            for index in 0..300 {
                let mut rng = image_rng(m.seed, class.id, index);
                render::compose_scene(class, m.image_size, &mut rng)
                    .unwrap_or_else(|e| panic!("class {}: {e}", class.id));
            }
        }
    }

    #[test]
    fn oversized_arrangement_is_rejected_before_writes() {
        let mut m = tiny_manifest();
        m.classes[0].motifs[1] = motif(MotifKind::GridOfSquares, RED, (9, 9), (30, 30));
        m.classes[0].rule = rule(RuleKind::Independent, 20, 45);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        assert!(generate_dataset(&m, &out).is_err());
        assert!(!out.exists(), "nothing may be written on failure");
    }
}
