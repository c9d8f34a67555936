//! Procedural glyph-character dataset.
//!
//! An identity is a tuple of discrete attributes (body shape, body color, trim
//! color, accessory, texture motif); a scene adds a pose, a background and a
//! small camera offset. Every attribute can be read back from a render by
//! [`probe`], which is what makes identity and instruction metrics exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Image;
use crate::error::{io_err, Error, Result};

pub const NUM_SHAPES: usize = 8;
pub const NUM_COLORS: usize = 10;
pub const NUM_ACCESSORIES: usize = 6;
pub const NUM_MOTIFS: usize = 4;
pub const NUM_BACKGROUNDS: usize = 10;
pub const NUM_JOINTS: usize = 5;

const SHAPE_NAMES: [&str; NUM_SHAPES] = ["square", "tall", "wide", "disc", "tri_up", "tri_down", "diamond", "hourglass"];
const BODY_NAMES: [&str; NUM_COLORS] = ["red", "orange", "yellow", "green", "teal", "blue", "purple", "pink", "brown", "lime"];
const TRIM_NAMES: [&str; NUM_COLORS] =
    ["navy", "maroon", "olive", "forest", "indigo", "black", "white", "cyan", "magenta", "sky"];
const ACC_NAMES: [&str; NUM_ACCESSORIES] = ["none", "hat", "crown", "antenna", "glasses", "bowtie"];
const MOTIF_NAMES: [&str; NUM_MOTIFS] = ["plain", "hstripes", "vstripes", "dots"];
const POSE_WORDS: [&str; 13] = [
    "larm_up", "larm_side", "larm_down", "rarm_up", "rarm_side", "rarm_down", "lleg_out", "lleg_straight", "rleg_out",
    "rleg_straight", "head_left", "head_center", "head_right",
];
const VERBS: [&str; 7] = ["recolor", "trim", "add", "motif", "background", "reshape", "keep"];

pub const BODY_PALETTE: [[f32; 3]; NUM_COLORS] = [
    [0.90, 0.10, 0.10],
    [1.00, 0.55, 0.00],
    [0.95, 0.90, 0.10],
    [0.10, 0.75, 0.15],
    [0.00, 0.65, 0.65],
    [0.10, 0.25, 0.90],
    [0.55, 0.15, 0.80],
    [1.00, 0.40, 0.75],
    [0.55, 0.30, 0.10],
    [0.60, 0.95, 0.20],
];
pub const TRIM_PALETTE: [[f32; 3]; NUM_COLORS] = [
    [0.00, 0.00, 0.45],
    [0.45, 0.00, 0.05],
    [0.40, 0.40, 0.00],
    [0.00, 0.35, 0.10],
    [0.25, 0.00, 0.40],
    [0.05, 0.05, 0.05],
    [0.98, 0.98, 0.98],
    [0.30, 0.90, 1.00],
    [0.90, 0.00, 0.90],
    [0.50, 0.70, 1.00],
];
/// Index 0 (`none`) has no color.
pub const ACC_PALETTE: [[f32; 3]; NUM_ACCESSORIES] = [
    [0.0, 0.0, 0.0],
    [0.15, 0.55, 0.35],
    [1.00, 0.85, 0.45],
    [0.60, 0.60, 0.65],
    [0.35, 0.20, 0.50],
    [0.95, 0.20, 0.45],
];
pub const LIMB_COLOR: [f32; 3] = [0.30, 0.30, 0.30];
const BG_COLORS: [[f32; 3]; 5] =
    [[0.82, 0.90, 0.80], [0.90, 0.85, 0.75], [0.80, 0.85, 0.95], [0.93, 0.82, 0.88], [0.88, 0.88, 0.80]];
/// Color pair per background; solid backgrounds repeat one color.
const BG_PAIRS: [(usize, usize); NUM_BACKGROUNDS] =
    [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (0, 2), (1, 3), (4, 2), (1, 2), (3, 0)];

/// Inclusive joint limits in radians: left arm, right arm, left leg, right leg, head.
pub const JOINT_LIMITS: [(f64, f64); NUM_JOINTS] = [(-1.0, 0.8), (-1.0, 0.8), (0.0, 0.6), (0.0, 0.6), (-0.4, 0.4)];

pub const CAPTION_LEN: usize = 11;
pub const INSTRUCTION_LEN: usize = 2;
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

fn build_vocab() -> Vec<String> {
    let mut v = vec!["<pad>".to_string(), "<unk>".to_string()];
    v.extend(SHAPE_NAMES.iter().map(|s| format!("shape_{s}")));
    v.extend(BODY_NAMES.iter().map(|s| format!("body_{s}")));
    v.extend(TRIM_NAMES.iter().map(|s| format!("trim_{s}")));
    v.extend(ACC_NAMES.iter().map(|s| format!("acc_{s}")));
    v.extend(MOTIF_NAMES.iter().map(|s| format!("motif_{s}")));
    v.extend((0..NUM_BACKGROUNDS).map(|i| format!("bg_{i}")));
    v.extend(POSE_WORDS.iter().map(|s| s.to_string()));
    v.extend(VERBS.iter().map(|s| s.to_string()));
    v
}

pub const VOCAB_SIZE: usize = 2 + NUM_SHAPES + 2 * NUM_COLORS + NUM_ACCESSORIES + NUM_MOTIFS + NUM_BACKGROUNDS + 13 + 7;

/// The closed symbol vocabulary, index = token id.
pub fn vocab() -> &'static [String] {
    static V: OnceLock<Vec<String>> = OnceLock::new();
    V.get_or_init(build_vocab)
}

/// Token id of a symbol; unknown symbols map to `<unk>`.
pub fn token_id(symbol: &str) -> u32 {
    static IDX: OnceLock<BTreeMap<String, u32>> = OnceLock::new();
    let idx = IDX.get_or_init(|| vocab().iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect());
    idx.get(symbol).copied().unwrap_or(UNK)
}

pub fn tokenize(symbols: &[String]) -> Vec<u32> {
    symbols.iter().map(|s| token_id(s)).collect()
}

/// Writes the vocabulary file format: one symbol per line.
pub fn write_vocab(path: &Path) -> Result<()> {
    let mut s = String::new();
    for w in vocab() {
        s.push_str(w);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::to_string).filter(|l| !l.is_empty()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdentitySpec {
    pub id: u32,
    pub body_shape: u8,
    pub primary_color: u8,
    pub secondary_color: u8,
    pub accessory: u8,
    pub texture_motif: u8,
}

const COMBOS: u64 = (NUM_SHAPES * NUM_COLORS * NUM_COLORS * NUM_ACCESSORIES * NUM_MOTIFS) as u64;
/// Multipliers coprime with `COMBOS`, so `id -> (a*id + b) mod COMBOS` is a bijection.
const MULTIPLIERS: [u64; 8] = [7919, 104_729, 1_299_709, 15_485_863, 179_424_673, 2_038_074_743, 49_979_687, 86_028_121];

impl IdentitySpec {
    /// Deterministic attribute tuple; distinct ids below 19200 never collide.
    pub fn from_seed(dataset_seed: u64, id: u32) -> Self {
        let a = MULTIPLIERS[(dataset_seed % MULTIPLIERS.len() as u64) as usize] % COMBOS;
        let b = splitmix(dataset_seed) % COMBOS;
        let mut idx = (a * id as u64 + b) % COMBOS;
        let mut take = |n: usize| {
            let v = (idx % n as u64) as u8;
            idx /= n as u64;
            v
        };
        Self {
            id,
            body_shape: take(NUM_SHAPES),
            primary_color: take(NUM_COLORS),
            secondary_color: take(NUM_COLORS),
            accessory: take(NUM_ACCESSORIES),
            texture_motif: take(NUM_MOTIFS),
        }
    }

    pub fn tokens(&self) -> [String; 5] {
        [
            format!("shape_{}", SHAPE_NAMES[self.body_shape as usize]),
            format!("body_{}", BODY_NAMES[self.primary_color as usize]),
            format!("trim_{}", TRIM_NAMES[self.secondary_color as usize]),
            format!("acc_{}", ACC_NAMES[self.accessory as usize]),
            format!("motif_{}", MOTIF_NAMES[self.texture_motif as usize]),
        ]
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, p| splitmix(acc ^ splitmix(*p)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub pose: [f64; NUM_JOINTS],
    pub background: u8,
    pub camera_offset: (i32, i32),
}

impl SceneSpec {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut pose = [0.0; NUM_JOINTS];
        for (p, (lo, hi)) in pose.iter_mut().zip(JOINT_LIMITS) {
            *p = rng.random_range(lo..=hi);
        }
        Self {
            pose,
            background: rng.random_range(0..NUM_BACKGROUNDS as u8),
            camera_offset: (rng.random_range(-3..=3), rng.random_range(-3..=3)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (a, (lo, hi))) in self.pose.iter().zip(JOINT_LIMITS).enumerate() {
            if !(lo..=hi).contains(a) {
                return Err(Error::InvalidInput(format!("joint {i} angle {a} outside [{lo}, {hi}]")));
            }
        }
        if self.background as usize >= NUM_BACKGROUNDS {
            return Err(Error::InvalidInput(format!("background {} out of range", self.background)));
        }
        if self.camera_offset.0.abs() > 3 || self.camera_offset.1.abs() > 3 {
            return Err(Error::InvalidInput(format!("camera offset {:?} exceeds +-3", self.camera_offset)));
        }
        Ok(())
    }

    pub fn tokens(&self) -> [String; 6] {
        let arm = |a: f64, side: &str| {
            let bin = if a > 0.35 {
                "up"
            } else if a < -0.35 {
                "down"
            } else {
                "side"
            };
            format!("{side}arm_{bin}")
        };
        let leg = |a: f64, side: &str| format!("{side}leg_{}", if a > 0.3 { "out" } else { "straight" });
        let head = if self.pose[4] < -0.15 {
            "head_left"
        } else if self.pose[4] > 0.15 {
            "head_right"
        } else {
            "head_center"
        };
        [
            format!("bg_{}", self.background),
            arm(self.pose[0], "l"),
            arm(self.pose[1], "r"),
            leg(self.pose[2], "l"),
            leg(self.pose[3], "r"),
            head.to_string(),
        ]
    }
}

/// Caption: identity attributes then scene symbols, always [`CAPTION_LEN`] symbols.
pub fn caption(identity: &IdentitySpec, scene: &SceneSpec) -> Vec<String> {
    identity.tokens().into_iter().chain(scene.tokens()).collect()
}

/// Geometry of one figure in 64-unit canvas coordinates.
struct Figure {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    head: (f64, f64),
}

const HEAD_R: f64 = 5.5;

fn figure(identity: &IdentitySpec, scene: &SceneSpec) -> Figure {
    let (hw, hh) = match identity.body_shape {
        1 => (6.0, 10.0),
        2 => (10.0, 6.0),
        3..=7 => (9.5, 9.5),
        _ => (9.0, 9.0),
    };
    let cx = 32.0 + scene.camera_offset.0 as f64;
    let cy = 36.0 + scene.camera_offset.1 as f64;
    let head = (cx + 8.0 * scene.pose[4].sin(), cy - hh - 3.0 - HEAD_R);
    Figure { cx, cy, half_w: hw, half_h: hh, head }
}

fn in_torso(shape: u8, f: &Figure, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - f.cx, y - f.cy);
    let (hw, hh) = (f.half_w, f.half_h);
    if dx.abs() > hw || dy.abs() > hh {
        return false;
    }
    match shape {
        3 => dx * dx + dy * dy <= hw * hw,
        4 => dx.abs() <= hw * (dy + hh) / (2.0 * hh),
        5 => dx.abs() <= hw * (hh - dy) / (2.0 * hh),
        6 => dx.abs() / hw + dy.abs() / hh <= 1.0,
        7 => dx.abs() <= dy.abs() * hw / hh,
        _ => true,
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy).max(1e-12)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

/// Limb segments: two arms then two legs.
fn limbs(f: &Figure, pose: &[f64; NUM_JOINTS]) -> [((f64, f64), (f64, f64)); 4] {
    const ARM: f64 = 14.0;
    const LEG: f64 = 12.0;
    let ls = (f.cx - f.half_w, f.cy - f.half_h / 2.0);
    let rs = (f.cx + f.half_w, f.cy - f.half_h / 2.0);
    let lh = (f.cx - f.half_w / 2.0, f.cy + f.half_h);
    let rh = (f.cx + f.half_w / 2.0, f.cy + f.half_h);
    [
        (ls, (ls.0 - ARM * pose[0].cos(), ls.1 - ARM * pose[0].sin())),
        (rs, (rs.0 + ARM * pose[1].cos(), rs.1 - ARM * pose[1].sin())),
        (lh, (lh.0 - LEG * pose[2].sin(), lh.1 + LEG * pose[2].cos())),
        (rh, (rh.0 + LEG * pose[3].sin(), rh.1 + LEG * pose[3].cos())),
    ]
}

fn background_color(bg: u8, x: usize, y: usize, size: usize) -> [f32; 3] {
    let (a, b) = BG_PAIRS[bg as usize];
    let band = (size / 8).max(1);
    let second = match bg {
        5 => (y / band) % 2 == 1,
        6 => (x / band) % 2 == 1,
        7 => (x / band + y / band) % 2 == 1,
        8 => y >= size / 2,
        9 => ((x + y) / band) % 2 == 1,
        _ => false,
    };
    BG_COLORS[if second { b } else { a }]
}

fn in_accessory(acc: u8, head: (f64, f64), torso_top: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - head.0, y - head.1);
    match acc {
        1 => (dx.abs() <= 8.0 && (-7.0..=-5.0).contains(&dy)) || (dx.abs() <= 5.0 && (-12.0..-7.0).contains(&dy)),
        2 => {
            (dx.abs() <= 6.0 && (-8.0..=-5.0).contains(&dy))
                || [-5.0, 0.0, 5.0].iter().any(|sx| {
                    let ddx = (dx - sx).abs();
                    (-12.0..-8.0).contains(&dy) && ddx <= 1.5 * (dy + 12.0) / 4.0 + 0.6
                })
        }
        3 => (dx.abs() <= 1.0 && (-10.0..=-5.0).contains(&dy)) || dx * dx + (dy + 10.0).powi(2) <= 4.0,
        4 => dx.abs() <= 6.0 && (-2.0..=1.0).contains(&dy),
        5 => {
            let yc = (HEAD_R + torso_top - head.1) / 2.0;
            let ddy = dy - yc;
            y < torso_top - 0.2 && dy >= 3.0 && dx.abs() <= 6.0 && (ddy.abs() <= dx.abs() * 0.6 + 1.0)
        }
        _ => false,
    }
}

/// Rasterizes `(image, pose_map, caption)` at `size x size` pixels.
pub fn render(identity: &IdentitySpec, scene: &SceneSpec, size: usize) -> Result<(Image, Image, Vec<String>)> {
    scene.validate()?;
    if size < 16 || !size.is_multiple_of(8) {
        return Err(Error::InvalidInput(format!("render size {size} must be a multiple of 8, at least 16")));
    }
    let f = figure(identity, scene);
    let scale = 64.0 / size as f64;
    let center = |i: usize| (i as f64 + 0.5) * scale;
    let segs = limbs(&f, &scene.pose);
    let torso_top = f.cy - f.half_h;

    let mut torso = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            torso[y * size + x] = in_torso(identity.body_shape, &f, center(x), center(y));
        }
    }
    let (top, left) = torso_origin(&torso, size);

    let mut img = Image::filled(size, size, [0.0; 3])?;
    for y in 0..size {
        for x in 0..size {
            let p = (center(x), center(y));
            let mut c = background_color(scene.background, x, y, size);
            for (i, (a, b)) in segs.iter().enumerate() {
                let half = if i < 2 { 1.5 } else { 2.0 };
                if seg_dist(p, *a, *b) <= half {
                    c = LIMB_COLOR;
                }
            }
            if torso[y * size + x] {
                let (ry, rx) = (y - top, x - left);
                // Only interior pixels carry the motif, so the outline stays body-colored.
                let interior = y > 0
                    && x > 0
                    && y + 1 < size
                    && x + 1 < size
                    && torso[(y - 1) * size + x]
                    && torso[(y + 1) * size + x]
                    && torso[y * size + x - 1]
                    && torso[y * size + x + 1];
                let motif = interior
                    && match identity.texture_motif {
                        1 => ry % 3 == 1,
                        2 => rx % 3 == 1,
                        3 => ry % 3 == 1 && rx % 3 == 1,
                        _ => false,
                    };
                c = if motif {
                    TRIM_PALETTE[identity.secondary_color as usize]
                } else {
                    BODY_PALETTE[identity.primary_color as usize]
                };
            }
            if (p.0 - f.head.0).powi(2) + (p.1 - f.head.1).powi(2) <= HEAD_R * HEAD_R {
                c = TRIM_PALETTE[identity.secondary_color as usize];
            }
            if in_accessory(identity.accessory, f.head, torso_top, p.0, p.1) {
                c = ACC_PALETTE[identity.accessory as usize];
            }
            img.set(y, x, c);
        }
    }

    let mut pose_map = Image::filled(size, size, [0.0; 3])?;
    let spine = ((f.cx, f.cy + f.half_h), (f.cx, torso_top));
    let shoulders = (segs[0].0, segs[1].0);
    for y in 0..size {
        for x in 0..size {
            let p = (center(x), center(y));
            let on_bone = segs.iter().chain([&spine, &shoulders]).any(|(a, b)| seg_dist(p, *a, *b) <= 0.75 * scale.max(1.0));
            let on_head = (p.0 - f.head.0).powi(2) + (p.1 - f.head.1).powi(2) <= 4.0;
            if on_bone || on_head {
                pose_map.set(y, x, [1.0; 3]);
            }
        }
    }
    // Snap to 8-bit levels so PNG storage is lossless.
    let img = Image::from_rgb8(size, size, &img.to_rgb8())?;
    Ok((img, pose_map, caption(identity, scene)))
}

fn torso_origin(mask: &[bool], size: usize) -> (usize, usize) {
    let mut top = size;
    let mut left = size;
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] {
                top = top.min(y);
                left = left.min(x);
            }
        }
    }
    (top, left)
}

/// Attributes recovered from pixels; `None` where nothing matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProbedAttributes {
    pub body_shape: Option<u8>,
    pub primary_color: Option<u8>,
    pub secondary_color: Option<u8>,
    pub accessory: Option<u8>,
    pub texture_motif: Option<u8>,
    pub background: Option<u8>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Body(u8),
    Trim(u8),
    Acc(u8),
    Bg(u8),
    Limb,
    Other,
}

fn classify(c: [f32; 3], tolerance: f32) -> Class {
    let d = |p: &[f32; 3]| ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)).sqrt();
    let mut best = (f32::INFINITY, Class::Other);
    let mut consider = |p: &[f32; 3], cl: Class| {
        let dist = d(p);
        if dist < best.0 {
            best = (dist, cl);
        }
    };
    for (i, p) in BODY_PALETTE.iter().enumerate() {
        consider(p, Class::Body(i as u8));
    }
    for (i, p) in TRIM_PALETTE.iter().enumerate() {
        consider(p, Class::Trim(i as u8));
    }
    for (i, p) in ACC_PALETTE.iter().enumerate().skip(1) {
        consider(p, Class::Acc(i as u8));
    }
    for (i, p) in BG_COLORS.iter().enumerate() {
        consider(p, Class::Bg(i as u8));
    }
    consider(&LIMB_COLOR, Class::Limb);
    if best.0 <= tolerance {
        best.1
    } else {
        Class::Other
    }
}

/// Default color tolerance for [`probe`]; ground-truth renders match at distance ~0.
pub const PROBE_TOLERANCE: f32 = 0.12;

/// Rule-based attribute probe over color classes and torso shape moments.
pub fn probe(img: &Image) -> ProbedAttributes {
    probe_with_tolerance(img, PROBE_TOLERANCE)
}

pub fn probe_with_tolerance(img: &Image, tolerance: f32) -> ProbedAttributes {
    let (h, w) = (img.height(), img.width());
    let classes: Vec<Class> =
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| classify(img.get(y, x), tolerance)).collect();
    let argmax = |counts: &[usize]| {
        counts.iter().enumerate().filter(|(_, c)| **c > 0).max_by_key(|(i, c)| (**c, usize::MAX - i)).map(|(i, _)| i as u8)
    };

    let mut body = [0usize; NUM_COLORS];
    let mut trim = [0usize; NUM_COLORS];
    let mut acc = [0usize; NUM_ACCESSORIES];
    for c in &classes {
        match c {
            Class::Body(i) => body[*i as usize] += 1,
            Class::Trim(i) => trim[*i as usize] += 1,
            Class::Acc(i) => acc[*i as usize] += 1,
            _ => {}
        }
    }
    let mut out = ProbedAttributes {
        primary_color: argmax(&body),
        secondary_color: argmax(&trim),
        accessory: Some(argmax(&acc).unwrap_or(0)),
        ..Default::default()
    };

    // Background: the set of background colors on the image border.
    let mut border = [0usize; 5];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                if let Class::Bg(i) = classes[y * w + x] {
                    border[i as usize] += 1;
                }
            }
        }
    }
    let total: usize = border.iter().sum();
    if total > 0 {
        let present: Vec<usize> = (0..5).filter(|&i| border[i] * 20 >= total).collect();
        out.background = BG_PAIRS.iter().position(|&(a, b)| {
            let mut pair = vec![a, b];
            pair.sort();
            pair.dedup();
            pair == present
        }).map(|i| i as u8);
    }

    // Torso: body-colored pixels plus trim pixels inside the (one-pixel dilated) body bbox.
    let Some(primary) = out.primary_color else { return out };
    let body_px: Vec<(usize, usize)> =
        (0..h * w).filter(|&i| classes[i] == Class::Body(primary)).map(|i| (i / w, i % w)).collect();
    let top = body_px.iter().map(|p| p.0).min().unwrap_or(0);
    let bottom = body_px.iter().map(|p| p.0).max().unwrap_or(0);
    let left = body_px.iter().map(|p| p.1).min().unwrap_or(0);
    let right = body_px.iter().map(|p| p.1).max().unwrap_or(0);
    let in_box = |y: usize, x: usize| y >= top && y <= bottom && x >= left && x <= right;
    let trim_px: Vec<(usize, usize)> = match out.secondary_color {
        Some(s) => (0..h * w)
            .filter(|&i| classes[i] == Class::Trim(s))
            .map(|i| (i / w, i % w))
            .filter(|&(y, x)| in_box(y, x))
            .collect(),
        None => Vec::new(),
    };
    out.texture_motif = Some(if trim_px.is_empty() {
        0
    } else {
        let row_ok = trim_px.iter().all(|(y, _)| (y - top) % 3 == 1);
        let col_ok = trim_px.iter().all(|(_, x)| (x - left) % 3 == 1);
        match (row_ok, col_ok) {
            (true, true) => 3,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => {
                // Noisy images: pick the rule that explains most trim pixels.
                let r = trim_px.iter().filter(|(y, _)| (y - top) % 3 == 1).count();
                let c = trim_px.iter().filter(|(_, x)| (x - left) % 3 == 1).count();
                if r >= c {
                    1
                } else {
                    2
                }
            }
        }
    });

    let mut mask: Vec<(usize, usize)> = body_px;
    mask.extend(&trim_px);
    out.body_shape = Some(classify_shape(&mask, top, bottom, left, right));
    out
}

/// Body shape from the torso mask: fill ratio, aspect, and the row-width profile.
fn classify_shape(mask: &[(usize, usize)], top: usize, bottom: usize, left: usize, right: usize) -> u8 {
    let (bw, bh) = (right - left + 1, bottom - top + 1);
    let fill = mask.len() as f64 / (bw * bh) as f64;
    if fill >= 0.95 {
        let aspect = bw as f64 / bh as f64;
        return if aspect < 0.8 {
            1
        } else if aspect > 1.25 {
            2
        } else {
            0
        };
    }
    let mut widths = vec![0usize; bh];
    for (y, _) in mask {
        widths[y - top] += 1;
    }
    let half = bh / 2;
    let upper: usize = widths[..half].iter().sum();
    let lower: usize = widths[bh - half..].iter().sum();
    let ratio = upper as f64 / lower.max(1) as f64;
    if ratio < 0.6 {
        return 4;
    }
    if ratio > 1.0 / 0.6 {
        return 5;
    }
    let waist = widths[(bh - 1) / 2].min(widths[bh / 2]) as f64;
    if waist / (*widths.iter().max().unwrap_or(&1)) as f64 <= 0.4 {
        7
    } else if fill >= 0.65 {
        3
    } else {
        6
    }
}

impl ProbedAttributes {
    /// Attribute symbols the probe recovered.
    pub fn symbols(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(s) = self.body_shape {
            v.push(format!("shape_{}", SHAPE_NAMES[s as usize]));
        }
        if let Some(s) = self.primary_color {
            v.push(format!("body_{}", BODY_NAMES[s as usize]));
        }
        if let Some(s) = self.secondary_color {
            v.push(format!("trim_{}", TRIM_NAMES[s as usize]));
        }
        if let Some(s) = self.accessory {
            v.push(format!("acc_{}", ACC_NAMES[s as usize]));
        }
        if let Some(s) = self.texture_motif {
            v.push(format!("motif_{}", MOTIF_NAMES[s as usize]));
        }
        if let Some(s) = self.background {
            v.push(format!("bg_{s}"));
        }
        v
    }

    pub fn matches_identity(&self, id: &IdentitySpec) -> bool {
        self.body_shape == Some(id.body_shape)
            && self.primary_color == Some(id.primary_color)
            && self.secondary_color == Some(id.secondary_color)
            && self.accessory == Some(id.accessory)
            && self.texture_motif == Some(id.texture_motif)
    }
}

/// True for symbols the probe can check (identity attributes and backgrounds).
pub fn is_attribute_symbol(s: &str) -> bool {
    ["shape_", "body_", "trim_", "acc_", "motif_", "bg_"].iter().any(|p| s.starts_with(p))
}

/// One attribute change applied to an identity or scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Recolor(u8),
    Trim(u8),
    Accessory(u8),
    Motif(u8),
    Background(u8),
    Reshape(u8),
}

impl Edit {
    pub fn random_for(identity: &IdentitySpec, scene: &SceneSpec, rng: &mut impl Rng) -> Self {
        loop {
            let e = match rng.random_range(0..6) {
                0 => Edit::Recolor(rng.random_range(0..NUM_COLORS as u8)),
                1 => Edit::Trim(rng.random_range(0..NUM_COLORS as u8)),
                2 => Edit::Accessory(rng.random_range(0..NUM_ACCESSORIES as u8)),
                3 => Edit::Motif(rng.random_range(0..NUM_MOTIFS as u8)),
                4 => Edit::Background(rng.random_range(0..NUM_BACKGROUNDS as u8)),
                _ => Edit::Reshape(rng.random_range(0..NUM_SHAPES as u8)),
            };
            let (i2, s2) = e.apply(identity, scene);
            if i2 != *identity || s2.background != scene.background {
                return e;
            }
        }
    }

    pub fn apply(&self, identity: &IdentitySpec, scene: &SceneSpec) -> (IdentitySpec, SceneSpec) {
        let (mut i, mut s) = (*identity, *scene);
        match *self {
            Edit::Recolor(c) => i.primary_color = c,
            Edit::Trim(c) => i.secondary_color = c,
            Edit::Accessory(a) => i.accessory = a,
            Edit::Motif(m) => i.texture_motif = m,
            Edit::Background(b) => s.background = b,
            Edit::Reshape(b) => i.body_shape = b,
        }
        (i, s)
    }

    pub fn instruction(&self) -> Vec<String> {
        let (verb, arg) = match *self {
            Edit::Recolor(c) => ("recolor", format!("body_{}", BODY_NAMES[c as usize])),
            Edit::Trim(c) => ("trim", format!("trim_{}", TRIM_NAMES[c as usize])),
            Edit::Accessory(a) => ("add", format!("acc_{}", ACC_NAMES[a as usize])),
            Edit::Motif(m) => ("motif", format!("motif_{}", MOTIF_NAMES[m as usize])),
            Edit::Background(b) => ("background", format!("bg_{b}")),
            Edit::Reshape(b) => ("reshape", format!("shape_{}", SHAPE_NAMES[b as usize])),
        };
        vec![verb.to_string(), arg]
    }

    /// Instruction implied by the first differing attribute of two captions.
    pub fn instruction_from_captions(source: &[String], edited: &[String]) -> Vec<String> {
        for (a, b) in source.iter().zip(edited) {
            if a != b {
                let verb = match b.split('_').next().unwrap_or("") {
                    "body" => "recolor",
                    "trim" => "trim",
                    "acc" => "add",
                    "motif" => "motif",
                    "bg" => "background",
                    "shape" => "reshape",
                    _ => "keep",
                };
                return vec![verb.to_string(), b.clone()];
            }
        }
        vec!["keep".to_string(), PAD_SYMBOL.to_string()]
    }
}

const PAD_SYMBOL: &str = "<pad>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingMode {
    OneToOne,
    OneToMany,
    EditingTriples,
}

impl PairingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairingMode::OneToOne => "one_to_one",
            PairingMode::OneToMany => "one_to_many",
            PairingMode::EditingTriples => "editing_triples",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one_to_one" => Ok(Self::OneToOne),
            "one_to_many" => Ok(Self::OneToMany),
            "editing_triples" => Ok(Self::EditingTriples),
            _ => Err(Error::InvalidInput(format!("unknown pairing mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train_identities: usize,
    pub test_identities: usize,
    pub scenes_per_identity: usize,
    pub image_size: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self { train_identities: 512, test_identities: 64, scenes_per_identity: 6, image_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub identity_id: u32,
    pub image_path: String,
    pub pose_path: String,
    pub caption: Vec<String>,
    pub group: u32,
    pub split: Split,
}

/// In-memory dataset: records plus their decoded images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub mode: PairingMode,
    pub image_size: usize,
    pub records: Vec<DatasetRecord>,
    pub images: Vec<Image>,
    pub pose_maps: Vec<Image>,
}

pub const MANIFEST_HEADER: &str = "#remix-manifest v1\tidentity_id\timage_path\tpose_path\tcaption\tgroup\tsplit";

impl Dataset {
    /// Deterministic generation without touching the filesystem.
    pub fn generate(seed: u64, counts: DatasetCounts, mode: PairingMode) -> Result<Self> {
        if counts.train_identities == 0 || counts.scenes_per_identity == 0 {
            return Err(Error::InvalidInput("dataset counts must be positive".into()));
        }
        if mode == PairingMode::OneToMany && counts.scenes_per_identity < 2 {
            return Err(Error::InvalidInput("one_to_many needs at least 2 scenes per identity".into()));
        }
        let mut ds = Dataset {
            seed,
            mode,
            image_size: counts.image_size,
            records: Vec::new(),
            images: Vec::new(),
            pose_maps: Vec::new(),
        };
        let n_ids = counts.train_identities + counts.test_identities;
        let mut group = 0u32;
        for id in 0..n_ids as u32 {
            let split = if (id as usize) < counts.train_identities { Split::Train } else { Split::Test };
            let identity = IdentitySpec::from_seed(seed, id);
            for k in 0..counts.scenes_per_identity {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, id as u64, k as u64]));
                let scene = SceneSpec::random(&mut rng);
                match mode {
                    PairingMode::EditingTriples => {
                        let edit = Edit::random_for(&identity, &scene, &mut rng);
                        let (ei, es) = edit.apply(&identity, &scene);
                        ds.push(id, &identity, &scene, group, split, "src")?;
                        ds.push(id, &ei, &es, group, split, "edit")?;
                        group += 1;
                    }
                    PairingMode::OneToOne => {
                        ds.push(id, &identity, &scene, group, split, "img")?;
                        group += 1;
                    }
                    PairingMode::OneToMany => ds.push(id, &identity, &scene, group, split, "img")?,
                }
            }
            if mode == PairingMode::OneToMany {
                group += 1;
            }
        }
        Ok(ds)
    }

    fn push(&mut self, id: u32, identity: &IdentitySpec, scene: &SceneSpec, group: u32, split: Split, tag: &str) -> Result<()> {
        let (img, pose, cap) = render(identity, scene, self.image_size)?;
        let n = self.records.len();
        self.records.push(DatasetRecord {
            identity_id: id,
            image_path: format!("images/{n:06}_{tag}.png"),
            pose_path: format!("poses/{n:06}_{tag}.png"),
            caption: cap,
            group,
            split,
        });
        self.images.push(img);
        self.pose_maps.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices per group, in record order.
    pub fn groups(&self, split: Split) -> Vec<Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate().filter(|(_, r)| r.split == split) {
            map.entry(r.group).or_default().push(i);
        }
        map.into_values().collect()
    }

    /// `(reference, target)` record index pairs implied by the pairing mode.
    pub fn pairs(&self, split: Split) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for g in self.groups(split) {
            match self.mode {
                PairingMode::OneToOne => out.extend(g.iter().map(|&i| (i, i))),
                PairingMode::EditingTriples => out.push((g[0], g[1])),
                PairingMode::OneToMany => {
                    for &a in &g {
                        for &b in &g {
                            if a != b {
                                out.push((a, b));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// `(instruction, source, edited)` record triples.
    pub fn triples(&self, split: Split) -> Vec<(Vec<String>, usize, usize)> {
        self.pairs(split)
            .into_iter()
            .map(|(s, t)| (Edit::instruction_from_captions(&self.records[s].caption, &self.records[t].caption), s, t))
            .collect()
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}\tmode={}\tseed={}\tsize={}", self.mode.as_str(), self.seed, self.image_size);
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.identity_id,
                r.image_path,
                r.pose_path,
                r.caption.join(" "),
                r.group,
                r.split.as_str()
            );
        }
        s
    }

    /// Writes images, pose maps and `manifest.tsv` under `dir`.
    pub fn write(&self, dir: &Path, overwrite: bool) -> Result<PathBuf> {
        if dir.exists() {
            if !overwrite {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        for sub in ["images", "poses"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        for ((r, img), pose) in self.records.iter().zip(&self.images).zip(&self.pose_maps) {
            img.save_png(&dir.join(&r.image_path))?;
            pose.save_png(&dir.join(&r.pose_path))?;
        }
        let path = dir.join("manifest.tsv");
        std::fs::write(&path, self.manifest_text()).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Loads a dataset written by [`Dataset::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.tsv");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::InvalidInput("empty manifest".into()))?;
        if !header.starts_with(MANIFEST_HEADER) {
            return Err(Error::InvalidInput(format!("unrecognized manifest header `{header}`")));
        }
        let meta: BTreeMap<&str, &str> =
            header[MANIFEST_HEADER.len()..].split('\t').filter_map(|kv| kv.split_once('=')).collect();
        let mode = PairingMode::parse(meta.get("mode").copied().unwrap_or("one_to_many"))?;
        let seed = meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let mut ds = Dataset { seed, mode, image_size: 0, records: Vec::new(), images: Vec::new(), pose_maps: Vec::new() };
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::InvalidInput(format!("manifest line {}: expected 6 fields, got {}", ln + 2, f.len())));
            }
            let bad = |what: &str| Error::InvalidInput(format!("manifest line {}: bad {what}", ln + 2));
            let split = match f[5] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split")),
            };
            let rec = DatasetRecord {
                identity_id: f[0].parse().map_err(|_| bad("identity_id"))?,
                image_path: f[1].to_string(),
                pose_path: f[2].to_string(),
                caption: f[3].split(' ').map(str::to_string).collect(),
                group: f[4].parse().map_err(|_| bad("group"))?,
                split,
            };
            let img = Image::load_png(&dir.join(&rec.image_path))?;
            ds.image_size = img.height();
            ds.images.push(img);
            ds.pose_maps.push(Image::load_png(&dir.join(&rec.pose_path))?);
            ds.records.push(rec);
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn scene(seed: u64) -> SceneSpec {
        SceneSpec::random(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn vocab_is_closed_and_sized() {
        assert_eq!(vocab().len(), VOCAB_SIZE);
        assert_eq!(token_id("body_red"), vocab().iter().position(|s| s == "body_red").unwrap() as u32);
        assert_eq!(token_id("no_such_symbol"), UNK);
    }

    #[test]
    fn identities_are_distinct_and_deterministic() {
        let ids: HashSet<_> = (0..2000).map(|i| {
            let s = IdentitySpec::from_seed(11, i);
            (s.body_shape, s.primary_color, s.secondary_color, s.accessory, s.texture_motif)
        }).collect();
        assert_eq!(ids.len(), 2000);
        assert_eq!(IdentitySpec::from_seed(5, 17), IdentitySpec::from_seed(5, 17));
    }

    #[test]
    fn render_is_deterministic() {
        let id = IdentitySpec::from_seed(1, 3);
        let a = render(&id, &scene(4), 64).unwrap();
        let b = render(&id, &scene(4), 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.2.len(), CAPTION_LEN);
    }

    #[test]
    fn pose_maps_are_sparse() {
        for s in 0..50 {
            for size in [32, 64] {
                let (_, pose, _) = render(&IdentitySpec::from_seed(2, s), &scene(s as u64 + 100), size).unwrap();
                let fg = pose.pixels().chunks(3).filter(|p| p.iter().any(|v| *v > 0.0)).count();
                let frac = fg as f64 / (size * size) as f64;
                assert!(frac < 0.10, "pose map foreground fraction {frac}");
                assert!(fg > 0);
            }
        }
    }

    #[test]
    fn primary_color_change_stays_inside_silhouette() {
        let a = IdentitySpec::from_seed(3, 9);
        let b = IdentitySpec { primary_color: (a.primary_color + 1) % NUM_COLORS as u8, ..a };
        let sc = scene(7);
        let (ia, ..) = render(&a, &sc, 64).unwrap();
        let (ib, ..) = render(&b, &sc, 64).unwrap();
        let f = figure(&a, &sc);
        for y in 0..64 {
            for x in 0..64 {
                if ia.get(y, x) != ib.get(y, x) {
                    assert!(in_torso(a.body_shape, &f, x as f64 + 0.5, y as f64 + 0.5));
                }
            }
        }
        assert_ne!(ia, ib);
    }

    #[test]
    fn probe_recovers_every_attribute() {
        for size in [32, 64] {
            for i in 0..400u32 {
                let id = IdentitySpec::from_seed(size as u64, i);
                let sc = scene(i as u64 * 31 + size as u64);
                let (img, ..) = render(&id, &sc, size).unwrap();
                let p = probe(&img);
                assert!(p.matches_identity(&id), "size {size} id {id:?} scene {sc:?} probed {p:?}");
                assert_eq!(p.background, Some(sc.background), "size {size} scene {sc:?}");
            }
        }
    }

    #[test]
    fn instruction_from_caption_diff() {
        let id = IdentitySpec::from_seed(0, 1);
        let sc = scene(2);
        let e = Edit::Recolor((id.primary_color + 3) % 10);
        let (i2, s2) = e.apply(&id, &sc);
        assert_eq!(Edit::instruction_from_captions(&caption(&id, &sc), &caption(&i2, &s2)), e.instruction());
    }

    #[test]
    fn dataset_modes_and_split() {
        let counts = DatasetCounts { train_identities: 4, test_identities: 2, scenes_per_identity: 3, image_size: 32 };
        let one = Dataset::generate(1, counts, PairingMode::OneToOne).unwrap();
        assert_eq!(one.len(), 18);
        assert!(one.pairs(Split::Train).iter().all(|(a, b)| one.records[*a].image_path == one.records[*b].image_path));
        let many = Dataset::generate(1, counts, PairingMode::OneToMany).unwrap();
        for g in many.groups(Split::Train) {
            assert_eq!(g.len(), 3);
            assert!(g.iter().all(|&i| many.records[i].identity_id == many.records[g[0]].identity_id));
        }
        let train: HashSet<u32> = many.records.iter().filter(|r| r.split == Split::Train).map(|r| r.identity_id).collect();
        let test: HashSet<u32> = many.records.iter().filter(|r| r.split == Split::Test).map(|r| r.identity_id).collect();
        assert!(train.is_disjoint(&test));
        let edits = Dataset::generate(1, counts, PairingMode::EditingTriples).unwrap();
        for (instr, s, t) in edits.triples(Split::Train) {
            let diff = edits.records[s].caption.iter().zip(&edits.records[t].caption).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1);
            assert_ne!(instr[0], "keep");
        }
    }

    #[test]
    fn write_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let counts = DatasetCounts { train_identities: 2, test_identities: 1, scenes_per_identity: 2, image_size: 32 };
        let ds = Dataset::generate(5, counts, PairingMode::OneToMany).unwrap();
        ds.write(&out, false).unwrap();
        assert!(matches!(ds.write(&out, false), Err(Error::OutputExists(_))));
        let back = Dataset::load(&out).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.images, ds.images);
        assert_eq!(back.mode, PairingMode::OneToMany);
        let first = std::fs::read(out.join("manifest.tsv")).unwrap();
        ds.write(&out, true).unwrap();
        assert_eq!(std::fs::read(out.join("manifest.tsv")).unwrap(), first);
    }
}
