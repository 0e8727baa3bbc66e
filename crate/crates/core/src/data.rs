//! Deterministic synthetic scenes with pixel-perfect panoptic ground truth.
//!
//! A scene is horizontal stuff bands (smooth per-band color gradients)
//! overlaid by anti-aliasing-free shapes: circles, axis-aligned rectangles
//! and triangles, one shape kind per thing class. Later shapes occlude
//! earlier ones (painter's algorithm), masks reflect the occlusion, and
//! boxes are recomputed tight around the visible masks — so every pixel has
//! exactly one owner: a stuff class or a single instance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::serial::Cursor;
use crate::tensor::{read_named_tensor, write_named_tensor, Shape, Tensor};

/// One visible object: class, tight box around the visible mask, and the
/// binary mask itself (row-major H*W, occlusion already applied).
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: u16,
    /// [x0, y0, x1, y1], exclusive upper bounds, pixel units.
    pub bbox: [u32; 4],
    pub mask: Vec<u8>,
}

impl Instance {
    pub fn box_width(&self) -> u32 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn box_height(&self) -> u32 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn max_side(&self) -> u32 {
        self.box_width().max(self.box_height())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// (1, 3, H, W), values in [0, 1].
    pub image: Tensor<f32>,
    /// Per-pixel stuff class id, row-major H*W.
    pub stuff_map: Vec<u16>,
    pub instances: Vec<Instance>,
    /// Instances requested but not emitted (failed placement or full
    /// occlusion).
    pub shortfall: u32,
    pub n_stuff_classes: u16,
    pub n_thing_classes: u16,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    /// Per-pixel panoptic label: stuff class for unowned pixels, otherwise
    /// `c_stuff + instance index` in scene order.
    pub fn panoptic_label_map(&self, c_stuff: usize) -> Vec<u32> {
        let hw = self.height() * self.width();
        let mut out: Vec<u32> = self.stuff_map.iter().map(|&s| s as u32).collect();
        for (i, inst) in self.instances.iter().enumerate() {
            for p in 0..hw {
                if inst.mask[p] != 0 {
                    out[p] = (c_stuff + i) as u32;
                }
            }
        }
        out
    }

    /// Per-pixel semantic class: stuff class, or `n_stuff + thing class`
    /// for instance pixels. Supervises the auxiliary semantic head.
    pub fn semantic_label_map(&self) -> Vec<u32> {
        let hw = self.height() * self.width();
        let mut out: Vec<u32> = self.stuff_map.iter().map(|&s| s as u32).collect();
        for inst in &self.instances {
            for p in 0..hw {
                if inst.mask[p] != 0 {
                    out[p] = self.n_stuff_classes as u32 + inst.class_id as u32;
                }
            }
        }
        out
    }

    /// Panoptic completeness: every pixel is covered by exactly one of
    /// {a stuff class, exactly one instance}, and boxes are tight.
    pub fn check_invariants(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut owners = vec![0u8; h * w];
        for inst in &self.instances {
            if inst.mask.len() != h * w {
                return Err(Error::Invariant("mask extents differ from image".into()));
            }
            for (p, &m) in inst.mask.iter().enumerate() {
                if m > 1 {
                    return Err(Error::Invariant("mask is not binary".into()));
                }
                owners[p] += m;
            }
            let tight = tight_box(&inst.mask, h, w)
                .ok_or_else(|| Error::Invariant("instance with empty mask".into()))?;
            if tight != inst.bbox {
                return Err(Error::Invariant(format!(
                    "box {:?} is not tight around mask ({:?})",
                    inst.bbox, tight
                )));
            }
        }
        if owners.iter().any(|&o| o > 1) {
            return Err(Error::Invariant("pixel owned by two instances".into()));
        }
        if self.stuff_map.len() != h * w {
            return Err(Error::Invariant("stuff map extents differ".into()));
        }
        if self
            .stuff_map
            .iter()
            .any(|&s| s >= self.n_stuff_classes)
        {
            return Err(Error::Invariant("stuff class out of range".into()));
        }
        Ok(())
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub n_stuff_classes: u16,
    pub n_thing_classes: u16,
    pub min_instances: usize,
    pub max_instances: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            count: 8,
            height: 64,
            width: 64,
            n_stuff_classes: 3,
            n_thing_classes: 3,
            min_instances: 1,
            max_instances: 3,
        }
    }
}

/// Shape kinds map 1:1 to thing classes.
const SHAPE_NAMES: [&str; 3] = ["circle", "rectangle", "triangle"];
/// Base colors per class, jittered slightly per scene so classes stay
/// recognizable while scenes vary.
const STUFF_PALETTE: [[f32; 3]; 6] = [
    [0.20, 0.45, 0.70],
    [0.55, 0.50, 0.20],
    [0.25, 0.60, 0.30],
    [0.50, 0.25, 0.55],
    [0.65, 0.40, 0.30],
    [0.30, 0.30, 0.35],
];
const THING_PALETTE: [[f32; 3]; 3] = [
    [0.95, 0.30, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.25],
];

fn tight_box(mask: &[u8], h: usize, w: usize) -> Option<[u32; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x1 > 0 && x0 < w).then(|| [x0 as u32, y0 as u32, x1 as u32, y1 as u32])
}

pub(crate) fn rasterize_circle(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                mask[y * w + x] = 1;
            }
        }
    }
    mask
}

fn rasterize_rect(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            mask[y * w + x] = 1;
        }
    }
    mask
}

fn rasterize_triangle(h: usize, w: usize, v: [(f64, f64); 3]) -> Vec<u8> {
    let mut mask = vec![0u8; h * w];
    let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| -> f64 {
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
    };
    // orient so all edge functions share sign for interior points
    let area2 = edge(v[0], v[1], v[2]);
    let flip = if area2 < 0.0 { -1.0 } else { 1.0 };
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let e0 = flip * edge(v[0], v[1], p);
            let e1 = flip * edge(v[1], v[2], p);
            let e2 = flip * edge(v[2], v[0], p);
            if e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0 {
                mask[y * w + x] = 1;
            }
        }
    }
    mask
}

fn mask_area(mask: &[u8]) -> usize {
    mask.iter().filter(|&&m| m != 0).count()
}

struct Candidate {
    class_id: u16,
    mask: Vec<u8>,
    color: [f32; 3],
}

fn sample_candidate(
    h: usize,
    w: usize,
    n_thing: u16,
    rng: &mut ChaCha8Rng,
) -> Option<Candidate> {
    let m = h.min(w) as f64;
    let class_id = rng.gen_range(0..n_thing);
    let jit = |b: f32, rng: &mut ChaCha8Rng| (b + rng.gen_range(-0.08..0.08f32)).clamp(0.05, 1.0);
    let base = THING_PALETTE[class_id as usize % 3];
    let color = [jit(base[0], rng), jit(base[1], rng), jit(base[2], rng)];
    let mask = match class_id % 3 {
        0 => {
            let r = rng.gen_range(m / 10.0..m / 4.0);
            if 2.0 * r + 2.0 >= w as f64 || 2.0 * r + 2.0 >= h as f64 {
                return None;
            }
            let cx = rng.gen_range(r + 1.0..w as f64 - r - 1.0);
            let cy = rng.gen_range(r + 1.0..h as f64 - r - 1.0);
            rasterize_circle(h, w, cx, cy, r)
        }
        1 => {
            let rw = rng.gen_range((m / 8.0) as usize..(m / 2.5) as usize);
            let rh = rng.gen_range((m / 8.0) as usize..(m / 2.5) as usize);
            if rw + 2 >= w || rh + 2 >= h {
                return None;
            }
            let x0 = rng.gen_range(1..w - rw - 1);
            let y0 = rng.gen_range(1..h - rh - 1);
            rasterize_rect(h, w, x0, y0, x0 + rw, y0 + rh)
        }
        _ => {
            let pt = |rng: &mut ChaCha8Rng| {
                (
                    rng.gen_range(1.0..w as f64 - 1.0),
                    rng.gen_range(1.0..h as f64 - 1.0),
                )
            };
            let v = [pt(rng), pt(rng), pt(rng)];
            rasterize_triangle(h, w, v)
        }
    };
    let min_area = ((m / 8.0) * (m / 8.0)) as usize;
    (mask_area(&mask) >= min_area.max(16)).then_some(Candidate {
        class_id,
        mask,
        color,
    })
}

/// Generate `spec.count` scenes. Pure function of the spec: per-scene RNG
/// streams are derived from the seed, so regeneration is bit-identical and
/// scenes are independent of each other.
pub fn generate(spec: &DatasetSpec) -> Vec<Scene> {
    (0..spec.count).map(|i| generate_scene(spec, i)).collect()
}

pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let (h, w) = (spec.height, spec.width);
    let n_stuff = spec.n_stuff_classes.max(1);

    // stuff bands with a horizontal brightness gradient
    let mut stuff_map = vec![0u16; h * w];
    let mut image = Tensor::<f32>::zeros(Shape::new(1, 3, h, w));
    let band_h = h.div_ceil(n_stuff as usize);
    let jitter: Vec<[f32; 3]> = (0..n_stuff)
        .map(|_| {
            [
                rng.gen_range(-0.06..0.06f32),
                rng.gen_range(-0.06..0.06f32),
                rng.gen_range(-0.06..0.06f32),
            ]
        })
        .collect();
    for y in 0..h {
        let band = ((y / band_h) as u16).min(n_stuff - 1);
        let base = STUFF_PALETTE[band as usize % STUFF_PALETTE.len()];
        for x in 0..w {
            stuff_map[y * w + x] = band;
            let t = 0.85 + 0.3 * (x as f32 / w.max(1) as f32);
            for c in 0..3 {
                let v = ((base[c] + jitter[band as usize][c]) * t).clamp(0.0, 1.0);
                image.set(0, c, y, x, v);
            }
        }
    }

    // place shapes, later ones occluding earlier ones
    let requested = if spec.max_instances >= spec.min_instances {
        rng.gen_range(spec.min_instances..=spec.max_instances)
    } else {
        spec.min_instances
    };
    let mut placed: Vec<Candidate> = Vec::new();
    let mut shortfall = 0u32;
    'place: for _ in 0..requested {
        for _try in 0..20 {
            let Some(cand) = sample_candidate(h, w, spec.n_thing_classes.max(1), &mut rng) else {
                continue;
            };
            // bounded overlap: each earlier instance keeps at least half of
            // its currently visible pixels
            let ok = placed.iter().all(|prev| {
                let visible = mask_area(&prev.mask);
                let lost = prev
                    .mask
                    .iter()
                    .zip(&cand.mask)
                    .filter(|(&p, &c)| p != 0 && c != 0)
                    .count();
                lost * 2 <= visible
            });
            if ok {
                for prev in &mut placed {
                    for (p, &c) in prev.mask.iter_mut().zip(&cand.mask) {
                        if c != 0 {
                            *p = 0;
                        }
                    }
                }
                placed.push(cand);
                continue 'place;
            }
        }
        shortfall += 1;
    }

    // paint accepted shapes in placement order and finalize instances
    let mut instances = Vec::new();
    for cand in placed {
        for y in 0..h {
            for x in 0..w {
                if cand.mask[y * w + x] != 0 {
                    for c in 0..3 {
                        image.set(0, c, y, x, cand.color[c]);
                    }
                }
            }
        }
        match tight_box(&cand.mask, h, w) {
            Some(bbox) => instances.push(Instance {
                class_id: cand.class_id,
                bbox,
                mask: cand.mask,
            }),
            None => shortfall += 1, // fully occluded by later shapes
        }
    }

    Scene {
        image,
        stuff_map,
        instances,
        shortfall,
        n_stuff_classes: n_stuff,
        n_thing_classes: spec.n_thing_classes.max(1),
    }
}

/// |A ∩ B| / |A ∪ B| over equal-extent binary masks; 1 when both are empty.
pub fn iou(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument {
            op: "iou",
            msg: format!("mask lengths differ: {} vs {}", a.len(), b.len()),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

// ---------------------------------------------------------------------------
// Scene records
// ---------------------------------------------------------------------------

const SCENE_MAGIC: &[u8; 4] = b"DR1S";

fn rle_encode<V: Copy + PartialEq>(vals: &[V], out: &mut Vec<u8>, write: impl Fn(V, &mut Vec<u8>)) {
    let mut runs: Vec<(u32, V)> = Vec::new();
    for &v in vals {
        match runs.last_mut() {
            Some((n, lv)) if *lv == v && *n < u32::MAX => *n += 1,
            _ => runs.push((1, v)),
        }
    }
    out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
    for (n, v) in runs {
        out.extend_from_slice(&n.to_le_bytes());
        write(v, out);
    }
}

fn rle_decode<V: Copy>(
    cur: &mut Cursor<'_>,
    expect: usize,
    read: impl Fn(&mut Cursor<'_>) -> Result<V>,
) -> Result<Vec<V>> {
    let start = cur.offset();
    let runs = cur.read_u32("run count")?;
    let mut out = Vec::with_capacity(expect);
    for _ in 0..runs {
        let n = cur.read_u32("run length")? as usize;
        let v = read(cur)?;
        if out.len() + n > expect {
            return Err(Error::Parse {
                offset: start,
                msg: format!("run-length data overflows {expect} elements"),
            });
        }
        out.extend(std::iter::repeat(v).take(n));
    }
    if out.len() != expect {
        return Err(Error::Parse {
            offset: start,
            msg: format!("run-length data has {} elements, wanted {expect}", out.len()),
        });
    }
    Ok(out)
}

/// Serialize a scene: magic, line-text metadata, the image as a named
/// tensor record, then run-length-encoded stuff map and instance masks.
pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut meta = String::new();
    meta.push_str(&format!("h={} w={}\n", scene.height(), scene.width()));
    meta.push_str(&format!(
        "stuff_classes={} thing_classes={} shortfall={}\n",
        scene.n_stuff_classes, scene.n_thing_classes, scene.shortfall
    ));
    for inst in &scene.instances {
        meta.push_str(&format!(
            "instance={} {} {} {} {} 0\n",
            inst.class_id, inst.bbox[0], inst.bbox[1], inst.bbox[2], inst.bbox[3]
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    write_named_tensor(&mut out, "image", &scene.image);
    rle_encode(&scene.stuff_map, &mut out, |v, o| {
        o.extend_from_slice(&v.to_le_bytes())
    });
    for inst in &scene.instances {
        rle_encode(&inst.mask, &mut out, |v, o| o.push(v));
    }
    out
}

pub fn decode_scene(buf: &[u8]) -> Result<Scene> {
    let mut cur = Cursor::new(buf);
    let magic = cur.take(4, "magic")?;
    if magic != SCENE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {SCENE_MAGIC:?}"),
        });
    }
    let meta_len = cur.read_u32("metadata length")? as usize;
    let meta_off = cur.offset();
    let meta = std::str::from_utf8(cur.take(meta_len, "metadata")?).map_err(|e| Error::Parse {
        offset: meta_off,
        msg: format!("metadata is not UTF-8: {e}"),
    })?;

    let mut h = 0usize;
    let mut w = 0usize;
    let mut n_stuff = 1u16;
    let mut n_thing = 1u16;
    let mut shortfall = 0u32;
    let mut boxes: Vec<(u16, [u32; 4])> = Vec::new();
    for line in meta.lines() {
        let mut fields = BTreeMap::new();
        let mut inst: Option<Vec<&str>> = None;
        for tok in line.split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                if k == "instance" {
                    inst = Some(vec![v]);
                } else if let Some(i) = inst.as_mut() {
                    i.push(tok);
                } else {
                    fields.insert(k, v);
                }
            } else if let Some(i) = inst.as_mut() {
                i.push(tok);
            }
        }
        let parse = |v: &str, what: &str| -> Result<u64> {
            v.parse::<u64>().map_err(|_| Error::Parse {
                offset: meta_off,
                msg: format!("bad {what} value '{v}'"),
            })
        };
        if let Some(v) = fields.get("h") {
            h = parse(v, "h")? as usize;
        }
        if let Some(v) = fields.get("w") {
            w = parse(v, "w")? as usize;
        }
        if let Some(v) = fields.get("stuff_classes") {
            n_stuff = parse(v, "stuff_classes")? as u16;
        }
        if let Some(v) = fields.get("thing_classes") {
            n_thing = parse(v, "thing_classes")? as u16;
        }
        if let Some(v) = fields.get("shortfall") {
            shortfall = parse(v, "shortfall")? as u32;
        }
        if let Some(i) = inst {
            if i.len() < 5 {
                return Err(Error::Parse {
                    offset: meta_off,
                    msg: format!("instance line too short: '{line}'"),
                });
            }
            let class = parse(i[0], "instance class")? as u16;
            let b = [
                parse(i[1], "box")? as u32,
                parse(i[2], "box")? as u32,
                parse(i[3], "box")? as u32,
                parse(i[4], "box")? as u32,
            ];
            boxes.push((class, b));
        }
    }

    let (name, image) = read_named_tensor::<f32>(&mut cur)?;
    if name != "image" {
        return Err(Error::Parse {
            offset: meta_off,
            msg: format!("expected tensor 'image', found '{name}'"),
        });
    }
    if image.shape() != Shape::new(1, 3, h, w) {
        return Err(Error::Parse {
            offset: meta_off,
            msg: format!("image shape {} disagrees with metadata {h}x{w}", image.shape()),
        });
    }
    let stuff_map = rle_decode(&mut cur, h * w, |c| {
        let b = c.take(2, "stuff value")?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    })?;
    let mut instances = Vec::new();
    for (class_id, bbox) in boxes {
        let mask = rle_decode(&mut cur, h * w, |c| c.read_u8("mask value"))?;
        instances.push(Instance {
            class_id,
            bbox,
            mask,
        });
    }
    if !cur.is_empty() {
        return Err(Error::Parse {
            offset: cur.offset(),
            msg: "trailing bytes after scene record".into(),
        });
    }
    Ok(Scene {
        image,
        stuff_map,
        instances,
        shortfall,
        n_stuff_classes: n_stuff,
        n_thing_classes: n_thing,
    })
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, encode_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&buf)
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.dr1s")
}

/// Write a dataset directory, one record per scene.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        save_scene(&dir.join(scene_file_name(i)), s)?;
    }
    Ok(())
}

/// Load every `.dr1s` record in the directory, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "dr1s"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument {
            op: "load_dataset",
            msg: format!("no .dr1s records under {}", dir.display()),
        });
    }
    paths.iter().map(|p| load_scene(p)).collect()
}

// ---------------------------------------------------------------------------
// Portable pixmap export
// ---------------------------------------------------------------------------

/// Binary PPM (P6) from a row-major RGB byte plane.
pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Binary PGM (P5) from a row-major grayscale byte plane.
pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Scene image tensor as an RGB byte plane.
pub fn scene_to_rgb(scene: &Scene) -> Vec<u8> {
    let (h, w) = (scene.height(), scene.width());
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((scene.image.at(0, c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn shape_name(class_id: u16) -> &'static str {
    SHAPE_NAMES[class_id as usize % SHAPE_NAMES.len()]
}
