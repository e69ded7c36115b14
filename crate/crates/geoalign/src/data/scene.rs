//! Procedural synthetic scenes: colored geometric objects on a textured
//! background, annotated with exact boxes, template captions, and region
//! phrases. Everything is a pure function of the seed and the config.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, ImageRef, ObjectSpec, RegionAnnotation, RgbImage, SampleRecord, SceneSpec, Split};
use crate::region::BBox;
use crate::rng::stream_rng;

pub const DEFAULT_CATEGORIES: [&str; 8] = [
    "tank", "pool", "court", "building", "plane", "road", "trees", "vehicle",
];

pub const DEFAULT_COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [204, 48, 48]),
    ("blue", [48, 72, 204]),
    ("green", [48, 168, 72]),
    ("white", [232, 232, 232]),
];

/// Placement grid: the image is divided into `GRID × GRID` cells and each
/// object occupies one cell, so boxes never overlap.
const GRID: usize = 4;

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub image_size: usize,
    pub categories: Vec<String>,
    pub colors: Vec<(String, [u8; 3])>,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            colors: DEFAULT_COLORS
                .iter()
                .map(|(n, rgb)| (n.to_string(), *rgb))
                .collect(),
            min_objects: 2,
            max_objects: 5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.categories.is_empty() || self.colors.is_empty() {
            return Err(DataError::Config(
                "scene config needs at least one category and one color".into(),
            ));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(DataError::Config(format!(
                "bad object count range {}..{}",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > GRID * GRID {
            return Err(DataError::Config(format!(
                "max_objects {} exceeds the {} placement cells",
                self.max_objects,
                GRID * GRID
            )));
        }
        if self.image_size % GRID != 0 || self.image_size / GRID < 12 {
            return Err(DataError::Config(format!(
                "image_size {} must be a multiple of {GRID} with cells of at least 12 px",
                self.image_size
            )));
        }
        Ok(())
    }

    fn rgb_of(&self, color: &str) -> [u8; 3] {
        self.colors
            .iter()
            .find(|(n, _)| n == color)
            .map(|(_, rgb)| *rgb)
            .unwrap_or([255, 0, 255])
    }
}

/// Coarse 3×3 location word for a normalized box center.
pub fn location_name(cx: f64, cy: f64) -> String {
    let col = if cx < 1.0 / 3.0 {
        "left"
    } else if cx < 2.0 / 3.0 {
        "center"
    } else {
        "right"
    };
    let row = if cy < 1.0 / 3.0 {
        "upper"
    } else if cy < 2.0 / 3.0 {
        "center"
    } else {
        "lower"
    };
    match (row, col) {
        ("center", "center") => "center".to_string(),
        ("center", c) => format!("center {c}"),
        (r, "center") => format!("{r} center"),
        (r, c) => format!("{r} {c}"),
    }
}

/// Generate one scene: deterministic in `seed` and `cfg`, returning the
/// record (with an inline procedural image reference) and the rendered
/// pixels.
pub fn synth_scene(seed: u64, cfg: &SceneConfig) -> Result<(SampleRecord, RgbImage), DataError> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, "scene", 0);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let cell = cfg.image_size / GRID;

    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(&mut rng);
    let mut objects = Vec::with_capacity(n);
    for &cell_idx in cells.iter().take(n) {
        let category = cfg.categories[rng.gen_range(0..cfg.categories.len())].clone();
        let color = cfg.colors[rng.gen_range(0..cfg.colors.len())].0.clone();
        let max_extent = cell - 3;
        let min_extent = cell / 2;
        let w = rng.gen_range(min_extent..=max_extent);
        let h = rng.gen_range(min_extent..=max_extent);
        let ox = rng.gen_range(1..=(cell - w - 1));
        let oy = rng.gen_range(1..=(cell - h - 1));
        let x0 = (cell_idx % GRID) * cell + ox;
        let y0 = (cell_idx / GRID) * cell + oy;
        objects.push(ObjectSpec {
            category,
            color,
            bbox_px: [x0, y0, x0 + w, y0 + h],
        });
    }

    let spec = SceneSpec {
        seed,
        size: cfg.image_size,
        objects,
    };
    let image = render(&spec, cfg);

    let size = cfg.image_size as f64;
    let regions: Vec<RegionAnnotation> = spec
        .objects
        .iter()
        .map(|o| {
            let [x0, y0, x1, y1] = o.bbox_px;
            let bbox = BBox {
                x0: x0 as f64 / size,
                y0: y0 as f64 / size,
                x1: x1 as f64 / size,
                y1: y1 as f64 / size,
            };
            let loc = location_name((bbox.x0 + bbox.x1) / 2.0, (bbox.y0 + bbox.y1) / 2.0);
            RegionAnnotation {
                bbox,
                phrase: format!("{} {} in the {loc}", o.color, o.category),
                hard_negatives: Vec::new(),
            }
        })
        .collect();

    let dominant = {
        let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
        for o in &spec.objects {
            *counts.entry(o.category.as_str()).or_default() += 1;
        }
        counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(name, _)| name.to_string())
            .expect("at least one object")
    };
    let brief_caption = format!("a scene with {n} objects including {dominant}");
    let detail_caption = format!(
        "the scene shows {}",
        regions
            .iter()
            .map(|r| format!("a {}", r.phrase))
            .collect::<Vec<_>>()
            .join(" and ")
    );

    let record = SampleRecord {
        id: format!("scene_{seed:08}"),
        image: ImageRef::Procedural(spec),
        brief_caption,
        detail_caption,
        regions,
        split: Split::Train,
    };
    Ok((record, image))
}

/// Render the pixels of an inline scene spec with default category shapes
/// and colors.
pub fn render_scene(spec: &SceneSpec) -> RgbImage {
    render(spec, &SceneConfig::default())
}

fn render(spec: &SceneSpec, cfg: &SceneConfig) -> RgbImage {
    let size = spec.size;
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let noise = (pixel_hash(spec.seed, x as u64, y as u64) % 24) as u8;
            let gradient = ((x + y) * 18 / (2 * size - 2)) as u8;
            let v = 68 + noise + gradient;
            img.set(x, y, [v, v, v]);
        }
    }
    for o in &spec.objects {
        draw_object(&mut img, o, cfg.rgb_of(&o.color));
    }
    img
}

fn pixel_hash(seed: u64, x: u64, y: u64) -> u64 {
    let mut z = seed
        ^ x.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ y.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn dim(rgb: [u8; 3]) -> [u8; 3] {
    [rgb[0] / 2, rgb[1] / 2, rgb[2] / 2]
}

fn draw_object(img: &mut RgbImage, obj: &ObjectSpec, rgb: [u8; 3]) {
    let [x0, y0, x1, y1] = obj.bbox_px;
    let (w, h) = (x1 - x0, y1 - y0);
    let mut fill = |fx0: usize, fy0: usize, fx1: usize, fy1: usize, c: [u8; 3]| {
        for y in fy0..fy1 {
            for x in fx0..fx1 {
                img.set(x, y, c);
            }
        }
    };
    match obj.category.as_str() {
        "tank" => {
            fill(x0, y0, x1, y1, rgb);
            fill(
                x0 + w / 4,
                y0 + h / 4,
                x0 + 3 * w / 4,
                y0 + 3 * h / 4,
                dim(rgb),
            );
        }
        "pool" => {
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as f64 - cx) / rx;
                    let dy = (y as f64 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        img.set(x0 + x, y0 + y, rgb);
                    }
                }
            }
        }
        "court" => {
            for y in 0..h {
                for x in 0..w {
                    if x < 2 || y < 2 || x >= w - 2 || y >= h - 2 {
                        img.set(x0 + x, y0 + y, rgb);
                    }
                }
            }
        }
        "plane" => {
            fill(x0 + w / 3, y0, x0 + 2 * w / 3, y1, rgb);
            fill(x0, y0 + h / 3, x1, y0 + 2 * h / 3, rgb);
        }
        "road" => {
            fill(x0, y0 + h / 3, x1, y0 + 2 * h / 3, rgb);
            let mid = y0 + h / 2;
            for x in (x0..x1).step_by(3) {
                img.set(x, mid, dim(rgb));
            }
        }
        "trees" => {
            let r = (w.min(h) / 4).max(2);
            for (fx, fy) in [(0.3, 0.3), (0.7, 0.35), (0.5, 0.72)] {
                let cx = x0 as f64 + fx * w as f64;
                let cy = y0 as f64 + fy * h as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        if dx * dx + dy * dy <= (r * r) as f64 {
                            img.set(x, y, rgb);
                        }
                    }
                }
            }
        }
        "vehicle" => {
            fill(x0, y0 + h / 4, x1, y0 + 3 * h / 4, rgb);
            let wheel = (w / 5).max(1);
            fill(x0, y1 - h / 4, x0 + wheel, y1, dim(rgb));
            fill(x1 - wheel, y1 - h / 4, x1, y1, dim(rgb));
        }
        // "building" and any custom category: solid block.
        _ => fill(x0, y0, x1, y1, rgb),
    }
}
