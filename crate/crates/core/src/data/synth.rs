use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{
    load_dataset, write_attribute_csv, DatasetManifest, Provenance, Record, ATTRIBUTES_FILE, SCHEMA_FILE,
};
use super::image::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::model::AttributeSchema;

pub const SYNTH_FILE: &str = "synth.json";

// Attribute positions in the default schema.
pub const CELL_SIZE: usize = 0;
pub const CELL_SHAPE: usize = 1;
pub const NUCLEUS_SHAPE: usize = 2;
pub const NC_RATIO: usize = 3;
pub const CHROMATIN: usize = 4;
pub const VACUOLE: usize = 5;
pub const TEXTURE: usize = 6;
pub const CYTOPLASM_COLOR: usize = 7;
pub const GRANULE_TYPE: usize = 8;
pub const GRANULE_COLOR: usize = 9;
pub const GRANULARITY: usize = 10;

/// Imaging conditions: slide tint, stain gain and sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub background: [f64; 3],
    pub gain: [f64; 3],
    pub noise: f64,
}

impl Domain {
    pub fn style(self) -> Style {
        match self {
            Domain::A => Style {
                background: [0.96, 0.90, 0.86],
                gain: [1.0, 1.0, 1.0],
                noise: 0.01,
            },
            Domain::B => Style {
                background: [0.92, 0.92, 0.76],
                gain: [0.93, 1.0, 1.05],
                noise: 0.035,
            },
        }
    }
}

/// Base colours of the rendered structures, before domain gain.
pub mod palette {
    pub const CYTOPLASM: [[f64; 3]; 3] = [[0.78, 0.84, 0.95], [0.60, 0.70, 0.92], [0.66, 0.60, 0.86]];
    pub const NUCLEUS_DENSE: [f64; 3] = [0.36, 0.16, 0.50];
    pub const NUCLEUS_LOOSE: [f64; 3] = [0.56, 0.38, 0.70];
    pub const VACUOLE: [f64; 3] = [0.90, 0.95, 1.0];
    /// Indexed by granule colour category; entry 0 (nil) is unused.
    pub const GRANULE: [[f64; 3]; 4] = [[0.0; 3], [0.93, 0.58, 0.72], [0.85, 0.22, 0.25], [0.22, 0.04, 0.26]];
}

/// Attribute categories a class is rendered with, by name in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub class: String,
    pub attributes: Vec<String>,
}

impl Recipe {
    fn new(class: &str, attributes: [&str; 11]) -> Self {
        Recipe {
            class: class.into(),
            attributes: attributes.iter().map(|a| a.to_string()).collect(),
        }
    }
}

pub fn default_recipes() -> Vec<Recipe> {
    vec![
        Recipe::new(
            "Basophil",
            [
                "small", "round", "segmented-bilobed", "high", "densely", "no", "clear", "purple blue", "round",
                "purple", "yes",
            ],
        ),
        Recipe::new(
            "Eosinophil",
            [
                "big", "round", "segmented-bilobed", "low", "densely", "no", "clear", "light blue", "round", "red",
                "yes",
            ],
        ),
        Recipe::new(
            "Lymphocyte",
            [
                "small", "round", "unsegmented-round", "high", "densely", "no", "clear", "blue", "nil", "nil", "no",
            ],
        ),
        Recipe::new(
            "Monocyte",
            [
                "big", "irregular", "irregular", "low", "loosely", "yes", "frosted", "blue", "small", "pink", "yes",
            ],
        ),
        Recipe::new(
            "Neutrophil",
            [
                "big", "round", "segmented-multilobed", "low", "densely", "no", "frosted", "light blue", "small",
                "pink", "yes",
            ],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Probability that one attribute of a sample is re-sampled off-recipe.
    pub noise: f64,
    pub domain: Domain,
    pub recipes: Vec<Recipe>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            per_class: 100,
            seed: 7,
            noise: 0.05,
            domain: Domain::A,
            recipes: default_recipes(),
        }
    }
}

impl SynthConfig {
    /// Checks the config and resolves recipes to category indices, sorted by class name.
    pub fn resolve(&self, schema: &AttributeSchema) -> Result<Vec<(String, Vec<usize>)>> {
        if schema != &AttributeSchema::default() {
            return Err(Error::Schema("the synthetic renderer draws the default attribute schema only".into()));
        }
        if self.image_size < 16 {
            return Err(Error::invalid("synth", format!("image size {} is below 16", self.image_size)));
        }
        if self.per_class == 0 {
            return Err(Error::invalid("synth", "per_class must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("synth", format!("noise {} is not a probability", self.noise)));
        }
        if self.recipes.is_empty() {
            return Err(Error::invalid("synth", "no class recipes"));
        }
        let mut out = Vec::new();
        for r in &self.recipes {
            if r.class.is_empty() || r.class.contains(['/', '\\']) {
                return Err(Error::invalid("synth", format!("bad class name `{}`", r.class)));
            }
            if r.attributes.len() != schema.len() {
                return Err(Error::invalid(
                    "synth",
                    format!("recipe `{}` assigns {} of {} attributes", r.class, r.attributes.len(), schema.len()),
                ));
            }
            let labels = r
                .attributes
                .iter()
                .enumerate()
                .map(|(m, c)| schema.category_index(m, c))
                .collect::<Result<Vec<_>>>()?;
            if !granules_consistent(&labels) {
                return Err(Error::invalid(
                    "synth",
                    format!("recipe `{}`: granularity, granule type and granule colour disagree", r.class),
                ));
            }
            out.push((r.class.clone(), labels));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        if out.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("synth", "duplicate class recipe"));
        }
        Ok(out)
    }
}

/// Granularity "no", granule type "nil" and granule colour "nil" go together.
pub fn granules_consistent(labels: &[usize]) -> bool {
    let none = labels[GRANULARITY] == 1;
    none == (labels[GRANULE_TYPE] == 0) && none == (labels[GRANULE_COLOR] == 0)
}

/// Everything `render` needs to reproduce one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderParams {
    pub size: usize,
    pub domain: Domain,
    pub attributes: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSample {
    pub class: usize,
    pub name: String,
    pub params: RenderParams,
}

/// Draws every sample's labels and render seed without rendering.
pub fn synth_plan(cfg: &SynthConfig) -> Result<(Vec<String>, Vec<SynthSample>)> {
    let schema = AttributeSchema::default();
    let recipes = cfg.resolve(&schema)?;
    let sizes = schema.sizes();
    let mut samples = Vec::new();
    for (class, (name, recipe)) in recipes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(class as u64 + 1);
        for i in 0..cfg.per_class {
            let mut labels = recipe.clone();
            if rng.gen_bool(cfg.noise) {
                let m = rng.gen_range(0..labels.len());
                let other = rng.gen_range(0..sizes[m] - 1);
                labels[m] = if other >= recipe[m] { other + 1 } else { other };
                harmonize_granules(&mut labels, m, &mut rng);
            }
            samples.push(SynthSample {
                class,
                name: format!("{name}/{}_{i:04}.png", name.to_lowercase()),
                params: RenderParams {
                    size: cfg.image_size,
                    domain: cfg.domain,
                    attributes: labels,
                    seed: rng.gen(),
                },
            });
        }
    }
    Ok((recipes.into_iter().map(|r| r.0).collect(), samples))
}

fn harmonize_granules(labels: &mut [usize], changed: usize, rng: &mut impl Rng) {
    let present = match changed {
        GRANULARITY => labels[GRANULARITY] == 0,
        GRANULE_TYPE => labels[GRANULE_TYPE] != 0,
        GRANULE_COLOR => labels[GRANULE_COLOR] != 0,
        _ => return,
    };
    if present {
        labels[GRANULARITY] = 0;
        if labels[GRANULE_TYPE] == 0 {
            labels[GRANULE_TYPE] = rng.gen_range(1..=2);
        }
        if labels[GRANULE_COLOR] == 0 {
            labels[GRANULE_COLOR] = rng.gen_range(1..=3);
        }
    } else {
        labels[GRANULARITY] = 1;
        labels[GRANULE_TYPE] = 0;
        labels[GRANULE_COLOR] = 0;
    }
}

/// Renders a dataset into the empty (or missing) directory `out`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    let schema = AttributeSchema::default();
    let (classes, samples) = synth_plan(cfg)?;
    if out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Error::Data(format!("output directory `{}` is not empty", out.display())));
    }
    for class in &classes {
        let dir = out.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    samples
        .par_iter()
        .try_for_each(|s| render(&s.params).write_png(&out.join(&s.name)))?;
    let records: Vec<Record> = samples
        .iter()
        .map(|s| Record {
            file: out.join(&s.name),
            name: s.name.clone(),
            class: s.class,
            attributes: Some(s.params.attributes.clone()),
            provenance: Provenance::True,
            source: String::new(),
        })
        .collect();
    write_attribute_csv(&out.join(ATTRIBUTES_FILE), &schema, &records, false)?;
    schema.save(&out.join(SCHEMA_FILE))?;
    let cfg_path = out.join(SYNTH_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    load_dataset(out, &schema)
}

struct Outline {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    wobble: Vec<(f64, f64, f64)>,
}

impl Outline {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let phi = v.atan2(u);
        let edge = 1.0 + self.wobble.iter().map(|(a, k, p)| a * (k * phi + p).sin()).sum::<f64>();
        u * u + v * v < edge * edge
    }
}

/// Nucleus silhouettes in unit coordinates.
enum NucleusShape {
    Ellipse { a: f64, b: f64 },
    Indented { cut_x: f64, cut_r: f64 },
    Lobes { centers: Vec<(f64, f64)>, r: f64 },
    Wavy { terms: [(f64, f64, f64); 2] },
}

impl NucleusShape {
    fn draw(category: usize, rng: &mut impl Rng) -> Self {
        match category {
            0 => NucleusShape::Ellipse {
                a: 1.0,
                b: rng.gen_range(0.85..1.0),
            },
            1 => NucleusShape::Indented {
                cut_x: rng.gen_range(0.9..1.05),
                cut_r: rng.gen_range(0.5..0.65),
            },
            2 => NucleusShape::Lobes {
                centers: vec![(-0.55, 0.0), (0.55, 0.0)],
                r: rng.gen_range(0.6..0.66),
            },
            3 => {
                let n = rng.gen_range(3..=4);
                let centers = (0..n)
                    .map(|k| {
                        let x = (k as f64 - (n - 1) as f64 / 2.0) * 0.62;
                        let y = if k % 2 == 0 { 0.18 } else { -0.18 };
                        (x, y)
                    })
                    .collect();
                NucleusShape::Lobes {
                    centers,
                    r: rng.gen_range(0.42..0.48),
                }
            }
            _ => NucleusShape::Wavy {
                terms: [
                    (rng.gen_range(0.18..0.26), 2.0, rng.gen_range(0.0..TAU)),
                    (rng.gen_range(0.10..0.15), 3.0, rng.gen_range(0.0..TAU)),
                ],
            },
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            NucleusShape::Ellipse { a, b } => (u / a).powi(2) + (v / b).powi(2) < 1.0,
            NucleusShape::Indented { cut_x, cut_r } => {
                u * u + v * v < 1.0 && (u - cut_x).powi(2) + v * v >= cut_r * cut_r
            }
            NucleusShape::Lobes { centers, r } => {
                centers.iter().any(|&(x, y)| (u - x).powi(2) + (v - y).powi(2) < r * r)
            }
            NucleusShape::Wavy { terms } => {
                let phi = v.atan2(u);
                let edge = 1.0 + terms.iter().map(|(a, k, p)| a * (k * phi + p).sin()).sum::<f64>();
                u * u + v * v < edge * edge
            }
        }
    }
}

fn uniform_angle(rng: &mut impl Rng) -> f64 {
    rng.gen_range(0.0..TAU)
}

/// Procedurally draws one cell. Deterministic in `params`.
pub fn render(params: &RenderParams) -> Image {
    let n = params.size;
    let s = n as f64;
    let a = &params.attributes;
    let style = params.domain.style();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let radius = s * if a[CELL_SIZE] == 0 {
        rng.gen_range(0.34..0.40)
    } else {
        rng.gen_range(0.21..0.26)
    };
    let ecc = rng.gen_range(0.0..0.08);
    let theta = uniform_angle(&mut rng);
    let wobble = if a[CELL_SHAPE] == 1 {
        vec![
            (rng.gen_range(0.08..0.12), rng.gen_range(3..=5) as f64, uniform_angle(&mut rng)),
            (rng.gen_range(0.03..0.06), rng.gen_range(6..=7) as f64, uniform_angle(&mut rng)),
        ]
    } else {
        Vec::new()
    };
    let cell = Outline {
        cx: s / 2.0 + rng.gen_range(-0.03..0.03) * s,
        cy: s / 2.0 + rng.gen_range(-0.03..0.03) * s,
        rx: radius * (1.0 + ecc),
        ry: radius / (1.0 + ecc),
        cos: theta.cos(),
        sin: theta.sin(),
        wobble,
    };
    let centre = |i: usize| ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
    let cell_mask: Vec<bool> = (0..n * n)
        .map(|i| {
            let (x, y) = centre(i);
            cell.contains(x, y)
        })
        .collect();
    let cell_area = cell_mask.iter().filter(|&&m| m).count();

    let shape = NucleusShape::draw(a[NUCLEUS_SHAPE], &mut rng);
    let high = a[NC_RATIO] == 0;
    let ratio = if high {
        rng.gen_range(0.55..0.66)
    } else {
        rng.gen_range(0.18..0.28)
    };
    let target = (ratio * cell_area as f64).round() as usize;
    let shift = radius * if high { 0.06 } else { 0.22 } * rng.gen_range(0.0..1.0);
    let dir = uniform_angle(&mut rng);
    let (nx, ny) = (cell.cx + shift * dir.cos(), cell.cy + shift * dir.sin());
    let rot = uniform_angle(&mut rng);
    let (rc, rs) = (rot.cos(), rot.sin());
    let nucleus_at = |scale: f64| -> Vec<bool> {
        (0..n * n)
            .map(|i| {
                if !cell_mask[i] {
                    return false;
                }
                let (x, y) = centre(i);
                let (dx, dy) = ((x - nx) / scale, (y - ny) / scale);
                shape.contains(dx * rc + dy * rs, -dx * rs + dy * rc)
            })
            .collect()
    };
    let (mut lo, mut hi) = (1e-3, 4.0 * radius);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if nucleus_at(mid).iter().filter(|&&m| m).count() >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let nucleus = nucleus_at(hi);

    let cyto = palette::CYTOPLASM[a[CYTOPLASM_COLOR]];
    let frosted = a[TEXTURE] == 1;
    let (nuc, mottle) = if a[CHROMATIN] == 0 {
        (palette::NUCLEUS_DENSE, 0.02)
    } else {
        (palette::NUCLEUS_LOOSE, 0.05)
    };
    let mut rgb: Vec<[f64; 3]> = (0..n * n)
        .map(|i| {
            if !cell_mask[i] {
                style.background
            } else if nucleus[i] {
                let d = rng.gen_range(-mottle..mottle);
                nuc.map(|c| c + d)
            } else if frosted {
                let d = rng.gen_range(-0.07..0.07);
                cyto.map(|c| c + d)
            } else {
                cyto
            }
        })
        .collect();

    let (x0, x1) = (cell.cx - 1.3 * radius, cell.cx + 1.3 * radius);
    let (y0, y1) = (cell.cy - 1.3 * radius, cell.cy + 1.3 * radius);
    let pixel_of = |x: f64, y: f64| -> Option<usize> {
        (x >= 0.0 && y >= 0.0 && x < s && y < s).then(|| y as usize * n + x as usize)
    };
    let disk = |x: f64, y: f64, r: f64| -> Vec<usize> {
        let mut out = Vec::new();
        let (ylo, yhi) = ((y - r).floor().max(0.0) as usize, ((y + r).ceil() as usize).min(n));
        let (xlo, xhi) = ((x - r).floor().max(0.0) as usize, ((x + r).ceil() as usize).min(n));
        for py in ylo..yhi {
            for px in xlo..xhi {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                if (cx - x).powi(2) + (cy - y).powi(2) <= r * r {
                    out.push(py * n + px);
                }
            }
        }
        out
    };

    if a[VACUOLE] == 0 {
        let count = rng.gen_range(3..=6);
        let scale = s / 64.0;
        for _ in 0..count {
            for _ in 0..100 {
                let (x, y) = (rng.gen_range(x0..x1), rng.gen_range(y0..y1));
                let Some(i) = pixel_of(x, y) else { continue };
                if !cell_mask[i] || nucleus[i] {
                    continue;
                }
                let r = rng.gen_range(1.2..2.2) * scale;
                for j in disk(x, y, r) {
                    if cell_mask[j] && !nucleus[j] {
                        rgb[j] = palette::VACUOLE;
                    }
                }
                break;
            }
        }
    }

    if a[GRANULE_TYPE] != 0 && a[GRANULE_COLOR] != 0 {
        let colour = palette::GRANULE[a[GRANULE_COLOR]];
        let coverage = (rng.gen_range(0.06..0.13) * cell_area as f64).ceil() as usize;
        let mut painted = vec![false; n * n];
        let mut count = 0;
        let mut tries = 0;
        while count < coverage && tries < 50 * coverage {
            tries += 1;
            let (x, y) = (rng.gen_range(x0..x1), rng.gen_range(y0..y1));
            let Some(i) = pixel_of(x, y) else { continue };
            if !cell_mask[i] {
                continue;
            }
            let dots = if a[GRANULE_TYPE] == 1 { vec![i] } else { disk(x, y, 1.3) };
            for j in dots {
                if cell_mask[j] && !painted[j] {
                    painted[j] = true;
                    rgb[j] = colour;
                    count += 1;
                }
            }
        }
    }

    let mut data = vec![0u8; CHANNELS * n * n];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..CHANNELS {
            let z: f64 = rng.sample(StandardNormal);
            let v = style.gain[c] * px[c] + style.noise * z;
            data[c * n * n + i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Image::new(n, n, data).expect("render produces a full RGB buffer")
}
