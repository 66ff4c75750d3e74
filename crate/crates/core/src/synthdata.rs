//! Synthetic shapes dataset and count-annotation ingestion.
//!
//! A generated dataset directory contains:
//!
//! ```text
//! images/<id>.png     RGB renderings
//! categories.txt      one category name per line, in model order
//! annotations.csv     image_id,path,split,<category>...  (raw counts)
//! points.csv          image_id,category,y,x              (instance centres, pixels)
//! masks.txt           instance masks (mask archive format)
//! proposals.txt       category-agnostic proposals (mask archive format)
//! splits.csv          image_id,split
//! synth.json          the generator configuration
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::CountAnnotation;
use crate::error::{Error, Result};
use crate::mask::{write_mask_archive, BinaryMask, MaskRecord};

pub const IMAGES_DIR: &str = "images";
pub const CATEGORIES_FILE: &str = "categories.txt";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const POINTS_FILE: &str = "points.csv";
pub const MASKS_FILE: &str = "masks.txt";
pub const PROPOSALS_FILE: &str = "proposals.txt";
pub const SPLITS_FILE: &str = "splits.csv";
pub const CONFIG_FILE: &str = "synth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "disc" => Some(Self::Disc),
            "square" => Some(Self::Square),
            "triangle" => Some(Self::Triangle),
            _ => None,
        }
    }

    /// Whether the pixel offset (dy, dx) from the centre lies inside a
    /// shape of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Self::Disc => dy * dy + dx * dx <= r * r,
            Self::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
            Self::Triangle => {
                // apex up at (-r, 0), base at dy = 0.7r from -r to r
                let base = 0.7 * r;
                if dy < -r || dy > base {
                    return false;
                }
                let half = r * (dy + r) / (base + r);
                dx.abs() <= half
            }
        }
    }
}

const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.20, 0.30, 0.95],
    [0.90, 0.80, 0.15],
    [0.70, 0.20, 0.80],
    [0.10, 0.80, 0.80],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: usize,
    /// Shape names: disc, square, triangle.
    pub categories: Vec<String>,
    pub max_count: u32,
    /// Relative weights for counts 0..=max_count; uniform when absent.
    pub count_weights: Option<Vec<f64>>,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Largest fraction of a new shape's bounding box allowed to overlap an
    /// earlier shape's.
    pub occlusion_rate: f64,
    pub color_jitter: f32,
    pub noise: f32,
    /// Trailing fraction of images assigned to the test split.
    pub test_fraction: f64,
    /// Random box proposals per image, on top of instance and merged ones.
    pub random_proposals: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            image_size: 64,
            categories: vec!["disc".into(), "square".into(), "triangle".into()],
            max_count: 8,
            count_weights: None,
            min_radius: 3.0,
            max_radius: 5.0,
            occlusion_rate: 0.2,
            color_jitter: 0.1,
            noise: 0.03,
            test_fraction: 0.2,
            random_proposals: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.num_images == 0 {
            p.push("synth.num_images must be at least 1".into());
        }
        if self.categories.is_empty() {
            p.push("synth.categories must name at least one shape".into());
        }
        for (i, name) in self.categories.iter().enumerate() {
            if ShapeKind::parse(name).is_none() {
                p.push(format!(
                    "synth.categories: unknown shape `{name}` (expected disc, square or triangle)"
                ));
            }
            if self.categories[..i].contains(name) {
                p.push(format!("synth.categories: `{name}` listed twice"));
            }
        }
        if self.categories.len() > PALETTE.len() {
            p.push(format!("synth.categories: at most {} categories", PALETTE.len()));
        }
        if self.max_count <= 4 {
            p.push("synth.max_count must exceed 4 so that beyond-range counts occur".into());
        }
        if let Some(w) = &self.count_weights {
            if w.len() != self.max_count as usize + 1 {
                p.push(format!(
                    "synth.count_weights needs {} entries, found {}",
                    self.max_count + 1,
                    w.len()
                ));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                p.push("synth.count_weights must be non-negative with a positive sum".into());
            }
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            p.push("synth.min_radius must be at least 1 and not above max_radius".into());
        }
        if 2.0 * self.max_radius + 1.0 > self.image_size as f64 {
            p.push(format!(
                "synth.max_radius {} is too large for {}-pixel images",
                self.max_radius, self.image_size
            ));
        }
        if self.image_size < 8 {
            p.push("synth.image_size must be at least 8".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            p.push("synth.occlusion_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            p.push("synth.test_fraction must lie in [0, 1]".into());
        }
        if !(self.color_jitter >= 0.0 && self.noise >= 0.0) {
            p.push("synth.color_jitter and synth.noise must be non-negative".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn num_test(&self) -> usize {
        (self.num_images as f64 * self.test_fraction).round() as usize
    }
}

/// One rendered object.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: usize,
    pub center: (f64, f64),
    pub radius: f64,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub split: String,
    pub image: image::RgbImage,
    pub counts: Vec<u32>,
    pub instances: Vec<Instance>,
    pub proposals: Vec<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub num_train: usize,
    pub num_test: usize,
    pub totals: Vec<u64>,
    /// Shapes placed with more overlap than the occlusion rate allows
    /// because no compliant spot was found.
    pub crowded_placements: usize,
}

fn overlap_fraction(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let side = |r: f64| 2.0 * r;
    let iy = ((a.0 + a.2).min(b.0 + b.2) - (a.0 - a.2).max(b.0 - b.2)).max(0.0);
    let ix = ((a.1 + a.2).min(b.1 + b.2) - (a.1 - a.2).max(b.1 - b.2)).max(0.0);
    iy * ix / (side(a.2) * side(a.2))
}

fn shape_mask(kind: ShapeKind, center: (f64, f64), r: f64, size: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(size, size);
    let lo = |c: f64| ((c - r - 1.0).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + r + 1.0).ceil() as usize).min(size);
    for i in lo(center.0)..hi(center.0) {
        for j in lo(center.1)..hi(center.1) {
            if kind.contains(i as f64 + 0.5 - center.0, j as f64 + 0.5 - center.1, r) {
                m.set(i, j, true);
            }
        }
    }
    m
}

/// Renders image `index` of the dataset. Each image draws from its own
/// random stream, so images can be produced independently.
pub fn render_image(config: &SynthConfig, index: usize) -> Result<(SynthImage, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let size = config.image_size;
    let kinds: Vec<ShapeKind> = config
        .categories
        .iter()
        .map(|n| ShapeKind::parse(n).ok_or_else(|| Error::InvalidArgument(format!("unknown shape `{n}`"))))
        .collect::<Result<_>>()?;
    let weights = config
        .count_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; config.max_count as usize + 1]);
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("count weights: {e}")))?;
    let counts: Vec<u32> = kinds.iter().map(|_| dist.sample(&mut rng) as u32).collect();

    // drawing order interleaves categories
    let mut order: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n as usize))
        .collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);

    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut instances = Vec::with_capacity(order.len());
    let mut crowded = 0;
    for &cat in &order {
        let r = rng.random_range(config.min_radius..=config.max_radius);
        let mut best: Option<((f64, f64), f64)> = None;
        for _ in 0..100 {
            let cy = rng.random_range(r..=size as f64 - r);
            let cx = rng.random_range(r..=size as f64 - r);
            let worst = placed
                .iter()
                .map(|&p| overlap_fraction((cy, cx, r), p).max(overlap_fraction(p, (cy, cx, r))))
                .fold(0.0, f64::max);
            if best.is_none_or(|(_, o)| worst < o) {
                best = Some(((cy, cx), worst));
            }
            if worst <= config.occlusion_rate {
                break;
            }
        }
        let (center, worst) = best.expect("at least one attempt");
        if worst > config.occlusion_rate {
            crowded += 1;
        }
        placed.push((center.0, center.1, r));
        instances.push(Instance {
            category: cat,
            center,
            radius: r,
            mask: shape_mask(kinds[cat], center, r, size),
        });
    }

    let bg: f32 = rng.random_range(0.35..0.55);
    let mut px = vec![[bg; 3]; size * size];
    if config.noise > 0.0 {
        for p in px.iter_mut() {
            let n: f32 = rng.random_range(-config.noise..=config.noise);
            for v in p.iter_mut() {
                *v += n;
            }
        }
    }
    for inst in &instances {
        let mut color = PALETTE[inst.category];
        for v in color.iter_mut() {
            if config.color_jitter > 0.0 {
                *v += rng.random_range(-config.color_jitter..=config.color_jitter);
            }
        }
        for (k, on) in inst.mask.bits().iter().enumerate() {
            if *on {
                px[k] = color;
            }
        }
    }
    let image = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = px[y as usize * size + x as usize];
        image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });

    let proposals = make_proposals(&instances, config.random_proposals, size, &mut rng)?;
    let split = if index >= config.num_images - config.num_test() {
        "test"
    } else {
        "train"
    };
    Ok((
        SynthImage {
            id: format!("img{index:05}"),
            split: split.into(),
            image,
            counts,
            instances,
            proposals,
        },
        crowded,
    ))
}

/// Instance masks, unions of neighbouring instance pairs and random boxes.
fn make_proposals(instances: &[Instance], random: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BinaryMask>> {
    let mut out: Vec<BinaryMask> = instances.iter().map(|i| i.mask.clone()).collect();
    for a in 0..instances.len() {
        for b in a + 1..instances.len() {
            let (ia, ib) = (&instances[a], &instances[b]);
            let d = ((ia.center.0 - ib.center.0).powi(2) + (ia.center.1 - ib.center.1).powi(2)).sqrt();
            if d <= ia.radius + ib.radius + 2.0 {
                out.push(ia.mask.union(&ib.mask)?);
            }
        }
    }
    for _ in 0..random {
        let h = rng.random_range(2..=size / 3);
        let w = rng.random_range(2..=size / 3);
        let r0 = rng.random_range(0..=size - h);
        let c0 = rng.random_range(0..=size - w);
        let mut m = BinaryMask::empty(size, size);
        for i in r0..r0 + h {
            for j in c0..c0 + w {
                m.set(i, j, true);
            }
        }
        out.push(m);
    }
    Ok(out)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the whole dataset under `out_dir`, creating it if needed.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    config.validate()?;
    let images_dir = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let cat_path = out_dir.join(CATEGORIES_FILE);
    fs::write(&cat_path, config.categories.join("\n") + "\n").map_err(|e| Error::io(&cat_path, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(config).map_err(|e| Error::format("synth config", e.to_string()))?;
    fs::write(&cfg_path, json + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let ann_path = out_dir.join(ANNOTATIONS_FILE);
    let pts_path = out_dir.join(POINTS_FILE);
    let split_path = out_dir.join(SPLITS_FILE);
    let mut ann = csv::Writer::from_path(&ann_path).map_err(csv_err(&ann_path))?;
    let mut pts = csv::Writer::from_path(&pts_path).map_err(csv_err(&pts_path))?;
    let mut splits = csv::Writer::from_path(&split_path).map_err(csv_err(&split_path))?;
    let mut header = vec!["image_id".to_string(), "path".into(), "split".into()];
    header.extend(config.categories.iter().cloned());
    ann.write_record(&header).map_err(csv_err(&ann_path))?;
    pts.write_record(["image_id", "category", "y", "x"]).map_err(csv_err(&pts_path))?;
    splits.write_record(["image_id", "split"]).map_err(csv_err(&split_path))?;

    let mut masks = Vec::new();
    let mut proposals = Vec::new();
    let mut summary = SynthSummary {
        num_train: 0,
        num_test: 0,
        totals: vec![0; config.categories.len()],
        crowded_placements: 0,
    };
    for index in 0..config.num_images {
        let (img, crowded) = render_image(config, index)?;
        summary.crowded_placements += crowded;
        if img.split == "test" {
            summary.num_test += 1;
        } else {
            summary.num_train += 1;
        }
        let rel = format!("{IMAGES_DIR}/{}.png", img.id);
        let png = out_dir.join(&rel);
        img.image.save(&png).map_err(|source| Error::Image { path: png.clone(), source })?;

        let mut row = vec![img.id.clone(), rel, img.split.clone()];
        row.extend(img.counts.iter().map(u32::to_string));
        ann.write_record(&row).map_err(csv_err(&ann_path))?;
        splits.write_record([&img.id, &img.split]).map_err(csv_err(&split_path))?;
        for (c, n) in img.counts.iter().enumerate() {
            summary.totals[c] += u64::from(*n);
        }
        for (k, inst) in img.instances.iter().enumerate() {
            let name = &config.categories[inst.category];
            pts.write_record([
                img.id.as_str(),
                name.as_str(),
                &format!("{:.3}", inst.center.0),
                &format!("{:.3}", inst.center.1),
            ])
            .map_err(csv_err(&pts_path))?;
            masks.push(MaskRecord {
                id: format!("{}-i{k}", img.id),
                image_id: img.id.clone(),
                category: Some(name.clone()),
                score: 1.0,
                mask: inst.mask.clone(),
            });
        }
        for (k, p) in img.proposals.into_iter().enumerate() {
            proposals.push(MaskRecord {
                id: format!("{}-p{k}", img.id),
                image_id: img.id.clone(),
                category: None,
                score: 0.0,
                mask: p,
            });
        }
    }
    ann.flush().map_err(|e| Error::io(&ann_path, e))?;
    pts.flush().map_err(|e| Error::io(&pts_path, e))?;
    splits.flush().map_err(|e| Error::io(&split_path, e))?;
    write_mask_archive(&out_dir.join(MASKS_FILE), &masks)?;
    write_mask_archive(&out_dir.join(PROPOSALS_FILE), &proposals)?;
    Ok(summary)
}

/// Reads a category list: one name per line, blank lines ignored.
pub fn read_categories(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        if out.iter().any(|n| n == name) {
            return Err(Error::Annotation {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("category `{name}` listed twice"),
            });
        }
        out.push(name.to_string());
    }
    if out.is_empty() {
        return Err(Error::Annotation {
            path: path.to_path_buf(),
            line: 1,
            detail: "no categories".into(),
        });
    }
    Ok(out)
}

/// One annotated image: raw counts for evaluation, clamped labels for
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    /// Resolved against the annotation file's directory.
    pub path: PathBuf,
    pub split: String,
    pub raw_counts: Vec<u32>,
    pub annotation: CountAnnotation,
    pub line: usize,
}

/// Parses an annotation file with columns `image_id,path,split` followed by
/// one raw-count column per category. Columns may appear in any order but
/// must name exactly the categories in `categories`.
pub fn ingest_counts(path: &Path, categories: &[String], beyond_threshold: u32) -> Result<Vec<DatasetRecord>> {
    let err = |line: usize, detail: String| Error::Annotation {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(csv_err(path))?;
    let header = reader.headers().map_err(csv_err(path))?.clone();
    let fixed = ["image_id", "path", "split"];
    for (k, name) in fixed.iter().enumerate() {
        if header.get(k) != Some(*name) {
            return Err(err(1, format!("column {} must be `{name}`", k + 1)));
        }
    }
    let mut column_of = vec![None; categories.len()];
    for (k, name) in header.iter().enumerate().skip(fixed.len()) {
        match categories.iter().position(|c| c == name) {
            Some(c) if column_of[c].is_none() => column_of[c] = Some(k),
            Some(_) => return Err(err(1, format!("category `{name}` appears twice"))),
            None => return Err(err(1, format!("unknown category `{name}`"))),
        }
    }
    if let Some(c) = column_of.iter().position(Option::is_none) {
        return Err(err(1, format!("no column for category `{}`", categories[c])));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(err(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(err(line, "empty image id".into()));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(err(line, format!("duplicate image id `{id}` (first on line {first})")));
        }
        let mut raw = Vec::with_capacity(categories.len());
        for (c, col) in column_of.iter().enumerate() {
            let s = rec[col.expect("checked above")].trim();
            let v: i64 = s
                .parse()
                .map_err(|_| err(line, format!("count `{s}` for `{}` is not an integer", categories[c])))?;
            if v < 0 {
                return Err(err(line, format!("negative count {v} for `{}`", categories[c])));
            }
            raw.push(v);
        }
        let annotation = CountAnnotation::from_raw_counts(&id, &raw, beyond_threshold).map_err(|e| err(line, e.to_string()))?;
        out.push(DatasetRecord {
            image_id: id,
            path: base.join(&rec[1]),
            split: rec[2].to_string(),
            raw_counts: raw.iter().map(|&v| u32::try_from(v).unwrap_or(u32::MAX)).collect(),
            annotation,
            line,
        });
    }
    Ok(out)
}

/// Category list and annotation records of a dataset directory.
pub fn open_dataset(dir: &Path, beyond_threshold: u32) -> Result<(Vec<String>, Vec<DatasetRecord>)> {
    let categories = read_categories(&dir.join(CATEGORIES_FILE))?;
    let records = ingest_counts(&dir.join(ANNOTATIONS_FILE), &categories, beyond_threshold)?;
    Ok((categories, records))
}

/// Instance centres per image, in image pixels, keyed by category index.
pub type PointSets = BTreeMap<String, Vec<Vec<(f64, f64)>>>;

pub fn read_points(path: &Path, categories: &[String]) -> Result<PointSets> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out: PointSets = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |detail: String| Error::Annotation {
            path: path.to_path_buf(),
            line,
            detail,
        };
        if rec.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", rec.len())));
        }
        let c = categories
            .iter()
            .position(|n| n == &rec[1])
            .ok_or_else(|| err(format!("unknown category `{}`", &rec[1])))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad coordinate `{s}`")));
        let (y, x) = (num(&rec[2])?, num(&rec[3])?);
        out.entry(rec[0].to_string()).or_insert_with(|| vec![Vec::new(); categories.len()])[c].push((y, x));
    }
    Ok(out)
}
