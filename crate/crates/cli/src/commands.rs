use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::{info, warn};

use ilc_core::config::Config;
use ilc_core::datamodel::Grid;
use ilc_core::infer::{
    predict as run_predict, prediction_records, read_maps, read_prediction_dump, write_maps, write_prediction_dump, PredictionRecord,
};
use ilc_core::mask::{read_mask_archive, write_mask_archive, MaskRecord};
use ilc_core::metrics::{
    abo, game_dataset, map_r, report_rows, rmse_by_count, rmse_family, to_density_resolution, write_report, InstanceMask, MetricRow,
    RmseVariant, MAP_THRESHOLDS, MAX_GAME_LEVEL,
};
use ilc_core::network::{Checkpoint, Image};
use ilc_core::segscore::{score_image, Proposal, ScoringSetup};
use ilc_core::synthdata::{self, open_dataset, read_categories, read_points, DatasetRecord};
use ilc_core::train::{append_loss_log, initial_checkpoint, train_stage1, train_stage2, StageOutcome, TrainSample};

use crate::{plot, usage};

pub const STAGE1_CHECKPOINT: &str = "stage1.ilck";
pub const STAGE2_CHECKPOINT: &str = "stage2.ilck";
pub const LOSS_LOG: &str = "loss_log.csv";

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut config = match path {
        Some(p) if !p.exists() => return Err(usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        config.train.seed = s;
        config.synth.seed = s;
    }
    Ok(config)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long)]
    images: Option<usize>,
    /// Image side length in pixels.
    #[arg(long, value_parser = clap::value_parser!(u32).range(8..=4096))]
    size: Option<u32>,
    /// Trailing fraction of images put in the test split.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Largest per-category count.
    #[arg(long)]
    max_count: Option<u32>,
    /// Largest allowed bounding-box overlap between shapes.
    #[arg(long)]
    occlusion_rate: Option<f64>,
}

pub fn gen_synth(mut config: Config, args: GenSynthArgs) -> Result<()> {
    let s = &mut config.synth;
    if let Some(v) = args.images {
        s.num_images = v;
    }
    if let Some(v) = args.size {
        s.image_size = v as usize;
    }
    if let Some(v) = args.test_fraction {
        s.test_fraction = v;
    }
    if let Some(v) = args.max_count {
        s.max_count = v;
    }
    if let Some(v) = args.occlusion_rate {
        s.occlusion_rate = v;
    }
    config.validate()?;
    let summary = synthdata::generate(&config.synth, &args.out)?;
    println!(
        "wrote {} images ({} train, {} test) to {}",
        summary.num_train + summary.num_test,
        summary.num_train,
        summary.num_test,
        args.out.display()
    );
    for (name, total) in config.synth.categories.iter().zip(&summary.totals) {
        println!("  {name}: {total} instances");
    }
    if summary.crowded_placements > 0 {
        println!("  {} shapes placed above the occlusion rate", summary.crowded_placements);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (categories.txt + annotations.csv).
    #[arg(long)]
    data: PathBuf,
    /// Split to train on.
    #[arg(long, default_value = "train")]
    split: String,
    /// Output directory for stage1.ilck, stage2.ilck and loss_log.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    stage: Stage,
    /// Continue from this checkpoint; the loss log is appended to.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_rank: Option<f64>,
    #[arg(long)]
    backbone_lr: Option<f64>,
    #[arg(long)]
    head_lr: Option<f64>,
}

fn select_split<'a>(records: &'a [DatasetRecord], split: Option<&str>) -> Vec<&'a DatasetRecord> {
    records.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect()
}

fn report_stage(stage: u8, outcome: &StageOutcome, path: &Path) {
    let last = outcome.log.last().map_or(f64::NAN, |r| r.report.total);
    println!(
        "stage {stage}: {} steps (total {}), final loss {last:.4}, saved {}",
        outcome.log.len(),
        outcome.checkpoint.step,
        path.display()
    );
    if outcome.fallback_events > 0 || outcome.missing_peak_events > 0 {
        println!(
            "  {} pseudo-mask fallbacks, {} categories without peaks",
            outcome.fallback_events, outcome.missing_peak_events
        );
    }
}

pub fn train(mut config: Config, args: TrainArgs) -> Result<()> {
    let t = &mut config.train;
    if let Some(v) = args.stage1_epochs {
        t.stage1_epochs = v;
    }
    if let Some(v) = args.stage2_epochs {
        t.stage2_epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lambda_rank {
        t.lambda_rank = v;
    }
    if let Some(v) = args.backbone_lr {
        t.backbone_lr = v;
    }
    if let Some(v) = args.head_lr {
        t.head_lr = v;
    }
    config.validate()?;
    if args.stage == Stage::Two && args.resume.is_none() {
        return Err(usage("--stage 2 needs --resume with a stage-1 checkpoint"));
    }

    let (categories, records) = open_dataset(&args.data, config.data.beyond_threshold)?;
    let chosen = select_split(&records, Some(&args.split));
    if chosen.is_empty() {
        return Err(usage(format!("no images in split `{}` of {}", args.split, args.data.display())));
    }
    let dataset = chosen
        .iter()
        .map(|r| {
            Ok(TrainSample {
                image: Image::load(&r.path)?,
                annotation: r.annotation.clone(),
            })
        })
        .collect::<ilc_core::Result<Vec<_>>>()?;
    info!("{} training images, {} categories", dataset.len(), categories.len());

    let checkpoint = match &args.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Checkpoint::load_for(p, categories.len())?
        }
        None => initial_checkpoint(config.network.build(categories.len()), config.train.seed)?,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let log_path = args.out.join(LOSS_LOG);
    if args.resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path).with_context(|| format!("removing {}", log_path.display()))?;
    }

    let mut checkpoint = checkpoint;
    if matches!(args.stage, Stage::One | Stage::All) {
        let outcome = train_stage1(checkpoint, &dataset, &config.train)?;
        let path = args.out.join(STAGE1_CHECKPOINT);
        outcome.checkpoint.save(&path)?;
        append_loss_log(&log_path, &outcome.log)?;
        report_stage(1, &outcome, &path);
        checkpoint = outcome.checkpoint;
    }
    if matches!(args.stage, Stage::Two | Stage::All) {
        let outcome = train_stage2(checkpoint, &dataset, &config.train)?;
        let path = args.out.join(STAGE2_CHECKPOINT);
        outcome.checkpoint.save(&path)?;
        append_loss_log(&log_path, &outcome.log)?;
        report_stage(2, &outcome, &path);
    }
    Ok(())
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["images", "data"]))]
pub struct PredictArgs {
    /// Trained checkpoint (.ilck).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text file with one image path per line, relative to the file.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Dataset directory; all images, or those of --split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    split: Option<String>,
    /// Category names, one per line (defaults to the dataset's list).
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Prediction dump: image_id,category,score,raw_sum,count.
    #[arg(long)]
    out: PathBuf,
    /// Also write <id>.density.ilcd and <id>.category.ilcd here.
    #[arg(long)]
    export_density: Option<PathBuf>,
}

fn read_image_list(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    require_file(path, "image list")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let p = base.join(line);
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| usage(format!("no file name in `{line}`")))?;
        if !seen.insert(id.clone()) {
            return Err(usage(format!("image id `{id}` listed twice in {}", path.display())));
        }
        out.push((id, p));
    }
    Ok(out)
}

fn category_names(explicit: Option<&Path>, data: Option<&Path>, count: usize) -> Result<Vec<String>> {
    let names = match (explicit, data) {
        (Some(p), _) => {
            require_file(p, "category file")?;
            read_categories(p)?
        }
        (None, Some(d)) => read_categories(&d.join(synthdata::CATEGORIES_FILE))?,
        (None, None) => (0..count).map(|c| format!("category{c}")).collect(),
    };
    if names.len() != count {
        return Err(usage(format!(
            "{} category names given, checkpoint has {count} categories",
            names.len()
        )));
    }
    Ok(names)
}

pub fn density_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.density.ilcd"))
}

pub fn category_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.category.ilcd"))
}

pub fn predict(config: Config, args: PredictArgs) -> Result<()> {
    config.validate()?;
    require_file(&args.checkpoint, "checkpoint")?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let network = checkpoint.network;
    let c = network.num_categories();
    let names = category_names(args.categories.as_deref(), args.data.as_deref(), c)?;
    let images = match (&args.images, &args.data) {
        (Some(list), _) => read_image_list(list)?,
        (None, Some(dir)) => {
            let (_, records) = open_dataset(dir, config.data.beyond_threshold)?;
            select_split(&records, args.split.as_deref())
                .into_iter()
                .map(|r| (r.image_id.clone(), r.path.clone()))
                .collect()
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    if let Some(dir) = &args.export_density {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut records: Vec<PredictionRecord> = Vec::with_capacity(images.len() * c);
    for (id, path) in &images {
        let image = Image::load(path)?;
        let p = run_predict(&image, &network).with_context(|| format!("predicting {id}"))?;
        if let Some(dir) = &args.export_density {
            write_maps(&p.density_maps.0, &density_path(dir, id))?;
            write_maps(&p.category_maps.0, &category_path(dir, id))?;
        }
        records.extend(prediction_records(id, &names, &p));
    }
    write_prediction_dump(&args.out, &records)?;
    println!("predicted {} images, wrote {}", images.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Metric {
    Mrmse,
    Game,
    Abo,
    Mapr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum PlotKind {
    Density,
    RmseByCount,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction dump written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset directory with annotations, points and masks.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "mrmse")]
    metrics: Vec<Metric>,
    /// Density dumps from `predict --export-density` (needed by game and
    /// density plots).
    #[arg(long)]
    density_dir: Option<PathBuf>,
    /// Predicted mask archive from `score-masks` (needed by abo and mapr).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Report CSV: metric,variant,category,value.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',')]
    plot: Vec<PlotKind>,
    /// Image for `--plot density`.
    #[arg(long)]
    image: Option<String>,
    /// Where figures go (defaults to the report's directory).
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

/// Counts per image in dataset order, for the images present in the dump.
fn count_tables<'a>(
    dump: &[PredictionRecord],
    records: &'a [DatasetRecord],
    categories: &[String],
) -> Result<(Vec<&'a DatasetRecord>, Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    let mut by_image: HashMap<&str, Vec<Option<u32>>> = HashMap::new();
    for r in dump {
        let c = categories
            .iter()
            .position(|n| n == &r.category)
            .ok_or_else(|| usage(format!("prediction for unknown category `{}`", r.category)))?;
        by_image.entry(&r.image_id).or_insert_with(|| vec![None; categories.len()])[c] = Some(r.count);
    }
    let known: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    if let Some(id) = by_image.keys().find(|id| !known.contains(*id)) {
        return Err(usage(format!("prediction for image `{id}` not in the dataset")));
    }
    let mut used = Vec::new();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for r in records {
        if let Some(counts) = by_image.get(r.image_id.as_str()) {
            let counts = counts
                .iter()
                .enumerate()
                .map(|(c, v)| v.ok_or_else(|| usage(format!("no prediction for `{}` in image `{}`", categories[c], r.image_id))))
                .collect::<Result<Vec<_>>>()?;
            used.push(r);
            pred.push(counts);
            truth.push(r.raw_counts.clone());
        }
    }
    Ok((used, pred, truth))
}

fn instance_masks(records: Vec<MaskRecord>, categories: &[String], images: &HashSet<&str>) -> Result<Vec<InstanceMask>> {
    let mut out = Vec::new();
    for r in records {
        if !images.contains(r.image_id.as_str()) {
            continue;
        }
        let name = r.category.ok_or_else(|| usage(format!("mask `{}` has no category", r.id)))?;
        let category = categories
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| usage(format!("mask `{}` has unknown category `{name}`", r.id)))?;
        out.push(InstanceMask {
            image_id: r.image_id,
            category,
            score: r.score,
            mask: r.mask,
        });
    }
    Ok(out)
}

pub fn evaluate(config: Config, args: EvaluateArgs) -> Result<()> {
    config.validate()?;
    require_file(&args.predictions, "prediction dump")?;
    let (categories, records) = open_dataset(&args.data, config.data.beyond_threshold)?;
    let dump = read_prediction_dump(&args.predictions)?;
    let (used, pred, truth) = count_tables(&dump, &records, &categories)?;
    let needs_density = args.metrics.contains(&Metric::Game) || args.plot.contains(&PlotKind::Density);
    if needs_density && args.density_dir.is_none() {
        return Err(usage("game and density plots need --density-dir"));
    }
    let needs_masks = args.metrics.iter().any(|m| matches!(m, Metric::Abo | Metric::Mapr));
    if needs_masks && args.masks.is_none() {
        return Err(usage("abo and mapr need --masks"));
    }
    if used.is_empty() && (!args.metrics.is_empty() || args.plot.contains(&PlotKind::RmseByCount)) {
        return Err(usage("no predicted images to evaluate"));
    }

    let mut rows: Vec<MetricRow> = Vec::new();
    let mut seen = HashSet::new();
    for metric in args.metrics.iter().copied().filter(|m| seen.insert(*m)) {
        match metric {
            Metric::Mrmse => {
                for variant in RmseVariant::ALL {
                    let report = rmse_family(&pred, &truth, variant)?;
                    println!("{}: {:.4}", variant.name(), report.mean);
                    rows.extend(report_rows("mrmse", variant.name(), &categories, &report));
                }
            }
            Metric::Game => {
                let dir = args.density_dir.as_deref().expect("checked above");
                let points = read_points(&args.data.join(synthdata::POINTS_FILE), &categories)?;
                let mut densities = Vec::with_capacity(used.len());
                let mut located = Vec::with_capacity(used.len());
                for r in &used {
                    let maps = read_maps(&density_path(dir, &r.image_id))?;
                    if maps.channels() != categories.len() {
                        bail!("{} has {} channels, expected {}", r.image_id, maps.channels(), categories.len());
                    }
                    let (w, h) = image::image_dimensions(&r.path).with_context(|| format!("reading {}", r.path.display()))?;
                    let dhw = (maps.height(), maps.width());
                    let pts = points
                        .get(&r.image_id)
                        .cloned()
                        .unwrap_or_else(|| vec![Vec::new(); categories.len()]);
                    located.push(
                        pts.iter()
                            .map(|cat| {
                                cat.iter()
                                    .map(|&(y, x)| to_density_resolution(y, x, (h as usize, w as usize), dhw))
                                    .collect()
                            })
                            .collect(),
                    );
                    densities.push((0..maps.channels()).map(|c| maps.channel(c)).collect::<Vec<Grid>>());
                }
                for n in 0..=MAX_GAME_LEVEL {
                    let report = game_dataset(&densities, &located, n)?;
                    println!("game({n}): {:.4}", report.mean);
                    rows.extend(report_rows("game", &n.to_string(), &categories, &report));
                }
            }
            Metric::Abo | Metric::Mapr => {
                let ids: HashSet<&str> = used.iter().map(|r| r.image_id.as_str()).collect();
                let predicted_path = args.masks.as_deref().expect("checked above");
                require_file(predicted_path, "mask archive")?;
                let predicted = instance_masks(read_mask_archive(predicted_path)?, &categories, &ids)?;
                let truth_masks = instance_masks(read_mask_archive(&args.data.join(synthdata::MASKS_FILE))?, &categories, &ids)?;
                let mut push = |metric: &str, variant: String, value: f64| {
                    println!(
                        "{metric}{}: {value:.4}",
                        if variant.is_empty() { String::new() } else { format!("@{variant}") }
                    );
                    rows.push(MetricRow {
                        metric: metric.into(),
                        variant,
                        category: "mean".into(),
                        value: Some(value),
                    });
                };
                if metric == Metric::Abo {
                    push("abo", String::new(), abo(&predicted, &truth_masks)?);
                } else {
                    for thr in MAP_THRESHOLDS {
                        push("mapr", thr.to_string(), map_r(&predicted, &truth_masks, thr)?);
                    }
                }
            }
        }
    }
    write_report(&args.out, &rows)?;
    println!("wrote {}", args.out.display());

    if args.plot.is_empty() {
        return Ok(());
    }
    let plot_dir = match &args.plot_dir {
        Some(d) => d.clone(),
        None => args.out.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&plot_dir).with_context(|| format!("creating {}", plot_dir.display()))?;
    let mut plotted = HashSet::new();
    for kind in args.plot.iter().copied().filter(|k| plotted.insert(*k)) {
        match kind {
            PlotKind::Density => {
                let id = args.image.as_deref().ok_or_else(|| usage("--plot density needs --image"))?;
                let dir = args.density_dir.as_deref().expect("checked above");
                let path = density_path(dir, id);
                require_file(&path, "density dump")?;
                let maps = read_maps(&path)?;
                for (c, name) in categories.iter().enumerate().take(maps.channels()) {
                    let out = plot_dir.join(format!("{id}_{name}_density.png"));
                    plot::write_heatmap(&maps.channel(c), &out)?;
                    println!("wrote {}", out.display());
                }
            }
            PlotKind::RmseByCount => {
                let curve = rmse_by_count(&pred, &truth)?;
                let out = plot_dir.join("rmse_by_count.svg");
                plot::write_rmse_curve(&curve, &out)?;
                println!("wrote {}", out.display());
            }
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ScoreMasksArgs {
    /// Directory of <id>.density.ilcd and <id>.category.ilcd dumps.
    #[arg(long)]
    density_dir: PathBuf,
    /// Prediction dump supplying the per-category counts.
    #[arg(long)]
    predictions: PathBuf,
    /// Proposal mask archive at image resolution.
    #[arg(long)]
    proposals: PathBuf,
    /// Dataset directory, used for its category list.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Category names, one per line.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Output mask archive, one mask per scored peak.
    #[arg(long)]
    out: PathBuf,
    /// Per-peak score terms as CSV.
    #[arg(long)]
    breakdown: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Optional peak response maps named <id>.<category>.<rank>.ilcd
    /// (one channel at density resolution).
    #[arg(long)]
    responses: Option<PathBuf>,
}

pub fn score_masks(mut config: Config, args: ScoreMasksArgs) -> Result<()> {
    if let Some(v) = args.alpha {
        config.score.alpha = v;
    }
    if let Some(v) = args.beta {
        config.score.beta = v;
    }
    if let Some(v) = args.gamma {
        config.score.gamma = v;
    }
    config.validate()?;
    require_file(&args.predictions, "prediction dump")?;
    require_file(&args.proposals, "proposal file")?;
    let dump = read_prediction_dump(&args.predictions)?;

    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, BTreeMap<String, u32>> = HashMap::new();
    for r in &dump {
        if !counts.contains_key(&r.image_id) {
            order.push(r.image_id.clone());
        }
        counts.entry(r.image_id.clone()).or_default().insert(r.category.clone(), r.count);
    }
    let names = match (&args.categories, &args.data) {
        (Some(p), _) => {
            require_file(p, "category file")?;
            read_categories(p)?
        }
        (None, Some(d)) => read_categories(&d.join(synthdata::CATEGORIES_FILE))?,
        (None, None) => {
            let mut seen = HashSet::new();
            dump.iter()
                .filter(|r| seen.insert(&r.category))
                .map(|r| r.category.clone())
                .collect()
        }
    };

    let mut proposals_by_image: HashMap<String, Vec<MaskRecord>> = HashMap::new();
    for r in read_mask_archive(&args.proposals)? {
        proposals_by_image.entry(r.image_id.clone()).or_default().push(r);
    }
    let setup = ScoringSetup {
        peak_radius: config.network.peak_radius,
        background_quantile: config.score.background_quantile,
        response_sigma: config.score.response_sigma,
        weights: config.score.weights(),
    };

    let mut masks = Vec::new();
    let mut breakdown = vec![[
        "image_id",
        "category",
        "rank",
        "row",
        "col",
        "proposal",
        "instance",
        "boundary",
        "background",
        "density_penalty",
        "total",
    ]
    .map(String::from)
    .to_vec()];
    for id in &order {
        let density = read_maps(&density_path(&args.density_dir, id))?;
        let category_maps = read_maps(&category_path(&args.density_dir, id))?;
        if density.channels() != names.len() || category_maps.channels() != names.len() {
            bail!("dumps for `{id}` do not have {} channels", names.len());
        }
        let image_counts: Vec<u32> = names
            .iter()
            .map(|n| {
                counts[id]
                    .get(n)
                    .copied()
                    .ok_or_else(|| usage(format!("no count for `{n}` in image `{id}`")))
            })
            .collect::<Result<_>>()?;
        let candidates = proposals_by_image.get(id).map(Vec::as_slice).unwrap_or_default();
        if candidates.is_empty() {
            warn!("no proposals for image {id}");
        }
        let (dh, dw) = (density.height(), density.width());
        let proposals: Vec<Proposal> = candidates.iter().map(|r| Proposal::new(&r.id, &r.mask, dh, dw)).collect();
        let response = |c: usize, rank: usize, _: usize, _: usize| -> ilc_core::Result<Option<Grid>> {
            let Some(dir) = &args.responses else { return Ok(None) };
            let path = dir.join(format!("{id}.{}.{rank}.ilcd", names[c]));
            if !path.exists() {
                return Ok(None);
            }
            Ok(Some(read_maps(&path)?.channel(0)))
        };
        let selections = score_image(&category_maps, &density, &image_counts, &proposals, &setup, &response)?;
        for sel in selections {
            let Some((k, s)) = sel.best else { continue };
            let name = &names[sel.category];
            masks.push(MaskRecord {
                id: format!("{id}-{name}-{}", sel.rank),
                image_id: id.clone(),
                category: Some(name.clone()),
                score: s.total,
                mask: candidates[k].mask.clone(),
            });
            breakdown.push(vec![
                id.clone(),
                name.clone(),
                sel.rank.to_string(),
                sel.row.to_string(),
                sel.col.to_string(),
                candidates[k].id.clone(),
                s.instance.to_string(),
                s.boundary.to_string(),
                s.background.to_string(),
                s.density_penalty.to_string(),
                s.total.to_string(),
            ]);
        }
    }
    write_mask_archive(&args.out, &masks)?;
    if let Some(path) = &args.breakdown {
        let text: String = breakdown.iter().map(|r| r.join(",") + "\n").collect();
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "scored {} images, wrote {} masks to {}",
        order.len(),
        masks.len(),
        args.out.display()
    );
    Ok(())
}
