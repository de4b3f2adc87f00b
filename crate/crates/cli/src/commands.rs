use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use agbnet::checks::gradient_suite;
use agbnet::inference::plot::{render_map, scatter_plot};
use agbnet::inference::{apply_forest_mask, ensemble, predict_map};
use agbnet::models::{ArchitectureDescriptor, ModelKind};
use agbnet::pipeline::{
    prepare_scene, write_prepared, PreprocessConfig, SourceSet, LABELS_FILE, STACK_FILE,
};
use agbnet::preprocess::patches::{read_patch_archive, write_patch_archive};
use agbnet::preprocess::{agb_from_rh80, footprint_mean, patchify, PatchSample};
use agbnet::raster::{
    read_footprints, read_raster, write_raster, FootprintRecord, GridSpec, RasterGrid,
};
use agbnet::synth::{
    generate_landscape, sample_footprints, write_scene, SynthSpec, FOOTPRINTS_FILE,
};
use agbnet::training::{
    evaluate_pixels, kfold_plan, predict_samples, regression_metrics, split_dataset, train,
    write_history_csv, EvalLevel, MetricsReport, ModelCheckpoint, TrainConfig,
};
use agbnet::{Error, Result};

use crate::manifest::RunManifest;
use crate::{Command, GlobalArgs};

pub const SPLIT_FILE: &str = "split.json";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| Error::Internal(e.to_string()))
}

fn write_json<T: Serialize>(path: PathBuf, v: &T, m: &mut RunManifest) -> Result<()> {
    fs::write(&path, to_json(v)?).map_err(|e| io_err(&path, e))?;
    m.output(path);
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// The subcommand's configuration: defaults, then the `--config` file.
fn load_config<T: DeserializeOwned + Default>(g: &GlobalArgs) -> Result<T> {
    match &g.config {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn snapshot<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

pub fn run(cmd: &Command, g: &GlobalArgs, m: &mut RunManifest) -> Result<()> {
    fs::create_dir_all(&g.out).map_err(|e| io_err(&g.out, e))?;
    match cmd {
        Command::Synth => synth(g, m),
        Command::Preprocess { input } => preprocess(input, g, m),
        Command::Patchify { input, patch_size } => patchify_cmd(input, *patch_size, g, m),
        Command::Train { input } => train_cmd(input, g, m),
        Command::Evaluate {
            input,
            models,
            footprints,
        } => evaluate(input, models, footprints, g, m),
        Command::Predict {
            stack,
            models,
            mask,
        } => predict(stack, models, mask.as_deref(), g, m),
        Command::Gradcheck { trials } => gradcheck(*trials, g, m),
    }
}

fn synth(g: &GlobalArgs, m: &mut RunManifest) -> Result<()> {
    let mut spec: SynthSpec = load_config(g)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    m.seed = Some(spec.seed);
    m.config = snapshot(&spec);
    let land = generate_landscape(&spec)?;
    let fps = sample_footprints(&land.truth, &spec)?;
    write_scene(&g.out, &land, &fps)?;
    for f in [
        "s1.btr",
        "s2.btr",
        "ndvi_epochs.btr",
        "palsar.btr",
        "dem.btr",
        "truth_agb.btr",
        "forest_mask.btr",
        FOOTPRINTS_FILE,
        "synth_spec.json",
    ] {
        m.output(g.out.join(f));
    }
    if g.plot {
        let p = g.out.join("truth_agb.png");
        render_map(&land.truth, 0.0, 300.0, &p)?;
        m.output(p);
    }
    println!(
        "synth: {}x{} scene, {} footprints -> {}",
        spec.rows,
        spec.cols,
        fps.len(),
        g.out.display()
    );
    Ok(())
}

fn preprocess(input: &Path, g: &GlobalArgs, m: &mut RunManifest) -> Result<()> {
    let config: PreprocessConfig = load_config(g)?;
    m.config = snapshot(&config);
    m.input("sources", input);
    let sources = SourceSet::read(input)?;
    let fps = read_footprints(input.join(FOOTPRINTS_FILE))?;
    let scene = prepare_scene(&sources, &fps, &config)?;
    write_prepared(&g.out, &scene)?;
    for f in [
        STACK_FILE,
        LABELS_FILE,
        "footprints_filtered.csv",
        "filter_report.json",
    ] {
        m.output(g.out.join(f));
    }
    println!(
        "preprocess: {} bands, {} of {} footprints kept",
        scene.stack.bands(),
        scene.footprints.len(),
        fps.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PatchifyConfig {
    patch_size: usize,
}

impl Default for PatchifyConfig {
    fn default() -> Self {
        Self { patch_size: 64 }
    }
}

fn patchify_cmd(
    input: &Path,
    patch_size: usize,
    g: &GlobalArgs,
    m: &mut RunManifest,
) -> Result<()> {
    let mut config: PatchifyConfig = load_config(g)?;
    if g.config.is_none() || patch_size != 64 {
        config.patch_size = patch_size;
    }
    m.config = snapshot(&config);
    m.input("prepared", input);
    let stack = read_raster(input.join(STACK_FILE))?;
    let labels = read_raster(input.join(LABELS_FILE))?;
    let patches = patchify(&stack, &labels, config.patch_size)?;
    let index = write_patch_archive(&g.out, &patches, &stack)?;
    m.output(g.out.join("index.json"));
    println!(
        "patchify: {} patches of {}x{}",
        index.patches.len(),
        index.size,
        index.size
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub kind: ModelKind,
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Au,
            depth: 3,
            base_channels: 16,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FoldPlan {
    train: Vec<usize>,
    val: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    patches: usize,
    test: Vec<usize>,
    folds: Vec<FoldPlan>,
}

#[derive(Debug, Serialize)]
struct FoldSummary {
    fold: usize,
    best_epoch: usize,
    val_loss: f64,
    checkpoint: PathBuf,
}

fn pick(patches: &[PatchSample], idx: &[usize]) -> Vec<PatchSample> {
    idx.iter().map(|&i| patches[i].clone()).collect()
}

fn train_cmd(input: &Path, g: &GlobalArgs, m: &mut RunManifest) -> Result<()> {
    let mut config: TrainRunConfig = load_config(g)?;
    if let Some(s) = g.seed {
        config.train.seed = s;
    }
    config.train.validate()?;
    m.seed = Some(config.train.seed);
    m.config = snapshot(&config);
    m.input("patches", input);
    if config.architecture.kind == ModelKind::AuFc {
        return Err(Error::Config(
            "the pixel-independent model trains on footprint vectors, not patch archives".into(),
        ));
    }
    let (index, mut patches) = read_patch_archive(input)?;
    let seed = config.train.seed;
    let split = split_dataset(patches.len(), config.train.split_ratio, seed)?;
    let folds: Vec<FoldPlan> = if config.train.folds >= 2 {
        let pool: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
        kfold_plan(&pool, config.train.folds, seed)?
            .into_iter()
            .map(|(train, val)| FoldPlan { train, val })
            .collect()
    } else {
        vec![FoldPlan {
            train: split.train.clone(),
            val: split.val.clone(),
        }]
    };
    for (k, f) in folds.iter().enumerate() {
        f.val.iter().for_each(|&i| patches[i].fold_id = k);
    }
    let plan = SplitFile {
        seed,
        patches: patches.len(),
        test: split.test.clone(),
        folds,
    };
    write_json(g.out.join(SPLIT_FILE), &plan, m)?;

    let desc = ArchitectureDescriptor {
        in_channels: index.roster.len(),
        patch_size: index.size,
        ..ArchitectureDescriptor::new(
            config.architecture.kind,
            config.architecture.depth,
            config.architecture.base_channels,
        )
    };
    desc.validate()?;
    let nodata = index.nodata as f32;
    let mut summary = Vec::new();
    for (k, fold) in plan.folds.iter().enumerate() {
        log::info!(
            "fold {k}: {} train, {} val patches",
            fold.train.len(),
            fold.val.len()
        );
        let out = train(
            &pick(&patches, &fold.train),
            &pick(&patches, &fold.val),
            desc,
            &config.train,
            &index.roster,
            nodata,
        )?;
        let stem = format!("fold{k}");
        let manifest = out.checkpoint.save(&g.out, &stem)?;
        m.output(manifest.clone());
        m.output(g.out.join(format!("{stem}.btr")));
        let hist = g.out.join(format!("history_{stem}.csv"));
        write_history_csv(&out.history, &hist)?;
        m.output(hist);
        println!(
            "train: fold {k} best epoch {} val loss {:.6}",
            out.checkpoint.epoch, out.checkpoint.val_loss
        );
        summary.push(FoldSummary {
            fold: k,
            best_epoch: out.checkpoint.epoch,
            val_loss: out.checkpoint.val_loss,
            checkpoint: manifest,
        });
    }
    write_json(g.out.join("train_summary.json"), &summary, m)
}

fn load_folds(models: &Path) -> Result<(SplitFile, Vec<ModelCheckpoint>)> {
    let plan: SplitFile = read_json(&models.join(SPLIT_FILE))?;
    let ckpts = (0..plan.folds.len())
        .map(|k| ModelCheckpoint::load(&models.join(format!("fold{k}.json"))))
        .collect::<Result<Vec<_>>>()?;
    if ckpts.is_empty() {
        return Err(Error::Config(format!(
            "no fold checkpoints in {}",
            models.display()
        )));
    }
    Ok((plan, ckpts))
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    pixel: MetricsReport,
    footprint: MetricsReport,
    fold_pixel: Vec<MetricsReport>,
    test_patches: usize,
}

fn inside(spec: &GridSpec, fp: &FootprintRecord, p: &PatchSample) -> bool {
    let (r, c) = spec.to_pixel(fp.center_x, fp.center_y);
    let (r0, c0, s) = (p.origin_row as f64, p.origin_col as f64, p.size as f64);
    r >= r0 && r < r0 + s && c >= c0 && c < c0 + s
}

fn evaluate(
    input: &Path,
    models: &Path,
    fp_path: &Path,
    g: &GlobalArgs,
    m: &mut RunManifest,
) -> Result<()> {
    m.input("patches", input);
    m.input("models", models);
    m.input("footprints", fp_path);
    let (index, patches) = read_patch_archive(input)?;
    let (plan, ckpts) = load_folds(models)?;
    if plan.patches != patches.len() {
        return Err(Error::Config(format!(
            "models were trained on {} patches, archive has {}",
            plan.patches,
            patches.len()
        )));
    }
    m.seed = Some(plan.seed);
    let test = pick(&patches, &plan.test);
    let nodata = index.nodata as f32;

    let mut mean: Vec<Vec<f64>> = test.iter().map(|p| vec![0.0; p.size * p.size]).collect();
    let mut fold_pixel = Vec::new();
    for ckpt in &ckpts {
        for (acc, pred) in mean.iter_mut().zip(predict_samples(ckpt, &test, nodata)?) {
            acc.iter_mut().zip(pred).for_each(|(a, v)| *a += v as f64);
        }
        fold_pixel.push(evaluate_pixels(ckpt, &test, nodata)?);
    }
    let k = ckpts.len() as f64;
    mean.iter_mut()
        .for_each(|v| v.iter_mut().for_each(|x| *x /= k));

    let (mut pp, mut pt) = (Vec::new(), Vec::new());
    let mut map = RasterGrid::filled(index.grid.clone(), vec!["agb".into()], index.nodata, nodata);
    for (p, pred) in test.iter().zip(&mean) {
        for r in 0..p.size {
            for c in 0..p.size {
                let v = pred[r * p.size + c];
                map.set(0, p.origin_row + r, p.origin_col + c, v as f32);
                let l = p.labels[r * p.size + c];
                if l >= 0.0 {
                    pp.push(v);
                    pt.push(l as f64);
                }
            }
        }
    }
    let pixel = regression_metrics(&pp, &pt, EvalLevel::Pixel)?;

    let fps = read_footprints(fp_path)?;
    let (mut fp_pred, mut fp_true) = (Vec::new(), Vec::new());
    for fp in fps
        .iter()
        .filter(|fp| test.iter().any(|p| inside(&index.grid, fp, p)))
    {
        if let Ok(v) = footprint_mean(&map, fp) {
            fp_pred.push(v[0]);
            fp_true.push(agb_from_rh80(fp.rh80)?);
        }
    }
    let footprint = regression_metrics(&fp_pred, &fp_true, EvalLevel::Footprint)?;
    println!(
        "evaluate: pixel R2 {:.3} RMSE {:.2} bias {:.2} (n={}); footprint R2 {:.3} RMSE {:.2} bias {:.2} (n={})",
        pixel.r2_or_nan(),
        pixel.rmse,
        pixel.bias,
        pixel.n,
        footprint.r2_or_nan(),
        footprint.rmse,
        footprint.bias,
        footprint.n
    );
    if g.plot {
        for (name, p, t) in [
            ("scatter_pixel.png", &pp, &pt),
            ("scatter_footprint.png", &fp_pred, &fp_true),
        ] {
            let path = g.out.join(name);
            scatter_plot(p, t, 300.0, &path)?;
            m.output(path);
        }
    }
    let report = EvaluationReport {
        pixel,
        footprint,
        fold_pixel,
        test_patches: test.len(),
    };
    write_json(g.out.join("metrics.json"), &report, m)
}

fn predict(
    stack_path: &Path,
    models: &Path,
    mask: Option<&Path>,
    g: &GlobalArgs,
    m: &mut RunManifest,
) -> Result<()> {
    m.input("stack", stack_path);
    m.input("models", models);
    let stack = read_raster(stack_path)?;
    let (plan, ckpts) = load_folds(models)?;
    m.seed = Some(plan.seed);
    let maps = ckpts
        .iter()
        .enumerate()
        .map(|(k, c)| {
            log::info!("predicting with fold {k}");
            predict_map(c, &stack)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut mean, mut std) = ensemble(&maps)?;
    if let Some(p) = mask {
        m.input("mask", p);
        let mask = read_raster(p)?;
        mean = apply_forest_mask(&mean, &mask)?;
        std = apply_forest_mask(&std, &mask)?;
    }
    for (grid, name) in [(&mean, "agb_mean"), (&std, "agb_std")] {
        let path = g.out.join(format!("{name}.btr"));
        write_raster(grid, &path)?;
        m.output(path);
        if g.plot {
            let hi = grid
                .band(0)
                .iter()
                .filter(|&&v| !grid.is_nodata(v))
                .fold(1.0f64, |a, &v| a.max(v as f64));
            let path = g.out.join(format!("{name}.png"));
            render_map(grid, 0.0, hi, &path)?;
            m.output(path);
        }
    }
    println!(
        "predict: {} fold maps ensembled over {}x{}",
        maps.len(),
        stack.rows(),
        stack.cols()
    );
    Ok(())
}

fn gradcheck(trials: u64, g: &GlobalArgs, m: &mut RunManifest) -> Result<()> {
    m.config = serde_json::json!({ "trials": trials });
    let report = gradient_suite(trials, |e| {
        println!(
            "gradcheck: {:<24} {:>3} trials  max rel err {:.3e}  refined {:>4}  {}",
            e.operator,
            e.trials,
            e.max_rel_err,
            e.refined,
            if e.passed { "ok" } else { "FAIL" }
        );
    })?;
    write_json(g.out.join("gradcheck.json"), &report, m)?;
    if !report.passed() {
        return Err(Error::Internal(
            "gradient check failed; see gradcheck.json".into(),
        ));
    }
    println!(
        "gradcheck: all operators under {:e} in {:.1}s",
        report.tolerance, report.seconds
    );
    Ok(())
}
