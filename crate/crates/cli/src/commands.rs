//! The five subcommands. Every command validates its configuration and
//! checks its inputs before writing anything, so a failed invocation leaves
//! no partial output behind.

use crate::opts::{EvalArgs, InferArgs, SynthArgs, ToyArgs, TrainArgs};
use dmdd_core::checkpoint;
use dmdd_core::config::RunConfig;
use dmdd_core::data::{
    self, load_dataset, load_image, load_image_raw, make_training_pair, save_gray, save_rgb,
    Normalization, Split, Synthesizer, TextureSource,
};
use dmdd_core::error::{Error, Result};
use dmdd_core::model::DmddModel;
use dmdd_core::nn::{derive_seed, ParamStore};
use dmdd_core::tensor::{from_vec, Tensor};
use dmdd_core::toy::{generate_toy_dataset, ToySpec};
use dmdd_core::trainer::{evaluate_model_on, train_model_on, TrainEvent};
use serde_json::json;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

fn require_dataset(cfg: &RunConfig) -> Result<()> {
    if cfg.dataset_root.is_empty() {
        return Err(Error::Config(
            "dataset_root is required (flag, config file, or DMDD_DATASET_ROOT)".into(),
        ));
    }
    Ok(())
}

fn require_category(cfg: &RunConfig) -> Result<()> {
    if cfg.category.is_empty() {
        return Err(Error::Config("category is required".into()));
    }
    Ok(())
}

/// Sorted subdirectories of the dataset root that contain a train split.
fn discover_categories(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let mut cats = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("train").is_dir() {
            cats.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    cats.sort();
    if cats.is_empty() {
        return Err(Error::CorruptDataset(format!(
            "no categories with a train/ split under {}",
            root.display()
        )));
    }
    Ok(cats)
}

/// The learned state: the frozen teacher is rebuilt from config, so only
/// the student branch and the fusion head are persisted.
fn sections(model: &DmddModel) -> [(&'static str, &ParamStore); 2] {
    [("student", &model.student), ("head", &model.head)]
}

fn load_model(cfg: &RunConfig, ckpt: &Path, force: bool) -> Result<DmddModel> {
    let mut model = DmddModel::new(cfg)?;
    let fp = cfg.fingerprint();
    checkpoint::load_into(
        ckpt,
        &fp,
        force,
        &mut [
            ("student", &mut model.student),
            ("head", &mut model.head),
        ],
    )?;
    Ok(model)
}

// ---------------------------------------------------------------- train --

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config_args.resolve()?;
    require_dataset(&cfg)?;
    let root = PathBuf::from(&cfg.dataset_root);
    let categories = if args.all_categories {
        discover_categories(&root)?
    } else {
        require_category(&cfg)?;
        vec![cfg.category.clone()]
    };
    for cat in categories {
        let mut cat_cfg = cfg.clone();
        cat_cfg.category = cat.clone();
        train_one(&cat_cfg, &args.out.join(&cat))?;
    }
    Ok(())
}

fn train_one(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    // Index the dataset before creating any output.
    let index = load_dataset(Path::new(&cfg.dataset_root), &cfg.category, Split::Train)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let fp = cfg.fingerprint();
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut best_seg = f64::INFINITY;
    println!(
        "training {} ({} images, fingerprint {fp})",
        cfg.category,
        index.entries.len()
    );
    let result = train_model_on(cfg, &index, |event| {
        match event {
            TrainEvent::Step(step) => {
                let line = serde_json::to_string(step)
                    .map_err(|e| Error::Internal(format!("step log: {e}")))?;
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            }
            TrainEvent::EpochEnd { summary, model } => {
                let line = json!({
                    "event": "epoch",
                    "epoch": summary.epoch,
                    "distill_loss": summary.distill_loss,
                    "seg_loss": summary.seg_loss,
                });
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                let epoch = summary.epoch as u64;
                checkpoint::save(&last_path, &fp, epoch, cfg.seed, &sections(model))?;
                if summary.seg_loss < best_seg {
                    best_seg = summary.seg_loss;
                    checkpoint::save(&best_path, &fp, epoch, cfg.seed, &sections(model))?;
                }
                println!(
                    "epoch {:>3}/{}  distill {:.6}  seg {:.6}",
                    summary.epoch,
                    cfg.epochs,
                    summary.distill_loss,
                    summary.seg_loss
                );
            }
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_path = out_dir.join("final.ckpt");
    checkpoint::save(
        &final_path,
        &fp,
        cfg.epochs as u64,
        cfg.seed,
        &sections(&result.model),
    )?;
    println!(
        "wrote {}, {}, {}",
        last_path.display(),
        best_path.display(),
        final_path.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- eval --

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config_args.resolve()?;
    require_dataset(&cfg)?;
    let reports = if args.all_categories {
        let root = PathBuf::from(&cfg.dataset_root);
        let mut all = Vec::new();
        for cat in discover_categories(&root)? {
            let mut cat_cfg = cfg.clone();
            cat_cfg.category = cat.clone();
            let ckpt = args.checkpoint.join(&cat).join("best.ckpt");
            all.push(eval_one(&cat_cfg, &ckpt, args.force)?);
        }
        serde_json::Value::Array(all)
    } else {
        require_category(&cfg)?;
        eval_one(&cfg, &args.checkpoint, args.force)?
    };
    let text = serde_json::to_string_pretty(&reports)
        .map_err(|e| Error::Internal(format!("report: {e}")))?;
    match &args.out {
        Some(path) => {
            fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn eval_one(cfg: &RunConfig, ckpt: &Path, force: bool) -> Result<serde_json::Value> {
    let index = load_dataset(Path::new(&cfg.dataset_root), &cfg.category, Split::Test)?;
    let model = load_model(cfg, ckpt, force)?;
    let outcome = evaluate_model_on(&model, cfg, &index)?;
    let r = &outcome.report;
    Ok(json!({
        "category": cfg.category,
        "i_auc": r.i_auc,
        "p_auc": r.p_auc,
        "pro": r.pro,
        "n_images": r.n_images,
        "config_fingerprint": cfg.fingerprint(),
    }))
}

// ---------------------------------------------------------------- infer --

/// Binary anomaly map: "DMAP", then height and width as u32 LE, then
/// row-major f32 LE pixels.
fn write_map(path: &Path, map: &Tensor) -> Result<()> {
    let shape = map.shape();
    let (h, w) = (shape[0], shape[1]);
    let mut bytes = Vec::with_capacity(12 + h * w * 4);
    bytes.extend_from_slice(b"DMAP");
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Black-red-yellow-white ramp over the unit interval.
fn heatmap_rgb(map: &Tensor) -> Tensor {
    let shape = map.shape();
    let (h, w) = (shape[0], shape[1]);
    let mut data = vec![0.0; 3 * h * w];
    for (i, v) in map.iter().enumerate() {
        let t = v.clamp(0.0, 1.0);
        let (r, g, b) = if t < 1.0 / 3.0 {
            (3.0 * t, 0.0, 0.0)
        } else if t < 2.0 / 3.0 {
            (1.0, 3.0 * t - 1.0, 0.0)
        } else {
            (1.0, 1.0, 3.0 * t - 2.0)
        };
        data[i] = r;
        data[h * w + i] = g;
        data[2 * h * w + i] = b;
    }
    from_vec(&[3, h, w], data)
}

/// 0 for test/good images, 1 for other test subdirectories, absent outside
/// a dataset layout.
fn label_for(path: &Path) -> Option<u8> {
    let parent = path.parent()?.file_name()?.to_str()?;
    let grand = path.parent()?.parent()?.file_name()?.to_str()?;
    if grand != "test" {
        return None;
    }
    Some(if parent == "good" { 0 } else { 1 })
}

fn list_input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::DatasetNotFound(input.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let entry = entry.map_err(|e| Error::io(input, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| data::IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::CorruptDataset(format!(
            "no images under {}",
            input.display()
        )));
    }
    Ok(files)
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let cfg = args.config_args.resolve()?;
    let inputs = list_input_images(&args.input)?;
    let model = load_model(&cfg, &args.checkpoint, args.force)?;
    let norm = Normalization::default();
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let scores_path = args.out.join("scores.jsonl");
    let mut scores =
        BufWriter::new(File::create(&scores_path).map_err(|e| Error::io(&scores_path, e))?);
    let mut first_err: Option<Error> = None;
    let mut failed = 0usize;
    for path in &inputs {
        match infer_one(&model, &cfg, &norm, path, &args.out) {
            Ok(score) => {
                let mut line = json!({ "path": path, "score": score });
                if let Some(label) = label_for(path) {
                    line["label"] = json!(label);
                }
                writeln!(scores, "{line}").map_err(|e| Error::io(&scores_path, e))?;
            }
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                failed += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    scores.flush().map_err(|e| Error::io(&scores_path, e))?;
    println!(
        "scored {} of {} images into {}",
        inputs.len() - failed,
        inputs.len(),
        args.out.display()
    );
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn infer_one(
    model: &DmddModel,
    cfg: &RunConfig,
    norm: &Normalization,
    path: &Path,
    out: &Path,
) -> Result<f64> {
    let image = load_image(path, cfg.input_size, norm)?;
    let (map, score) = model.infer(&image)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("unusable file name {}", path.display())))?;
    write_map(&out.join(format!("{stem}.map")), &map)?;
    save_rgb(&out.join(format!("{stem}_heat.png")), &heatmap_rgb(&map))?;
    Ok(score)
}

// ---------------------------------------------------------------- synth --

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.config_args.resolve()?;
    if args.n == 0 {
        return Ok(());
    }
    require_dataset(&cfg)?;
    require_category(&cfg)?;
    let index = load_dataset(Path::new(&cfg.dataset_root), &cfg.category, Split::Train)?;
    let textures = TextureSource::from_config(&cfg.synthesis, &index)?;
    let synth = Synthesizer {
        cfg: &cfg.synthesis,
        textures: &textures,
        norm: Normalization::default(),
        input_size: cfg.input_size,
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for i in 0..args.n {
        let entry = &index.entries[i % index.entries.len()];
        let raw = load_image_raw(&entry.image_path, cfg.input_size)?;
        let seed = derive_seed(cfg.seed, &format!("synth.{i}"));
        let pair = make_training_pair(&raw, Some(&entry.image_path), &synth, seed)?;
        save_rgb(&args.out.join(format!("{i:03}_normal.png")), &pair.normal_raw)?;
        save_rgb(
            &args.out.join(format!("{i:03}_anomalous.png")),
            &pair.anomalous_raw,
        )?;
        save_gray(&args.out.join(format!("{i:03}_mask.png")), &pair.gt_mask)?;
    }
    println!("wrote {} triptychs to {}", args.n, args.out.display());
    Ok(())
}

// ------------------------------------------------------- make-toy-dataset --

pub fn make_toy_dataset(args: &ToyArgs) -> Result<()> {
    let cfg = args.config_args.resolve()?;
    require_dataset(&cfg)?;
    let category = if cfg.category.is_empty() {
        "toy_shapes".to_string()
    } else {
        cfg.category.clone()
    };
    let spec = ToySpec {
        size: args.size,
        train_normal: args.train_normal,
        test_normal: args.test_normal,
        test_defect: args.test_defect,
    };
    let root = PathBuf::from(&cfg.dataset_root);
    generate_toy_dataset(&root, &category, cfg.seed, &spec)?;
    println!(
        "wrote {} ({} train, {} test normal, {} test defect, {}x{})",
        root.join(&category).display(),
        spec.train_normal,
        spec.test_normal,
        spec.test_defect,
        spec.size,
        spec.size
    );
    Ok(())
}
