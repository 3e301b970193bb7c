use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use uie_snn::data::{
    image_size, load_image, load_image_native, save_png, split, DatasetManifest, FileDataset, InMemoryDataset, Pair,
    PairDataset,
};
use uie_snn::network::{checkpoint, LayerGraph, NetworkConfig, SpikeTrace};
use uie_snn::profiler::energy_report;
use uie_snn::quality::{psnr, ssim, uciqe, uiqm, MetricWeights, Psnr};
use uie_snn::training;

use crate::config::{EnergyConfig, RunConfig};
use crate::CliError;

/// Datasets larger than this are decoded on demand instead of held in memory.
const IN_MEMORY_LIMIT_BYTES: usize = 1 << 30;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of a directory keyed by file stem, sorted.
fn list_images(dir: &Path, flag: &str) -> Result<BTreeMap<String, PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::config(format!("{flag}: {} is not a directory", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(CliError::config(format!(
                "{flag}: {} and {} share the stem `{stem}`",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn write_snapshot(out: &Path, text: &str) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), text)?;
    Ok(())
}

fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<(), CliError> {
    let text: String = pairs
        .iter()
        .map(|(r, j)| format!("{}\t{}\n", r.display(), j.display()))
        .collect();
    fs::write(path, text)?;
    Ok(())
}

fn dataset(pairs: Vec<Pair>, net: &NetworkConfig) -> Result<Box<dyn PairDataset>, CliError> {
    let resolution = (net.height, net.width);
    let bytes = pairs.len() * 2 * 3 * net.height * net.width * std::mem::size_of::<f32>();
    Ok(if bytes <= IN_MEMORY_LIMIT_BYTES {
        Box::new(InMemoryDataset::load(&pairs, resolution)?)
    } else {
        Box::new(FileDataset { pairs, resolution })
    })
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.output.dir.as_deref().expect("resolved config has an output dir");
    let data = cfg.data.dataset.as_deref().expect("resolved config has a dataset");
    write_snapshot(out, &cfg.to_toml())?;

    let mut manifest = DatasetManifest::open(data)?;
    let (train_pairs, val_pairs) = match &cfg.data.validation {
        Some(v) => (manifest.pairs, DatasetManifest::open(v)?.pairs),
        None => {
            manifest.val_fraction = cfg.data.val_fraction;
            manifest.train_fraction = 1.0 - cfg.data.val_fraction;
            split(&manifest, cfg.data.split_seed.unwrap_or(cfg.train.seed))?
        }
    };
    write_pairs(&out.join("train_pairs.tsv"), &train_pairs)?;
    write_pairs(&out.join("val_pairs.tsv"), &val_pairs)?;
    info!("{} training pairs, {} validation pairs", train_pairs.len(), val_pairs.len());

    let train_set = dataset(train_pairs, &cfg.network)?;
    let val_set = if val_pairs.is_empty() {
        None
    } else {
        Some(dataset(val_pairs, &cfg.network)?)
    };
    let report = training::train(train_set.as_ref(), val_set.as_deref(), &cfg.network, &cfg.train, out)?;
    println!(
        "best epoch {} (mse {:.6}); checkpoint {}; metrics {}",
        report.best_epoch,
        report.best_loss,
        report.best_checkpoint.display(),
        report.metrics.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<LayerGraph<f32>, CliError> {
    checkpoint::load(path).map_err(|e| CliError::artifact(format!("--checkpoint {}: {e}", path.display())))
}

#[derive(Serialize)]
struct InferSnapshot<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    network: &'a NetworkConfig,
}

pub fn infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let images = list_images(input, "--input")?;
    if images.is_empty() {
        return Err(CliError::config(format!("--input: no PNG or JPEG images in {}", input.display())));
    }
    let graph = load_checkpoint(checkpoint)?;
    let net = graph.config();
    let snapshot = InferSnapshot {
        checkpoint,
        input,
        network: net,
    };
    write_snapshot(out, &toml::to_string(&snapshot).expect("snapshot serialises"))?;
    for (stem, path) in &images {
        let t = Instant::now();
        let img = load_image(path, (net.height, net.width))?;
        let y = graph.forward(&img)?.output;
        let dst = out.join(format!("{stem}.png"));
        save_png(&y, 0, &dst)?;
        info!("{} -> {} in {:.3}s", path.display(), dst.display(), t.elapsed().as_secs_f64());
    }
    println!("enhanced {} images into {}", images.len(), out.display());
    Ok(())
}

/// Raw images of a profiling set: a manifest's raw side, a dataset's `raw/`, or a plain directory.
fn profile_inputs(data: &Path) -> Result<Vec<PathBuf>, CliError> {
    if data.is_file() {
        return Ok(DatasetManifest::from_tsv(data)?.pairs.into_iter().map(|(r, _)| r).collect());
    }
    let raw = data.join("raw");
    let dir = if raw.is_dir() { raw } else { data.to_path_buf() };
    Ok(list_images(&dir, "--data")?.into_values().collect())
}

#[derive(Serialize)]
struct ProfileSnapshot<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    limit: Option<usize>,
    images: usize,
    energy: EnergyConfig,
    network: &'a NetworkConfig,
}

pub fn profile(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    energy: EnergyConfig,
    limit: Option<usize>,
) -> Result<(), CliError> {
    if !data.exists() {
        return Err(CliError::config(format!("--data: {} does not exist", data.display())));
    }
    let table = energy.table();
    table.validate()?;
    let mut inputs = profile_inputs(data)?;
    if let Some(n) = limit {
        inputs.truncate(n);
    }
    if inputs.is_empty() {
        return Err(CliError::config(format!("--data: no images found in {}", data.display())));
    }
    let graph = load_checkpoint(checkpoint)?;
    let net = graph.config();
    let snapshot = ProfileSnapshot {
        checkpoint,
        data,
        limit,
        images: inputs.len(),
        energy,
        network: net,
    };
    write_snapshot(out, &toml::to_string(&snapshot).expect("snapshot serialises"))?;

    let mut trace: Option<SpikeTrace> = None;
    for path in &inputs {
        let img = load_image(path, (net.height, net.width))?;
        let t = graph.forward(&img)?.trace;
        match &mut trace {
            Some(acc) => acc.merge(&t)?,
            None => trace = Some(t),
        }
    }
    let report = energy_report(&graph, &trace.expect("at least one image"), &table)?;
    fs::write(out.join("energy.csv"), report.to_csv())?;
    let summary = report.summary();
    fs::write(out.join("summary.txt"), format!("{summary}\n"))?;
    println!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    enhanced: &'a Path,
    reference: Option<&'a Path>,
    images: usize,
}

struct Row {
    name: String,
    psnr: Option<Psnr>,
    ssim: Option<f64>,
    uciqe: f64,
    uiqm: f64,
}

fn fmt_psnr(p: Psnr) -> String {
    match p {
        Psnr::Db(v) => v.to_string(),
        Psnr::Identical => "identical".into(),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn eval(enhanced: &Path, reference: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let enh = list_images(enhanced, "--enhanced")?;
    let refs = reference.map(|r| list_images(r, "--reference")).transpose()?;
    let names: Vec<&String> = match &refs {
        Some(r) => enh.keys().filter(|k| r.contains_key(*k)).collect(),
        None => enh.keys().collect(),
    };
    if names.is_empty() {
        return Err(CliError::config("no images with matching file names to evaluate"));
    }
    let snapshot = EvalSnapshot {
        enhanced,
        reference,
        images: names.len(),
    };
    write_snapshot(out, &toml::to_string(&snapshot).expect("snapshot serialises"))?;

    let weights = MetricWeights::default();
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let e_path = &enh[name];
        let e = load_image_native(e_path)?;
        let (psnr_v, ssim_v) = match &refs {
            Some(r) => {
                let j = load_image(&r[name], image_size(e_path)?)?;
                (Some(psnr(&e, &j, weights.p_max)?), Some(ssim(&e, &j, &weights)?))
            }
            None => (None, None),
        };
        rows.push(Row {
            name: e_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            psnr: psnr_v,
            ssim: ssim_v,
            uciqe: uciqe(&e, &weights)?,
            uiqm: uiqm(&e, &weights)?,
        });
    }

    let full = refs.is_some();
    let header = if full {
        "filename,psnr_db,ssim,uciqe,uiqm"
    } else {
        "filename,uciqe,uiqm"
    };
    let mut csv = format!("{header}\n");
    for r in &rows {
        let name = csv_field(&r.name);
        match (r.psnr, r.ssim) {
            (Some(p), Some(s)) => csv.push_str(&format!("{name},{},{s},{},{}\n", fmt_psnr(p), r.uciqe, r.uiqm)),
            _ => csv.push_str(&format!("{name},{},{}\n", r.uciqe, r.uiqm)),
        }
    }
    fs::write(out.join("eval.csv"), csv)?;

    let m_uciqe = mean(rows.iter().map(|r| r.uciqe));
    let m_uiqm = mean(rows.iter().map(|r| r.uiqm));
    let mut summary = format!("{header}\n");
    let mut line = format!("images {}", rows.len());
    if full {
        // The mean of any infinite PSNR is infinite.
        let p = if rows.iter().any(|r| r.psnr == Some(Psnr::Identical)) {
            Psnr::Identical
        } else {
            Psnr::Db(mean(rows.iter().filter_map(|r| r.psnr.map(Psnr::db))))
        };
        let s = mean(rows.iter().filter_map(|r| r.ssim));
        summary.push_str(&format!("mean,{},{s},{m_uciqe},{m_uiqm}\n", fmt_psnr(p)));
        line.push_str(&format!("; PSNR {p} dB; SSIM {s:.4}"));
    } else {
        summary.push_str(&format!("mean,{m_uciqe},{m_uiqm}\n"));
    }
    line.push_str(&format!("; UCIQE {m_uciqe:.4}; UIQM {m_uiqm:.4}"));
    fs::write(out.join("eval_mean.csv"), summary)?;
    println!("{line}");
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
