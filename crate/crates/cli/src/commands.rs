//! Subcommand bodies.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use mcg_core::bench;
use mcg_core::checkpoint;
use mcg_core::data::{
    generate_range, load_dataset, load_mask, load_pair, save_mask, tile, tile_anchors, write_dataset, SamplePair,
};
use mcg_core::metrics::{confusion, Metrics};
use mcg_core::model::ChangeDetector;
use mcg_core::train::{predict_all, train as run_training, CsvLog, Evaluation};
use mcg_core::viz::{save_flow_png, save_overlay};
use mcg_core::Error;

use crate::config::{resolve, sidecar_of, Config};
use crate::manifest::RunManifest;
use crate::{BenchArgs, EvalArgs, InferArgs, LayoutArgs, ModelArgs, SynthArgs, TrainArgs};

pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "log.csv";
pub const METRICS: &str = "metrics.csv";
pub const PRED_DIR: &str = "pred";
pub const OVERLAY_DIR: &str = "overlays";
pub const CHANGE_MAP: &str = "change.png";
pub const BENCH_CSV: &str = "bench.csv";

/// Flow maps are numbered from the coarsest decoder level.
pub fn flow_file(level: usize) -> String {
    format!("flow_level{}.png", level + 1)
}

fn resolve_config(g: &Global, sidecar: Option<PathBuf>) -> Result<Config> {
    let mut layers: Vec<&Path> = Vec::new();
    let sidecar = sidecar.filter(|p| p.is_file());
    if let Some(p) = &sidecar {
        layers.push(p);
    }
    if let Some(p) = &g.config {
        layers.push(p);
    }
    let mut cfg = resolve(&layers)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg.finish())
}

fn apply_layout(cfg: &mut Config, a: &LayoutArgs) {
    if let Some(d) = &a.t1_dir {
        cfg.layout.t1 = d.clone();
    }
    if let Some(d) = &a.t2_dir {
        cfg.layout.t2 = d.clone();
    }
    if let Some(d) = &a.label_dir {
        cfg.layout.label = d.clone();
    }
}

fn apply_model(cfg: &mut Config, a: &ModelArgs) {
    if a.no_flow {
        cfg.model.use_flow = false;
    }
    if a.no_2ds {
        cfg.model.use_2ds = false;
    }
}

fn load_model(cfg: &Config, path: &Path) -> Result<ChangeDetector<f32>> {
    let mut model = ChangeDetector::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let stored = checkpoint::load(path)?;
    model
        .params
        .load_from(&stored)
        .with_context(|| format!("checkpoint {} does not match the model config", path.display()))?;
    Ok(model)
}

fn fmt_metrics(m: &Metrics) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.oa, m.precision, m.recall, m.f1, m.iou, m.kc
    )
}

pub fn synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let mut cfg = resolve_config(g, None)?;
    apply_layout(&mut cfg, &a.layout);
    if let Some(c) = a.count {
        cfg.synth.count = c;
    }
    if let Some(s) = a.size {
        cfg.synth.height = s;
        cfg.synth.width = s;
    }
    cfg.synth.validate()?;
    let mut manifest = RunManifest::new("synth", &cfg).outputs(&[&cfg.layout.t1, &cfg.layout.t2, &cfg.layout.label]);
    manifest.params = serde_json::json!({ "offset": a.offset });
    manifest.write(&a.out)?;
    let samples = generate_range(&cfg.synth, a.offset..a.offset + cfg.synth.count as u64)?;
    let written = write_dataset(&a.out, &cfg.layout, &samples)?;
    info!("wrote {} samples ({} files) to {}", samples.len(), written.len(), a.out.display());
    Ok(())
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(g, None)?;
    apply_layout(&mut cfg, &a.layout);
    apply_model(&mut cfg, &a.model);
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.eval_every {
        cfg.train.eval_every = v;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;

    let mut manifest = RunManifest::new("train", &cfg).input("train_data", &a.data)?;
    if let Some(e) = &a.eval_data {
        manifest = manifest.input("eval_data", e)?;
    }
    manifest = manifest.outputs(&[CHECKPOINT, crate::config::SIDECAR, TRAIN_LOG]);
    manifest.write(&a.out)?;

    let train_set = load_dataset(&a.data, &cfg.layout)?;
    if train_set.is_empty() {
        bail!("no samples under {}", a.data.join(&cfg.layout.t1).display());
    }
    let eval_set = a.eval_data.as_ref().map(|p| load_dataset(p, &cfg.layout)).transpose()?;
    let mut model = ChangeDetector::<f32>::new(cfg.model.clone(), cfg.seed)?;
    info!(
        "training on {} samples, {} parameters, {} steps",
        train_set.len(),
        model.params.numel(),
        cfg.train.steps
    );

    let log_path = a.out.join(TRAIN_LOG);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = CsvLog::new(BufWriter::new(file)).map_err(|e| Error::io(&log_path, e))?;
    let report = run_training(&mut model, &train_set, eval_set.as_deref(), &cfg.train, |row| {
        log.write(row).map_err(|e| Error::io(&log_path, e))?;
        match &row.metrics {
            Some(m) => info!("step {} loss {:.4} f1 {:.4}", row.step + 1, row.loss, m.f1),
            None if (row.step + 1) % 50 == 0 => info!("step {} loss {:.4}", row.step + 1, row.loss),
            None => {}
        }
        Ok(())
    })?;

    checkpoint::save(&a.out.join(CHECKPOINT), &model.params)?;
    let side = a.out.join(crate::config::SIDECAR);
    fs::write(&side, cfg.to_toml()?).with_context(|| format!("writing {}", side.display()))?;
    if let Some(e) = report.final_eval {
        println!("final,{}", fmt_metrics(&e.metrics));
    }
    info!("checkpoint written to {}", a.out.join(CHECKPOINT).display());
    Ok(())
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let mut cfg = resolve_config(g, a.checkpoint.as_deref().map(sidecar_of))?;
    apply_layout(&mut cfg, &a.layout);
    apply_model(&mut cfg, &a.model);

    let mut manifest = RunManifest::new("eval", &cfg).input("data", &a.data)?;
    match (&a.checkpoint, &a.pred_dir) {
        (Some(c), _) => manifest = manifest.input("checkpoint", c)?.outputs(&[METRICS, PRED_DIR, OVERLAY_DIR]),
        (None, Some(p)) => manifest = manifest.input("predictions", p)?.outputs(&[METRICS, OVERLAY_DIR]),
        (None, None) => bail!("either --checkpoint or --pred-dir is required"),
    }
    manifest.write(&a.out)?;

    let samples = load_dataset(&a.data, &cfg.layout)?;
    let preds: Vec<Vec<u8>> = match (&a.checkpoint, &a.pred_dir) {
        (Some(c), _) => {
            let model = load_model(&cfg, c)?;
            let preds = predict_all(&model, &samples)?;
            for (s, p) in samples.iter().zip(&preds) {
                save_mask(&a.out.join(PRED_DIR).join(format!("{}.png", s.id)), p, s.height(), s.width())?;
            }
            preds
        }
        (None, Some(dir)) => samples
            .iter()
            .map(|s| {
                let path = dir.join(format!("{}.png", s.id));
                let (m, h, w) = load_mask(&path)?;
                if (h, w) != (s.height(), s.width()) {
                    return Err(Error::Shape(format!(
                        "{} is {h}×{w}, label is {}×{}",
                        path.display(),
                        s.height(),
                        s.width()
                    )));
                }
                Ok(m)
            })
            .collect::<mcg_core::Result<_>>()?,
        (None, None) => unreachable!("checked above"),
    };

    let per_sample = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| Ok((s.id.clone(), confusion(p, &s.label)?)))
        .collect::<mcg_core::Result<Vec<_>>>()?;
    let ev = Evaluation::from_counts(per_sample);
    for (s, p) in samples.iter().zip(&preds) {
        save_overlay(
            &a.out.join(OVERLAY_DIR).join(format!("{}.png", s.id)),
            p,
            &s.label,
            s.height(),
            s.width(),
        )?;
    }
    write_metrics(&a.out.join(METRICS), &ev)?;
    println!("aggregate,{}", fmt_metrics(&ev.metrics));
    Ok(())
}

pub const METRICS_HEADER: &str = "id,tp,tn,fp,fn,oa,precision,recall,f1,iou,kc";

fn write_metrics(path: &Path, ev: &Evaluation) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(out, "{METRICS_HEADER}")?;
    let rows = ev.per_sample.iter().map(|(id, c)| (id.as_str(), *c));
    for (id, c) in rows.chain(std::iter::once(("all", ev.total))) {
        let m = mcg_core::metrics::metrics(&c);
        writeln!(out, "{id},{},{},{},{},{}", c.tp, c.tn, c.fp, c.fn_, fmt_metrics(&m))?;
    }
    out.flush()?;
    Ok(())
}

/// Averages the change probability over overlapping tiles.
fn predict_tiled(model: &ChangeDetector<f32>, pair: &SamplePair, size: usize, stride: usize) -> Result<Vec<u8>> {
    let (h, w) = (pair.height(), pair.width());
    let rows = tile_anchors(h, size, stride)?;
    let cols = tile_anchors(w, size, stride)?;
    let tiles = tile(pair, size, stride)?;
    let mut sum = vec![0.0f64; h * w];
    let mut hits = vec![0u32; h * w];
    let anchors = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c)));
    for ((top, left), t) in anchors.zip(&tiles) {
        let pred = model.predict(&t.t1, &t.t2)?;
        let change = &pred.probs.data()[size * size..];
        for q in 0..size * size {
            let k = (top + q / size) * w + left + q % size;
            sum[k] += f64::from(change[q]);
            hits[k] += 1;
        }
    }
    Ok(sum.iter().zip(&hits).map(|(&s, &n)| u8::from(s / f64::from(n) > 0.5)).collect())
}

pub fn infer(g: &Global, a: &InferArgs) -> Result<()> {
    let mut cfg = resolve_config(g, Some(sidecar_of(&a.checkpoint)))?;
    apply_model(&mut cfg, &a.model);
    if a.emit_flow && a.tile.is_some() {
        bail!("--emit-flow needs an untiled prediction; drop --tile");
    }
    if a.emit_flow && !cfg.model.use_flow {
        bail!("--emit-flow needs a model with learned flow");
    }
    let mut outputs = vec![CHANGE_MAP.to_string()];
    if a.emit_flow {
        outputs.extend((0..3).map(flow_file));
    }
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    let mut manifest = RunManifest::new("infer", &cfg)
        .input("checkpoint", &a.checkpoint)?
        .input("t1", &a.t1)?
        .input("t2", &a.t2)?
        .outputs(&outputs);
    manifest.params = serde_json::json!({ "tile": a.tile, "stride": a.stride, "emit_flow": a.emit_flow });
    manifest.write(&a.out)?;

    let model = load_model(&cfg, &a.checkpoint)?;
    let pair = load_pair(&a.t1, &a.t2, None)?;
    let (h, w) = (pair.height(), pair.width());
    let mask = match a.tile {
        Some(size) => predict_tiled(&model, &pair, size, a.stride.unwrap_or(size))?,
        None => {
            let pred = model.predict(&pair.t1, &pair.t2)?;
            if a.emit_flow {
                for (i, f) in pred.flows.iter().enumerate() {
                    save_flow_png(&a.out.join(flow_file(i)), f)?;
                }
            }
            pred.mask
        }
    };
    save_mask(&a.out.join(CHANGE_MAP), &mask, h, w)?;
    let positives = mask.iter().filter(|&&m| m != 0).count();
    println!(
        "changed,{positives},{},{:.6}",
        mask.len(),
        positives as f64 / mask.len() as f64
    );
    Ok(())
}

pub fn bench(g: &Global, a: &BenchArgs) -> Result<()> {
    let mut cfg = resolve_config(g, None)?;
    let b = &mut cfg.bench;
    if let Some(v) = &a.sizes {
        b.sizes = v.clone();
    }
    if let Some(v) = &a.variants {
        b.variants = v.clone();
    }
    if let Some(v) = &a.precisions {
        b.precisions = v.clone();
    }
    if let Some(v) = a.state_dim {
        b.state_dim = v;
    }
    if let Some(v) = a.min_time_ms {
        b.min_time_ms = v;
    }
    if let Some(v) = a.samples {
        b.samples = v;
    }
    let bc = cfg.bench.resolve(cfg.seed)?;
    RunManifest::new("bench", &cfg).outputs(&[BENCH_CSV]).write(&a.out)?;

    let path = a.out.join(BENCH_CSV);
    let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(out, "{}", bench::CSV_HEADER)?;
    println!("{}", bench::CSV_HEADER);
    let rows = bench::run(&bc, |r| println!("{}", r.csv()))?;
    for r in &rows {
        writeln!(out, "{}", r.csv())?;
    }
    out.flush()?;
    for (v, p, s) in bench::slopes(&rows) {
        println!("slope,{v},{p},{s:.4}");
    }
    Ok(())
}
