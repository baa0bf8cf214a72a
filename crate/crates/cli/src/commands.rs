use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use stdenoise::baselines::{Filter, Search};
use stdenoise::checkpoint;
use stdenoise::loss::Confusion;
use stdenoise::network::{mask_points, prepare_input, Ablation, ModelState};
use stdenoise::projection::{project, SensorConfig};
use stdenoise::scan_io::{read_labels, read_scan, write_labels, write_scan, DatasetLayout, LabelMask, PointCloud};
use stdenoise::snowsim::{
    build_dataset, toy_sequence, write_toy_dataset, ConditionClass, Manifest, ManifestEntry, Split, SubsetSpec,
};
use stdenoise::trainer::{self, predict_pair, FrameStore, BEST_CHECKPOINT};
use stdenoise::Error;

use crate::config::RunConfig;
use crate::render;
use crate::{Precision, UsageError};

pub fn simulate(
    cfg: &mut RunConfig,
    out: &Path,
    clean: Option<&Path>,
    sequences: usize,
    subset: Option<&str>,
) -> Result<Manifest> {
    if let Some(s) = subset {
        cfg.snow.subset = s.parse::<SubsetSpec>().map_err(UsageError)?;
    }
    let clean_root = match clean {
        Some(p) => p.to_path_buf(),
        None => {
            let p = out.join("clean");
            write_toy_dataset(&p, sequences, &cfg.toy, cfg.snow.seed)?;
            p
        }
    };
    let manifest = build_dataset(&clean_root, out, &cfg.snow)?;
    cfg.snapshot(out)?;
    let count = |s| manifest.split(s).len();
    println!(
        "wrote {} frames (train {}, val {}, test {}) to {}",
        manifest.entries.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.join("manifest.txt").display()
    );
    Ok(manifest)
}

pub fn apply_ablation(cfg: &mut RunConfig, ablate: Option<&str>) -> Result<()> {
    if let Some(a) = ablate {
        let ab = Ablation::parse(a).ok_or_else(|| {
            UsageError(format!(
                "unknown ablation {a:?} (expected full, no-temporal, conv2d-front or conv2d-no-temporal)"
            ))
        })?;
        ab.apply(&mut cfg.network);
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<trainer::FitReport> {
    let m = Manifest::read(manifest)?;
    cfg.snapshot(out)?;
    let report = trainer::fit(&m, &cfg.train, &cfg.network, &cfg.sensor, Some(out))?;
    println!(
        "best epoch {} val_iou {:.6}; checkpoint {}",
        report.best_epoch,
        report.best_val_iou,
        out.join(BEST_CHECKPOINT).display()
    );
    Ok(report)
}

/// A loaded network at the requested precision.
pub enum Model {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

impl Model {
    /// Loads a checkpoint, checking its recorded sensor against `sensor`.
    pub fn load(path: &Path, sensor: &SensorConfig, precision: Precision) -> Result<Self> {
        let (state, meta) = checkpoint::load::<f64>(path)?;
        if let Some(json) = meta.get("sensor") {
            let trained: SensorConfig =
                serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("sensor metadata: {e}")))?;
            if &trained != sensor {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint was trained for a {}x{} sensor, configuration has {}x{} (fov {} / {})",
                    trained.height, trained.width, sensor.height, sensor.width, sensor.fov_v, sensor.fov_up
                ))
                .into());
            }
        }
        Ok(match precision {
            Precision::F32 => Model::F32(state.cast()),
            Precision::F64 => Model::F64(state),
        })
    }

    pub fn predict(&self, current: &PointCloud, previous: &PointCloud, sensor: &SensorConfig) -> Result<LabelMask> {
        Ok(match self {
            Model::F32(s) => predict_pair(s, current, previous, sensor)?.0,
            Model::F64(s) => predict_pair(s, current, previous, sensor)?.0,
        })
    }
}

pub fn denoise(cfg: &RunConfig, ckpt: &Path, scan: &Path, prev: Option<&Path>, out: &Path, precision: Precision) -> Result<()> {
    let model = Model::load(ckpt, &cfg.sensor, precision)?;
    let current = read_scan(scan)?;
    let previous = match prev {
        Some(p) => read_scan(p)?,
        None => current.clone(),
    };
    let opc = project(&current, &cfg.sensor);
    let opc_prev = project(&previous, &cfg.sensor);
    let probs = match &model {
        Model::F32(s) => {
            let p = s.predict(&prepare_input(&opc, &opc_prev, &s.config)?)?;
            p.cast::<f64>()
        }
        Model::F64(s) => s.predict(&prepare_input(&opc, &opc_prev, &s.config)?)?,
    };
    let masked = mask_points(&current, &opc, &probs)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_scan(&masked.clean, out.join("clean.bin"))?;
    write_scan(&masked.removed, out.join("removed.bin"))?;
    write_labels(&masked.mask, out.join("pred.label"))?;
    println!(
        "{} points: kept {}, removed {}",
        current.len(),
        masked.clean.len(),
        masked.removed.len()
    );
    Ok(())
}

/// Where per-frame predictions come from in `eval`.
pub enum Source<'a> {
    Model(Model),
    Filter(Filter),
    Labels(&'a Path),
}

pub struct FrameRow {
    pub sequence: String,
    pub frame: u64,
    pub condition: ConditionClass,
    pub confusion: Confusion,
}

pub const REPORT_HEADER: &str = "sequence,frame,condition,iou,precision,recall";

fn metric_cols(c: &Confusion) -> String {
    format!("{:.6},{:.6},{:.6}", c.iou(), c.precision(), c.recall())
}

/// Per-frame rows, then pooled rows per condition class present and overall.
pub fn render_report(rows: &[FrameRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.sequence, r.frame, r.condition, metric_cols(&r.confusion));
    }
    let mut all = Confusion::default();
    for cond in ConditionClass::ALL {
        let mut c = Confusion::default();
        let mut any = false;
        for r in rows.iter().filter(|r| r.condition == cond) {
            c.merge(&r.confusion);
            any = true;
        }
        if any {
            let _ = writeln!(s, "aggregate,,{cond},{}", metric_cols(&c));
            all.merge(&c);
        }
    }
    let _ = writeln!(s, "aggregate,,all,{}", metric_cols(&all));
    s
}

pub fn select_frames<'m>(m: &'m Manifest, split: Split, every: usize, max: Option<usize>) -> Vec<&'m ManifestEntry> {
    let mut v: Vec<&ManifestEntry> = m.split(split).into_iter().step_by(every.max(1)).collect();
    if let Some(n) = max {
        v.truncate(n);
    }
    v
}

pub fn evaluate(cfg: &RunConfig, m: &Manifest, entries: &[&ManifestEntry], source: &Source) -> Result<Vec<FrameRow>> {
    let mut store = FrameStore::new(m);
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let pair = store.pair(e)?;
        let pred = match source {
            Source::Model(model) => model.predict(&pair.current, &pair.previous, &cfg.sensor)?,
            Source::Filter(f) => f.apply(&pair.current, &cfg.filter, Search::Auto)?,
            Source::Labels(dir) => {
                let path = DatasetLayout::new(*dir).label_path(&e.sequence, e.frame);
                if !path.is_file() {
                    return Err(Error::MisalignedFrames(format!("no prediction {}", path.display())).into());
                }
                read_labels(&path)?
            }
        };
        if pred.len() != pair.labels.len() {
            return Err(Error::MisalignedFrames(format!(
                "sequence {} frame {}: {} predictions for {} points",
                e.sequence,
                e.frame,
                pred.len(),
                pair.labels.len()
            ))
            .into());
        }
        rows.push(FrameRow {
            sequence: e.sequence.clone(),
            frame: e.frame,
            condition: e.condition,
            confusion: Confusion::from_masks(&pred, &pair.labels)?,
        });
        log::debug!("evaluated {} {}", e.sequence, e.frame);
    }
    Ok(rows)
}

/// Runs a filter over frames and writes its labels in the dataset layout.
pub fn baseline(cfg: &RunConfig, m: &Manifest, entries: &[&ManifestEntry], filter: Filter, out: &Path) -> Result<Vec<FrameRow>> {
    let layout = DatasetLayout::new(out);
    for e in entries {
        let cloud = read_scan(m.scan_path(e))?;
        let pred = filter.apply(&cloud, &cfg.filter, Search::Auto)?;
        write_labels(&pred, layout.label_path(&e.sequence, e.frame))?;
    }
    let rows = evaluate(cfg, m, entries, &Source::Labels(out))?;
    let path = out.join("report.csv");
    fs::write(&path, render_report(&rows)).with_context(|| format!("writing {}", path.display()))?;
    Ok(rows)
}

pub fn render(cfg: &RunConfig, scan: &Path, labels: Option<&Path>, out: &Path, max_range: f64) -> Result<Vec<PathBuf>> {
    if !(max_range > 0.0) {
        return Err(UsageError(format!("max range must be positive, got {max_range}")).into());
    }
    let cloud = read_scan(scan)?;
    let opc = project(&cloud, &cfg.sensor);
    let gray = render::gray_levels(&opc, max_range);
    let (w, h) = (cfg.sensor.width, cfg.sensor.height);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let base = out.with_extension("pgm");
    fs::write(&base, render::pgm(w, h, &gray)).with_context(|| format!("writing {}", base.display()))?;
    let mut written = vec![base];
    if let Some(lp) = labels {
        let mask = read_labels(lp)?;
        let classes = opc.pixel_labels(&mask)?;
        let path = out.with_extension("ppm");
        fs::write(&path, render::overlay_ppm(w, h, &gray, Some(&classes)))
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

/// Times projection, neighbour search and inference on toy frames.
pub fn bench(cfg: &RunConfig, frames: usize) -> Result<String> {
    let mut toy = cfg.toy.clone();
    toy.frames_per_sequence = frames.max(2);
    let scans = toy_sequence(&toy, cfg.snow.seed);
    let s64 = ModelState::<f64>::new(cfg.network.clone(), 0)?;
    let s32: ModelState<f32> = s64.cast();
    let (mut t_proj, mut t_prep, mut t32, mut t64) = (0.0, 0.0, 0.0, 0.0);
    let n = scans.len() - 1;
    for i in 1..scans.len() {
        let t = Instant::now();
        let opc = project(&scans[i], &cfg.sensor);
        let opc_prev = project(&scans[i - 1], &cfg.sensor);
        t_proj += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let input = prepare_input::<f64>(&opc, &opc_prev, &cfg.network)?;
        t_prep += t.elapsed().as_secs_f64();
        let input32 = prepare_input::<f32>(&opc, &opc_prev, &cfg.network)?;
        let t = Instant::now();
        s32.predict(&input32)?;
        t32 += t.elapsed().as_secs_f64();
        let t = Instant::now();
        s64.predict(&input)?;
        t64 += t.elapsed().as_secs_f64();
    }
    let ms = |x: f64| 1e3 * x / n as f64;
    let mut s = format!(
        "sensor {}x{}, {} frames, {} parameters\n",
        cfg.sensor.height,
        cfg.sensor.width,
        n,
        cfg.network.parameter_count()
    );
    let _ = writeln!(s, "projection (pair)   {:9.2} ms/frame", ms(t_proj));
    let _ = writeln!(s, "neighbour features  {:9.2} ms/frame", ms(t_prep));
    let _ = writeln!(s, "forward f32         {:9.2} ms/frame", ms(t32));
    let _ = writeln!(s, "forward f64         {:9.2} ms/frame", ms(t64));
    Ok(s)
}
