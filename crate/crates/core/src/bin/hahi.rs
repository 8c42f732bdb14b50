use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3, Axis};
use serde::Serialize;

use hahi::data::{generate_synthetic_cohort, split_indices, write_tensor, DatasetManifest, SyntheticConfig, TensorContainer};
use hahi::features::{alff, multiscale_dfc, roi_to_volume, static_fc, RegionalKind};
use hahi::harness::checkpoint::write_history;
use hahi::harness::dataset::{read_fa, read_timeseries};
use hahi::harness::metrics::write_metrics_csv;
use hahi::harness::{
    check_ablation_order, collect_report, default_positive_classes, evaluate_model, load_subject, load_subjects,
    parse_components, run_cv, run_fold, Checkpoint, EpochRecord, MetricsRow, TrainConfig,
};
use hahi::model::Modality;
use hahi::sam::{connectivity_matrix, synergistic_activation, ModalityReport};

#[derive(Parser)]
#[command(name = "hahi", version, about = "Dual-modal hierarchical alignment and interaction classifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort with planted class effects.
    Synth {
        /// Cohort JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute DFC, SFC and ALFF features for every subject.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one fold and write a checkpoint directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on its held-out fold (or every subject).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the manifest recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated; defaults to every class except 0.
        #[arg(long)]
        positive_classes: Option<String>,
        /// Use every subject instead of the checkpoint's test split.
        #[arg(long)]
        all: bool,
        /// Write a metrics CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synergistic activation maps for one subject.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate with components removed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of GI,FI,FSA,DSA,TSA.
        #[arg(long, default_value = "")]
        disable: String,
        /// Allow removal sets that skip the hierarchical order.
        #[arg(long)]
        free_order: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate over every fold.
    Cv {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate metrics CSVs found below a runs directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Training JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    positive_classes: Option<String>,
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn load(&self) -> Result<(DatasetManifest, TrainConfig, BTreeSet<usize>)> {
        let m = DatasetManifest::read(&self.manifest).with_context(|| format!("reading {}", self.manifest.display()))?;
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(f) = self.fold {
            cfg.fold = f;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let positive = positive_classes(self.positive_classes.as_deref(), m.cohort.n_classes())?;
        Ok((m, cfg, positive))
    }

    fn progress(&self) -> impl FnMut(&EpochRecord) + '_ {
        move |r| {
            if !self.quiet {
                eprintln!(
                    "epoch {:>3}  train {:.5}  val {:.5}  acc {:.3}",
                    r.epoch, r.train_loss, r.val_loss, r.val_accuracy
                );
            }
        }
    }
}

fn positive_classes(list: Option<&str>, n_classes: usize) -> Result<BTreeSet<usize>> {
    let Some(list) = list else {
        return Ok(default_positive_classes(n_classes));
    };
    let set = list
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad class index {s:?}")))
        .collect::<Result<BTreeSet<_>>>()?;
    if let Some(&c) = set.iter().find(|&&c| c >= n_classes) {
        bail!("positive class {c} but the cohort has {n_classes} classes");
    }
    Ok(set)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train_and_save(args: &RunArgs, cfg: TrainConfig, m: &DatasetManifest, positive: &BTreeSet<usize>, out: &Path) -> Result<MetricsRow> {
    let subjects = load_subjects(m, &cfg.features)?;
    let result = run_fold(m, &subjects, &cfg, positive, args.progress())?;
    let row = MetricsRow::new(result.fold, &result.metrics);
    let manifest = fs::canonicalize(&args.manifest).ok();
    let ck = Checkpoint::from_outcome(cfg, result.outcome, manifest);
    ck.save(out)?;
    write_metrics_csv(out.join("metrics.csv"), std::slice::from_ref(&row))?;
    write_json(&out.join("metrics.json"), &result.metrics)?;
    Ok(row)
}

fn print_row(r: &MetricsRow) {
    println!(
        "{:<12} accuracy {:.4}  recall {:.4}  precision {:.4}  f1 {:.4}",
        r.fold, r.accuracy, r.recall, r.precision, r.f1
    );
}

fn checkpoint_manifest(ck: &Checkpoint, given: Option<&Path>) -> Result<DatasetManifest> {
    let path = given
        .map(Path::to_path_buf)
        .or_else(|| ck.summary.manifest.clone())
        .context("checkpoint records no manifest; pass --manifest")?;
    let m = DatasetManifest::read(&path).with_context(|| format!("reading {}", path.display()))?;
    if m.cohort.n_classes() != ck.config.model.n_classes {
        bail!(
            "cohort has {} classes, checkpoint expects {}",
            m.cohort.n_classes(),
            ck.config.model.n_classes
        );
    }
    Ok(m)
}

/// Black-red-yellow-white ramp over [0, 1].
fn hot(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(v), c(v - 1.0), c(v - 2.0)]
}

fn save_heatmap(img: &Array2<f64>, path: &Path, scale: u32) -> Result<()> {
    let max = img.iter().fold(0.0f64, |m, &v| m.max(v));
    let (h, w) = img.dim();
    let mut out = image::RgbImage::new(w as u32 * scale, h as u32 * scale);
    for ((i, j), &v) in img.indexed_iter() {
        let px = image::Rgb(hot(if max > 0.0 { v / max } else { 0.0 }));
        for di in 0..scale {
            for dj in 0..scale {
                out.put_pixel(j as u32 * scale + dj, i as u32 * scale + di, px);
            }
        }
    }
    out.save(path).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct MapEntry {
    modality: String,
    map: String,
    heatmap: String,
    weights: Vec<f64>,
    top_connectivities: Option<Vec<(usize, usize, f64)>>,
    roi_ranking: Vec<(usize, f64)>,
}

fn write_map(r: &ModalityReport, out: &Path) -> Result<MapEntry> {
    let name = r.modality.to_string();
    write_tensor(
        &TensorContainer::from_array(&r.map.clone().into_dyn())?.with_meta("modality", name.clone()).with_meta("kind", "sam"),
        out.join(&name),
    )?;
    let png = format!("{name}.png");
    let img = if matches!(r.modality, Modality::Dfc(_) | Modality::Sfc) {
        connectivity_matrix(&r.map)
    } else {
        mid_slice(&r.map)
    };
    save_heatmap(&img, &out.join(&png), 8)?;
    Ok(MapEntry {
        modality: name.clone(),
        map: name,
        heatmap: png,
        weights: r.weights.clone(),
        top_connectivities: r.top_connectivities.clone(),
        roi_ranking: r.roi_ranking.clone(),
    })
}

fn mid_slice(v: &Array3<f64>) -> Array2<f64> {
    v.index_axis(Axis(2), v.dim().2 / 2).to_owned()
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth { config, out } => {
            let cfg: SyntheticConfig = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => SyntheticConfig::default(),
            };
            let m = generate_synthetic_cohort(&cfg, &out)?;
            println!("{} subjects -> {}", m.len(), out.display());
        }
        Cmd::Features { manifest, config, out } => {
            let m = DatasetManifest::read(&manifest)?;
            let f = match config {
                Some(p) => TrainConfig::load(&p)?.features,
                None => TrainConfig::default().features,
            };
            for row in &m.rows {
                let ts = read_timeseries(&m, row)?;
                let dir = out.join(&row.subject_id);
                let ms = multiscale_dfc(&ts, f.delta, f.levels, f.base_window, f.frames)?;
                for c in std::iter::once(&ms.base).chain(ms.levels.values()) {
                    let t = TensorContainer::from_array(&c.values.clone().into_dyn())?
                        .with_meta("modality", "DFC")
                        .with_meta("scale", c.scale.to_string());
                    write_tensor(&t, dir.join(format!("dfc_s{}", c.scale)))?;
                }
                let sfc = static_fc(&ts)?;
                write_tensor(&TensorContainer::from_array(&sfc.values.into_dyn())?.with_meta("modality", "SFC"), dir.join("sfc"))?;
                let a = roi_to_volume(&alff(&ts, f.band_low, f.band_high)?, &m.cohort.atlas, RegionalKind::Alff)?;
                write_tensor(&TensorContainer::from_array(&a.values.into_dyn())?.with_meta("modality", "ALFF"), dir.join("alff"))?;
                read_fa(&m, row)?;
            }
            println!("features for {} subjects -> {}", m.len(), out.display());
        }
        Cmd::Train { run, out } => {
            let (m, cfg, positive) = run.load()?;
            print_row(&train_and_save(&run, cfg, &m, &positive, &out)?);
        }
        Cmd::Eval {
            ckpt,
            manifest,
            positive_classes: pos,
            all,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let m = checkpoint_manifest(&ck, manifest.as_deref())?;
            let positive = positive_classes(pos.as_deref(), m.cohort.n_classes())?;
            let rows: Vec<usize> = if all {
                (0..m.len()).collect()
            } else {
                split_indices(&m, ck.config.fold, ck.config.n_folds, ck.config.seed)?.test
            };
            let subjects = rows
                .iter()
                .map(|&i| load_subject(&m, &m.rows[i], &ck.config.features).map(|s| s.inputs))
                .collect::<hahi::error::Result<Vec<_>>>()?;
            let refs: Vec<_> = subjects.iter().collect();
            let metrics = evaluate_model(&ck.model, &refs, &positive)?;
            let row = MetricsRow::new(if all { "all".to_string() } else { ck.config.fold.to_string() }, &metrics);
            print_row(&row);
            println!("tp {}  fp {}  tn {}  fn {}", metrics.tp, metrics.fp, metrics.tn, metrics.fn_);
            if let Some(out) = out {
                write_metrics_csv(out, &[row])?;
            }
        }
        Cmd::Explain {
            ckpt,
            manifest,
            subject,
            class,
            top,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let m = checkpoint_manifest(&ck, manifest.as_deref())?;
            let row = m.find(&subject).ok_or_else(|| hahi::error::Error::UnknownSubject(subject.clone()))?;
            let x = load_subject(&m, row, &ck.config.features)?.inputs;
            let report = synergistic_activation(&ck.model, &x, class, &m.cohort.atlas, ck.config.sam_perturbation, top)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let modalities = report.modalities.iter().map(|r| write_map(r, &out)).collect::<Result<Vec<_>>>()?;
            let scales = report.dfc_scales.iter().map(|r| write_map(r, &out)).collect::<Result<Vec<_>>>()?;
            let logits = ck.model.logits(&x)?;
            write_json(
                &out.join("report.json"),
                &serde_json::json!({
                    "subject": subject,
                    "label": row.label,
                    "class": class,
                    "logits": logits,
                    "perturbation": ck.config.sam_perturbation,
                    "modalities": modalities,
                    "dfc_scales": scales,
                }),
            )?;
            println!("report -> {}", out.join("report.json").display());
        }
        Cmd::Ablate {
            run,
            disable,
            free_order,
            out,
        } => {
            let (m, mut cfg, positive) = run.load()?;
            let disable = parse_components(&disable)?;
            check_ablation_order(&disable, free_order)?;
            cfg.model.disable = disable;
            print_row(&train_and_save(&run, cfg, &m, &positive, &out)?);
        }
        Cmd::Cv { run, out } => {
            let (m, cfg, positive) = run.load()?;
            let subjects = load_subjects(&m, &cfg.features)?;
            let quiet = run.quiet;
            let summary = run_cv(&m, &subjects, &cfg, &positive, |fold, r| {
                if !quiet {
                    eprintln!("fold {fold} epoch {:>3}  train {:.5}  val {:.5}  acc {:.3}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy);
                }
            })?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for f in &summary.folds {
                write_history(out.join(format!("history_fold{}.csv", f.fold)), &f.outcome.history)?;
            }
            let table = summary.table();
            write_metrics_csv(out.join("metrics.csv"), &table)?;
            table.iter().for_each(print_row);
        }
        Cmd::Report { runs, out } => {
            let rows = collect_report(&runs)?;
            write_metrics_csv(&out, &rows)?;
            rows.iter().for_each(print_row);
        }
    }
    Ok(())
}
