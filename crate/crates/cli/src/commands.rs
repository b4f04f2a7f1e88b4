use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use advbench::attacks::{
    AttackBudget, AttackConfig, AttackKind, AttackManifest, Carry, LossKind, TargetChoice, Timestamps,
};
use advbench::eval::plot::{line_chart, Series};
use advbench::eval::{
    precision_curve, run_benchmark, success_curve, track_sequence, write_report, BenchmarkConfig,
    BenchmarkReport, FrameTracker, OracleTracker, SequenceInput, SequenceReport, SurrogateTracker,
};
use advbench::eventcam::{
    load_sequence, save_sequence, save_voxels, synthesize_sequence, write_ppm, GridSpec, Image, SceneConfig,
    Sequence,
};
use advbench::tracker::{build_dataset, load_params, save_params, train, Modality, TrackerParams, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

const SYNTH_WIDTH: usize = 160;
const SYNTH_HEIGHT: usize = 120;
const SYNTH_FRAMES: usize = 20;
const TRAIN_PAIRS_PER_SEQUENCE: usize = 24;
const TRAIN_JITTER: f64 = 0.6;
const DEFAULT_TRAIN_STEPS: usize = 2000;

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Sequence directories under `data`, sorted by name.
fn sequence_dirs(data: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(data).map_err(|e| CliError::Usage(format!("{}: {e}", data.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("events.evt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("no sequences found under {}", data.display())));
    }
    Ok(dirs)
}

fn modality(cfg: &RunConfig) -> Result<Modality, CliError> {
    cfg.modality
        .as_deref()
        .unwrap_or("rgb")
        .parse()
        .map_err(|e| CliError::Usage(format!("{e}")))
}

#[derive(Serialize)]
struct SynthManifest {
    schema: &'static str,
    seed: u64,
    width: usize,
    height: usize,
    frames: usize,
    sequences: Vec<SynthEntry>,
}

#[derive(Serialize)]
struct SynthEntry {
    name: String,
    seed: u64,
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let n = cfg.n.unwrap_or(8);
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let out = cfg.require_out()?;
    prepare_out_dir(out, cfg.force)?;
    let base = cfg.seed.unwrap_or(0);
    let entries: Vec<SynthEntry> = (0..n)
        .map(|i| SynthEntry {
            name: format!("seq_{i:03}"),
            seed: base.wrapping_add(i as u64),
        })
        .collect();
    entries.par_iter().try_for_each(|e| -> Result<(), CliError> {
        let scene = SceneConfig::random(e.seed, SYNTH_WIDTH, SYNTH_HEIGHT, SYNTH_FRAMES);
        let (frames, events, boxes) = synthesize_sequence(&scene, e.seed)?;
        let seq = Sequence {
            name: e.name.clone(),
            frames,
            events,
            boxes,
        };
        save_sequence(&seq, &out.join(&e.name))?;
        Ok(())
    })?;
    write_json(
        &out.join("manifest.json"),
        &SynthManifest {
            schema: "rgbe-advbench/synth/v1",
            seed: base,
            width: SYNTH_WIDTH,
            height: SYNTH_HEIGHT,
            frames: SYNTH_FRAMES,
            sequences: entries,
        },
    )?;
    println!("wrote {n} sequences to {}", out.display());
    Ok(())
}

fn load_all(dirs: &[PathBuf]) -> Result<Vec<Sequence>, CliError> {
    dirs.par_iter().map(|d| load_sequence(d).map_err(CliError::from)).collect()
}

#[derive(Serialize)]
struct TrainManifest {
    schema: &'static str,
    data: String,
    checkpoint: String,
    modality: Modality,
    steps: usize,
    seed: u64,
    initial_loss: f64,
    final_loss: f64,
    timestamps: Timestamps,
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.require_data()?;
    let ckpt = cfg.require_ckpt()?;
    let m = modality(cfg)?;
    let steps = cfg.steps.unwrap_or(DEFAULT_TRAIN_STEPS);
    if steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let seed = cfg.seed.unwrap_or(0);
    let started = unix_now();
    let t = Instant::now();
    let seqs = load_all(&sequence_dirs(data)?)?;
    let pairs = build_dataset(&seqs, m, &GridSpec::default(), TRAIN_PAIRS_PER_SEQUENCE, TRAIN_JITTER, seed)?;
    let tc = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    let report = train(&TrackerParams::new(m, seed), &pairs, &tc)?;
    save_params(&report.params, ckpt)?;
    let curve: Vec<(f64, f64)> = report.losses.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect();
    let svg = line_chart("training loss", "step", "loss", &[Series::new("batch loss", curve)]);
    fs::write(ckpt.with_extension("loss.svg"), svg)?;
    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    write_json(
        &ckpt.with_extension("train.json"),
        &TrainManifest {
            schema: "rgbe-advbench/train/v1",
            data: data.display().to_string(),
            checkpoint: ckpt.display().to_string(),
            modality: m,
            steps,
            seed,
            initial_loss: first,
            final_loss: last,
            timestamps: Timestamps {
                started_unix_s: started,
                elapsed_s: t.elapsed().as_secs_f64(),
            },
        },
    )?;
    println!("trained {m} tracker for {steps} steps: loss {first:.4} -> {last:.4}");
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn load_tracker(cfg: &RunConfig) -> Result<SurrogateTracker, CliError> {
    let ckpt = cfg.require_ckpt()?;
    if !ckpt.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", ckpt.display())));
    }
    Ok(SurrogateTracker::new(load_params(ckpt)?))
}

/// Attack settings from the flags, with defaults for `kind`.
fn attack_config(cfg: &RunConfig, kind: AttackKind) -> Result<AttackConfig, CliError> {
    let mut a = AttackConfig::new(kind);
    let budget = AttackBudget {
        eps: cfg.eps.unwrap_or(a.rgb.eps),
        alpha: cfg.alpha.unwrap_or(a.rgb.alpha),
        iters: cfg.iters.unwrap_or(a.rgb.iters),
    };
    budget.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    a = a.with_budget(budget);
    if let Some(t) = &cfg.target {
        a.target = t.parse::<TargetChoice>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(t) = &cfg.temporal {
        a.carry = t.parse::<Carry>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    a.loss = match cfg.loss.as_deref() {
        None | Some("adv") => LossKind::Adversarial,
        Some("track") => LossKind::Track,
        Some(other) => return Err(CliError::Usage(format!("--loss must be adv or track, got {other:?}"))),
    };
    a.seed = cfg.seed.unwrap_or(0);
    Ok(a)
}

fn parse_kind(name: &str) -> Result<AttackKind, CliError> {
    name.parse().map_err(|e: advbench::attacks::AttackError| CliError::Usage(e.to_string()))
}

fn checked_attack(cfg: &RunConfig, name: &str, m: Modality) -> Result<AttackConfig, CliError> {
    let a = attack_config(cfg, parse_kind(name)?)?;
    a.validate(m).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(a)
}

fn gray_to_rgb(img: &Image) -> Image {
    let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
    Image::new(img.width(), img.height(), 3, data)
}

#[derive(Serialize)]
struct FrameTrace<'a> {
    frame: usize,
    loss: &'a [f64],
}

/// Runs the attack along each sequence and writes the attacked search
/// patches, loss traces, and predicted boxes.
fn attack_sequence(
    tracker: &SurrogateTracker,
    seq: &Sequence,
    bench: &BenchmarkConfig,
    index: usize,
    dir: &Path,
) -> Result<SequenceReport, CliError> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut boxes = String::new();
    track_sequence(tracker, seq, bench, index, |o, r| {
        let k = r.frame;
        if let Some(fa) = &o.attack {
            let p = &fa.pair;
            if let Some(img) = &p.x_rgb {
                fs::create_dir_all(dir.join("rgb"))?;
                write_ppm(&dir.join("rgb").join(format!("{k:06}.ppm")), img)?;
            }
            if let Some(v) = p.x_voxels() {
                fs::create_dir_all(dir.join("voxels"))?;
                save_voxels(v, &dir.join("voxels").join(format!("{k:06}.vox")))?;
            }
            if let Some(f) = p.x_frame() {
                fs::create_dir_all(dir.join("event_frames"))?;
                write_ppm(&dir.join("event_frames").join(format!("{k:06}.ppm")), &gray_to_rgb(f))?;
            }
            traces.push((k, fa.trace.clone()));
        }
        let b = r.pred;
        writeln!(boxes, "{},{},{},{}", b.x, b.y, b.w, b.h).unwrap();
        records.push(r);
        Ok(())
    })?;
    fs::write(dir.join("boxes.txt"), boxes)?;
    let traces: Vec<FrameTrace> = traces.iter().map(|(k, t)| FrameTrace { frame: *k, loss: t }).collect();
    write_json(&dir.join("trace.json"), &traces)?;
    Ok(SequenceReport::new(seq.name.clone(), records))
}

pub fn attack(cfg: &RunConfig) -> Result<(), CliError> {
    let name = cfg
        .name
        .as_deref()
        .ok_or_else(|| CliError::Usage("--name is required".into()))?;
    let kind = parse_kind(name)?;
    let a = attack_config(cfg, kind)?;
    let data = cfg.require_data()?;
    let out = cfg.require_out()?;
    let tracker = load_tracker(cfg)?;
    let m = tracker.params.modality;
    a.validate(m).map_err(|e| CliError::Usage(e.to_string()))?;
    let dirs = sequence_dirs(data)?;
    prepare_out_dir(out, cfg.force)?;
    let started = unix_now();
    let t = Instant::now();
    let mut bench = BenchmarkConfig::attacked(name, a);
    bench.manifest = Some(out.join("manifest.json").display().to_string());
    let reports: Vec<SequenceReport> = dirs
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let res = load_sequence(d)
                .map_err(CliError::from)
                .and_then(|s| attack_sequence(&tracker, &s, &bench, i, &out.join(&name)));
            res.unwrap_or_else(|e| {
                log::warn!("sequence {name} failed: {e}");
                SequenceReport::failed(name, Vec::new(), e.to_string())
            })
        })
        .collect();
    let mut manifest = AttackManifest::new(a, m);
    manifest.checkpoint = cfg.ckpt.as_ref().map(|p| p.display().to_string());
    manifest.data = Some(data.display().to_string());
    manifest.sequences = reports.iter().map(|r| r.name.clone()).collect();
    manifest.timestamps = Some(Timestamps {
        started_unix_s: started,
        elapsed_s: t.elapsed().as_secs_f64(),
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    let failed = reports.iter().filter(|r| r.error.is_some()).count();
    let ok: Vec<_> = reports.iter().filter_map(|r| r.metrics).collect();
    let report = BenchmarkReport {
        schema: BenchmarkReport::SCHEMA.into(),
        name: name.into(),
        tracker: tracker.label(),
        attack: Some(a),
        manifest: bench.manifest.clone(),
        aggregate: advbench::eval::Metrics::mean(&ok).ok(),
        mean_target_distance: None,
        sequences: reports,
        timing: None,
    };
    write_report(&report, &out.join("report.json"))?;
    print_table(&[report]);
    if failed > 0 {
        return Err(CliError::SequencesFailed(failed));
    }
    Ok(())
}

/// Prints PR, NPR, and SR rows, then deltas of each later row against the
/// first.
fn print_table(reports: &[BenchmarkReport]) {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
    println!("{:<width$}  {:>6}  {:>6}  {:>6}", "run", "PR", "NPR", "SR");
    let row = |label: &str, v: Option<[f64; 3]>| match v {
        Some([a, b, c]) => println!("{label:<width$}  {a:>6.1}  {b:>6.1}  {c:>6.1}"),
        None => println!("{label:<width$}  {:>6}  {:>6}  {:>6}", "-", "-", "-"),
    };
    let vals = |r: &BenchmarkReport| r.aggregate.map(|m| [m.pr, m.npr, m.sr]);
    for r in reports {
        row(&r.name, vals(r));
    }
    if let Some(base) = reports.first().and_then(vals) {
        for r in &reports[1..] {
            let d = vals(r).map(|v| [v[0] - base[0], v[1] - base[1], v[2] - base[2]]);
            row(&format!("delta {}", r.name), d);
        }
    }
}

fn curve_svg(title: &str, x: &str, reports: &[BenchmarkReport], curve: impl Fn(&[advbench::eval::FrameRecord]) -> Vec<(f64, f64)>) -> String {
    let series: Vec<Series> = reports
        .iter()
        .map(|r| {
            let all: Vec<_> = r
                .sequences
                .iter()
                .filter(|s| s.error.is_none())
                .flat_map(|s| s.records.iter().cloned())
                .collect();
            Series::new(r.name.clone(), if all.is_empty() { Vec::new() } else { curve(&all) })
        })
        .collect();
    line_chart(title, x, "percent of frames", &series)
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.require_data()?;
    let tracker: Box<dyn FrameTracker> = if cfg.oracle {
        Box::new(OracleTracker)
    } else {
        Box::new(load_tracker(cfg)?)
    };
    let m = if cfg.oracle { None } else { Some(modality_of(cfg)?) };
    let runs: Vec<String> = match (&cfg.compare, &cfg.name) {
        (Some(c), _) if !c.is_empty() => c.clone(),
        (_, Some(n)) => vec![n.clone()],
        _ => vec!["clean".into()],
    };
    let mut benches = Vec::new();
    for run in &runs {
        let b = match run.as_str() {
            "clean" => BenchmarkConfig::clean("clean"),
            "attacked" => {
                let name = cfg
                    .name
                    .as_deref()
                    .ok_or_else(|| CliError::Usage("comparing `attacked` needs --name".into()))?;
                BenchmarkConfig::attacked(name, checked_attack(cfg, name, m.unwrap_or(Modality::RgbVoxel))?)
            }
            other => BenchmarkConfig::attacked(other, checked_attack(cfg, other, m.unwrap_or(Modality::RgbVoxel))?),
        };
        benches.push(b);
    }
    let inputs: Vec<SequenceInput> = sequence_dirs(data)?.into_iter().map(SequenceInput::Dir).collect();
    let reports: Vec<BenchmarkReport> = benches.iter().map(|b| run_benchmark(tracker.as_ref(), &inputs, b)).collect();
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out)?;
        for r in &reports {
            write_report(r, &out.join(format!("report_{}.json", r.name)))?;
        }
        let curve = |f: fn(&[advbench::eval::FrameRecord]) -> Result<Vec<(f64, f64)>, advbench::eval::EvalError>| {
            move |r: &[advbench::eval::FrameRecord]| f(r).unwrap_or_default()
        };
        fs::write(out.join("precision.svg"), curve_svg("precision", "center error threshold (px)", &reports, curve(precision_curve)))?;
        fs::write(out.join("success.svg"), curve_svg("success", "IoU threshold", &reports, curve(success_curve)))?;
    }
    print_table(&reports);
    let failed: usize = reports.iter().map(|r| r.failed_sequences().len()).sum();
    for r in &reports {
        for s in r.failed_sequences() {
            eprintln!("{}: sequence {} failed: {}", r.name, s.name, s.error.as_deref().unwrap_or(""));
        }
    }
    if failed > 0 {
        return Err(CliError::SequencesFailed(failed));
    }
    Ok(())
}

fn modality_of(cfg: &RunConfig) -> Result<Modality, CliError> {
    let ckpt = cfg.require_ckpt()?;
    Ok(load_params(ckpt)?.modality)
}
