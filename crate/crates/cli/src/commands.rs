use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use scanreg::encoder::Encoder;
use scanreg::metrics::{
    default_curve_grid, format_results, normalized_time, recall_curve, registration_recall,
    rre_deg, rte_m, EvalRecord,
};
use scanreg::model::{Frame, ModelConfig};
use scanreg::params::Session;
use scanreg::pointcloud::{
    format_pose_line, parse_pose_line, read_kitti_bin, synth_pair, synth_scene_with_fov,
    write_kitti_bin, Pose,
};
use scanreg::projection::{project_cylindrical, round_trip_check, write_debug_dump, GridSpec};
use scanreg::tensor::Real;
use scanreg::training::{overfit_run, synthetic_pairs, OverfitReport, Trainer};

use crate::config::{Precision, RunConfig};
use crate::{CheckFailed, UsageError};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ------------------------------------------------------------------ project

pub fn project(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let grid = cfg.grid.spec()?;
    let (pc, load) = read_kitti_bin(input)?;
    if pc.is_empty() {
        log::warn!(
            "{}: no points; writing an empty projection",
            input.display()
        );
    }
    let pr = project_cylindrical(&pc, &grid)?;
    create_dir(out)?;
    let dump = out.join("projection.dump");
    write_debug_dump(&dump, &pr.image, &pr.mask)?;
    let (ok, valid, agree) = round_trip_check(&pr.image, &pr.mask);
    let s = &pr.stats;
    let pct = if valid == 0 {
        100.0
    } else {
        100.0 * ok as f64 / valid as f64
    };
    let mut text = String::new();
    writeln!(text, "grid {}x{}", grid.height, grid.width)?;
    writeln!(
        text,
        "points read {} non-finite dropped {}",
        load.read, load.dropped_non_finite
    )?;
    writeln!(
        text,
        "landed {} occluded {} zero-range {} outside-fov {}",
        s.landed, s.occluded, s.dropped_zero_range, s.dropped_outside
    )?;
    writeln!(text, "valid pixels {valid} of {}", grid.pixels())?;
    writeln!(
        text,
        "round-trip {pct:.2}% ({ok}/{valid}), mask agreement {}",
        if agree { "ok" } else { "FAILED" }
    )?;
    write_file(&out.join("projection.txt"), &text)?;
    print!("{text}");
    println!("wrote {}", dump.display());
    if ok != valid || !agree {
        bail!(CheckFailed("projection round trip failed".into()));
    }
    Ok(())
}

// ------------------------------------------------------------------ overfit

fn overfit_typed<T: Real>(cfg: &RunConfig, out: &Path) -> Result<OverfitReport> {
    let grid = cfg.grid.spec()?;
    let fov = cfg.grid.preset()?.sensor_fov();
    let pairs = synthetic_pairs(&cfg.overfit, &grid, fov, cfg.seed)?;
    let mut trainer = Trainer::<T>::new(&cfg.model, cfg.loss.clone(), cfg.optim.clone(), cfg.seed)?;
    log::info!(
        "training {} parameters on {} pairs for up to {} steps",
        trainer.store.num_scalars(),
        pairs.len(),
        cfg.overfit.steps
    );
    let t0 = Instant::now();
    let report = overfit_run(&mut trainer, &pairs, &cfg.overfit, |step, st| {
        if step % 50 == 0 {
            log::info!(
                "step {step} loss {:.4} ({:.1} s)",
                st.total,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    create_dir(out)?;
    trainer.store.save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml()?)?;
    write_file(&out.join("report.txt"), &report.render())?;
    Ok(report)
}

pub fn overfit(cfg: &RunConfig, out: &Path) -> Result<()> {
    let report = match cfg.precision {
        Precision::F32 => overfit_typed::<f32>(cfg, out)?,
        Precision::F64 => overfit_typed::<f64>(cfg, out)?,
    };
    let first = report
        .history
        .first()
        .map(|h| h.1.total)
        .unwrap_or(f64::NAN);
    let last = report.history.last().map(|h| h.1.total).unwrap_or(f64::NAN);
    println!(
        "steps {} (skipped {}), loss {first:.4} -> {last:.4}",
        report.steps_run, report.skipped
    );
    println!("layer mean_RRE_deg mean_RTE_m");
    for l in (0..4).rev() {
        let (r, t) = report.layer_mean(l);
        println!("{l} {r:.4} {t:.4}");
    }
    let o = &cfg.overfit;
    if o.target_rre_deg > 0.0 {
        let met = report
            .errors
            .iter()
            .all(|e| e[0].0 < o.target_rre_deg && e[0].1 < o.target_rte_m);
        println!(
            "final-layer targets ({}°, {} m) {}",
            o.target_rre_deg,
            o.target_rte_m,
            if met { "met" } else { "not met" }
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

// ------------------------------------------------------------------ checkpoints

/// Config and weights file of a checkpoint given as a directory or as the
/// weights file itself (the config is read from the same directory).
pub fn checkpoint_paths(path: &Path) -> Result<(PathBuf, PathBuf)> {
    let (dir, ckpt) = if path.is_dir() {
        (path.to_path_buf(), path.join(CHECKPOINT_FILE))
    } else {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    if !ckpt.is_file() {
        bail!("checkpoint {} not found", ckpt.display());
    }
    Ok((dir.join(CONFIG_FILE), ckpt))
}

fn load_trainer<T: Real>(cfg: &RunConfig, ckpt: &Path) -> Result<Trainer<T>> {
    let mut t = Trainer::<T>::new(&cfg.model, cfg.loss.clone(), cfg.optim.clone(), cfg.seed)?;
    t.store.load_into(ckpt)?;
    Ok(t)
}

// ------------------------------------------------------------------ register

fn register_typed<T: Real>(cfg: &RunConfig, ckpt: &Path, src: &Path, tgt: &Path) -> Result<Pose> {
    let grid = cfg.grid.spec()?;
    let trainer = load_trainer::<T>(cfg, ckpt)?;
    let (s, _) = read_kitti_bin(src)?;
    let (t, _) = read_kitti_bin(tgt)?;
    let src = Frame::project(&s, &grid)?;
    let tgt = Frame::project(&t, &grid)?;
    let poses = trainer.model.predict(&trainer.store, &src, &tgt)?;
    Ok(*poses.last().unwrap())
}

pub fn register(cfg: &RunConfig, ckpt: &Path, src: &Path, tgt: &Path) -> Result<Pose> {
    let pose = match cfg.precision {
        Precision::F32 => register_typed::<f32>(cfg, ckpt, src, tgt)?,
        Precision::F64 => register_typed::<f64>(cfg, ckpt, src, tgt)?,
    };
    let q = pose.q();
    println!("quaternion {:.9} {:.9} {:.9} {:.9}", q[0], q[1], q[2], q[3]);
    println!(
        "translation {:.9} {:.9} {:.9}",
        pose.t[0], pose.t[1], pose.t[2]
    );
    println!("kitti {}", format_pose_line(&pose));
    Ok(pose)
}

// ------------------------------------------------------------------ eval

/// One line of a pair list: `pair_id source.bin target.bin` followed by the
/// 12 values of the ground-truth `[R | t]` (source into target frame).
#[derive(Clone, Debug, PartialEq)]
pub struct PairEntry {
    pub id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub gt: Pose,
}

/// Reads a pair list; relative paths resolve against the list's directory.
pub fn read_pair_list(path: &Path) -> Result<Vec<PairEntry>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 15 {
            bail!(
                "{}:{}: expected `id src tgt` and 12 pose values, got {} fields",
                path.display(),
                i + 1,
                f.len()
            );
        }
        let gt = parse_pose_line(&f[3..].join(" "))
            .map_err(|m| anyhow::anyhow!("{}:{}: {m}", path.display(), i + 1))?;
        out.push(PairEntry {
            id: f[0].to_string(),
            source: base.join(f[1]),
            target: base.join(f[2]),
            gt,
        });
    }
    if out.is_empty() {
        bail!("{}: pair list is empty", path.display());
    }
    Ok(out)
}

fn evaluate_typed<T: Real>(
    cfg: &RunConfig,
    ckpt: &Path,
    pairs: &[PairEntry],
) -> Result<Vec<EvalRecord>> {
    let grid = cfg.grid.spec()?;
    let trainer = load_trainer::<T>(cfg, ckpt)?;
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (s, _) = read_kitti_bin(&p.source)?;
        let (t, _) = read_kitti_bin(&p.target)?;
        let t0 = Instant::now();
        let src = Frame::project(&s, &grid)?;
        let tgt = Frame::project(&t, &grid)?;
        let pose = *trainer
            .model
            .predict(&trainer.store, &src, &tgt)?
            .last()
            .unwrap();
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        records.push(EvalRecord {
            pair_id: p.id.clone(),
            rre_deg: rre_deg(&pose, &p.gt),
            rte_m: rte_m(&pose, &p.gt),
            time_ms: ms,
            n_points: s.len(),
        });
    }
    Ok(records)
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, list: &Path, out: &Path) -> Result<Vec<EvalRecord>> {
    let pairs = read_pair_list(list)?;
    let records = match cfg.precision {
        Precision::F32 => evaluate_typed::<f32>(cfg, ckpt, &pairs)?,
        Precision::F64 => evaluate_typed::<f64>(cfg, ckpt, &pairs)?,
    };
    let (a, b) = (cfg.eval.rre_thresh_deg, cfg.eval.rte_thresh_m);
    let summary = registration_recall(&records, a, b)?;
    let nt = normalized_time(&records)?;
    let (rre_grid, rte_grid) = default_curve_grid();
    let curve = recall_curve(&records, &rre_grid, &rte_grid)?;
    create_dir(out)?;
    let results = format_results(&records, &summary, nt);
    write_file(&out.join("results.txt"), &results)?;
    let curve_text = format!("# thresholds RRE_deg {a} RTE_m {b}\n{}", curve.render());
    write_file(&out.join("recall_curve.txt"), &curve_text)?;
    print!("{results}");
    println!("wrote {}", out.display());
    Ok(records)
}

// ------------------------------------------------------------------ synth

/// Writes synthetic scan pairs and a pair list for `eval`.
pub fn synth(cfg: &RunConfig, out: &Path, count: usize, identical: bool) -> Result<PathBuf> {
    let fov = cfg.grid.preset()?.sensor_fov();
    let o = &cfg.overfit;
    create_dir(out)?;
    let mut list =
        String::from("# pair_id source target r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2\n");
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let p = synth_pair(seed, o.points, o.extent, o.max_rot_deg, o.max_trans_m, fov);
        let id = format!("synth-{seed}");
        let (src, tgt) = (format!("{id}_src.bin"), format!("{id}_tgt.bin"));
        write_kitti_bin(&out.join(&src), &p.source)?;
        let (target, gt) = if identical {
            (&p.source, Pose::identity())
        } else {
            (&p.target, p.gt)
        };
        write_kitti_bin(&out.join(&tgt), target)?;
        writeln!(list, "{id} {src} {tgt} {}", format_pose_line(&gt))?;
    }
    let path = out.join("pairs.txt");
    write_file(&path, &list)?;
    println!("wrote {count} pairs to {}", path.display());
    Ok(path)
}

// ------------------------------------------------------------------ ablate

pub const VARIANTS: [&str; 4] = ["full", "no-mask", "no-cross-attention", "no-all-to-all"];

pub fn variant_config(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let mut m = base.clone();
    match name {
        "full" => {}
        "no-mask" => m.use_mask = false,
        "no-cross-attention" => m.cross_attention = false,
        "no-all-to-all" => m.all_to_all = false,
        other => bail!(UsageError(format!(
            "unknown variant `{other}` (expected one of {})",
            VARIANTS.join(", ")
        ))),
    }
    Ok(m)
}

struct AblationRow {
    name: String,
    steps: u64,
    final_loss: f64,
    rre: f64,
    rte: f64,
    recall: f64,
    poses: Vec<Pose>,
}

fn ablate_typed<T: Real>(cfg: &RunConfig, name: &str) -> Result<AblationRow> {
    let model = variant_config(&cfg.model, name)?;
    let grid = cfg.grid.spec()?;
    let fov = cfg.grid.preset()?.sensor_fov();
    let pairs = synthetic_pairs(&cfg.overfit, &grid, fov, cfg.seed)?;
    let mut trainer = Trainer::<T>::new(&model, cfg.loss.clone(), cfg.optim.clone(), cfg.seed)?;
    let report = overfit_run(&mut trainer, &pairs, &cfg.overfit, |_, _| {})?;
    let mut records = Vec::new();
    let mut poses = Vec::new();
    for p in &pairs {
        let pose = *trainer
            .model
            .predict(&trainer.store, &p.source, &p.target)?
            .last()
            .unwrap();
        records.push(EvalRecord {
            pair_id: p.id.clone(),
            rre_deg: rre_deg(&pose, &p.gt),
            rte_m: rte_m(&pose, &p.gt),
            time_ms: 0.0,
            n_points: cfg.overfit.points,
        });
        poses.push(pose);
    }
    let summary = registration_recall(&records, cfg.eval.rre_thresh_deg, cfg.eval.rte_thresh_m)?;
    Ok(AblationRow {
        name: name.to_string(),
        steps: report.steps_run,
        final_loss: report.history.last().map(|h| h.1.total).unwrap_or(f64::NAN),
        rre: summary.rre_all.mean,
        rte: summary.rte_all.mean,
        recall: summary.recall,
        poses,
    })
}

pub fn ablate(cfg: &RunConfig, variants: &[String], out: &Path) -> Result<String> {
    if variants.is_empty() {
        bail!(UsageError("no variants given".into()));
    }
    for v in variants {
        variant_config(&cfg.model, v)?;
    }
    let mut rows = Vec::new();
    for v in variants {
        log::info!("variant {v}");
        rows.push(match cfg.precision {
            Precision::F32 => ablate_typed::<f32>(cfg, v)?,
            Precision::F64 => ablate_typed::<f64>(cfg, v)?,
        });
    }
    let reference = rows
        .iter()
        .find(|r| r.name == "full")
        .map(|r| r.poses.clone());
    let mut text = format!(
        "# thresholds RRE_deg {} RTE_m {}; errors are means over training pairs\n",
        cfg.eval.rre_thresh_deg, cfg.eval.rte_thresh_m
    );
    text.push_str(
        "# variant steps final_loss mean_RRE_deg mean_RTE_m recall max_pose_change_vs_full_deg\n",
    );
    for r in &rows {
        let change = match &reference {
            Some(full) => format!(
                "{:.6}",
                r.poses
                    .iter()
                    .zip(full)
                    .map(|(a, b)| rre_deg(a, b))
                    .fold(0.0, f64::max)
            ),
            None => "-".into(),
        };
        writeln!(
            text,
            "{} {} {:.6} {:.6} {:.6} {:.4} {change}",
            r.name, r.steps, r.final_loss, r.rre, r.rte, r.recall
        )?;
    }
    create_dir(out)?;
    write_file(&out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(text)
}

// ------------------------------------------------------------------ bench

pub struct BenchRow {
    pub width: usize,
    pub tokens: usize,
    pub points: usize,
    pub encoder_ms: f64,
    pub forward_ms: f64,
}

fn median_ms(mut f: impl FnMut() -> Result<()>, reps: usize) -> Result<f64> {
    let mut v = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        v.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    v.sort_by(f64::total_cmp);
    Ok(v[v.len() / 2])
}

fn bench_typed<T: Real>(
    cfg: &RunConfig,
    height: usize,
    width: usize,
    reps: usize,
) -> Result<BenchRow> {
    let fov = cfg.grid.preset()?.sensor_fov();
    let grid = GridSpec::from_fov(height, width, fov.elev_min_deg, fov.elev_max_deg)?;
    let points = height * width / 2;
    let cloud = synth_scene_with_fov(cfg.seed, points, cfg.overfit.extent, fov);
    let frame = Frame::project(&cloud, &grid)?;
    let (model, store) = scanreg::model::RegistrationModel::init::<T>(&cfg.model, cfg.seed)?;
    let encoder: &Encoder = &model.encoder;
    // One untimed pass warms allocations.
    model.encode(&mut Session::new(&store), &frame)?;
    let encoder_ms = median_ms(
        || {
            let mut s = Session::new(&store);
            encoder.forward(&mut s, &frame.image, &frame.mask)?;
            Ok(())
        },
        reps,
    )?;
    let forward_ms = median_ms(
        || {
            model.predict(&store, &frame, &frame)?;
            Ok(())
        },
        reps,
    )?;
    let [pv, pu] = cfg.model.encoder.patch;
    Ok(BenchRow {
        width,
        tokens: (height / pv) * (width / pu),
        points,
        encoder_ms,
        forward_ms,
    })
}

pub fn bench(
    cfg: &RunConfig,
    height: usize,
    widths: &[usize],
    reps: usize,
    check: bool,
    out: &Path,
) -> Result<Vec<BenchRow>> {
    if widths.is_empty() || reps == 0 {
        bail!(UsageError(
            "need at least one size and one repetition".into()
        ));
    }
    let mut rows = Vec::new();
    for &w in widths {
        rows.push(match cfg.precision {
            Precision::F32 => bench_typed::<f32>(cfg, height, w, reps)?,
            Precision::F64 => bench_typed::<f64>(cfg, height, w, reps)?,
        });
    }
    let mut text = format!("# grid height {height}, median of {reps} runs\n");
    text.push_str("# width stage0_tokens points encoder_ms forward_ms forward_ms_per_kpt encoder_ratio_vs_prev\n");
    let mut failures = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let ratio = if i == 0 {
            "-".to_string()
        } else {
            let prev = &rows[i - 1];
            let ratio = r.encoder_ms / prev.encoder_ms;
            let growth = r.tokens as f64 / prev.tokens as f64;
            // Linear cost: time may grow at most 1.25x faster than tokens.
            if check && ratio > 1.25 * growth {
                failures.push(format!(
                    "{} -> {}: {ratio:.2}x for {growth:.2}x tokens",
                    prev.width, r.width
                ));
            }
            format!("{ratio:.3}")
        };
        writeln!(
            text,
            "{} {} {} {:.3} {:.3} {:.4} {ratio}",
            r.width,
            r.tokens,
            r.points,
            r.encoder_ms,
            r.forward_ms,
            r.forward_ms / (r.points as f64 / 1000.0)
        )?;
    }
    create_dir(out)?;
    write_file(&out.join("bench.txt"), &text)?;
    print!("{text}");
    if !failures.is_empty() {
        bail!(CheckFailed(format!(
            "encoder scaling above linear: {}",
            failures.join("; ")
        )));
    }
    Ok(rows)
}
