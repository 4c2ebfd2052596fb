//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symseg::continual::{run_continual, run_offline, StepPlan};
use symseg::dataset::{build_schedule, generate_frames, ClassSchedule, Preset, SceneSpec, NUM_CLASSES, TABLE_ORDER};
use symseg::diffcore::{DiffTensor, Graph};
use symseg::geometry::{project, ClassId, PointCloud, ProjectedFrame, ProjectionConfig};
use symseg::losses::{inpaint_labels, kd_composite_value, KdVariant};
use symseg::metrics::{modality_table, ConfusionMatrix, ModalityTable};
use symseg::network::{fuse, FusionConfig, ModalityAvailability, Model, ModelConfig, PredictionPair};
use symseg_cli::commands::run_gradcheck;
use symseg_cli::config::RunConfig;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Criterion {
    id: usize,
    title: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> DiffTensor {
    let n = h * w;
    let mut v: Vec<f64> = (0..c * n).map(|_| rng.gen_range(1e-3..1.0)).collect();
    for p in 0..n {
        let s: f64 = (0..c).map(|k| v[k * n + p]).sum();
        (0..c).for_each(|k| v[k * n + p] /= s);
    }
    DiffTensor::new(vec![c, h, w], v).unwrap()
}

fn random_pair(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> PredictionPair {
    PredictionPair {
        color: random_probs(rng, c, h, w),
        lidar: random_probs(rng, c, h, w),
    }
}

fn kd_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let old = rng.gen_range(1..6);
        let new = old + rng.gen_range(1..4);
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let teacher = random_pair(&mut rng, old, h, w);
        let student = random_pair(&mut rng, new, h, w);
        let v = |k| kd_composite_value(k, &teacher, &student).unwrap();
        let gap = (v(KdVariant::Cross) - (v(KdVariant::Img) + v(KdVariant::Pcd) - v(KdVariant::Same))).abs();
        worst = worst.max(gap);
    }
    outcome(
        worst < 1e-9,
        format!("max |cross - (img + pcd - same)| = {worst:.2e} over 1000 pairs"),
    )
}

fn gradients() -> Outcome {
    match run_gradcheck(&RunConfig::default()) {
        Ok(out) => {
            let worst = out.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            let names: Vec<&str> = out.checks.iter().map(|c| c.name.as_str()).collect();
            outcome(
                out.passed && worst < 1e-4,
                format!("max relative error {worst:.2e} at eps 1e-5 over {}", names.join(", ")),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn fusion_boundaries() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let a = random_probs(&mut rng, 4, 5, 6);
    let b = random_probs(&mut rng, 4, 5, 6);
    let (ca, cb) = (g.leaf(&a), g.leaf(&b));
    let one = fuse(&mut g, ca, cb, 1.0).unwrap();
    let zero = fuse(&mut g, ca, cb, 0.0).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let exact = bits(g.value(one)) == bits(a.values()) && bits(g.value(zero)) == bits(b.values());

    let frame = generate_frames(
        &SceneSpec {
            seed: 11,
            ..SceneSpec::default()
        },
        1,
    )
    .unwrap()
    .remove(0);
    let mut invariant = true;
    let mut settings = 0;
    for (write_back, learnable) in [(true, false), (false, false), (true, true)] {
        let fusion = FusionConfig {
            r: 0.5,
            write_back,
            learnable,
        };
        let model = Model::new(ModelConfig::new([8, 16, 32, 64], vec![1, 2, 3, 4], fusion, 5)).unwrap();
        for trial in 0..3 {
            let scale = [1.0, 1e3, 1e-3][trial];
            let mut no_lidar = frame.clone();
            no_lidar
                .lidar
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-50.0..50.0) * scale);
            let mut no_color = frame.clone();
            no_color
                .color
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-5.0..5.0) * scale);
            let c = ModalityAvailability::COLOR_ONLY;
            let l = ModalityAvailability::LIDAR_ONLY;
            invariant &= model.predict(&frame, c).unwrap() == model.predict(&no_lidar, c).unwrap();
            invariant &= model.predict(&frame, l).unwrap() == model.predict(&no_color, l).unwrap();
            settings += 2;
        }
    }
    outcome(
        exact && invariant,
        format!("bit-exact at r in {{0, 1}}: {exact}; unchanged under {settings} perturbations of the missing input: {invariant}"),
    )
}

fn projection_replay() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut worst_d = 0.0f64;
    let mut occupied = 0;
    for _ in 0..100 {
        let cfg = ProjectionConfig {
            fx: rng.gen_range(8.0..24.0),
            fy: rng.gen_range(8.0..24.0),
            cx: rng.gen_range(4.0..12.0),
            cy: rng.gen_range(3.0..9.0),
            height: rng.gen_range(6..14),
            width: rng.gen_range(8..18),
            near: 0.5,
        };
        let count = rng.gen_range(1..300);
        let mut points: Vec<[f64; 3]> = Vec::with_capacity(count);
        for _ in 0..count {
            if !points.is_empty() && rng.gen_bool(0.1) {
                let dup = points[rng.gen_range(0..points.len())];
                points.push(dup);
            } else {
                points.push([
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-6.0..6.0),
                    rng.gen_range(-2.0..30.0),
                ]);
            }
        }
        let refl: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<ClassId> = (0..count).map(|_| rng.gen_range(1..20)).collect();
        let cloud = PointCloud::new(points.clone(), refl.clone(), Some(labels.clone())).unwrap();
        let color = DiffTensor::zeros(&[3, cfg.height, cfg.width]);
        let frame = project(&cloud, &cfg, &color).unwrap();

        let n = cfg.height * cfg.width;
        let mut winner: Vec<Option<(f64, usize)>> = vec![None; n];
        for (i, p) in points.iter().enumerate() {
            if p[2] < cfg.near {
                continue;
            }
            let col = (cfg.fx * p[0] / p[2] + cfg.cx).floor();
            let row = (cfg.fy * p[1] / p[2] + cfg.cy).floor();
            if col < 0.0 || row < 0.0 || col >= cfg.width as f64 || row >= cfg.height as f64 {
                continue;
            }
            let pix = row as usize * cfg.width + col as usize;
            let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if winner[pix].is_none_or(|(bd, _)| d < bd) {
                winner[pix] = Some((d, i));
            }
        }
        let lidar = frame.lidar.values();
        for pix in 0..n {
            let ch = |k: usize| lidar[k * n + pix];
            match winner[pix] {
                Some((d, i)) => {
                    occupied += 1;
                    let p = points[i];
                    worst_d = worst_d.max((ch(0) - (ch(1).powi(2) + ch(2).powi(2) + ch(3).powi(2)).sqrt()).abs());
                    let same = frame.valid_mask[pix]
                        && [ch(0), ch(1), ch(2), ch(3), ch(4)] == [d, p[0], p[1], p[2], refl[i]]
                        && frame.labels[pix] == labels[i];
                    mismatches += usize::from(!same);
                }
                None => {
                    let empty = !frame.valid_mask[pix] && frame.labels[pix] == 0 && (0..5).all(|k| ch(k) == 0.0);
                    mismatches += usize::from(!empty);
                }
            }
        }
    }
    outcome(
        mismatches == 0 && worst_d < 1e-6,
        format!(
            "100 clouds, {occupied} occupied pixels, {mismatches} oracle mismatches, max |d - |p|| = {worst_d:.1e}"
        ),
    )
}

fn schedules() -> Outcome {
    let expected = [1, 2, 3, 9, 14];
    let mut ok = true;
    let mut found = Vec::new();
    for (name, &want) in Preset::BENCHMARK.iter().zip(&expected) {
        let s: ClassSchedule = build_schedule(&name.parse().unwrap(), NUM_CLASSES, &TABLE_ORDER).unwrap();
        let mut all: Vec<ClassId> = s.steps().concat();
        all.sort_unstable();
        ok &= s.step_count() == want
            && s.step_sizes().iter().sum::<usize>() == NUM_CLASSES
            && all == (1..=NUM_CLASSES as ClassId).collect::<Vec<_>>();
        found.push(format!("{name}:{}", s.step_count()));
    }
    outcome(
        ok,
        format!(
            "step counts {}, every split covers the 19 classes once",
            found.join(" ")
        ),
    )
}

fn inpainting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    let mut filled = 0;
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let n = h * w;
        let c = rng.gen_range(1..6);
        let mut classes: Vec<ClassId> = (1..=8).collect();
        for i in (1..classes.len()).rev() {
            classes.swap(i, rng.gen_range(0..=i));
        }
        classes.truncate(c);
        let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let labels: Vec<ClassId> = valid
            .iter()
            .map(|&v| {
                if v && rng.gen_bool(0.5) {
                    rng.gen_range(1..10)
                } else {
                    0
                }
            })
            .collect();
        let masked = ProjectedFrame {
            color: DiffTensor::zeros(&[3, h, w]),
            lidar: DiffTensor::zeros(&[5, h, w]),
            labels: labels.clone(),
            valid_mask: valid.clone(),
        };
        let teacher = if rng.gen_bool(0.2) {
            let mut t = random_pair(&mut rng, c, h, w);
            t.lidar = t.color.clone();
            t
        } else {
            random_pair(&mut rng, c, h, w)
        };
        let out = inpaint_labels(&masked, &teacher, &classes).unwrap();
        for p in 0..n {
            let expected = if labels[p] != 0 || !valid[p] {
                labels[p]
            } else {
                let mut avg = Vec::with_capacity(c);
                for k in 0..c {
                    avg.push(0.5 * (teacher.color.values()[k * n + p] + teacher.lidar.values()[k * n + p]));
                }
                let mut best = 0;
                for k in 1..c {
                    if avg[k] > avg[best] {
                        best = k;
                    }
                }
                filled += 1;
                classes[best]
            };
            violations += usize::from(out.labels[p] != expected);
        }
        violations += usize::from(out.valid_mask != valid || out.lidar != masked.lidar || out.color != masked.color);
    }
    outcome(
        violations == 0,
        format!("200 frames, {filled} pixels filled, {violations} deviations from the oracle"),
    )
}

fn desk_data() -> (Vec<ProjectedFrame>, Vec<ProjectedFrame>) {
    let train = generate_frames(
        &SceneSpec {
            seed: 1000,
            ..SceneSpec::default()
        },
        64,
    )
    .unwrap();
    let eval = generate_frames(
        &SceneSpec {
            seed: 5000,
            ..SceneSpec::default()
        },
        16,
    )
    .unwrap();
    (train, eval)
}

fn table_line(t: &ModalityTable) -> String {
    t.rows
        .iter()
        .map(|r| format!("{} {:.3}/{:.3}", r.input.name(), r.color_miou, r.lidar_miou))
        .collect::<Vec<_>>()
        .join(", ")
}

fn fail_safe() -> Outcome {
    let (train, eval) = desk_data();
    let schedule = build_schedule(&Preset::Offline, 4, &[1, 2, 3, 4]).unwrap();
    let plan = StepPlan {
        iterations: 1000,
        warmup: 100,
        ..StepPlan::new(schedule, 7)
    };
    let untrained = Model::new(plan.model_config(vec![1, 2, 3, 4])).unwrap();
    let base = modality_table(&untrained, &eval).unwrap();
    let (model, _) = match run_offline(&plan, &train, &eval) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let t = modality_table(&model, &eval).unwrap();
    let both = t.row(ModalityAvailability::BOTH).unwrap();
    let finite = t
        .rows
        .iter()
        .all(|r| r.color_miou.is_finite() && r.lidar_miou.is_finite());
    let mut dominant = true;
    let mut above = true;
    for single in [ModalityAvailability::COLOR_ONLY, ModalityAvailability::LIDAR_ONLY] {
        let r = t.row(single).unwrap();
        let b = base.row(single).unwrap();
        dominant &= both.color_miou >= r.color_miou && both.lidar_miou >= r.lidar_miou;
        above &= r.color_miou > 1.5 * b.color_miou && r.lidar_miou > 1.5 * b.lidar_miou;
    }
    outcome(
        finite && dominant && above,
        format!(
            "(a) finite {finite} (b) both >= single {dominant} (c) single > 1.5x untrained {above}; trained [{}], untrained [{}]",
            table_line(&t),
            table_line(&base)
        ),
    )
}

fn forgetting() -> Outcome {
    let (train, eval) = desk_data();
    let schedule = build_schedule(&"2-1-1".parse().unwrap(), 4, &[1, 2, 3, 4]).unwrap();
    let base = StepPlan::new(schedule, 7);
    let mut plans = vec![StepPlan {
        kd_variant: None,
        inpainting: false,
        ..base.clone()
    }];
    plans.extend(KdVariant::ALL.map(|v| StepPlan {
        kd_variant: Some(v),
        inpainting: true,
        ..base.clone()
    }));
    let scores: Vec<Result<(f64, f64), String>> = thread::scope(|s| {
        let handles: Vec<_> = plans
            .iter()
            .map(|p| {
                let (train, eval) = (&train, &eval);
                s.spawn(move || {
                    let out = run_continual(p, train, eval).map_err(|e| e.to_string())?;
                    let (c, l) = out.report.base_class_miou();
                    Ok((c.unwrap_or(0.0), l.unwrap_or(0.0)))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut parts = Vec::new();
    let mut scored = Vec::new();
    for (p, s) in plans.iter().zip(&scores) {
        let name = p.kd_variant.map_or("none", |v| v.name());
        match s {
            Ok((c, l)) => {
                parts.push(format!("{name} {c:.3}/{l:.3}"));
                scored.push((*c, *l));
            }
            Err(e) => return outcome(false, format!("{name}: {e}")),
        }
    }
    let (nc, nl) = scored[0];
    let ok = scored[1..].iter().all(|&(c, l)| c > nc && l > nl);
    outcome(ok, format!("final base-class mIoU rgb/lidar: {}", parts.join(", ")))
}

fn metrics_oracle() -> Outcome {
    let r = ConfusionMatrix::from_counts(&[1, 2], vec![5, 1, 2, 4]).unwrap().iou();
    let (a, b, m) = (r.get(1).unwrap(), r.get(2).unwrap(), r.miou.unwrap());
    let example = (a - 0.625).abs() < 1e-4 && (b - 0.5714).abs() < 1e-4 && (m - 0.5982).abs() < 1e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let classes: Vec<ClassId> = vec![1, 2, 3];
    let mut exact = true;
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let n = h * w;
        let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        let labels: Vec<ClassId> = valid.iter().map(|&v| if v { rng.gen_range(0..4) } else { 0 }).collect();
        let pred: Vec<ClassId> = (0..n).map(|_| rng.gen_range(1..4)).collect();
        let frame = ProjectedFrame {
            color: DiffTensor::zeros(&[3, h, w]),
            lidar: DiffTensor::zeros(&[5, h, w]),
            labels: labels.clone(),
            valid_mask: valid.clone(),
        };
        let mut cm = ConfusionMatrix::new(&classes).unwrap();
        cm.accumulate(&pred, &frame).unwrap();
        let mut oracle: HashMap<(ClassId, ClassId), u64> = HashMap::new();
        for p in 0..n {
            if valid[p] && labels[p] != 0 {
                *oracle.entry((labels[p], pred[p])).or_default() += 1;
            }
        }
        for &t in &classes {
            for &q in &classes {
                exact &= cm.count(t, q) == oracle.get(&(t, q)).copied().unwrap_or(0);
            }
        }
    }
    outcome(
        example && exact,
        format!("IoU {a:.4} / {b:.4}, mIoU {m:.4}; 50 random frames recounted exactly: {exact}"),
    )
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv" || e == "json" || e == "ckpt") {
                found.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    found.sort();
    found
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        "seed = 5\n[dataset]\ntrain_frames = 4\neval_frames = 2\nheight = 16\nwidth = 16\ndensity = 128\n\
         [model]\nwidths = [4, 4, 8, 8]\n[training]\niterations = 15\nwarmup = 2\n[continual]\npreset = \"2-1\"\nkd = \"cross\"\n",
    )
    .unwrap();
    let subcommands: [&[&str]; 6] = [
        &["generate-data"],
        &["train"],
        &["evaluate"],
        &["evaluate", "--modality", "lidar"],
        &["gradcheck"],
        &["report"],
    ];
    let runs: Vec<Vec<(String, Vec<u8>)>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            for args in subcommands {
                let status = Command::new(env!("CARGO_BIN_EXE_symseg"))
                    .args(args)
                    .arg("--config")
                    .arg(&config)
                    .arg("--out")
                    .arg(&out)
                    .env("RUST_LOG", "warn")
                    .output()
                    .unwrap();
                assert!(
                    status.status.success(),
                    "{args:?}: {}",
                    String::from_utf8_lossy(&status.stderr)
                );
            }
            outputs(&out)
        })
        .collect();
    let same = runs[0] == runs[1];
    outcome(
        same && !runs[0].is_empty(),
        format!(
            "{} CSV/JSON/checkpoint files from 6 subcommand runs, identical across two runs: {same}",
            runs[0].len()
        ),
    )
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            title: "KD algebra",
            budget: Duration::from_secs(10),
            run: kd_identity,
        },
        Criterion {
            id: 2,
            title: "gradient correctness",
            budget: Duration::from_secs(300),
            run: gradients,
        },
        Criterion {
            id: 3,
            title: "fusion boundaries",
            budget: Duration::from_secs(60),
            run: fusion_boundaries,
        },
        Criterion {
            id: 4,
            title: "projection consistency",
            budget: Duration::from_secs(60),
            run: projection_replay,
        },
        Criterion {
            id: 5,
            title: "schedule fidelity",
            budget: Duration::from_secs(1),
            run: schedules,
        },
        Criterion {
            id: 6,
            title: "inpainting contract",
            budget: Duration::from_secs(60),
            run: inpainting,
        },
        Criterion {
            id: 7,
            title: "fail-safe protocol",
            budget: Duration::from_secs(900),
            run: fail_safe,
        },
        Criterion {
            id: 8,
            title: "forgetting mitigation",
            budget: Duration::from_secs(1800),
            run: forgetting,
        },
        Criterion {
            id: 9,
            title: "metrics oracle",
            budget: Duration::from_secs(60),
            run: metrics_oracle,
        },
        Criterion {
            id: 10,
            title: "determinism",
            budget: Duration::from_secs(600),
            run: determinism,
        },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| outcome(false, "panicked"));
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = result.passed && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {}: {} ({:.1}s of {}s budget) {}",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.title,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
