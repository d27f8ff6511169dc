//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! if any criterion fails. Built with `harness = false` so the lines always
//! show up in `cargo test` output.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use impulse_core::baseline::{DenseModel, DenseTrainer};
use impulse_core::experiment::{
    generate_dataset, gradcheck_suite, run_ablation, run_bench, train_implicit, InputSet, Split, TrainSettings,
};
use impulse_core::impulse::{EncoderConfig, ImpulseModel, ModelConfig, DEFAULT_POINTS};
use impulse_core::metrics::{dice_per_class, evaluate};
use impulse_core::phantom::{validate_phantom, Phantom, PhantomConfig};
use impulse_core::volume::{
    uniform_grid_coords, voxel_to_norm, CoordBatch, LabelGrid, NormCoord, TrilinearStencil, Volume,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_extent(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [0; 3].map(|_| rng.random_range(lo..=hi))
}

fn random_volume(rng: &mut ChaCha8Rng) -> Volume {
    let c = rng.random_range(1..=3);
    let [d, h, w] = random_extent(rng, 2, 7);
    Volume::from_f32([c, d, h, w], (0..c * d * h * w).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng) -> NormCoord {
    NormCoord::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))
}

/// Continuous voxel position of a normalized coordinate, computed directly
/// from the align-corners definition.
fn oracle_voxel(p: &NormCoord, [d, h, w]: [usize; 3]) -> [f64; 3] {
    let f = |v: f64, n: usize| (v + 1.0) / 2.0 * (n - 1) as f64;
    [f(p.z, d), f(p.y, h), f(p.x, w)]
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let entries = gradcheck_suite(None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name).collect();
    check(
        failed.is_empty() && secs < 60.0,
        format!("{} checks, worst rel error {worst:.2e}, {secs:.1}s, failed {failed:?}", entries.len()),
    )
}

fn c2_interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 1000;
    let mut bad = [0usize; 4];
    for _ in 0..n {
        // Node exactness.
        let v = random_volume(&mut rng);
        let e = v.extent();
        let idx = [rng.random_range(0..e[0]), rng.random_range(0..e[1]), rng.random_range(0..e[2])];
        let out = v.trilinear_sample(&CoordBatch::from_coords(vec![voxel_to_norm(idx, e)]));
        let data = v.to_f32();
        let vox = e.iter().product::<usize>();
        let flat = (idx[0] * e[1] + idx[1]) * e[2] + idx[2];
        if (0..v.channels()).any(|c| out.data()[c] != data[c * vox + flat]) {
            bad[0] += 1;
        }

        // Boundedness by the 8 surrounding nodes.
        let p = random_point(&mut rng);
        let out = v.trilinear_sample(&CoordBatch::from_coords(vec![p]));
        let pos = oracle_voxel(&p, e);
        let lo: Vec<usize> = (0..3).map(|a| (pos[a].floor() as usize).min(e[a] - 2)).collect();
        for c in 0..v.channels() {
            let mut corners = Vec::new();
            for dd in 0..2 {
                for hh in 0..2 {
                    for ww in 0..2 {
                        let f = ((lo[0] + dd) * e[1] + lo[1] + hh) * e[2] + lo[2] + ww;
                        corners.push(data[c * vox + f]);
                    }
                }
            }
            let (mn, mx) = corners.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            let s = out.data()[c];
            if s < mn - 1e-5 || s > mx + 1e-5 {
                bad[1] += 1;
            }
        }

        // Linear precision on an affine field, in double precision.
        let coef: [f64; 4] = [0; 4].map(|_| rng.random_range(-3.0..3.0));
        let e = random_extent(&mut rng, 2, 9);
        let mut field = Vec::with_capacity(e.iter().product());
        for d in 0..e[0] {
            for h in 0..e[1] {
                for w in 0..e[2] {
                    field.push(coef[0] + coef[1] * d as f64 + coef[2] * h as f64 + coef[3] * w as f64);
                }
            }
        }
        let p = random_point(&mut rng);
        let got = TrilinearStencil::<f64>::new(e, &[p]).sample(&field, 1)[0];
        let q = oracle_voxel(&p, e);
        let want = coef[0] + coef[1] * q[0] + coef[2] * q[1] + coef[3] * q[2];
        if (got - want).abs() > 1e-9 * (1.0 + want.abs()) {
            bad[2] += 1;
        }

        // Round trip through the node lattice.
        let v = random_volume(&mut rng);
        let rows = v.trilinear_sample(&uniform_grid_coords(v.extent()).unwrap());
        let (c, vox) = (v.channels(), v.extent().iter().product::<usize>());
        let data = v.to_f32();
        if (0..vox).any(|i| (0..c).any(|ch| rows.data()[i * c + ch] != data[ch * vox + i])) {
            bad[3] += 1;
        }
    }
    check(
        bad == [0; 4],
        format!("{n} cases each; failures node/bounded/linear/round-trip = {bad:?}"),
    )
}

fn c3_anatomy() -> Outcome {
    let (mut r1, mut r2, mut r3) = ((0, 0), (0, 0), (0.0f64, 1.0f64));
    for seed in 0..100 {
        let p = Phantom::generate(&PhantomConfig {
            seed,
            ..PhantomConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let r = validate_phantom(&p);
        r1.0 += r.bronchus_containment.checked;
        r1.1 += r.bronchus_containment.violations;
        r2.0 += r.artery_containment.checked;
        r2.1 += r.artery_containment.violations;
        r3.0 += r.intersegmental_adjacency.ratio();
        r3.1 = r3.1.min(r.intersegmental_adjacency.ratio());
    }
    let rule3 = r3.0 / 100.0;
    check(
        r1.1 == 0 && r2.1 == 0 && r3.1 >= 0.99,
        format!(
            "rule 1 {}/{} contained, rule 2 {}/{} contained, rule 3 mean {:.4} min {:.4}",
            r1.0 - r1.1,
            r1.0,
            r2.0 - r2.1,
            r2.0,
            rule3,
            r3.1
        ),
    )
}

fn oracle_dice(gt: &LabelGrid, pred: &LabelGrid, mask: Option<&[bool]>) -> (Vec<Option<f64>>, Option<f64>) {
    let [d, h, w] = gt.extent();
    let k = gt.num_classes().max(pred.num_classes());
    let mut per = Vec::new();
    for s in 1..k as u8 {
        let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
        for i in 0..d {
            for j in 0..h {
                for l in 0..w {
                    if let Some(m) = mask {
                        if !m[(i * h + j) * w + l] {
                            continue;
                        }
                    }
                    let (g, p) = (gt.get(i, j, l) == s, pred.get(i, j, l) == s);
                    inter += usize::from(g && p);
                    a += usize::from(g);
                    b += usize::from(p);
                }
            }
        }
        per.push((a + b > 0).then(|| 2.0 * inter as f64 / (a + b) as f64));
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per, mean)
}

fn c4_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let e = random_extent(&mut rng, 1, 8);
        let n = e.iter().product::<usize>();
        let k = rng.random_range(2..=6);
        let gt = LabelGrid::new(e, k, (0..n).map(|_| rng.random_range(0..k as u8)).collect()).unwrap();
        let pred = LabelGrid::new(e, k, (0..n).map(|_| rng.random_range(0..k as u8)).collect()).unwrap();
        let mask: Option<Vec<bool>> = rng.random_bool(0.5).then(|| (0..n).map(|_| rng.random_bool(0.7)).collect());
        let got = dice_per_class(&gt, &pred, mask.as_deref()).map_err(|e| e.to_string())?;
        let (per, mean) = oracle_dice(&gt, &pred, mask.as_deref());
        if got.per_class != per || got.mean != mean {
            mismatches += 1;
        }
    }
    let g = |v: &[u8]| LabelGrid::new([v.len(), 1, 1], 3, v.to_vec()).unwrap();
    let identical = dice_per_class(&g(&[1, 2, 2, 0]), &g(&[1, 2, 2, 0]), None).unwrap().mean;
    let disjoint = dice_per_class(&g(&[1, 1, 0]), &g(&[2, 2, 0]), None).unwrap().mean;
    let hand = dice_per_class(&g(&[1, 1, 2, 0]), &g(&[1, 2, 2, 0]), None).unwrap();
    let units = identical == Some(1.0)
        && disjoint == Some(0.0)
        && hand.per_class == vec![Some(2.0 / 3.0), Some(2.0 / 3.0)];
    check(
        mismatches == 0 && units,
        format!("1000 random instances, {mismatches} oracle mismatches; unit cases {}", if units { "ok" } else { "wrong" }),
    )
}

fn c5_overfit(model_out: &mut Option<(ImpulseModel<f32>, Volume)>) -> Outcome {
    let p = Phantom::generate(&PhantomConfig::default()).map_err(|e| e.to_string())?;
    let s = TrainSettings {
        inputs: "I".parse().unwrap(),
        steps: 2000,
        points: DEFAULT_POINTS,
        ..TrainSettings::default()
    };
    let out = train_implicit(std::slice::from_ref(&p), &s, |_, _| {}).map_err(|e| e.to_string())?;
    let x = impulse_core::experiment::assemble_inputs(&p, &s.inputs, None).map_err(|e| e.to_string())?;
    let pred = out.model.reconstruct(&x, [32; 3]).map_err(|e| e.to_string())?;
    let dice_o = evaluate(&pred, &p).map_err(|e| e.to_string())?.dice_o.unwrap_or(0.0);
    let secs = out.wall_secs;
    *model_out = Some((out.model, x));
    check(dice_o >= 0.90, format!("Dice_o {dice_o:.4} after 2000 steps x 4096 points ({secs:.0}s)"))
}

fn c6_c8_ablation() -> (Outcome, Outcome) {
    let run = || -> Result<impulse_core::experiment::AblationReport, String> {
        let (m, phantoms) = generate_dataset(&PhantomConfig::default(), 20).map_err(|e| e.to_string())?;
        let pick = |s: Split| -> Vec<Phantom> {
            m.entries
                .iter()
                .zip(&phantoms)
                .filter(|(e, _)| e.split == s)
                .map(|(_, (p, _))| p.clone())
                .collect()
        };
        let (train, test) = (pick(Split::Train), pick(Split::Test));
        assert_eq!((train.len(), test.len()), (14, 4));
        let s = TrainSettings::default();
        run_ablation(&train, &test, &InputSet::default_combos(), 0.05, &s, |c| {
            println!("  ablation column {:<5} trained in {:.0}s", c.inputs.to_string(), c.wall_secs)
        })
        .map_err(|e| e.to_string())
    };
    let report = match run() {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    println!("{}", report.table());
    let col = |s: &str| report.column(s).expect("column present");
    let ibav = col("IBAV").clean.dice_o.unwrap_or(0.0);
    let c6 = check(ibav >= 0.70, format!("IBAV Dice_o {ibav:.4} on 4 test phantoms (trained on 14)"));

    let b_bav = col("BAV").clean.dice_b.unwrap_or(0.0);
    let b_l = col("L").clean.dice_b.unwrap_or(0.0);
    let o_i = col("I").clean.dice_o.unwrap_or(0.0);
    let drop = |s: &str| {
        let c = col(s);
        c.clean.dice_o.unwrap_or(0.0) - c.corrupted.and_then(|m| m.dice_o).unwrap_or(0.0)
    };
    let c8 = check(
        b_bav > b_l,
        format!(
            "Dice_b BAV {b_bav:.4} > L {b_l:.4}; reported: Dice_o IBAV {ibav:.4} vs I {o_i:.4} (>= I-0.02: {}); \
             corruption drop in Dice_o L {:.4}, LBAV {:.4}, BAV {:.4}",
            ibav >= o_i - 0.02,
            drop("L"),
            drop("LBAV"),
            drop("BAV"),
        ),
    );
    (c6, c8)
}

fn c7_efficiency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let implicit = ImpulseModel::<f32>::new(ModelConfig::new(1, 19), &mut rng).map_err(|e| e.to_string())?;
    let dense = DenseModel::<f32>::new(EncoderConfig::with_channels(1), 19, &mut rng).map_err(|e| e.to_string())?;
    let decoder = implicit.count_params().decoder;
    let head = dense.head.count_params();
    let dense_points = DenseTrainer::<f32>::points_per_step([32; 3]);

    // Short timing run; wall time is reported only.
    let (m, phantoms) = generate_dataset(&PhantomConfig::default(), 10).map_err(|e| e.to_string())?;
    let pick = |s: Split| -> Vec<Phantom> {
        m.entries.iter().zip(&phantoms).filter(|(e, _)| e.split == s).map(|(_, (p, _))| p.clone()).collect()
    };
    let s = TrainSettings {
        steps: 20,
        ..TrainSettings::default()
    };
    let bench = run_bench(&pick(Split::Train), &pick(Split::Val), &s).map_err(|e| e.to_string())?;
    check(
        decoder < head && DEFAULT_POINTS == 4096 && dense_points == 32768 && bench.orderings_hold(),
        format!(
            "decoder {decoder} < dense head {head} params; points/step {} vs {} ({}x fewer); \
             wall time for {} steps: implicit {:.1}s, dense {:.1}s (reported)",
            bench.implicit.points_per_step,
            bench.dense.points_per_step,
            bench.dense.points_per_step / bench.implicit.points_per_step,
            s.steps,
            bench.implicit.wall_secs,
            bench.dense.wall_secs
        ),
    )
}

fn c9_resolution(trained: &Option<(ImpulseModel<f32>, Volume)>) -> Outcome {
    let (model, x) = trained.as_ref().ok_or("no trained model from the overfit run")?;
    let r64 = model.reconstruct(x, [64; 3]).map_err(|e| e.to_string())?;
    let r96 = model.reconstruct(x, [96; 3]).map_err(|e| e.to_string())?;
    let probs = model.predict(x, &uniform_grid_coords([64; 3]).unwrap()).map_err(|e| e.to_string())?;
    let k = model.num_classes();
    let direct: Vec<u8> = probs
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let diff = direct.iter().zip(r64.data()).filter(|(a, b)| a != b).count();
    check(
        r64.extent() == [64; 3] && r96.extent() == [96; 3] && diff == 0,
        format!("64³ and 96³ reconstructed from 32³; {diff} voxels differ from direct 64³ prediction"),
    )
}

/// Label header, label payload and metrics report bytes of one run.
type Artifacts = (Vec<u8>, Vec<u8>, Vec<u8>);

fn pipeline(root: &Path) -> Result<Artifacts, String> {
    let bin = env!("CARGO_BIN_EXE_impulse");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, run, pred) = (root.join("data"), root.join("run"), root.join("pred.vol"));
    let steps: Vec<Vec<String>> = vec![
        vec!["gen".into(), "--out".into(), s(&data), "--count".into(), "3".into(), "--seed".into(), "10".into()],
        vec![
            "train".into(), "--data".into(), s(&data), "--out".into(), s(&run), "--inputs".into(), "IBAV".into(),
            "--steps".into(), "40".into(), "--points".into(), "1024".into(), "--seed".into(), "10".into(),
        ],
        vec![
            "infer".into(), "--checkpoint".into(), s(&run.join("model.json")), "--input".into(),
            s(&data.join("phantom_002")), "--out".into(), s(&pred),
        ],
        vec![
            "eval".into(), "--pred".into(), s(&pred), "--phantom".into(), s(&data.join("phantom_002")), "--out".into(),
            s(&root.join("report.json")),
        ],
    ];
    for args in steps {
        let o = Command::new(bin).args(&args).output().map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("`{}` failed: {}", args[0], String::from_utf8_lossy(&o.stderr)));
        }
    }
    let read = |p: &Path| fs::read(p).map_err(|e| e.to_string());
    Ok((read(&pred)?, read(&pred.with_extension("raw"))?, read(&root.join("report.json"))?))
}

fn c10_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline(&dir.path().join("a"))?;
    let b = pipeline(&dir.path().join("b"))?;
    check(
        a == b,
        format!(
            "label header/payload ({} bytes) and metrics report ({} bytes) {}",
            a.1.len(),
            a.2.len(),
            if a == b { "byte-identical" } else { "differ" }
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let r = guarded(f);
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {name:<22} {tag}  {detail}  [{secs:.1}s]");
        results.push((id, name, r, secs));
    };

    record(1, "gradient integrity", &mut c1_gradients);
    record(2, "interpolation suite", &mut c2_interpolation);
    record(3, "phantom anatomy", &mut c3_anatomy);
    record(4, "metrics oracle", &mut c4_metrics);
    let mut trained = None;
    record(5, "overfit capacity", &mut || c5_overfit(&mut trained));
    let mut ablation = None;
    record(6, "generalization", &mut || {
        let (c6, c8) = c6_c8_ablation();
        ablation = Some(c8);
        c6
    });
    record(7, "efficiency ordering", &mut c7_efficiency);
    record(8, "ablation ordering", &mut || ablation.take().unwrap_or(Err("ablation did not run".into())));
    record(9, "arbitrary resolution", &mut || c9_resolution(&trained));
    record(10, "reproducibility", &mut c10_reproducibility);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
