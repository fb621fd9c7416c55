//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use msgnet_core::apl::gamma_bin_index;
use msgnet_core::bench::time_aggregation;
use msgnet_core::detect::{
    bce_loss, ciou_loss, class_ap, dfl_loss, BBox, Detection, GroundTruth, DFL_BINS,
};
use msgnet_core::encoder::FeaturePyramid;
use msgnet_core::gradcheck::random_tensor;
use msgnet_core::gradsuite::run_suite;
use msgnet_core::hstm::TemporalGraph;
use msgnet_core::nn::{Init, ParamStore};
use msgnet_core::reference::{conv1x1_rows, dense_attention, map_rows};
use msgnet_core::routing::Routing;
use msgnet_core::sparsegraph::{edge_cost, prune, GraphConfig, ScoreMatrices, SPATIAL_K};
use msgnet_core::ssglm::SpatialFusion;
use msgnet_core::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const GRADSUITE_BUDGET_SECS: f64 = 120.0;
const APL_BUDGET_SECS: f64 = 600.0;
const OVERFIT_BUDGET_SECS: f64 = 900.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn msgnet(args: &[&str]) -> std::process::Output {
    msgnet_in(Path::new("."), args)
}

fn msgnet_in(cwd: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_msgnet"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn msgnet");
    assert!(
        out.status.success(),
        "msgnet {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let report = run_suite(0, None).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = |kind: &str| {
        report
            .entries
            .iter()
            .filter(|e| serde_json::to_value(e.kind).unwrap() == kind)
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    };
    let failed: Vec<&str> = report
        .entries
        .iter()
        .filter(|e| !e.pass)
        .map(|e| e.name.as_str())
        .collect();
    outcome(
        report.all_pass && secs <= GRADSUITE_BUDGET_SECS,
        format!(
            "{} entries, worst op rel err {:.1e}, worst module rel err {:.1e}, {secs:.1}s, failing {failed:?}",
            report.entries.len(),
            worst("op"),
            worst("module")
        ),
    )
}

fn sparse_dense_oracle() -> Outcome {
    const CH: [usize; 3] = [4, 6, 8];
    const EXTENT: [usize; 3] = [8, 4, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // Spatial: full thermal view (γ = 1), no threshold, K above every level's node count.
    let mut ps = ParamStore::new();
    let fusion = SpatialFusion::new(&mut ps, &mut Init { rng: &mut rng }, CH, 0.0, 1000);
    fusion.apl.zero_output(&mut ps);
    ps.get_mut(fusion.apl.output_bias()).fill(2.0);
    let mut spatial = 0.0f64;
    for _ in 0..20 {
        let pyramid = |rng: &mut ChaCha8Rng| {
            [0, 1, 2].map(|l| random_tensor(&[1, CH[l], EXTENT[l], EXTENT[l]], rng, 1.0))
        };
        let (rgb, th) = (pyramid(&mut rng), pyramid(&mut rng));
        let mut tape = Tape::new();
        let r = FeaturePyramid::from_levels(rgb.clone().map(|t| tape.constant(t)));
        let t = FeaturePyramid::from_levels(th.clone().map(|t| tape.constant(t)));
        let out = fusion
            .fuse_modalities(&mut tape, &ps, &r, &t, &mut Routing::record())
            .expect("fusion");
        assert_eq!(out.decisions[0].gamma, 1.0);
        for (l, &level) in out.fused.levels().iter().enumerate() {
            let dst = conv1x1_rows(&ps, &fusion.shared_proj[l], &rgb[l]);
            let src = conv1x1_rows(&ps, &fusion.shared_proj[l], &th[l]);
            let expect =
                dense_attention(&ps, &fusion.attn[l], &src, &dst, &map_rows(&rgb[l]), CH[l]);
            spatial = spatial.max(max_abs(&map_rows(tape.value(level)), &expect));
        }
    }

    // Temporal: previous-frame positions attend into the current frame.
    let c = 6;
    let mut ps = ParamStore::new();
    let graph = TemporalGraph::new(&mut ps, &mut Init { rng: &mut rng }, "t", c);
    let mut temporal = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let (prev, curr) = (
            random_tensor(&[1, c, h, w], &mut rng, 1.0),
            random_tensor(&[1, c, h, w], &mut rng, 1.0),
        );
        let mut tape = Tape::new();
        let (p, q) = (tape.constant(prev.clone()), tape.constant(curr.clone()));
        let cfg = GraphConfig::new(0.0, h * w, c).unwrap();
        let (out, _) = graph
            .forward(&mut tape, &ps, &cfg, p, q, &mut Routing::record())
            .expect("temporal graph");
        let expect = dense_attention(
            &ps,
            &graph.attn,
            &map_rows(&prev),
            &map_rows(&curr),
            &map_rows(&curr),
            c,
        );
        temporal = temporal.max(max_abs(&map_rows(tape.value(out)), &expect));
    }
    outcome(
        spatial <= 1e-6 && temporal <= 1e-6,
        format!(
            "max abs diff spatial {spatial:.1e}, temporal {temporal:.1e} over 20 instances each"
        ),
    )
}

fn gamma_regression() -> Outcome {
    let text = String::from_utf8(msgnet(&["gamma-table"]).stdout).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    let at = |lambda: f64| {
        rows.iter()
            .find(|r| (r.0 - lambda).abs() < 1e-9)
            .map(|r| r.1)
    };
    let monotone = rows.windows(2).all(|w| w[1].1 >= w[0].1);
    let in_bins = rows.iter().all(|r| gamma_bin_index(r.1).is_some());
    // λ = 0 falls in the lowest bin, one full bin width away.
    let covers = at(0.0) == Some(0.2)
        && rows.iter().filter(|r| r.0 > 0.0).all(|&(l, g)| {
            if l <= 1.0 {
                g >= l && g - 0.2 < l
            } else {
                g == 1.0
            }
        });
    outcome(
        at(1.17) == Some(1.0) && at(0.32) == Some(0.4) && monotone && in_bins && covers && rows.len() == 151,
        format!("1.17 -> {:?}, 0.32 -> {:?}, {} rows, monotone {monotone}, bins {in_bins}, covers {covers}", at(1.17), at(0.32), rows.len()),
    )
}

fn loss_unit_values() -> Outcome {
    let ciou = ciou_loss(
        &BBox::new(0.0, 0.0, 2.0, 2.0),
        &BBox::new(4.0, 0.0, 2.0, 2.0),
    );
    let dfl = dfl_loss(&[1.0 / DFL_BINS as f64; DFL_BINS], 5.0).unwrap();
    let bce = bce_loss(&[0.0], &[1.0]).unwrap();
    let errs = [
        (ciou - 1.4).abs(),
        (dfl - 16f64.ln()).abs(),
        (bce - 2f64.ln()).abs(),
    ];
    outcome(
        errs.iter().all(|&e| e <= 1e-9),
        format!("ciou {ciou:.12}, dfl {dfl:.12}, bce {bce:.12}"),
    )
}

fn pruning_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut subset, mut degree, mut edges_lo, mut edges_hi) = (true, true, 0, 0);
    for _ in 0..50 {
        let (n_dst, n_src) = (rng.gen_range(1..80), rng.gen_range(1..80));
        let raw = (0..n_dst * n_src)
            .map(|_| rng.gen_range(-4.0..4.0))
            .collect();
        let scores = ScoreMatrices::from_raw(n_dst, n_src, raw).unwrap();
        let graph = |tau| prune(&scores, &GraphConfig::new(tau, SPATIAL_K, 16).unwrap());
        let (lo, hi) = (graph(0.25), graph(0.75));
        let set = |g: &msgnet_core::sparsegraph::SparseBipartiteGraph| {
            g.edges()
                .iter()
                .map(|e| (e.dst, e.src))
                .collect::<BTreeSet<_>>()
        };
        subset &= set(&hi).is_subset(&set(&lo));
        degree &= (0..n_dst).all(|d| lo.in_degree(d) <= SPATIAL_K && hi.in_degree(d) <= SPATIAL_K);
        edges_lo += lo.len();
        edges_hi += hi.len();
    }
    outcome(
        subset && degree,
        format!("50 matrices, subset {subset}, in-degree <= {SPATIAL_K} {degree}, edges {edges_lo} at 0.25 vs {edges_hi} at 0.75"),
    )
}

/// Generates a dataset and trains with a bundled config; returns the
/// training wall time and the final evaluation report.
fn train_with(config: &str, dir: &Path, n_train: usize, n_val: usize) -> (f64, Value) {
    let data = dir.join("data");
    msgnet(&[
        "synth-gen",
        "--n",
        &n_train.to_string(),
        "--seed",
        "0",
        "--out",
        s(&data),
    ]);
    if n_val > 0 {
        msgnet(&[
            "synth-gen",
            "--n",
            &n_val.to_string(),
            "--seed",
            "0",
            "--split",
            "val",
            "--out",
            s(&data),
        ]);
    }
    let out = dir.join("run");
    let t = Instant::now();
    msgnet(&[
        "train-toy",
        "--config",
        s(&config_path(config)),
        "--set",
        &format!("data={}", s(&data)),
        "--set",
        &format!("out={}", s(&out)),
    ]);
    let secs = t.elapsed().as_secs_f64();
    let report =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    (secs, report)
}

fn apl_recovery() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (secs, report) = train_with("toy.cfg", dir.path(), 500, 100);
    let acc = report["gamma_accuracy"].as_f64().unwrap();
    outcome(
        acc >= 0.8 && secs <= APL_BUDGET_SECS,
        format!(
            "held-out gamma accuracy {acc:.3} on {} pairs (chance 0.2), {secs:.0}s",
            report["samples"]
        ),
    )
}

/// Ranks detections, matches greedily, and takes for every recall level the
/// best precision among ranks that reach it.
fn exhaustive_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    thresh: f64,
) -> f64 {
    let npos = gts
        .iter()
        .flatten()
        .filter(|g| g.class_id == class_id)
        .count();
    if npos == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| {
            ds.iter()
                .filter(|d| d.class_id == class_id)
                .map(move |d| (i, d))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap());
    let mut used = BTreeSet::new();
    let mut tp = 0.0;
    let mut points = Vec::new();
    for (rank, (img, d)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            let iou = d.bbox.iou(&g.bbox);
            if g.class_id == class_id
                && !used.contains(&(*img, j))
                && iou >= thresh
                && best.map_or(true, |b| iou > b.1)
            {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used.insert((*img, j));
            tp += 1.0;
        }
        points.push((tp / npos as f64, tp / (rank + 1) as f64));
    }
    (0..=100)
        .map(|i| {
            points
                .iter()
                .filter(|p| p.0 >= i as f64 / 100.0)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn ap_oracle_agreement() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let boxed = |rng: &mut ChaCha8Rng| {
        BBox::new(
            rng.gen_range(0..8) as f64,
            rng.gen_range(0..8) as f64,
            rng.gen_range(1..5) as f64,
            rng.gen_range(1..5) as f64,
        )
    };
    let (mut agree, mut total) = (0, 0);
    for _ in 0..500 {
        let images = rng.gen_range(1..3);
        let mut gts: Vec<Vec<GroundTruth>> = vec![Vec::new(); images];
        for _ in 0..rng.gen_range(0..=4) {
            let img = rng.gen_range(0..images);
            gts[img].push(GroundTruth {
                bbox: boxed(&mut rng),
                class_id: rng.gen_range(0..2),
            });
        }
        let mut conf: Vec<f64> = (0..12).map(|i| (i + 1) as f64 / 13.0).collect();
        use rand::seq::SliceRandom;
        conf.shuffle(&mut rng);
        let dets: Vec<Vec<Detection>> = (0..images)
            .map(|_| {
                (0..rng.gen_range(0..6))
                    .map(|_| {
                        let mut p = vec![0.0; 2];
                        p[rng.gen_range(0..2)] = conf.pop().unwrap();
                        Detection::from_probs(boxed(&mut rng), p)
                    })
                    .collect()
            })
            .collect();
        for class_id in 0..2 {
            for thresh in [0.5, 0.75] {
                total += 1;
                agree += usize::from(
                    class_ap(&dets, &gts, class_id, thresh)
                        == exhaustive_ap(&dets, &gts, class_id, thresh),
                );
            }
        }
    }
    (agree, total)
}

fn overfit_sanity() -> Outcome {
    let (agree, total) = ap_oracle_agreement();
    let dir = tempfile::tempdir().unwrap();
    let (secs, report) = train_with("overfit.cfg", dir.path(), 32, 0);
    let ap50 = report["ap50"].as_f64().unwrap();
    outcome(
        ap50 >= 0.9 && secs <= OVERFIT_BUDGET_SECS && agree == total,
        format!("train AP50 {ap50:.3} on {} pairs, {secs:.0}s; AP equals the exhaustive oracle on {agree}/{total} instances", report["samples"]),
    )
}

fn sparsity_benchmark() -> Outcome {
    let v: Value =
        serde_json::from_slice(&msgnet(&["bench", "--nodes", "1024", "--k", "25"]).stdout).unwrap();
    let ratios: Vec<f64> = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["aggregation_ratio"].as_f64().unwrap())
        .collect();
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    // Independent count for the unpruned-by-threshold case: N·K edges of 2d each versus N·N.
    let scores = ScoreMatrices::from_raw(1024, 1024, vec![0.0; 1024 * 1024]).unwrap();
    let cost = edge_cost(&prune(&scores, &GraphConfig::new(0.0, 25, 32).unwrap()), 32);
    let counted = cost.aggregation_dense == 2 * 32 * 1024 * 1024
        && cost.aggregation_sparse == 2 * 32 * 1024 * 25;
    let timing = time_aggregation(1024, 25, 0.25, 32, 0, 5).unwrap();
    outcome(
        min_ratio >= 40.0 && counted && timing.sparse_ms < timing.dense_ms,
        format!(
            "min MAC ratio {min_ratio:.2} over tau grid, sparse {:.2} ms vs dense {:.2} ms ({:.1}x)",
            timing.sparse_ms, timing.dense_ms, timing.speedup
        ),
    )
}

/// Every report and file a short f64 session produces, keyed by name. Paths
/// are relative to `dir` so two sessions in different directories compare.
fn run_reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let run = |args: &[&str]| msgnet_in(dir, args).stdout;
    run(&["synth-gen", "--n", "6", "--seed", "4", "--out", "data"]);
    run(&[
        "synth-gen",
        "--n",
        "3",
        "--seed",
        "4",
        "--split",
        "val",
        "--out",
        "data",
    ]);
    std::fs::write(
        dir.join("f64.cfg"),
        "precision = f64\nbase_channels = 4\nhead_width = 8\nepochs = 2\ndata = data\nout = run\n",
    )
    .unwrap();
    run(&["train-toy", "--config", "f64.cfg"]);
    let mut files = vec![
        ("gradcheck".to_string(), run(&["gradcheck", "--seed", "3"])),
        ("gamma-table".to_string(), run(&["gamma-table"])),
        ("bench".to_string(), run(&["bench", "--nodes", "64,256"])),
        (
            "eval".to_string(),
            run(&["eval", "--checkpoint", "run/checkpoint"]),
        ),
    ];
    let mut paths: Vec<PathBuf> = Vec::new();
    for sub in ["run", "run/checkpoint", "data/train", "data/val"] {
        paths.extend(
            std::fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file()),
        );
    }
    paths.sort();
    for p in paths {
        let name = p.strip_prefix(dir).unwrap().display().to_string();
        files.push((name, std::fs::read(&p).unwrap()));
    }
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run_reports(a.path()), run_reports(b.path()));
    let differing: Vec<&str> = ra
        .iter()
        .zip(&rb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        ra.len() == rb.len() && differing.is_empty(),
        format!(
            "{} reports and files compared at f64, differing {differing:?}",
            ra.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("sparse-dense oracle", sparse_dense_oracle),
        ("gamma regression", gamma_regression),
        ("loss unit values", loss_unit_values),
        ("pruning monotonicity", pruning_monotonicity),
        ("APL recovery", apl_recovery),
        ("overfit sanity", overfit_sanity),
        ("sparsity benchmark", sparsity_benchmark),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let o = run();
        failures += usize::from(!o.pass);
        println!(
            "criterion {id} {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
