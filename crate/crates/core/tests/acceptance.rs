//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test -p maskscope --test acceptance -- --nocapture` (or simply
//! `cargo test --test acceptance`; the output is printed either way).

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use maskscope::embedding::{pairwise_sq_distances, pca_reduce, perplexity_calibrate, tsne_embed, TsneParams};
use maskscope::gradcam::{channel_weights, compute_heatmap, normalize_mask, BinaryMask, Heatmap, NormalizedMask};
use maskscope::modelcmp::{ar_matrix, average_residual, mean_abs_residual, ImageMasks};
use maskscope::objstats::{compute_rpc, count_pixels, ImageCounts};
use maskscope::report::{run, RunConfig};
use maskscope::synth::{generate_fixture, SynthConfig};
use maskscope::tensor_io::{read_tensor_file, TensorData, TensorRecord};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn gradcam_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut max_err, mut bounds_ok, mut relu_ok) = (0.0f64, true, true);
    for _ in 0..200 {
        let (k, h, w) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let act = common::uniform_vec(&mut rng, k * h * w, -1.0, 1.0);
        let grad = common::uniform_vec(&mut rng, k * h * w, -1.0, 1.0);
        let rec = |v: &[f32]| TensorRecord::new(vec![k, h, w], TensorData::F32(v.to_vec())).unwrap();

        let weights = channel_weights(&rec(&grad)).unwrap();
        for (a, b) in weights.iter().zip(common::weights_oracle(&grad, k, h, w)) {
            max_err = max_err.max((*a as f64 - b).abs());
        }
        let heat = compute_heatmap(&rec(&act), &weights).unwrap();
        let used: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
        for (a, b) in heat.values().iter().zip(common::heatmap_oracle(&act, &used, k, h, w)) {
            max_err = max_err.max((*a as f64 - b).abs());
            relu_ok &= *a >= 0.0;
        }
        let mask = normalize_mask(&heat);
        let hv: Vec<f64> = heat.values().iter().map(|&v| v as f64).collect();
        match common::normalize_oracle(&hv) {
            Some(reference) => {
                for (a, b) in mask.values.iter().zip(reference) {
                    max_err = max_err.max((*a as f64 - b).abs());
                }
            }
            None => bounds_ok &= mask.degenerate && mask.values.iter().all(|&v| v == 0.0),
        }
        bounds_ok &= mask.values.iter().all(|v| (0.0..=1.0).contains(v));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        "Grad-CAM oracle suite",
        max_err < 1e-6 && relu_ok && bounds_ok && secs < 10.0,
        format!("200 tensors, max |err| {max_err:.2e} (tol 1e-6), ReLU ok {relu_ok}, [0,1] ok {bounds_ok}, {secs:.2} s (limit 10 s)"),
    )
}

fn affine_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_diff = 0.0f32;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..=12), rng.random_range(2..=12));
        let mut x = common::uniform_vec(&mut rng, h * w, 0.0, 1.0);
        x[0] = 0.0;
        x[h * w - 1] = 1.0;
        let a = 10f32.powf(rng.random_range(-0.7..1.6));
        let b = rng.random_range(0.0..2.0) * a;
        let base = normalize_mask(&Heatmap::new(Array2::from_shape_vec((h, w), x.clone()).unwrap()).unwrap());
        let moved: Vec<f32> = x.iter().map(|v| a * v + b).collect();
        let moved = normalize_mask(&Heatmap::new(Array2::from_shape_vec((h, w), moved).unwrap()).unwrap());
        for (p, q) in base.values.iter().zip(moved.values.iter()) {
            max_diff = max_diff.max((p - q).abs());
        }
    }
    outcome(
        "Affine invariance",
        max_diff < 1e-6,
        format!("50 transforms (a in [0.2, 40], b in [0, 2a]), max |diff| {max_diff:.2e} (tol 1e-6)"),
    )
}

fn pca_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, d) = (rng.random_range(3..=10), rng.random_range(2..=8));
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let c = rng.random_range(1..=(n - 1).min(d));
        let res = pca_reduce(x.view(), c).unwrap();
        let flat: Vec<f64> = x.iter().copied().collect();
        let (_, vecs) = common::jacobi_eigen(&common::covariance(&flat, n, d), d);
        let oracle: Vec<Vec<f64>> = (0..c).map(|k| (0..d).map(|r| vecs[r * d + k]).collect()).collect();
        let ours: Vec<Vec<f64>> = res.components.outer_iter().map(|r| r.to_vec()).collect();
        worst = worst.max(common::subspace_sine(&ours, &oracle).min(1.0).asin());
    }
    outcome("PCA oracle equivalence", worst < 1e-6, format!("20 matrices up to 10x8, max subspace angle {worst:.2e} rad (tol 1e-6)"))
}

fn tsne_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut entropy_err = 0.0f64;
    for _ in 0..20 {
        let x = Array2::from_shape_fn((20, 5), |_| rng.random_range(-1.0..1.0));
        let p = perplexity_calibrate(pairwise_sq_distances(x.view()).view(), 5.0).unwrap();
        for (i, row) in p.outer_iter().enumerate() {
            entropy_err = entropy_err.max((common::entropy_bits(&row.to_vec(), i) - 5f64.log2()).abs());
        }
    }

    let (flat, labels) = common::two_clusters(&mut rng, 50, 50, 10.0);
    let x = Array2::from_shape_vec((50, 50), flat).unwrap();
    let params = TsneParams { perplexity: 10.0, seed: 11, ..TsneParams::default() };
    let a = tsne_embed(x.view(), &params).unwrap();
    let b = tsne_embed(x.view(), &params).unwrap();
    let pts: Vec<[f64; 2]> = a.coords.outer_iter().map(|r| [r[0], r[1]]).collect();
    let sil = common::silhouette(&pts, &labels);
    let (kl0, kl1) = (a.kl_trace.first().unwrap().kl, a.kl_trace.last().unwrap().kl);
    let bitwise = a.coords.iter().zip(b.coords.iter()).all(|(p, q)| p.to_bits() == q.to_bits()) && a.kl_trace == b.kl_trace;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        "t-SNE",
        entropy_err < 1e-5 && sil > 0.5 && kl1 < kl0 && bitwise && secs < 60.0,
        format!(
            "(a) entropy err {entropy_err:.2e} (tol 1e-5); (b) silhouette {sil:.3} (> 0.5); (c) KL {kl0:.4} -> {kl1:.4}; (d) bitwise {bitwise}; {secs:.2} s (limit 60 s)"
        ),
    )
}

fn rpc_rows(images: &[(Array2<u16>, Array2<bool>)], objects: usize) -> Vec<Option<f64>> {
    let counts: Vec<ImageCounts> = images
        .iter()
        .map(|(s, m)| ImageCounts {
            class_index: 0,
            counts: count_pixels(s.view(), &BinaryMask { values: m.clone(), threshold_used: 0.5 }, objects).unwrap(),
        })
        .collect();
    compute_rpc(&counts, 0, objects).into_iter().map(|r| r.ratio).collect()
}

fn object_ratio_suite() -> Outcome {
    let example = {
        let seg = Array2::from_elem((4, 5), 1u16);
        let sel = |k: usize| Array2::from_shape_fn((4, 5), |(y, x)| y * 5 + x < k);
        rpc_rows(&[(seg.clone(), sel(10)), (seg, sel(0))], 2)[1]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut in_range, mut full_one, mut empty_zero, mut monotone) = (true, true, true, true);
    for _ in 0..100 {
        let objects = 5;
        let n_img = rng.random_range(1..=4);
        let mut narrow = Vec::new();
        let mut wide = Vec::new();
        let mut full = Vec::new();
        let mut empty = Vec::new();
        for _ in 0..n_img {
            let seg = Array2::from_shape_fn((6, 7), |_| rng.random_range(0..objects as u16));
            let w = Array2::from_shape_fn((6, 7), |_| rng.random_bool(0.5));
            let n = w.mapv(|v| v && rng.random_bool(0.5));
            narrow.push((seg.clone(), n));
            wide.push((seg.clone(), w));
            full.push((seg.clone(), Array2::from_elem((6, 7), true)));
            empty.push((seg, Array2::from_elem((6, 7), false)));
        }
        let (rn, rw) = (rpc_rows(&narrow, objects), rpc_rows(&wide, objects));
        for (a, b) in rn.iter().zip(&rw) {
            if let (Some(a), Some(b)) = (a, b) {
                in_range &= (0.0..=1.0).contains(a) && (0.0..=1.0).contains(b);
                monotone &= a <= b;
            }
        }
        full_one &= rpc_rows(&full, objects).iter().flatten().all(|&r| r == 1.0);
        empty_zero &= rpc_rows(&empty, objects).iter().flatten().all(|&r| r == 0.0);
    }
    outcome(
        "Object pixel ratio suite",
        example == Some(0.25) && in_range && full_one && empty_zero && monotone,
        format!(
            "ratio-of-sums example {example:?} (want 0.25 exactly); R in [0,1] {in_range}; full mask -> 1 {full_one}; empty mask -> 0 {empty_zero}; monotone on 100 pairs {monotone}"
        ),
    )
}

fn residual_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = |v: Array2<f32>| NormalizedMask { values: v, degenerate: false };

    let a = m(Array2::from_shape_fn((5, 5), |_| rng.random_range(0.0..1.0)));
    let self_zero = average_residual(&a, &a).unwrap() == 0.0;
    let bits = Array2::from_shape_fn((5, 5), |_| rng.random_bool(0.5) as u8 as f32);
    let complement = average_residual(&m(bits.clone()), &m(bits.mapv(|v| 1.0 - v))).unwrap() == 1.0;
    let hand = mean_abs_residual(array![[0.2f64, 0.4], [0.6, 0.8]].view(), array![[0.4f64, 0.4], [0.6, 0.6]].view()).unwrap();

    let (mut symmetric, mut triangle) = (true, true);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut draw = || m(Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..=1.0)));
        let (x, y, z) = (draw(), draw(), draw());
        let xy = average_residual(&x, &y).unwrap();
        symmetric &= xy == average_residual(&y, &x).unwrap();
        triangle &= xy <= average_residual(&x, &z).unwrap() + average_residual(&z, &y).unwrap() + 1e-12;
    }
    let hand_err = (hand - 0.1).abs();
    outcome(
        "Average residual suite",
        self_zero && complement && hand_err < 1e-9 && symmetric && triangle,
        format!("AR(m,m)=0 {self_zero}; complement -> 1 {complement}; hand example |AR-0.1| {hand_err:.1e} (tol 1e-9); symmetric {symmetric}; triangle on 50 triples {triangle}"),
    )
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| headers.iter().map(String::from).zip(r.unwrap().iter().map(String::from)).collect())
        .collect()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn end_to_end(work: &Path) -> (Outcome, Outcome) {
    let t = Instant::now();
    let synth = SynthConfig::default();
    let manifest = generate_fixture(work.join("data"), &synth).unwrap();
    let out_a = work.join("run_a");
    let cfg = RunConfig::new(&manifest, &out_a);
    let run_result = run(&cfg);
    let secs = t.elapsed().as_secs_f64();
    if let Err(e) = run_result {
        let fail = |name| outcome(name, false, format!("pipeline failed: {e}"));
        return (fail("End-to-end synthetic reproduction"), fail("Determinism"));
    }

    let planted = [("city_a", "skyscraper"), ("city_b", "signboard")];
    let mut planted_ok = true;
    let mut winners = Vec::new();
    let mut silhouettes = Vec::new();
    for model in &synth.models {
        let rows = read_csv(&out_a.join(format!("objstats/{}.csv", model.name)));
        for (class, object) in planted {
            let best = rows
                .iter()
                .filter(|r| r["class"] == class && r["selected"] == "true" && !r["R"].is_empty())
                .max_by(|a, b| a["R"].parse::<f64>().unwrap().total_cmp(&b["R"].parse::<f64>().unwrap()))
                .map(|r| r["object_name"].clone())
                .unwrap_or_default();
            planted_ok &= best == object;
            winners.push(format!("{}/{class}:{best}", model.name));
        }
        let emb = read_csv(&out_a.join(format!("embedding/{}/embedding.csv", model.name)));
        let pts: Vec<[f64; 2]> = emb.iter().map(|r| [r["x"].parse().unwrap(), r["y"].parse().unwrap()]).collect();
        let labels: Vec<usize> = emb.iter().map(|r| (r["class"] == "city_b") as usize).collect();
        silhouettes.push(common::silhouette(&pts, &labels));
    }
    let min_sil = silhouettes.iter().cloned().fold(f64::INFINITY, f64::min);

    let ar = read_csv(&out_a.join("ar/ar_matrix.csv"));
    let ar_cross: f64 = ar.iter().find(|r| r["model"] == "deep").unwrap()["deep_retrained"].parse().unwrap();
    // Model against itself, computed through the same matrix path on two copies.
    let load = |model: &str| -> Vec<NormalizedMask> {
        let mut files: Vec<_> = std::fs::read_dir(out_a.join("masks").join(model)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
            .iter()
            .map(|p| {
                let values = read_tensor_file(p).unwrap().to_array2_f32().unwrap();
                NormalizedMask { degenerate: values.iter().all(|&v| v == 0.0), values }
            })
            .collect()
    };
    let deep = load("deep");
    let images: Vec<ImageMasks> = deep
        .iter()
        .map(|m| ImageMasks { id: "x", image_size: synth.image_size, masks: vec![Some(m), Some(m)] })
        .collect();
    let ar_self = ar_matrix(&["deep".into(), "deep_copy".into()], &images).unwrap().values[[0, 1]];

    let e2e = outcome(
        "End-to-end synthetic reproduction",
        planted_ok && min_sil > 0.3 && ar_cross > ar_self && secs < 300.0,
        format!(
            "60 images/class; (i) top selected object per class {}; (ii) min silhouette {min_sil:.3} (> 0.3); (iii) AR(deep, deep_retrained) {ar_cross:.4} > AR(deep, deep) {ar_self:.4}; {secs:.1} s (limit 300 s)",
            winners.join(", ")
        ),
    );

    let out_b = work.join("run_b");
    let det = match run(&RunConfig::new(&manifest, &out_b)) {
        Ok(_) => {
            let (ta, tb) = (tree(&out_a), tree(&out_b));
            let differing = ta.keys().chain(tb.keys()).filter(|k| ta.get(*k) != tb.get(*k)).count();
            outcome("Determinism", ta == tb, format!("two full runs, {} files, {differing} differing", ta.len()))
        }
        Err(e) => outcome("Determinism", false, format!("second run failed: {e}")),
    };
    (e2e, det)
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let mut results = vec![
        gradcam_suite(),
        affine_invariance(),
        pca_oracle(),
        tsne_suite(),
        object_ratio_suite(),
        residual_suite(),
    ];
    let (e2e, det) = end_to_end(work.path());
    results.push(e2e);
    results.push(det);

    for r in &results {
        println!("[{}] {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
