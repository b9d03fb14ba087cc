//! Invariant checks per module, runnable from the command line without the
//! test harness.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, focused_linear_attention, focused_map, linear_attention, AttentionInputs, AttentionVariant,
    FocusParams, LinearKernel,
};
use crate::backbone::{self, extract_pyramid, BackboneWeights};
use crate::geoeval::{self, auc, pose_error, SceneMode, SceneParams, AUC_THRESHOLDS};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::image::Image;
use crate::matcher::{
    dual_softmax, dual_softmax_factors, heatmap_expectation, match_pipeline, mnn_filter, MatcherConfig,
    ModelWeights,
};
use crate::numgrid::{depthwise_conv2d, matmul, sym_eigen, DwKernel, FeatureGrid, GridShape, Mat};
use crate::transformer::{run_stack, TransformerConfig, TransformerWeights};
use crate::weightfile::WeightFile;

pub const MODULES: [&str; 6] = ["numgrid", "attention", "transformer", "backbone", "matcher", "geoeval"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub outcome: std::result::Result<(), String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleReport {
    pub module: String,
    pub checks: Vec<CheckResult>,
}

impl ModuleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome.is_ok())
    }

    /// `module: k/n checks passed`, followed by one line per failure.
    pub fn summary(&self) -> String {
        let ok = self.checks.iter().filter(|c| c.outcome.is_ok()).count();
        let mut s = format!(
            "{}: {ok}/{} checks passed{}",
            self.module,
            self.checks.len(),
            if self.passed() { "" } else { " FAIL" }
        );
        for c in &self.checks {
            if let Err(msg) = &c.outcome {
                s.push_str(&format!("\n  {}: {msg}", c.name));
            }
        }
        s
    }
}

type Check = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: crate::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn run(checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)>) -> Vec<CheckResult> {
    checks
        .into_iter()
        .map(|(name, f)| CheckResult {
            name: name.to_owned(),
            outcome: f(),
        })
        .collect()
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Runs every module's checks, or only `filter`'s. `weights` is loaded as a
/// model weight file by the backbone suite.
pub fn run_selftest(filter: Option<&str>, weights: Option<&Path>, seed: u64) -> crate::Result<Vec<ModuleReport>> {
    if let Some(f) = filter {
        if !MODULES.contains(&f) {
            return Err(crate::Error::Config(format!(
                "unknown module {f:?} (expected one of {})",
                MODULES.join(", ")
            )));
        }
    }
    Ok(MODULES
        .iter()
        .filter(|m| filter.is_none_or(|f| f == **m))
        .map(|&m| ModuleReport {
            module: m.to_owned(),
            checks: match m {
                "numgrid" => numgrid_checks(seed),
                "attention" => attention_checks(seed),
                "transformer" => transformer_checks(seed),
                "backbone" => backbone_checks(seed, weights),
                "matcher" => matcher_checks(seed),
                _ => geoeval_checks(seed),
            },
        })
        .collect())
}

fn numgrid_checks(seed: u64) -> Vec<CheckResult> {
    run(vec![
        (
            "matmul matches naive triple loop",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (a, b) = (rand_mat(&mut rng, 5, 7), rand_mat(&mut rng, 7, 3));
                let c = lib(matmul(&a, &b))?;
                for i in 0..5 {
                    for j in 0..3 {
                        let naive: f64 = (0..7).map(|k| a.get(i, k) * b.get(k, j)).sum();
                        ensure((c.get(i, j) - naive).abs() < 1e-12, || format!("entry ({i},{j})"))?;
                    }
                }
                Ok(())
            }),
        ),
        (
            "sym_eigen reconstructs A = V diag(λ) Vᵀ",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                let m = rand_mat(&mut rng, 6, 6);
                let a = lib(m.add(&m.transpose()))?;
                let (vals, v) = lib(sym_eigen(&a))?;
                ensure(vals.windows(2).all(|w| w[0] <= w[1]), || "eigenvalues not ascending".into())?;
                let rec = Mat::from_fn(6, 6, |i, j| (0..6).map(|k| v.get(i, k) * vals[k] * v.get(j, k)).sum());
                ensure(rec.max_abs_diff(&a) < 1e-10, || format!("residual {}", rec.max_abs_diff(&a)))
            }),
        ),
        (
            "delta depth-wise kernel is the identity",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
                let g = lib(FeatureGrid::new(lib(GridShape::new(4, 5))?, rand_mat(&mut rng, 20, 3)))?;
                let out = lib(depthwise_conv2d(&g, &lib(DwKernel::delta(3, 3))?))?;
                ensure(out == g, || "output differs from input".into())
            }),
        ),
    ])
}

fn attention_checks(seed: u64) -> Vec<CheckResult> {
    run(vec![
        (
            "focused map preserves the ReLU norm",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Mat::from_fn(1000, 8, |_, _| rng.gen_range(-2.0..2.0));
                for p in [1.0, 2.0, 3.0, 4.0] {
                    let y = focused_map(&x, p, 1e-6);
                    for i in 0..x.rows() {
                        let r: f64 = x.row(i).iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                        let n: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if r > 1e-3 {
                            ensure((r - n).abs() <= 1e-12, || format!("p={p} row {i}: {r} vs {n}"))?;
                        }
                    }
                }
                Ok(())
            }),
        ),
        (
            "p = 1 without convolution reduces to ReLU linear attention",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                for _ in 0..20 {
                    let inp = lib(AttentionInputs::new(
                        rand_mat(&mut rng, 9, 4),
                        rand_mat(&mut rng, 9, 4),
                        rand_mat(&mut rng, 9, 4),
                    ))?;
                    let a = lib(focused_linear_attention(&inp, &lib(FocusParams::new(1.0, 1e-6))?))?;
                    let b = lib(linear_attention(&inp, LinearKernel::Relu, true, 1e-6))?;
                    ensure(a.max_abs_diff(&b) <= 1e-12, || format!("diff {}", a.max_abs_diff(&b)))?;
                }
                Ok(())
            }),
        ),
        (
            "all-negative rows map to zero",
            Box::new(|| {
                let x = Mat::from_fn(3, 4, |_, _| -1.0);
                ensure(focused_map(&x, 3.0, 1e-6).data().iter().all(|&v| v == 0.0), || "non-zero output".into())
            }),
        ),
        (
            "softmax output lies in the convex hull of V",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
                let inp = lib(AttentionInputs::new(
                    rand_mat(&mut rng, 6, 3),
                    rand_mat(&mut rng, 7, 3),
                    rand_mat(&mut rng, 7, 2),
                ))?;
                let out = lib(attend(&AttentionVariant::softmax_for_dim(3), &inp))?;
                for c in 0..2 {
                    let lo = (0..7).map(|j| inp.v.get(j, c)).fold(f64::INFINITY, f64::min);
                    let hi = (0..7).map(|j| inp.v.get(j, c)).fold(f64::NEG_INFINITY, f64::max);
                    for i in 0..6 {
                        ensure(out.get(i, c) >= lo - 1e-12 && out.get(i, c) <= hi + 1e-12, || {
                            format!("row {i} column {c} outside [{lo}, {hi}]")
                        })?;
                    }
                }
                Ok(())
            }),
        ),
        (
            "analytic gradients match finite differences",
            Box::new(move || {
                let cfg = GradcheckConfig {
                    seeds: vec![seed],
                    ..Default::default()
                };
                for e in lib(run_gradcheck(&cfg))? {
                    ensure(e.max_error() < cfg.tolerance, || format!("{} error {:.3e}", e.variant, e.max_error()))?;
                }
                Ok(())
            }),
        ),
    ])
}

fn small_config(seed: u64) -> TransformerConfig {
    TransformerConfig {
        num_coarse_blocks: 2,
        num_fine_blocks: 1,
        coarse_dim: 8,
        fine_dim: 8,
        seed,
        ..Default::default()
    }
}

fn transformer_checks(seed: u64) -> Vec<CheckResult> {
    run(vec![
        (
            "swapping inputs swaps outputs",
            Box::new(move || {
                let cfg = small_config(seed);
                let w = TransformerWeights::init_seeded(&cfg);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = lib(GridShape::new(3, 3))?;
                let a = lib(FeatureGrid::new(shape, rand_mat(&mut rng, 9, 8)))?;
                let b = lib(FeatureGrid::new(shape, rand_mat(&mut rng, 9, 8)))?;
                let (ab_a, ab_b, _) = lib(run_stack(&a, &b, &cfg.attention, &w.coarse, true))?;
                let (ba_b, ba_a, _) = lib(run_stack(&b, &a, &cfg.attention, &w.coarse, true))?;
                ensure(ab_a == ba_a && ab_b == ba_b, || "outputs are not swapped copies".into())
            }),
        ),
        (
            "empty block list is the identity",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                let shape = lib(GridShape::new(2, 4))?;
                let a = lib(FeatureGrid::new(shape, rand_mat(&mut rng, 8, 8)))?;
                let (x, y, _) = lib(run_stack(&a, &a, &Default::default(), &[], true))?;
                ensure(x == a && y == a, || "tokens changed".into())
            }),
        ),
        (
            "weights survive a weight-file round trip",
            Box::new(move || {
                let cfg = small_config(seed);
                let w = TransformerWeights::init_seeded(&cfg);
                let mut wf = WeightFile::default();
                w.to_weight_file(&mut wf);
                let back = lib(WeightFile::from_bytes(&wf.to_bytes()))?;
                ensure(lib(TransformerWeights::from_weight_file(&back, &cfg))? == w, || "weights differ".into())
            }),
        ),
    ])
}

fn textured(seed: u64, h: usize, w: usize) -> crate::Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    Image::from_fn(h, w, |x, y| {
        let (x, y) = (x as f64, y as f64);
        0.5 + 0.2 * (0.31 * x + phases[0]).sin() * (0.17 * y + phases[1]).cos()
            + 0.15 * (0.07 * x + 0.23 * y + phases[2]).sin()
            + 0.1 * (0.53 * x - 0.41 * y + phases[3]).cos()
    })
}

fn backbone_checks(seed: u64, weights: Option<&Path>) -> Vec<CheckResult> {
    let mut checks: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        (
            "pyramid shapes are 1/8 and 1/2",
            Box::new(move || {
                let img = lib(textured(seed, 32, 48))?;
                let (c, f) = lib(extract_pyramid(&img, &backbone::init_seeded(seed)))?;
                ensure(
                    (c.height(), c.width(), c.dim(), f.height(), f.width(), f.dim()) == (4, 6, 64, 16, 24, 32),
                    || format!("got {:?} and {:?}", c.shape, f.shape),
                )
            }),
        ),
        (
            "8-pixel shift moves coarse features by one cell",
            Box::new(move || {
                let w = backbone::init_seeded(seed);
                let base = lib(textured(seed, 128, 136))?;
                let shifted = lib(Image::from_fn(128, 128, |x, y| base.at(x + 8, y, 0)))?;
                let orig = lib(Image::from_fn(128, 128, |x, y| base.at(x, y, 0)))?;
                let (ca, _) = lib(extract_pyramid(&orig, &w))?;
                let (cb, _) = lib(extract_pyramid(&shifted, &w))?;
                // Cells away from the zero-padded border.
                for y in 3..13 {
                    for x in 3..12 {
                        let (a, b) = (ca.token(x + 1, y), cb.token(x, y));
                        let diff = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                        ensure(diff < 1e-8, || format!("cell ({x},{y}) differs by {diff}"))?;
                    }
                }
                Ok(())
            }),
        ),
        (
            "weights survive a weight-file round trip",
            Box::new(move || {
                let w = backbone::init_seeded(seed);
                let mut wf = WeightFile::default();
                w.to_weight_file(&mut wf);
                let back = lib(BackboneWeights::from_weight_file(&lib(WeightFile::from_bytes(&wf.to_bytes()))?))?;
                ensure(back == w, || "weights differ".into())
            }),
        ),
    ];
    if let Some(path) = weights {
        checks.push((
            "supplied weight file loads",
            Box::new(move || lib(ModelWeights::load(path, &TransformerConfig::default())).map(|_| ())),
        ));
    }
    run(checks)
}

fn matcher_checks(seed: u64) -> Vec<CheckResult> {
    run(vec![
        (
            "planted permutation is recovered",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = 20;
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.gen_range(0..=i));
                }
                let mut s = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                for (i, &j) in perm.iter().enumerate() {
                    s.set(i, j, 8.0);
                }
                let got: Vec<(usize, usize)> = mnn_filter(&dual_softmax(&s), 0.2).iter().map(|m| (m.i, m.j)).collect();
                let want: Vec<(usize, usize)> = perm.iter().copied().enumerate().collect();
                ensure(got == want, || format!("got {got:?}"))
            }),
        ),
        (
            "dual-softmax factors are stochastic",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                let s = Mat::from_fn(7, 9, |_, _| rng.gen_range(-4.0..4.0));
                let (r, c) = dual_softmax_factors(&s);
                for i in 0..7 {
                    let sum: f64 = r.row(i).iter().sum();
                    ensure((sum - 1.0).abs() <= 1e-12, || format!("row {i} sums to {sum}"))?;
                }
                for j in 0..9 {
                    let sum: f64 = (0..7).map(|i| c.get(i, j)).sum();
                    ensure((sum - 1.0).abs() <= 1e-12, || format!("column {j} sums to {sum}"))?;
                }
                Ok(())
            }),
        ),
        (
            "hand-built heatmap expectation",
            Box::new(|| {
                let mut heat = vec![0.1; 9];
                heat[5] = 0.2;
                let (dx, dy) = heatmap_expectation(&heat, 3);
                ensure((dx - 0.1).abs() <= 1e-12 && dy.abs() <= 1e-12, || format!("got ({dx}, {dy})"))
            }),
        ),
        (
            "self-matching stays on the diagonal",
            Box::new(move || {
                let img = lib(textured(seed, 64, 64))?;
                let cfg = TransformerConfig { seed, ..Default::default() };
                let w = ModelWeights::init_seeded(seed, &cfg);
                let set = lib(match_pipeline(&img, &img, &w, &cfg, &MatcherConfig::default()))?;
                ensure(!set.coarse.is_empty(), || "no matches".into())?;
                ensure(set.coarse.iter().all(|m| m.i == m.j), || "off-diagonal match".into())
            }),
        ),
    ])
}

fn geoeval_checks(seed: u64) -> Vec<CheckResult> {
    run(vec![
        (
            "AUC closed forms and monotonicity",
            Box::new(move || {
                ensure(lib(auc(&[2.5], &[5.0]))? == vec![0.5], || "2.5° at 5° is not 0.5".into())?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..200 {
                    let errs: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..30.0)).collect();
                    let a = lib(auc(&errs, &AUC_THRESHOLDS))?;
                    ensure(a[0] <= a[1] && a[1] <= a[2], || format!("non-monotone {a:?}"))?;
                }
                Ok(())
            }),
        ),
        (
            "ground-truth correspondences satisfy the epipolar constraint",
            Box::new(move || {
                let pair = lib(geoeval::gen_synthetic_pair(seed, SceneMode::Injection, &SceneParams::default()))?;
                let e = pair.gt_pose.essential();
                for c in &pair.gt_correspondences {
                    let (a, b) = (pair.intrinsics.normalize(c.a), pair.intrinsics.normalize(c.b));
                    let ea = geoeval::mat3_vec(&e, &[a[0], a[1], 1.0]);
                    let r = b[0] * ea[0] + b[1] * ea[1] + ea[2];
                    ensure(r.abs() <= 1e-12, || format!("residual {r}"))?;
                }
                Ok(())
            }),
        ),
        (
            "noiseless pose recovery is exact",
            Box::new(move || {
                let pair = lib(geoeval::gen_synthetic_pair(seed, SceneMode::Injection, &SceneParams::default()))?;
                let (e, mask) =
                    lib(geoeval::ransac_essential(&pair.gt_correspondences, &pair.intrinsics, 50, 1.0, seed))?;
                ensure(mask.iter().all(|&m| m), || "inlier mask not all-true".into())?;
                let pose = lib(geoeval::decompose_essential(&e, &pair.gt_correspondences, &pair.intrinsics))?;
                let err = pose_error(&pose, &pair.gt_pose);
                ensure(err.pose_err_deg < 0.1, || format!("pose error {}°", err.pose_err_deg))
            }),
        ),
        (
            "pose error is symmetric",
            Box::new(move || {
                let a = lib(geoeval::gen_synthetic_pair(seed, SceneMode::Injection, &SceneParams::default()))?.gt_pose;
                let b = lib(geoeval::gen_synthetic_pair(seed + 1, SceneMode::Injection, &SceneParams::default()))?
                    .gt_pose;
                ensure(pose_error(&a, &b) == pose_error(&b, &a), || "asymmetric".into())
            }),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let reports = run_selftest(None, None, 0).unwrap();
        assert_eq!(reports.len(), MODULES.len());
        for r in &reports {
            assert!(r.passed(), "{}", r.summary());
        }
    }

    #[test]
    fn filter_and_unknown_module() {
        let reports = run_selftest(Some("matcher"), None, 1).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].module, "matcher");
        assert!(run_selftest(Some("nope"), None, 0).is_err());
    }

    #[test]
    fn corrupt_weights_fail_backbone_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTAWEIGHTFILE").unwrap();
        let reports = run_selftest(None, Some(&path), 0).unwrap();
        for r in &reports {
            assert_eq!(r.passed(), r.module != "backbone", "{}", r.summary());
        }
        let backbone = reports.iter().find(|r| r.module == "backbone").unwrap();
        assert!(backbone.summary().contains("offset 0"), "{}", backbone.summary());
    }
}
