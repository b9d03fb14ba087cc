//! Single-threaded timing of the attention kernels across token counts and
//! log-log slope fits.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, AttentionInputs, AttentionVariant, FocusParams, LinearKernel};
use crate::error::{Error, Result};
use crate::numgrid::{DwKernel, GridShape, Mat};

pub const FOCUSED_SIZES: [usize; 4] = [2048, 4096, 8192, 16384];
pub const SOFTMAX_SIZES: [usize; 4] = [512, 1024, 2048, 4096];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<String>,
    /// Token counts; `None` uses the per-variant defaults.
    pub sizes: Option<Vec<usize>>,
    pub dim: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: vec!["focused".into(), "linear".into(), "softmax".into()],
            sizes: None,
            dim: 64,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub n: usize,
    pub d: usize,
    pub median_seconds: f64,
    /// Sum of the output entries; identical across runs with one seed.
    pub checksum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeFit {
    pub variant: String,
    pub slope: f64,
    /// Residual variance of the log-log fit.
    pub residual_var: f64,
}

pub fn default_sizes(variant: &str) -> Vec<usize> {
    if variant == "softmax" {
        SOFTMAX_SIZES.to_vec()
    } else {
        FOCUSED_SIZES.to_vec()
    }
}

/// Near-square grid `h × w = n` with `h` the largest divisor `<= √n`.
pub fn grid_for(n: usize) -> Result<GridShape> {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    GridShape::new(h.max(1), n / h.max(1))
}

fn variant_for(name: &str, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<AttentionVariant> {
    Ok(match name {
        "softmax" => AttentionVariant::softmax_for_dim(d),
        "linear" => AttentionVariant::Linear {
            kernel: LinearKernel::EluPlusOne,
            normalized: true,
            eps: 1e-6,
        },
        "focused" => {
            let kernel = DwKernel::new(3, d, (0..9 * d).map(|_| rng.gen_range(-1.0 / 3.0..1.0 / 3.0)).collect())?;
            AttentionVariant::FocusedLinear(FocusParams::default().with_dwconv(kernel, grid_for(n)?))
        }
        other => {
            return Err(Error::Config(format!(
                "unknown bench variant {other:?} (expected softmax, linear or focused)"
            )))
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Times one configuration: a discarded warm-up, then `reps` timed runs.
pub fn time_variant(name: &str, n: usize, d: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32));
    let mut gen = |r: usize| Mat::from_fn(r, d, |_, _| rng.gen_range(-1.0..1.0));
    let inp = AttentionInputs::new(gen(n), gen(n), gen(n))?;
    let variant = variant_for(name, n, d, &mut rng)?;
    let warm = attend(&variant, &inp)?;
    let checksum = warm.data().iter().sum();
    let times = (0..reps)
        .map(|_| {
            let start = Instant::now();
            let out = attend(&variant, &inp)?;
            let dt = start.elapsed().as_secs_f64();
            std::hint::black_box(out);
            Ok(dt)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(BenchRow {
        variant: name.to_owned(),
        n,
        d,
        median_seconds: median(times),
        checksum,
    })
}

/// Least-squares slope of `ln t` against `ln N`.
pub fn fit_slope(points: &[(usize, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            got: points.len(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.max(1e-12).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all sizes are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let resid: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
        .sum::<f64>()
        / n;
    Ok((slope, resid))
}

/// Runs every variant over its sizes on a single-thread pool.
pub fn run_bench(cfg: &BenchConfig) -> Result<(Vec<BenchRow>, Vec<SlopeFit>)> {
    if cfg.reps < 3 {
        return Err(Error::Config(format!("bench needs reps >= 3, got {}", cfg.reps)));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("bench dim must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut rows = Vec::new();
        let mut fits = Vec::new();
        for name in &cfg.variants {
            let sizes = cfg.sizes.clone().unwrap_or_else(|| default_sizes(name));
            if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.is_empty() {
                return Err(Error::Config(format!("bench sizes must ascend, got {sizes:?}")));
            }
            let mut points = Vec::new();
            for &n in &sizes {
                let row = time_variant(name, n, cfg.dim, cfg.reps, cfg.seed)?;
                points.push((n, row.median_seconds));
                rows.push(row);
            }
            let (slope, residual_var) = fit_slope(&points)?;
            fits.push(SlopeFit {
                variant: name.clone(),
                slope,
                residual_var,
            });
        }
        Ok((rows, fits))
    })
}

/// CSV with header `variant,N,d,median_seconds`; slopes and checksums
/// follow as `#` comment lines.
pub fn format_csv(rows: &[BenchRow], fits: &[SlopeFit]) -> String {
    let mut s = String::from("variant,N,d,median_seconds\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.9}\n", r.variant, r.n, r.d, r.median_seconds));
    }
    for r in rows {
        s.push_str(&format!("# checksum {} {} {}\n", r.variant, r.n, r.checksum));
    }
    for f in fits {
        s.push_str(&format!(
            "# slope {} {:.4} residual_var {:.3e}\n",
            f.variant, f.slope, f.residual_var
        ));
    }
    s
}
