//! Finite-difference verification of the analytic attention gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, attention_grads, finite_diff, finite_diff_grad, AttentionInputs, AttentionVariant,
    FocusParams, LinearKernel,
};
use crate::error::{Error, Result};
use crate::numgrid::{DwKernel, GridShape, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    /// Tokens are laid out on a `grid × grid` grid for the depth-wise branch.
    pub grid: usize,
    pub dim: usize,
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// ReLU inputs are sampled with `|x| >= kink_margin`.
    pub kink_margin: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: (0..5).collect(),
            grid: 4,
            dim: 8,
            h: 1e-5,
            tolerance: 1e-6,
            kink_margin: 0.05,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.dim == 0 || self.seeds.is_empty() {
            return Err(Error::Config("gradcheck needs grid, dim >= 1 and a seed".into()));
        }
        if !(self.h > 0.0) || !(self.tolerance > 0.0) || !(self.kink_margin > 0.0 && self.kink_margin < 1.0) {
            return Err(Error::Config(format!(
                "gradcheck needs h > 0, tolerance > 0, 0 < kink_margin < 1; got {}, {}, {}",
                self.h, self.tolerance, self.kink_margin
            )));
        }
        Ok(())
    }
}

/// Largest relative error per gradient for one (variant, seed).
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub variant: String,
    pub seed: u64,
    pub dq: f64,
    pub dk: f64,
    pub dv: f64,
    pub dw: Option<f64>,
}

impl GradcheckEntry {
    pub fn max_error(&self) -> f64 {
        self.dq.max(self.dk).max(self.dv).max(self.dw.unwrap_or(0.0))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-3)`, maximised over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

fn away_from_kinks(rng: &mut ChaCha8Rng, r: usize, c: usize, margin: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn check_one(
    name: &str,
    variant: &AttentionVariant,
    inp: &AttentionInputs,
    upstream: &Mat,
    seed: u64,
    h: f64,
) -> Result<GradcheckEntry> {
    let an = attention_grads(variant, inp, upstream)?;
    let loss = |i: &AttentionInputs| {
        attend(variant, i)
            .and_then(|out| out.dot(upstream))
            .unwrap_or(f64::NAN)
    };
    let (dq, dk, dv) = finite_diff_grad(loss, inp, h)?;
    let dw = match (variant, &an.dw) {
        (AttentionVariant::FocusedLinear(fp), Some(dw_an)) => {
            let branch = fp.dwconv.as_ref().expect("gradient implies a branch");
            let (size, ch) = (branch.kernel.size(), branch.kernel.channels());
            let numeric = finite_diff(
                |w| {
                    let mut probe = fp.clone();
                    let kernel = DwKernel::new(size, ch, w.to_vec()).expect("same kernel shape");
                    probe.dwconv.as_mut().expect("branch").kernel = kernel;
                    attend(&AttentionVariant::FocusedLinear(probe), inp)
                        .and_then(|out| out.dot(upstream))
                        .unwrap_or(f64::NAN)
                },
                branch.kernel.weights(),
                h,
            );
            Some(max_relative_error(dw_an.weights(), &numeric))
        }
        _ => None,
    };
    Ok(GradcheckEntry {
        variant: name.to_owned(),
        seed,
        dq: max_relative_error(an.dq.data(), dq.data()),
        dk: max_relative_error(an.dk.data(), dk.data()),
        dv: max_relative_error(an.dv.data(), dv.data()),
        dw,
    })
}

/// Checks softmax, linear (ReLU and elu+1 kernels) and focused linear
/// attention with a depth-wise branch, once per seed.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<GradcheckEntry>> {
    cfg.validate()?;
    let n = cfg.grid * cfg.grid;
    let d = cfg.dim;
    let shape = GridShape::new(cfg.grid, cfg.grid)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inp = AttentionInputs::new(
            away_from_kinks(&mut rng, n, d, cfg.kink_margin),
            away_from_kinks(&mut rng, n, d, cfg.kink_margin),
            Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)),
        )?;
        let upstream = Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let kernel = DwKernel::new(3, d, (0..9 * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let cases = [
            ("softmax", AttentionVariant::softmax_for_dim(d)),
            ("linear", AttentionVariant::linear_relu()),
            (
                "linear-elu",
                AttentionVariant::Linear {
                    kernel: LinearKernel::EluPlusOne,
                    normalized: true,
                    eps: 1e-6,
                },
            ),
            (
                "focused",
                AttentionVariant::FocusedLinear(FocusParams::new(3.0, 1e-6)?.with_dwconv(kernel, shape)),
            ),
        ];
        for (name, variant) in &cases {
            out.push(check_one(name, variant, &inp, &upstream, seed, cfg.h)?);
        }
    }
    Ok(out)
}

/// Fixed-width table, one row per entry, with a pass/fail column.
pub fn format_table(entries: &[GradcheckEntry], tolerance: f64) -> String {
    let mut s = format!(
        "{:<11} {:>5} {:>10} {:>10} {:>10} {:>10}  result\n",
        "variant", "seed", "dQ", "dK", "dV", "dW"
    );
    for e in entries {
        let dw = e.dw.map_or("-".to_owned(), |v| format!("{v:.3e}"));
        let verdict = if e.max_error() < tolerance { "pass" } else { "FAIL" };
        s.push_str(&format!(
            "{:<11} {:>5} {:>10.3e} {:>10.3e} {:>10.3e} {:>10}  {verdict}\n",
            e.variant, e.seed, e.dq, e.dk, e.dv, dw
        ));
    }
    s
}
