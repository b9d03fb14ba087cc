//! Command-line front end: `match`, `bench`, `eval`, `gradcheck` and
//! `selftest`.
//!
//! Every tunable is a key. Keys come from a `key = value` config file
//! (`--config`) and from `--key value` flags; flags win over the file, the
//! file wins over the defaults. Exit codes: 0 success, 1 check or numerical
//! failure, 2 usage or I/O error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::bench::{format_csv, run_bench, BenchConfig};
use crate::error::{Error, Result};
use crate::geoeval::{evaluate, EvalConfig, SceneMode, AUC_THRESHOLDS};
use crate::gradcheck::{format_table, run_gradcheck, GradcheckConfig};
use crate::image::Image;
use crate::matcher::{format_jsonl, format_tsv, match_pipeline, MatcherConfig, ModelWeights};
use crate::selftest::run_selftest;
use crate::transformer::{AttentionKind, TransformerConfig};
use crate::weightfile::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFormat {
    Tsv,
    Jsonl,
}

/// Resolved settings for one invocation.
#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    pub weights: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: MatchFormat,
    pub transformer: TransformerConfig,
    pub matcher: MatcherConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
    /// Number of gradcheck seeds, counted up from `seed`.
    pub gradcheck_seeds: usize,
    /// Feature dimension for `bench` (default 64) or `gradcheck` (default 8).
    pub dim: Option<usize>,
    pub module: Option<String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            threads: None,
            weights: None,
            output: None,
            format: MatchFormat::Tsv,
            transformer: TransformerConfig::default(),
            matcher: MatcherConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
            gradcheck_seeds: 5,
            dim: None,
            module: None,
        }
    }
}

/// Every key accepted by [`Settings::set`], in dash form.
pub const KEYS: [&str; 41] = [
    "seed",
    "threads",
    "weights",
    "output",
    "format",
    "variant",
    "focusing-power",
    "coarse-blocks",
    "fine-blocks",
    "positional",
    "tau",
    "conf-threshold",
    "window",
    "tau-fine",
    "border-margin",
    "mode",
    "pairs",
    "noise",
    "ransac-iters",
    "px-thresh",
    "height",
    "width",
    "focal",
    "points",
    "max-rotation",
    "min-depth",
    "max-depth",
    "baseline",
    "descriptor-dim",
    "border-cells",
    "blank",
    "variants",
    "sizes",
    "dim",
    "reps",
    "h",
    "tolerance",
    "seeds",
    "grid",
    "kink-margin",
    "module",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(key, v)).collect()
}

impl Settings {
    /// Applies one `key = value` pair. Underscores in `key` count as dashes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        let sc = &mut self.eval.scene;
        match k {
            "seed" => self.seed = parse(k, value)?,
            "threads" => {
                let n: usize = parse(k, value)?;
                if n == 0 {
                    return Err(Error::Config("threads must be >= 1".into()));
                }
                self.threads = Some(n);
            }
            "weights" => self.weights = Some(PathBuf::from(value.trim())),
            "output" => self.output = Some(PathBuf::from(value.trim())),
            "format" => {
                self.format = match value.trim() {
                    "tsv" => MatchFormat::Tsv,
                    "jsonl" => MatchFormat::Jsonl,
                    other => return Err(Error::Config(format!("unknown format {other:?} (expected tsv or jsonl)"))),
                }
            }
            "variant" => self.transformer.attention = AttentionKind::from_name(value.trim())?,
            "focusing-power" => {
                let p: f64 = parse(k, value)?;
                match &mut self.transformer.attention {
                    AttentionKind::Focused { p: fp, .. } => *fp = p,
                    _ => return Err(Error::Config("focusing-power needs variant focused".into())),
                }
            }
            "coarse-blocks" => self.transformer.num_coarse_blocks = parse(k, value)?,
            "fine-blocks" => self.transformer.num_fine_blocks = parse(k, value)?,
            "positional" => self.transformer.positional = parse(k, value)?,
            "tau" => self.matcher.tau = parse(k, value)?,
            "conf-threshold" => self.matcher.conf_threshold = parse(k, value)?,
            "window" => self.matcher.window = parse(k, value)?,
            "tau-fine" => self.matcher.tau_fine = parse(k, value)?,
            "border-margin" => self.matcher.border_margin = parse(k, value)?,
            "mode" => self.eval.mode = SceneMode::from_name(value.trim())?,
            "pairs" => self.eval.pairs = parse(k, value)?,
            "noise" => sc.noise = parse(k, value)?,
            "ransac-iters" => self.eval.ransac_iters = parse(k, value)?,
            "px-thresh" => self.eval.px_thresh = parse(k, value)?,
            "height" => sc.height = parse(k, value)?,
            "width" => sc.width = parse(k, value)?,
            "focal" => sc.focal = parse(k, value)?,
            "points" => sc.points = parse(k, value)?,
            "max-rotation" => sc.max_rotation_deg = parse(k, value)?,
            "min-depth" => sc.min_depth = parse(k, value)?,
            "max-depth" => sc.max_depth = parse(k, value)?,
            "baseline" => sc.baseline = parse(k, value)?,
            "descriptor-dim" => sc.descriptor_dim = parse(k, value)?,
            "border-cells" => sc.border_cells = parse(k, value)?,
            "blank" => sc.blank = parse(k, value)?,
            "variants" => self.bench.variants = value.split(',').map(|v| v.trim().to_owned()).collect(),
            "sizes" => self.bench.sizes = Some(parse_list(k, value)?),
            "dim" => self.dim = Some(parse(k, value)?),
            "reps" => self.bench.reps = parse(k, value)?,
            "h" => self.gradcheck.h = parse(k, value)?,
            "tolerance" => self.gradcheck.tolerance = parse(k, value)?,
            "seeds" => self.gradcheck_seeds = parse(k, value)?,
            "grid" => self.gradcheck.grid = parse(k, value)?,
            "kink-margin" => self.gradcheck.kink_margin = parse(k, value)?,
            "module" => self.module = Some(value.trim().to_owned()),
            _ => {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments and
    /// blank lines ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    /// Propagates the global seed into every module config.
    fn resolved(mut self) -> Self {
        self.transformer.seed = self.seed;
        self.eval.seed = self.seed;
        self.eval.transformer = self.transformer.clone();
        self.eval.matcher = self.matcher.clone();
        self.bench.seed = self.seed;
        self.gradcheck.seeds = (self.seed..self.seed + self.gradcheck_seeds as u64).collect();
        self
    }
}

fn key_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").help(help)
}

fn matcher_args() -> Vec<Arg> {
    vec![
        key_arg("weights", "model weight file (default: seeded initialisation)"),
        key_arg("variant", "attention kernel: softmax, linear or focused"),
        key_arg("focusing-power", "focusing exponent of the focused kernel"),
        key_arg("coarse-blocks", "coarse transformer blocks"),
        key_arg("fine-blocks", "fine transformer blocks"),
        key_arg("positional", "add the 2-D positional encoding (true/false)"),
        key_arg("tau", "similarity temperature"),
        key_arg("conf-threshold", "minimum dual-softmax confidence"),
        key_arg("window", "fine window side (odd)"),
        key_arg("tau-fine", "fine heatmap temperature"),
        key_arg("border-margin", "coarse cells at the edge that never match"),
    ]
}

pub fn command() -> Command {
    Command::new("focusmatch")
        .about("Detector-free local feature matching with focused linear attention")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("key = value config file; flags override it"),
        )
        .arg(key_arg("seed", "seed for all randomness").global(true))
        .arg(key_arg("threads", "worker threads (default: all cores)").global(true))
        .subcommand(
            Command::new("match")
                .about("Match two images and write one record per correspondence")
                .arg(Arg::new("a").required(true).value_name("IMAGE_A"))
                .arg(Arg::new("b").required(true).value_name("IMAGE_B"))
                .arg(key_arg("output", "output file (default: stdout)"))
                .arg(key_arg("format", "tsv or jsonl"))
                .args(matcher_args()),
        )
        .subcommand(
            Command::new("bench")
                .about("Time the attention kernels and fit log-log slopes")
                .arg(key_arg("variants", "comma-separated: focused,linear,softmax"))
                .arg(key_arg("sizes", "comma-separated ascending token counts"))
                .arg(key_arg("dim", "feature dimension (default 64)"))
                .arg(key_arg("reps", "timed repetitions per size (>= 3)"))
                .arg(key_arg("output", "CSV file (default: stdout)")),
        )
        .subcommand(
            Command::new("eval")
                .about("Relative pose evaluation on synthetic pairs")
                .arg(key_arg("mode", "injection or texture"))
                .arg(key_arg("pairs", "number of pairs"))
                .arg(key_arg("noise", "descriptor noise sigma (injection mode)"))
                .arg(key_arg("ransac-iters", "RANSAC iterations"))
                .arg(key_arg("px-thresh", "Sampson inlier threshold in pixels"))
                .arg(key_arg("height", "image height"))
                .arg(key_arg("width", "image width"))
                .arg(key_arg("focal", "focal length in pixels"))
                .arg(key_arg("points", "3-D points per pair (injection mode)"))
                .arg(key_arg("max-rotation", "largest rotation angle in degrees"))
                .arg(key_arg("min-depth", "nearest point depth"))
                .arg(key_arg("max-depth", "farthest point depth"))
                .arg(key_arg("baseline", "camera centre distance"))
                .arg(key_arg("descriptor-dim", "injected descriptor dimension"))
                .arg(key_arg("border-cells", "edge cells left without points"))
                .arg(
                    Arg::new("blank")
                        .long("blank")
                        .action(ArgAction::SetTrue)
                        .help("render constant images (texture mode)"),
                )
                .arg(key_arg("output", "report JSON file (default: stdout)"))
                .args(matcher_args()),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Compare analytic attention gradients with finite differences")
                .arg(key_arg("h", "central-difference step"))
                .arg(key_arg("tolerance", "largest accepted relative error"))
                .arg(key_arg("seeds", "number of seeds, counted up from --seed"))
                .arg(key_arg("dim", "feature dimension (default 8)"))
                .arg(key_arg("grid", "tokens per grid side"))
                .arg(key_arg("kink-margin", "smallest |x| sampled for ReLU inputs")),
        )
        .subcommand(
            Command::new("selftest")
                .about("Run every module's invariant checks")
                .arg(key_arg("module", "run one module's checks only"))
                .arg(key_arg("weights", "model weight file the backbone suite loads")),
        )
}

const NON_KEYS: [&str; 3] = ["config", "a", "b"];

fn settings_from(m: &ArgMatches) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = m.get_one::<String>("config") {
        s.apply_file(Path::new(path))?;
    }
    for id in m.ids() {
        let id = id.as_str();
        if NON_KEYS.contains(&id) || m.value_source(id) != Some(ValueSource::CommandLine) {
            continue;
        }
        if id == "blank" {
            s.set(id, "true")?;
        } else if let Some(v) = m.get_one::<String>(id) {
            s.set(id, v)?;
        }
    }
    Ok(s.resolved())
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Config(_) | Error::Format { .. } | Error::Truncated { .. } | Error::Shape(_) => 2,
        _ => 1,
    }
}

fn emit(text: &str, output: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match output {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_weights(s: &Settings) -> Result<ModelWeights> {
    match &s.weights {
        Some(path) => ModelWeights::load(path, &s.transformer),
        None => Ok(ModelWeights::init_seeded(s.seed, &s.transformer)),
    }
}

fn cmd_match(m: &ArgMatches, s: &Settings, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let path_a = Path::new(m.get_one::<String>("a").expect("required"));
    let path_b = Path::new(m.get_one::<String>("b").expect("required"));
    let img_a = Image::load(path_a)?;
    let img_b = Image::load(path_b)?;
    let weights = load_weights(s)?;
    let set = match_pipeline(&img_a, &img_b, &weights, &s.transformer, &s.matcher)?;
    let text = match s.format {
        MatchFormat::Tsv => format_tsv(&set.refined),
        MatchFormat::Jsonl => format_jsonl(&set.refined),
    };
    emit(&text, s.output.as_deref(), stdout)?;
    let d = &set.diagnostics;
    let _ = writeln!(
        stderr,
        "variant {}: {} candidates, {} below threshold, {} dropped at fine windows, {} refined, {} layers without depth-wise branch",
        s.transformer.attention.name(),
        d.candidates,
        d.filtered,
        d.window_dropped,
        d.refined,
        d.dwconv_skipped
    );
    Ok(0)
}

fn cmd_bench(s: &Settings, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let cfg = BenchConfig {
        dim: s.dim.unwrap_or(64),
        ..s.bench.clone()
    };
    let (rows, fits) = run_bench(&cfg)?;
    emit(&format_csv(&rows, &fits), s.output.as_deref(), stdout)?;
    for f in &fits {
        let _ = writeln!(stderr, "{}: slope {:.3} (residual variance {:.2e})", f.variant, f.slope, f.residual_var);
    }
    Ok(0)
}

fn cmd_eval(s: &Settings, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let weights = s.weights.as_ref().map(|_| load_weights(s)).transpose()?;
    let report = evaluate(&s.eval, weights.as_ref())?;
    emit(&(report.to_json() + "\n"), s.output.as_deref(), stdout)?;
    let failed = report.per_pair.iter().filter(|r| r.failed).count();
    let aucs: Vec<String> = AUC_THRESHOLDS
        .iter()
        .map(|&t| format!("AUC@{t} {:.4}", report.auc_at(t)))
        .collect();
    let _ = writeln!(stderr, "{}; {failed}/{} pairs failed", aucs.join(", "), report.per_pair.len());
    Ok(0)
}

fn cmd_gradcheck(s: &Settings, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = GradcheckConfig {
        dim: s.dim.unwrap_or(8),
        ..s.gradcheck.clone()
    };
    let entries = run_gradcheck(&cfg)?;
    emit(&format_table(&entries, cfg.tolerance), None, stdout)?;
    let worst = entries.iter().map(|e| e.max_error()).fold(0.0, f64::max);
    let ok = entries.iter().all(|e| e.max_error() < cfg.tolerance);
    emit(
        &format!(
            "worst relative error {worst:.3e}, tolerance {:.1e}: {}\n",
            cfg.tolerance,
            if ok { "pass" } else { "FAIL" }
        ),
        None,
        stdout,
    )?;
    Ok(if ok { 0 } else { 1 })
}

fn cmd_selftest(s: &Settings, stdout: &mut dyn Write) -> Result<i32> {
    let reports = run_selftest(s.module.as_deref(), s.weights.as_deref(), s.seed)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.summary());
        text.push('\n');
    }
    emit(&text, None, stdout)?;
    Ok(if reports.iter().all(|r| r.passed()) { 0 } else { 1 })
}

fn dispatch(m: &ArgMatches, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let s = settings_from(sub)?;
    let body = |stdout: &mut dyn Write, stderr: &mut dyn Write| match name {
        "match" => cmd_match(sub, &s, stdout, stderr),
        "bench" => cmd_bench(&s, stdout, stderr),
        "eval" => cmd_eval(&s, stdout, stderr),
        "gradcheck" => cmd_gradcheck(&s, stdout),
        _ => cmd_selftest(&s, stdout),
    };
    match s.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            let (mut out, mut err) = (Vec::new(), Vec::new());
            let code = pool.install(|| body(&mut out, &mut err));
            let _ = stderr.write_all(&err);
            stdout.write_all(&out).map_err(|e| Error::io("<stdout>", e))?;
            code
        }
        None => body(stdout, stderr),
    }
}

/// Runs the tool on `args` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&matches, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("seed", "3"),
            ("threads", "2"),
            ("weights", "w.bin"),
            ("output", "o.tsv"),
            ("format", "jsonl"),
            ("variant", "focused"),
            ("focusing-power", "2"),
            ("positional", "false"),
            ("mode", "texture"),
            ("blank", "true"),
            ("variants", "softmax,linear"),
            ("sizes", "16,32"),
            ("module", "matcher"),
        ];
        for key in KEYS.iter() {
            let value = samples.iter().find(|(k, _)| k == key).map_or("1", |(_, v)| v);
            Settings::default().set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert!(Settings::default().set("ransac_iters", "5").is_ok());
        assert!(matches!(Settings::default().set("pairz", "5"), Err(Error::Config(_))));
        assert!(Settings::default().set("pairs", "many").is_err());
    }

    #[test]
    fn flags_cover_the_keys() {
        let cmd = command();
        for key in KEYS.iter() {
            let found = cmd.get_arguments().any(|a| a.get_id() == *key)
                || cmd.get_subcommands().any(|c| c.get_arguments().any(|a| a.get_id() == *key));
            assert!(found, "no flag for {key}");
        }
        cmd.debug_assert();
    }
}
