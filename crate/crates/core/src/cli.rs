//! The `phiseg` command line. Every command reads the same run config,
//! writes under one run directory and reports failure only through its
//! exit code, with diagnostics on stderr.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | configuration or usage error |
//! | 3 | missing input, refused overwrite or other I/O failure |
//! | 4 | checkpoint and dataset disagree on dimensions |
//! | 5 | training diverged |

use std::ffi::OsString;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::{resolve_run_root, MethodKind, MethodSpec, RunConfig, RunLayout};
use crate::data::{generate_dataset, Dataset, Split};
use crate::inference::{draw_samples, SampleSet};
use crate::plot::{label_png, render_panel, save_png};
use crate::seed::{derive_seed, string_id};
use crate::train::{evaluate, train};
use crate::{fsio, Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIMENSION: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "phiseg", version, about = "Hierarchical probabilistic segmentation toolkit")]
pub struct Cli {
    /// JSON run config; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub force: bool,
    /// Run directory; falls back to the config, then $PHISEG_RUN_ROOT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the multi-annotator dataset into <out>/data.
    MakeData,
    /// Train methods into <out>/models/<method>.
    Train(TrainArgs),
    /// Score trained methods into <out>/eval/<method>/metrics.csv.
    Eval(EvalArgs),
    /// Persist samples into <out>/samples/<method>/<case>.
    Sample(SampleArgs),
    /// Render panels into <out>/plots/<case>.png.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct MethodArgs {
    /// A method name from the config, or `phiseg` / `deterministic`.
    #[arg(long)]
    pub method: Option<String>,
    /// Latent levels when `--method` names a kind.
    #[arg(long)]
    pub latent_levels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    /// Overrides train.max_steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    /// Overrides eval.n_samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Overrides eval.max_cases.
    #[arg(long)]
    pub max_cases: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    /// Overrides sample.n.
    #[arg(long)]
    pub n: Option<usize>,
    /// Case to sample; repeatable.
    #[arg(long = "case")]
    pub cases: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Method rows to draw; repeatable. Every sampled method by default.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    /// Case to plot; repeatable.
    #[arg(long = "case")]
    pub cases: Vec<String>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidInput(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Shape(_) | Error::DimensionMismatch(_) => EXIT_DIMENSION,
        Error::Diverged { .. } => EXIT_DIVERGED,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("phiseg: {e}");
            exit_code(&e)
        }
    }
}

/// Config and output paths, resolved before any command runs.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub layout: RunLayout,
    pub force: bool,
}

pub fn resolve(cli: &Cli) -> Result<Resolved> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    let root = resolve_run_root(cli.out.as_deref(), config.out.as_deref())?;
    Ok(Resolved {
        config,
        layout: RunLayout::new(root),
        force: cli.force,
    })
}

pub fn execute(cli: &Cli) -> Result<()> {
    let r = resolve(cli)?;
    match &cli.command {
        Command::MakeData => cmd_make_data(&r),
        Command::Train(a) => cmd_train(&r, a),
        Command::Eval(a) => cmd_eval(&r, a),
        Command::Sample(a) => cmd_sample(&r, a),
        Command::Plot(a) => cmd_plot(&r, a),
    }
}

fn already_exists(path: &Path) -> Error {
    Error::io(
        path,
        std::io::Error::new(ErrorKind::AlreadyExists, "output exists; pass --force to replace it"),
    )
}

fn not_found(path: &Path, what: &str) -> Error {
    Error::io(path, std::io::Error::new(ErrorKind::NotFound, what.to_string()))
}

/// Refuses an existing output unless forced, in which case it is removed.
fn claim(path: &Path, force: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(already_exists(path));
    }
    let res = if path.is_dir() {
        std::fs::remove_dir_all(path)
    } else {
        std::fs::remove_file(path)
    };
    res.map_err(|e| Error::io(path, e))
}

fn load_dataset(layout: &RunLayout) -> Result<Dataset> {
    let root = layout.data();
    if !root.join("manifest.json").exists() {
        return Err(not_found(&root, "no dataset; run `phiseg make-data` first"));
    }
    Dataset::load(&root)
}

fn parse_kind(s: &str) -> Option<MethodKind> {
    match s {
        "phiseg" => Some(MethodKind::Phiseg),
        "deterministic" | "det" => Some(MethodKind::Deterministic),
        _ => None,
    }
}

/// Methods a training run covers: all configured ones by default, else the
/// named one, else a fresh method of the named kind.
pub fn select_methods(cfg: &RunConfig, args: &MethodArgs) -> Result<Vec<MethodSpec>> {
    match (&args.method, args.latent_levels) {
        (None, None) => {
            if cfg.methods.is_empty() {
                return Err(Error::InvalidConfig("the config lists no methods".into()));
            }
            Ok(cfg.methods.clone())
        }
        (None, Some(l)) => Ok(vec![fresh(MethodKind::Phiseg, l)]),
        (Some(name), levels) => {
            if let Some(m) = cfg.method(name) {
                let mut m = m.clone();
                if let Some(l) = levels {
                    m.latent_levels = l;
                    m.resolution_levels = m.resolution_levels.max(l);
                }
                return Ok(vec![m]);
            }
            match parse_kind(name) {
                Some(kind) => Ok(vec![fresh(kind, levels.unwrap_or(3))]),
                None => Err(Error::InvalidConfig(format!("unknown method {name:?}"))),
            }
        }
    }
}

fn fresh(kind: MethodKind, levels: usize) -> MethodSpec {
    MethodSpec::new(MethodSpec::default_name(kind, levels), kind, levels)
}

fn list_dirs(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

/// Names of trained methods a command applies to.
fn trained_methods(r: &Resolved, args: &MethodArgs) -> Result<Vec<String>> {
    if args.method.is_some() || args.latent_levels.is_some() {
        return Ok(select_methods(&r.config, args)?.into_iter().map(|m| m.name).collect());
    }
    let names: Vec<String> = list_dirs(&r.layout.root.join("models"))
        .into_iter()
        .filter(|n| r.layout.checkpoint(n).exists())
        .collect();
    if names.is_empty() {
        return Err(not_found(&r.layout.root.join("models"), "no trained models; run `phiseg train` first"));
    }
    Ok(names)
}

fn load_weights(r: &Resolved, method: &str) -> Result<crate::model::NetworkWeights<f32>> {
    let path = r.layout.checkpoint(method);
    if !path.exists() {
        return Err(not_found(&path, &format!("method {method} has no checkpoint")));
    }
    Ok(load_checkpoint::<f32>(&path, None)?.weights)
}

fn first_test_case(ds: &Dataset) -> Result<String> {
    ds.indices(Split::Test)
        .first()
        .map(|&i| ds.cases[i].id.clone())
        .ok_or_else(|| Error::InvalidInput("the test split is empty".into()))
}

fn pick_cases(ds: &Dataset, flags: &[String], fallbacks: &[&[String]]) -> Result<Vec<String>> {
    let chosen = std::iter::once(flags)
        .chain(fallbacks.iter().copied())
        .find(|c| !c.is_empty())
        .map(<[String]>::to_vec);
    let cases = match chosen {
        Some(c) => c,
        None => vec![first_test_case(ds)?],
    };
    for c in &cases {
        if ds.find(c).is_none() {
            return Err(Error::InvalidInput(format!("unknown case {c:?}")));
        }
    }
    Ok(cases)
}

fn cmd_make_data(r: &Resolved) -> Result<()> {
    let root = r.layout.data();
    let ds = generate_dataset(&r.config.data, &root, r.force)?;
    let m = &ds.manifest;
    let count = |s| ds.indices(s).len();
    println!(
        "{}: {} cases ({} train, {} val, {} test), {}x{}, {} classes, {} annotators",
        root.join("manifest.json").display(),
        m.cases.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        m.height,
        m.width,
        m.classes,
        m.annotators
    );
    Ok(())
}

fn cmd_train(r: &Resolved, a: &TrainArgs) -> Result<()> {
    let methods = select_methods(&r.config, &a.method)?;
    let ds = load_dataset(&r.layout)?;
    let mut section = r.config.train.clone();
    if let Some(steps) = a.steps {
        section.max_steps = steps;
    }
    let planned: Vec<_> = methods
        .iter()
        .map(|m| {
            let model = m.model_config(&ds)?;
            Ok((m, section.train_config(model, r.config.seed, r.layout.model_dir(&m.name))))
        })
        .collect::<Result<_>>()?;
    for (m, _) in &planned {
        claim(&r.layout.model_dir(&m.name), r.force)?;
    }
    for (m, cfg) in planned {
        let out = train(&cfg, &ds)?;
        println!(
            "{}: best step {} val loss {:.6} -> {}",
            m.name,
            out.best.meta.step,
            out.best.meta.val_loss,
            r.layout.checkpoint(&m.name).display()
        );
    }
    Ok(())
}

fn cmd_eval(r: &Resolved, a: &EvalArgs) -> Result<()> {
    let methods = trained_methods(r, &a.method)?;
    let ds = load_dataset(&r.layout)?;
    let mut section = r.config.eval.clone();
    if let Some(n) = a.samples {
        section.n_samples = n;
    }
    if a.max_cases.is_some() {
        section.max_cases = a.max_cases;
    }
    let cfg = section.eval_config(r.config.seed);
    for m in &methods {
        let path = r.layout.metrics(m);
        claim(&path, r.force)?;
        let report = evaluate(&load_weights(r, m)?, &ds, &cfg, m)?;
        fsio::write_atomic(&path, report.to_csv().as_bytes())?;
        let s = report.summary();
        println!(
            "{m}: ged {:.6} sncc {:.6} dice {:.6} over {} cases -> {}",
            s.ged,
            s.sncc,
            s.dice,
            report.cases.len(),
            path.display()
        );
    }
    Ok(())
}

/// Seed of case `id` under run seed `seed`; matches evaluation.
pub fn case_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, &[string_id(id)])
}

fn cmd_sample(r: &Resolved, a: &SampleArgs) -> Result<()> {
    let methods = trained_methods(r, &a.method)?;
    let ds = load_dataset(&r.layout)?;
    let n = a.n.unwrap_or(r.config.sample.n);
    if n < 1 {
        return Err(Error::InvalidConfig("--n must be at least 1".into()));
    }
    let cases = pick_cases(&ds, &a.cases, &[&r.config.sample.cases])?;
    for m in &methods {
        let w = load_weights(r, m)?;
        for id in &cases {
            let dir = r.layout.samples(m, id);
            claim(&dir, r.force)?;
            let case = &ds.cases[ds.find(id).expect("checked")];
            let ss = draw_samples(&w, &case.image.to_tensor::<f32>(), n, case_seed(r.config.seed, id))?;
            for (j, labels) in ss.labels.iter().enumerate() {
                fsio::write_atomic(&dir.join(format!("sample_{j:03}.png")), &label_png(labels, ss.classes)?)?;
            }
            ss.save(&r.layout.sample_set(m, id))?;
            println!("{m} {id}: {n} samples -> {}", dir.display());
        }
    }
    Ok(())
}

fn cmd_plot(r: &Resolved, a: &PlotArgs) -> Result<()> {
    let ds = load_dataset(&r.layout)?;
    let cases = pick_cases(&ds, &a.cases, &[&r.config.plot.cases, &r.config.sample.cases])?;
    let methods = if a.methods.is_empty() {
        list_dirs(&r.layout.root.join("samples"))
    } else {
        a.methods.clone()
    };
    for id in &cases {
        if methods.is_empty() {
            return Err(not_found(
                &r.layout.root.join("samples"),
                &format!("no samples for case {id}; run `phiseg sample` first"),
            ));
        }
        let mut rows = Vec::with_capacity(methods.len());
        for m in &methods {
            let path = r.layout.sample_set(m, id);
            if !path.exists() {
                return Err(not_found(&path, &format!("no samples of method {m} for case {id}")));
            }
            rows.push((m.clone(), SampleSet::load(&path)?));
        }
        let out = r.layout.plot(id);
        claim(&out, r.force)?;
        let case = &ds.cases[ds.find(id).expect("checked")];
        let img = render_panel(case, &rows, ds.classes(), r.config.plot.tiles, r.config.plot.scale)?;
        save_png(&img, &out)?;
        println!("{id}: {} method rows -> {}", rows.len(), out.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::InvalidConfig(String::new())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::DimensionMismatch(String::new())), EXIT_DIMENSION);
        assert_eq!(exit_code(&Error::Diverged { step: 3, value: f64::NAN }), EXIT_DIVERGED);
        assert_eq!(exit_code(&already_exists(Path::new("x"))), EXIT_IO);
    }

    #[test]
    fn kind_selection_names_method() {
        let cfg = RunConfig::default();
        let args = MethodArgs {
            method: Some("phiseg".into()),
            latent_levels: Some(5),
        };
        let m = select_methods(&cfg, &args).unwrap();
        assert_eq!(m[0].name, "phiseg_l5");
        assert_eq!((m[0].latent_levels, m[0].resolution_levels), (5, 5));
    }

    #[test]
    fn bad_flag_is_usage_error() {
        assert_eq!(run(["phiseg", "train", "--bogus"]), EXIT_CONFIG);
    }
}
