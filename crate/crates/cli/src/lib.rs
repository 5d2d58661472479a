//! The `catslab` command line.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cats_core::align::{build_reweight, verify_correlation_alignment, verify_probability_alignment, AlignmentInputs, GaussianSpec};
use cats_core::backbone::save_checkpoint;
use cats_core::data::{rank_domain_pairs, read_dataset, write_dataset, MtsDataset, VALUES_EXT};
use cats_core::stats::{correlation_shift_test, PairDistanceOptions, SW_PROJECTIONS};
use cats_core::train::{
    adapt_and_report, evaluate, gat_study_csv, model_from_checkpoint, pretrain, run_ablation, run_gat_approx_study,
    run_scaling_study, scaling_csv, write_report, EvalReport, GatStudyConfig,
};
use cats_core::{Error, ErrorKind};
use clap::{Arg, ArgAction, ArgMatches, Command};
use thiserror::Error as ThisError;

use crate::config::{parse_config, CliConfig, KEYS};

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn flag(name: &'static str) -> String {
    name.replace('_', "-")
}

/// `--config` plus one flag per config key, each showing its default.
fn with_config_flags(mut cmd: Command) -> Command {
    cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("key = value config file [default: none]"));
    let defaults = CliConfig::default().rendered();
    for (doc, (_, value)) in KEYS.iter().zip(defaults) {
        cmd = cmd.arg(
            Arg::new(doc.key)
                .long(flag(doc.key))
                .value_name("VALUE")
                .allow_hyphen_values(true)
                .help(format!("{} [default: {value}]", doc.help)),
        );
    }
    cmd
}

fn out_arg(default: &'static str, help: &'static str) -> Arg {
    Arg::new("out").long("out").value_name("PATH").default_value(default).help(help)
}

fn input(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).required(true).value_name(name.to_uppercase()).help(help)
}

pub fn command() -> Command {
    let gat = GatStudyConfig::default();
    let widths = gat.widths.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    Command::new("catslab")
        .about("Correlation adapters for domain adaptation of multivariate time series")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_flags(
            Command::new("gen-data")
                .about("Write a synthetic source/target pair as MTS1/MTSY files")
                .arg(out_arg("data", "output directory")),
        ))
        .subcommand(
            Command::new("detect-shift")
                .about("Test two datasets for a correlation shift")
                .arg(input("source", "source values file"))
                .arg(input("target", "target values file")),
        )
        .subcommand(
            Command::new("pair-rank")
                .about("Rank every ordered domain pair of a directory by distance")
                .arg(input("dir", "directory of .mts files"))
                .arg(out_arg("-", "CSV output file, - for stdout"))
                .arg(Arg::new("projections").long("projections").value_name("N").default_value(SW_PROJECTIONS.to_string()).help("random projections"))
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0").help("projection seed"))
                .arg(Arg::new("normalize").long("normalize").action(ArgAction::SetTrue).help("standardize each variable first [default: off]")),
        )
        .subcommand(
            Command::new("oracle-align")
                .about("Build the closed-form reweighting between two Gaussians and verify it")
                .arg(input("source", "source Gaussian JSON"))
                .arg(input("target", "target Gaussian JSON"))
                .arg(Arg::new("samples").long("samples").value_name("N").default_value("50000").help("draws per domain for the empirical check"))
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0").help("sampling seed")),
        )
        .subcommand(with_config_flags(
            Command::new("pretrain")
                .about("Pretrain the backbone on a labeled source dataset")
                .arg(input("source", "source values file"))
                .arg(out_arg("runs", "output directory")),
        ))
        .subcommand(with_config_flags(
            Command::new("adapt")
                .about("Adapt a pretrained backbone to an unlabeled target and write a report")
                .arg(input("source", "source values file"))
                .arg(input("target", "target values file"))
                .arg(Arg::new("checkpoint").long("checkpoint").required(true).value_name("FILE").help("pretrained checkpoint [required]"))
                .arg(out_arg("runs", "output directory")),
        ))
        .subcommand(with_config_flags(
            Command::new("eval")
                .about("Score a checkpoint on a labeled dataset with majority voting")
                .arg(input("data", "labeled values file"))
                .arg(Arg::new("checkpoint").long("checkpoint").required(true).value_name("FILE").help("checkpoint to score [required]")),
        ))
        .subcommand(with_config_flags(
            Command::new("ablate")
                .about("Run the seven-rung ablation ladder on a source/target pair")
                .arg(input("source", "source values file"))
                .arg(input("target", "target values file"))
                .arg(out_arg("runs", "output directory")),
        ))
        .subcommand(
            Command::new("gat-approx")
                .about("Fit graph attention layers of growing width to a linear target map")
                .arg(out_arg("-", "CSV output file, - for stdout"))
                .arg(Arg::new("widths").long("widths").value_name("LIST").default_value(widths).help("comma separated hidden widths"))
                .arg(Arg::new("nodes").long("nodes").value_name("N").default_value(gat.nodes.to_string()).help("graph nodes"))
                .arg(Arg::new("features").long("features").value_name("N").default_value(gat.features.to_string()).help("features per node"))
                .arg(Arg::new("samples").long("samples").value_name("N").default_value(gat.samples.to_string()).help("training samples"))
                .arg(Arg::new("steps").long("steps").value_name("N").default_value(gat.steps.to_string()).help("optimizer steps"))
                .arg(Arg::new("lr").long("lr").value_name("RATE").default_value(gat.lr.to_string()).help("learning rate"))
                .arg(Arg::new("seed").long("seed").value_name("N").default_value(gat.seed.to_string()).help("seed")),
        )
        .subcommand(with_config_flags(
            Command::new("scaling")
                .about("Tabulate adapter and backbone parameter counts")
                .arg(out_arg("-", "CSV output file, - for stdout"))
                .arg(Arg::new("d-models").long("d-models").value_name("LIST").default_value("128,256,512").help("comma separated hidden widths"))
                .arg(Arg::new("window-lens").long("window-lens").value_name("LIST").default_value("48").help("comma separated window lengths")),
        ))
        .subcommand(Command::new("report").about("Pretty-print a report JSON").arg(input("report", "report file")))
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&matches) {
        Ok(text) => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes the parsed command and returns what it prints on success.
pub fn dispatch(matches: &ArgMatches) -> CliResult<String> {
    let (name, m) = matches.subcommand().ok_or_else(|| CliError::Usage("missing subcommand".into()))?;
    match name {
        "gen-data" => gen_data(m),
        "detect-shift" => detect_shift(m),
        "pair-rank" => pair_rank(m),
        "oracle-align" => oracle_align(m),
        "pretrain" => pretrain_cmd(m),
        "adapt" => adapt_cmd(m),
        "eval" => eval_cmd(m),
        "ablate" => ablate(m),
        "gat-approx" => gat_approx(m),
        "scaling" => scaling(m),
        "report" => report(m),
        other => Err(CliError::Usage(format!("unknown subcommand `{other}`"))),
    }
}

fn config_of(m: &ArgMatches) -> CliResult<CliConfig> {
    let overrides: Vec<(String, String)> =
        KEYS.iter().filter_map(|k| m.get_one::<String>(k.key).map(|v| (k.key.to_string(), v.clone()))).collect();
    let path = m.get_one::<String>("config").map(PathBuf::from);
    Ok(parse_config(path.as_deref(), &overrides)?)
}

fn path_arg(m: &ArgMatches, name: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(name).expect("required argument"))
}

fn parsed<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> CliResult<T> {
    let raw = m.get_one::<String>(name).expect("argument with default");
    raw.parse().map_err(|_| CliError::Usage(format!("invalid value `{raw}` for --{name}")))
}

fn list<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> CliResult<Vec<T>> {
    let raw = m.get_one::<String>(name).expect("argument with default");
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("invalid list entry `{s}` for --{name}"))))
        .collect()
}

/// Puts the offending path into I/O error messages.
pub(crate) fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn load(path: &Path) -> CliResult<MtsDataset> {
    read_dataset(path).map_err(|e| with_path(path, e).into())
}

/// Writes `text` to `out`, or returns it for stdout when `out` is `-`.
fn emit(out: &str, text: String) -> CliResult<String> {
    if out == "-" {
        return Ok(text);
    }
    let path = Path::new(out);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(format!("wrote {out}\n"))
}

fn gen_data(m: &ArgMatches) -> CliResult<String> {
    let cfg = config_of(m)?;
    let dir = path_arg(m, "out");
    fs::create_dir_all(&dir)?;
    let (source, target) = cfg.synthetic_pair()?;
    let mut text = String::new();
    for ds in [&source, &target] {
        let path = dir.join(format!("{}.{VALUES_EXT}", ds.domain_id));
        write_dataset(ds, &path)?;
        let _ = writeln!(text, "wrote {} ({} samples, {}×{})", path.display(), ds.len(), ds.n_vars, ds.n_steps);
    }
    Ok(text)
}

fn detect_shift(m: &ArgMatches) -> CliResult<String> {
    let a = load(&path_arg(m, "source"))?;
    let b = load(&path_arg(m, "target"))?;
    let r = correlation_shift_test(&a, &b)?;
    let method = serde_json::to_value(r.method).map_err(Error::from)?;
    Ok(format!(
        "u_statistic={}\np_value={}\nreject={}\nmethod={}\n",
        r.u_statistic,
        r.p_value,
        r.reject,
        method.as_str().unwrap_or("unknown")
    ))
}

fn pair_rank(m: &ArgMatches) -> CliResult<String> {
    let dir = path_arg(m, "dir");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| with_path(&dir, e.into()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == VALUES_EXT))
        .collect();
    paths.sort();
    let domains = paths.iter().map(|p| load(p)).collect::<CliResult<Vec<_>>>()?;
    let opts = PairDistanceOptions {
        projections: parsed(m, "projections")?,
        seed: parsed(m, "seed")?,
        normalize: m.get_flag("normalize"),
        ..Default::default()
    };
    let ranking = rank_domain_pairs(&domains, &opts)?;
    let mut csv = String::from("rank,source,target,distance,group,representative\n");
    for (i, p) in ranking.pairs.iter().enumerate() {
        let rep = ranking.representatives.iter().any(|r| r.source == p.source && r.target == p.target);
        let _ = writeln!(csv, "{},{},{},{},{},{}", i + 1, p.source, p.target, p.distance, p.group, rep);
    }
    emit(m.get_one::<String>("out").expect("default"), csv)
}

fn read_gaussian(path: &Path) -> CliResult<GaussianSpec<f64>> {
    let bytes = fs::read(path).map_err(|e| with_path(path, e.into()))?;
    let spec: GaussianSpec<f64> = serde_json::from_slice(&bytes).map_err(Error::from)?;
    spec.validate()?;
    Ok(spec)
}

fn oracle_align(m: &ArgMatches) -> CliResult<String> {
    let source = read_gaussian(&path_arg(m, "source"))?;
    let target = read_gaussian(&path_arg(m, "target"))?;
    let map = build_reweight(&source, &target)?;
    let mapped = map.matrix.matmul(&target.covariance)?.matmul(&map.matrix.transpose()?)?;
    let cov_diff = mapped.max_abs_diff(&source.covariance);
    let corr_diff = verify_correlation_alignment(AlignmentInputs::Exact { source: &source, target: &target }, &map.matrix)?;
    let empirical = verify_probability_alignment(&source, &target, &map, parsed(m, "samples")?, parsed(m, "seed")?)?;
    Ok(format!(
        "covariance_diff={cov_diff:e}\npopulation_correlation_diff={corr_diff:e}\nempirical_correlation_diff={:e}\nnoise_bound={:e}\n",
        empirical.corr_diff, empirical.noise_bound
    ))
}

fn run_stem(cfg: &CliConfig) -> String {
    format!("{}-s{}", cfg.train.hash(), cfg.train.seed)
}

fn pretrain_cmd(m: &ArgMatches) -> CliResult<String> {
    let cfg = config_of(m)?;
    let source = load(&path_arg(m, "source"))?;
    let dir = path_arg(m, "out");
    fs::create_dir_all(&dir)?;
    let (model, curve) = pretrain(&source, &cfg.train)?;
    let stem = run_stem(&cfg);
    let ckpt = dir.join(format!("pretrained-{stem}.ckpt"));
    save_checkpoint(&model.params, &ckpt)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    let curve_path = dir.join(format!("pretrain-{stem}.csv"));
    fs::write(&curve_path, csv)?;
    Ok(format!("wrote {}\nwrote {}\n", ckpt.display(), curve_path.display()))
}

fn adapt_cmd(m: &ArgMatches) -> CliResult<String> {
    let cfg = config_of(m)?;
    let source = load(&path_arg(m, "source"))?;
    let target = load(&path_arg(m, "target"))?;
    let ckpt = path_arg(m, "checkpoint");
    let model = model_from_checkpoint(&cfg.train, source.n_vars, source.n_classes, &ckpt).map_err(|e| with_path(&ckpt, e))?;
    let (adapted, report) = adapt_and_report(&model, &source, &target, &cfg.train)?;
    let dir = path_arg(m, "out");
    let (json, csv) = write_report(&dir, &report)?;
    let ckpt = dir.join(format!("adapted-{}.ckpt", run_stem(&cfg)));
    save_checkpoint(&adapted.model.params, &ckpt)?;
    Ok(format!("{}wrote {}\nwrote {}\nwrote {}\n", summary(&report), json.display(), csv.display(), ckpt.display()))
}

fn eval_cmd(m: &ArgMatches) -> CliResult<String> {
    let cfg = config_of(m)?;
    let data = load(&path_arg(m, "data"))?;
    let t = &cfg.train;
    let ckpt = path_arg(m, "checkpoint");
    let model = model_from_checkpoint(t, data.n_vars, data.n_classes, &ckpt).map_err(|e| with_path(&ckpt, e))?;
    if data.n_classes > model.config.n_classes {
        return Err(Error::LabelOutOfRange { label: data.n_classes - 1, n_classes: model.config.n_classes }.into());
    }
    let acc = evaluate(&model, &data, t.vote_count, t.window_len, t.seed)?;
    Ok(format!("accuracy={acc}\n"))
}

fn ablate(m: &ArgMatches) -> CliResult<String> {
    let cfg = config_of(m)?;
    let source = load(&path_arg(m, "source"))?;
    let target = load(&path_arg(m, "target"))?;
    let rungs = run_ablation(&source, &target, &cfg.train)?;
    let mut csv = String::from("rung,name,target_accuracy\n");
    for (i, r) in rungs.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{}", i + 1, r.name, r.target_accuracy);
    }
    let dir = path_arg(m, "out");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("ablation-{}.csv", run_stem(&cfg)));
    fs::write(&path, &csv)?;
    Ok(format!("{csv}wrote {}\n", path.display()))
}

fn gat_approx(m: &ArgMatches) -> CliResult<String> {
    let cfg = GatStudyConfig {
        widths: list(m, "widths")?,
        nodes: parsed(m, "nodes")?,
        features: parsed(m, "features")?,
        samples: parsed(m, "samples")?,
        steps: parsed(m, "steps")?,
        lr: parsed(m, "lr")?,
        seed: parsed(m, "seed")?,
    };
    let rows = run_gat_approx_study(&cfg)?;
    emit(m.get_one::<String>("out").expect("default"), gat_study_csv(&rows))
}

fn scaling(m: &ArgMatches) -> CliResult<String> {
    let cfg = config_of(m)?;
    let base = cfg.train.backbone(cfg.data.n_vars, cfg.data.n_classes);
    let rows = run_scaling_study(&base, cfg.train.kernel, &list(m, "d-models")?, &list(m, "window-lens")?)?;
    emit(m.get_one::<String>("out").expect("default"), scaling_csv(&rows))
}

fn summary(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "source accuracy    {:.4}", r.source_accuracy);
    let _ = writeln!(s, "target accuracy    {:.4}", r.target_accuracy);
    let _ = writeln!(s, "no-adapter target  {:.4}", r.baseline_target_accuracy);
    let _ = writeln!(
        s,
        "shift test         u={} p={:.4} reject={}",
        r.shift_test.u_statistic, r.shift_test.p_value, r.shift_test.reject
    );
    let p = &r.param_counts;
    let _ = writeln!(s, "parameters         adapter {} / backbone {} ({:.4})", p.adapter_params, p.backbone_params, p.ratio);
    s
}

fn report(m: &ArgMatches) -> CliResult<String> {
    let path = path_arg(m, "report");
    let bytes = fs::read(&path).map_err(|e| with_path(&path, e.into()))?;
    let r: EvalReport = serde_json::from_slice(&bytes).map_err(Error::from)?;
    let mut s = summary(&r);
    if let (Some(first), Some(last)) = (r.losses.first(), r.losses.last()) {
        let _ = writeln!(s, "steps              {}", r.losses.len());
        let _ = writeln!(s, "total loss         {:.6} -> {:.6}", first.total, last.total);
    }
    let _ = writeln!(s, "seed               {}", r.seed);
    let _ = writeln!(s, "config ({})", r.config.hash());
    let echo = CliConfig { train: r.config.clone(), ..Default::default() };
    for ((key, value), _) in echo.rendered().into_iter().zip(KEYS).take_while(|(_, k)| k.key != "n_vars") {
        let _ = writeln!(s, "  {key} = {value}");
    }
    Ok(s)
}
