use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use grove_core::accounting::{
    active_params, conditional_params, expected_distinct_groups, flops_per_token, gaussian_tokens,
    naive_flops_per_token, routing_histogram,
};
use grove_core::balance::{simulate_balance, standard_scenario, write_trajectory_csv};
use grove_core::checkpoint::{self, BiasInit};
use grove_core::gradcheck::{gradcheck, gradcheck_with, GradcheckOptions, GradcheckReport};
use grove_core::train::{train_toy, ToyTask, TrainOptions};
use grove_core::{
    grove_backward, upcycle_with, Checkpoint, Dtype, ForwardMode, GroveConfig, GroveError,
    GroveLayer, Layer, MoeLayer, Vector,
};
use serde::Serialize;

use crate::cli::{Cli, Command, DtypeArg, Format, LayerSource, ModeArg};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Check(_) => EXIT_CHECK,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) | CliError::Check(m) => f.write_str(m),
        }
    }
}

impl From<GroveError> for CliError {
    fn from(err: GroveError) -> Self {
        match err {
            GroveError::Io { .. }
            | GroveError::BadMagic
            | GroveError::TruncatedPayload(_)
            | GroveError::UnknownDtype(_)
            | GroveError::MalformedHeader(_) => CliError::Io(err.to_string()),
            _ => CliError::Validation(err.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, err: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {err}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Init {
            config,
            seed,
            plain,
            dtype,
            out,
        } => init(config.as_deref(), seed, plain, dtype, &out, &mut stdout),
        Command::Upcycle {
            ckpt,
            config,
            seed,
            groups,
            lambda,
            dtype,
            out,
        } => {
            let overrides = Overrides {
                seed,
                groups,
                lambda,
            };
            upcycle_cmd(
                &ckpt,
                config.as_deref(),
                overrides,
                dtype,
                &out,
                &mut stdout,
            )
        }
        Command::Save { ckpt, dtype, out } => {
            let c = checkpoint::load(&ckpt)?;
            checkpoint::save(&c, &out, dtype.into())?;
            writeln!(
                stdout,
                "wrote {} checkpoint to {}",
                c.layer.kind(),
                out.display()
            )
            .map_err(stdout_err)
        }
        Command::Load { ckpt, format } => {
            let c = checkpoint::load(&ckpt)?;
            emit(&mut stdout, format, &Summary::of(&c))
        }
        Command::Forward {
            source,
            samples,
            mode,
            format,
            out,
        } => forward(&source, samples, mode, format, &out),
        Command::SimulateRouting {
            source,
            samples,
            out,
            format,
        } => simulate_routing(&source, samples, &out, format, &mut stdout),
        Command::SimulateBalance {
            config,
            seed,
            skew,
            steps,
            alpha,
            format,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(alpha) = alpha {
                cfg.alpha = alpha;
                cfg.validate()?;
            }
            simulate_balance_cmd(&cfg, skew, steps, format, &out, &mut stdout)
        }
        Command::Gradcheck {
            source,
            probes,
            coords,
            out,
            format,
            inject_fault,
        } => gradcheck_cmd(
            &source,
            probes,
            coords,
            out.as_deref(),
            format,
            inject_fault,
            &mut stdout,
        ),
        Command::TrainToy {
            source,
            steps,
            samples,
            lr,
            out,
        } => train_cmd(&source, steps, samples, lr, &out, &mut stdout),
        Command::Stats { source, format } => {
            let config = match resolve(&source)? {
                (Layer::Grove(layer), _) => layer.config,
                (Layer::Plain(_), _) => return Err(wrong_kind()),
            };
            emit(&mut stdout, format, &Stats::of(&config)?)
        }
    }
}

fn stdout_err(err: std::io::Error) -> CliError {
    CliError::Io(format!("stdout: {err}"))
}

fn wrong_kind() -> CliError {
    CliError::Validation("checkpoint holds a plain layer; run `grove upcycle` first".into())
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

/// Reads a TOML config (desk defaults when absent), applies the seed
/// override and validates.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<GroveConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str::<GroveConfig>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {}", p.display(), e.message())))?
        }
        None => GroveConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// The layer named by `source` plus the seed for token streams.
fn resolve(source: &LayerSource) -> Result<(Layer, u64)> {
    match &source.ckpt {
        Some(path) => {
            let layer = checkpoint::load(path)?.layer;
            let seed = source.seed.unwrap_or(match &layer {
                Layer::Grove(l) => l.config.seed,
                Layer::Plain(_) => 0,
            });
            Ok((layer, seed))
        }
        None => {
            let config = load_config(source.config.as_deref(), source.seed)?;
            let seed = config.seed;
            Ok((Layer::Grove(GroveLayer::random(config)?), seed))
        }
    }
}

fn resolve_grove(source: &LayerSource) -> Result<(GroveLayer, u64)> {
    match resolve(source)? {
        (Layer::Grove(l), seed) => Ok((l, seed)),
        (Layer::Plain(_), _) => Err(wrong_kind()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Flat `key,value` rendering of a JSON object, for `--format csv`.
fn to_key_value_csv<T: Serialize>(value: &T) -> String {
    let mut out = String::from("key,value\n");
    if let serde_json::Value::Object(map) =
        serde_json::to_value(value).expect("report types serialize")
    {
        for (k, v) in map {
            let v = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Null => String::new(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k},{v}\n"));
        }
    }
    out
}

fn emit<T: Serialize>(out: &mut impl Write, format: Format, value: &T) -> Result<()> {
    let text = match format {
        Format::Json => to_json(value),
        Format::Csv => to_key_value_csv(value),
    };
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

fn init(
    config: Option<&Path>,
    seed: Option<u64>,
    plain: bool,
    dtype: DtypeArg,
    out: &Path,
    stdout: &mut impl Write,
) -> Result<()> {
    let config = load_config(config, seed)?;
    let ckpt = if plain {
        Checkpoint::plain(MoeLayer::random(config.moe(), config.seed)?)
    } else {
        Checkpoint::grove(GroveLayer::random(config)?)
    };
    checkpoint::save(&ckpt, out, dtype.into())?;
    writeln!(
        stdout,
        "wrote {} checkpoint to {}",
        ckpt.layer.kind(),
        out.display()
    )
    .map_err(stdout_err)
}

struct Overrides {
    seed: Option<u64>,
    groups: Option<usize>,
    lambda: Option<f64>,
}

const UPCYCLE_PROBES: usize = 16;

#[derive(Serialize)]
struct UpcycleReport {
    probes: usize,
    residual_inf: f64,
    routing_identical: bool,
    bias_init: BiasInit,
}

fn upcycle_cmd(
    src: &Path,
    config: Option<&Path>,
    overrides: Overrides,
    dtype: DtypeArg,
    out: &Path,
    stdout: &mut impl Write,
) -> Result<()> {
    let source = checkpoint::load(src)?;
    let bias_init = if source.bias_present {
        BiasInit::Copied
    } else {
        BiasInit::Zero
    };
    let moe = source.into_plain()?;
    let mut cfg = match config {
        Some(_) => load_config(config, None)?,
        None => GroveConfig {
            d: moe.config.d,
            n: moe.config.n,
            k: moe.config.k,
            m: moe.config.m,
            ..GroveConfig::default()
        },
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(g) = overrides.groups {
        cfg.g = g;
    }
    if let Some(lambda) = overrides.lambda {
        cfg.lambda = lambda;
    }
    let grove = upcycle_with(&moe, &cfg)?;

    let mut residual: f64 = 0.0;
    let mut routing_identical = true;
    for x in gaussian_tokens(cfg.d, cfg.seed).take(UPCYCLE_PROBES) {
        let (y, _) = grove.forward(&x, ForwardMode::Dedup)?;
        residual = residual.max(y.sub(&moe.forward(&x)?)?.max_abs());
        let (a, b) = (moe.route(&x)?, grove.route(&x)?);
        routing_identical &= a.selected == b.selected && a.gate_weights == b.gate_weights;
    }

    let mut ckpt = Checkpoint::grove(grove);
    ckpt.bias_init = Some(bias_init);
    checkpoint::save(&ckpt, out, dtype.into())?;
    let report = UpcycleReport {
        probes: UPCYCLE_PROBES,
        residual_inf: residual,
        routing_identical,
        bias_init,
    };
    emit(stdout, Format::Json, &report)
}

#[derive(Serialize)]
struct Summary {
    kind: &'static str,
    d: usize,
    n: usize,
    k: usize,
    m: usize,
    g: Option<usize>,
    h: Option<usize>,
    lambda: Option<f64>,
    params: usize,
    bias_present: bool,
    bias_init: Option<BiasInit>,
}

impl Summary {
    fn of(c: &Checkpoint) -> Self {
        let (moe, grove) = match &c.layer {
            Layer::Plain(l) => (l.config, None),
            Layer::Grove(l) => (l.config.moe(), Some(&l.config)),
        };
        let mut params = moe.n * moe.d + moe.n * 3 * moe.d * moe.m;
        if let Some(g) = grove {
            params += g.g * 3 * g.d * g.h;
        }
        Summary {
            kind: c.layer.kind(),
            d: moe.d,
            n: moe.n,
            k: moe.k,
            m: moe.m,
            g: grove.map(|c| c.g),
            h: grove.map(|c| c.h),
            lambda: grove.map(|c| c.lambda),
            params,
            bias_present: c.bias_present,
            bias_init: c.bias_init,
        }
    }
}

#[derive(Serialize)]
struct ForwardRow {
    token: usize,
    selected: Vec<usize>,
    /// Absent for plain layers.
    n_adjugate_evals: Option<usize>,
    output: Vector,
}

fn forward(
    source: &LayerSource,
    samples: usize,
    mode: ModeArg,
    format: Format,
    out: &Path,
) -> Result<()> {
    if samples == 0 {
        return Err(CliError::Validation(
            "invalid value for `samples`: must be at least 1".into(),
        ));
    }
    let (layer, seed) = resolve(source)?;
    let d = match &layer {
        Layer::Plain(l) => l.config.d,
        Layer::Grove(l) => l.config.d,
    };
    let mode = match mode {
        ModeArg::Naive => ForwardMode::Naive,
        ModeArg::Dedup => ForwardMode::Dedup,
    };
    let mut rows = Vec::with_capacity(samples);
    for (token, x) in gaussian_tokens(d, seed).take(samples).enumerate() {
        let row = match &layer {
            Layer::Plain(l) => ForwardRow {
                token,
                selected: l.route(&x)?.selected,
                n_adjugate_evals: None,
                output: l.forward(&x)?,
            },
            Layer::Grove(l) => {
                let (output, stats) = l.forward(&x, mode)?;
                ForwardRow {
                    token,
                    selected: l.route(&x)?.selected,
                    n_adjugate_evals: Some(stats.n_adjugate_evals),
                    output,
                }
            }
        };
        rows.push(row);
    }
    let bytes = match format {
        Format::Json => to_json(&rows).into_bytes(),
        Format::Csv => forward_csv(&rows, d)?,
    };
    write_file(out, &bytes)
}

fn forward_csv(rows: &[ForwardRow], d: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "token".to_string(),
        "selected".into(),
        "n_adjugate_evals".into(),
    ];
    header.extend((0..d).map(|i| format!("y{i}")));
    let csv_err = |e: csv::Error| CliError::Io(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.token.to_string(),
            r.selected
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            r.n_adjugate_evals.map_or(String::new(), |c| c.to_string()),
        ];
        rec.extend(r.output.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Io(format!("csv: {e}")))
}

pub const ROUTING_REPORT: &str = "routing_report.json";
pub const ROUTING_HISTOGRAM: &str = "routing_histogram.csv";

#[derive(Serialize)]
struct RoutingSummary {
    samples: u64,
    g: usize,
    mean_adjugate_evals: f64,
    expected_adjugate_evals_uniform: f64,
    adjugate_eval_savings: f64,
    min_active_params: usize,
    max_active_params: usize,
    mean_active_params: f64,
}

fn simulate_routing(
    source: &LayerSource,
    samples: usize,
    out: &Path,
    format: Format,
    stdout: &mut impl Write,
) -> Result<()> {
    let (layer, seed) = resolve_grove(source)?;
    let report = routing_histogram(&layer, gaussian_tokens(layer.config.d, seed), samples)?;
    create_dir(out)?;
    write_file(&out.join(ROUTING_REPORT), to_json(&report).as_bytes())?;
    let mut hist = Vec::new();
    report
        .write_histogram_csv(&mut hist)
        .expect("writing to memory");
    write_file(&out.join(ROUTING_HISTOGRAM), &hist)?;
    let summary = RoutingSummary {
        samples: report.samples,
        g: report.g,
        mean_adjugate_evals: report.mean_adjugate_evals,
        expected_adjugate_evals_uniform: report.expected_adjugate_evals_uniform,
        adjugate_eval_savings: report.adjugate_eval_savings,
        min_active_params: report.min_active_params,
        max_active_params: report.max_active_params,
        mean_active_params: report.mean_active_params,
    };
    emit(stdout, format, &summary)
}

fn simulate_balance_cmd(
    config: &GroveConfig,
    skew: f64,
    steps: usize,
    format: Format,
    out: &Path,
    stdout: &mut impl Write,
) -> Result<()> {
    if !skew.is_finite() {
        return Err(CliError::Validation(
            "invalid value for `skew`: must be finite".into(),
        ));
    }
    let mut pool = standard_scenario(config, skew);
    let trajectory = simulate_balance(config, &mut pool, steps)?;
    let bytes = match format {
        Format::Json => to_json(&trajectory).into_bytes(),
        Format::Csv => {
            let mut buf = Vec::new();
            write_trajectory_csv(&mut buf, &trajectory).expect("writing to memory");
            buf
        }
    };
    write_file(out, &bytes)?;
    let (first, last) = (trajectory[0], trajectory[trajectory.len() - 1]);
    writeln!(
        stdout,
        "steps={} initial_max_violation={:e} final_max_violation={:e}",
        trajectory.len(),
        first.max_violation,
        last.max_violation
    )
    .map_err(stdout_err)
}

#[derive(Serialize)]
struct GradcheckSummary {
    probes: usize,
    max_rel_error: f64,
    tolerance: f64,
    sparsity_violations: usize,
    passed: bool,
}

fn gradcheck_cmd(
    source: &LayerSource,
    probes: usize,
    coords: usize,
    out: Option<&Path>,
    format: Format,
    inject_fault: bool,
    stdout: &mut impl Write,
) -> Result<()> {
    let (layer, seed) = resolve_grove(source)?;
    let opts = GradcheckOptions {
        coords_per_tensor: (coords > 0).then_some(coords),
        seed,
        ..Default::default()
    };
    let report: GradcheckReport = if inject_fault {
        let broken = |l: &GroveLayer, x: &Vector, d: &grove_core::RoutingDecision, u: &Vector| {
            let mut g = grove_backward(l, x, d, u)?;
            g.router.data_mut().iter_mut().for_each(|v| *v = 0.0);
            Ok(g)
        };
        gradcheck_with(&layer, probes, &opts, &broken)?
    } else {
        gradcheck(&layer, probes, &opts)?
    };
    if let Some(path) = out {
        write_file(path, to_json(&report).as_bytes())?;
    }
    let summary = GradcheckSummary {
        probes: report.probes,
        max_rel_error: report.max_rel_error,
        tolerance: report.tolerance,
        sparsity_violations: report.sparsity_violations,
        passed: report.passed,
    };
    emit(stdout, format, &summary)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed: max relative error {:e} (tolerance {:e}), {} sparsity violations",
            report.max_rel_error, report.tolerance, report.sparsity_violations
        )))
    }
}

pub const LOSS_CURVE: &str = "loss.csv";
pub const FINAL_CKPT: &str = "final.ckpt";

fn train_cmd(
    source: &LayerSource,
    steps: usize,
    samples: usize,
    lr: Option<f64>,
    out: &Path,
    stdout: &mut impl Write,
) -> Result<()> {
    if samples == 0 {
        return Err(CliError::Validation(
            "invalid value for `samples`: must be at least 1".into(),
        ));
    }
    let (mut layer, seed) = resolve_grove(source)?;
    let mut opts = TrainOptions {
        steps,
        ..Default::default()
    };
    if let Some(lr) = lr {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(CliError::Validation(
                "invalid value for `lr`: must be finite and > 0".into(),
            ));
        }
        opts.learning_rate = lr;
    }
    let task = ToyTask::new(layer.config.d, samples, seed);
    let history = train_toy(&mut layer, &task, &opts)?;

    create_dir(out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &history {
        w.serialize(s)
            .map_err(|e| CliError::Io(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Io(format!("csv: {e}")))?;
    write_file(&out.join(LOSS_CURVE), &bytes)?;
    checkpoint::save(&Checkpoint::grove(layer), &out.join(FINAL_CKPT), Dtype::F64)?;

    let (first, last) = (history[0], history[history.len() - 1]);
    writeln!(
        stdout,
        "steps={} initial_loss={:e} final_loss={:e}",
        history.len(),
        first.loss,
        last.loss
    )
    .map_err(stdout_err)
}

#[derive(Serialize)]
struct Stats {
    d: usize,
    n: usize,
    k: usize,
    g: usize,
    h: usize,
    m: usize,
    per_expert_params: usize,
    per_adjugate_params: usize,
    router_params: usize,
    total_params: usize,
    min_adjugate_evals: usize,
    max_adjugate_evals: usize,
    min_active_params: usize,
    max_active_params: usize,
    min_flops_per_token: usize,
    max_flops_per_token: usize,
    naive_flops_per_token: usize,
    expected_adjugate_evals_uniform: f64,
    expected_adjugate_eval_savings: f64,
}

impl Stats {
    fn of(c: &GroveConfig) -> Result<Self> {
        let p = conditional_params(c);
        let (lo, hi) = (c.min_adjugate_evals(), c.max_adjugate_evals());
        let expected = expected_distinct_groups(c.n, c.g, c.k);
        Ok(Stats {
            d: c.d,
            n: c.n,
            k: c.k,
            g: c.g,
            h: c.h,
            m: c.m,
            per_expert_params: p.per_expert,
            per_adjugate_params: p.per_adjugate,
            router_params: p.router,
            total_params: p.router + c.n * p.per_expert + c.g * p.per_adjugate,
            min_adjugate_evals: lo,
            max_adjugate_evals: hi,
            min_active_params: active_params(c, lo)?,
            max_active_params: active_params(c, hi)?,
            min_flops_per_token: flops_per_token(c, lo)?,
            max_flops_per_token: flops_per_token(c, hi)?,
            naive_flops_per_token: naive_flops_per_token(c),
            expected_adjugate_evals_uniform: expected,
            expected_adjugate_eval_savings: 1.0 - expected / c.k as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_errors_map_to_io_exit_code() {
        assert_eq!(CliError::from(GroveError::BadMagic).exit_code(), EXIT_IO);
        assert_eq!(
            CliError::from(GroveError::UnknownDtype("f16".into())).exit_code(),
            EXIT_IO
        );
        let invalid = GroveError::InvalidConfig {
            field: "g",
            reason: "x".into(),
        };
        assert_eq!(CliError::from(invalid).exit_code(), EXIT_VALIDATION);
    }

    #[test]
    fn key_value_csv_flattens_fields() {
        #[derive(Serialize)]
        struct T {
            a: usize,
            b: Option<f64>,
        }
        assert_eq!(
            to_key_value_csv(&T { a: 1, b: None }),
            "key,value\na,1\nb,\n"
        );
    }

    #[test]
    fn desk_stats_match_hand_arithmetic() {
        let s = Stats::of(&GroveConfig::default()).unwrap();
        assert_eq!((s.min_active_params, s.max_active_params), (39936, 43008));
        assert_eq!(s.min_flops_per_token, 2 * 39936);
        assert_eq!(s.total_params, 128 * 32 + 128 * 4608 + 64 * 768);
    }

    #[test]
    fn unknown_config_key_is_rejected_with_its_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "n = 128\nexperts = 4\n").unwrap();
        let err = load_config(Some(&p), None).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_VALIDATION);
        assert!(err.to_string().contains("experts"), "{err}");
    }

    #[test]
    fn partial_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "g = 16\nlambda = 0.1\n").unwrap();
        let c = load_config(Some(&p), Some(9)).unwrap();
        assert_eq!((c.g, c.n, c.seed), (16, 128, 9));
    }
}
