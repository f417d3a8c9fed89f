//! Command-line front end: analyze inputs, fit patterns, run perturbation
//! evaluation. Exit codes: 0 success, 2 bad flags or configuration, 3
//! model/file errors, 4 analysis errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nnattr::analyzers::{analyze, AnalyzeError, Attribution, MethodConfig};
use nnattr::config::{build_method_config, parse_params, parse_selector, ConfigError};
use nnattr::evaluation::{
    perturbation_curve, EvalError, PerturbOrder, PerturbValue, PerturbationConfig,
};
use nnattr::fileio::{self, FileError, InputSet};
use nnattr::forward::NeuronSelector;
use nnattr::heatmap::{render_heatmap, HeatmapSpec};
use nnattr::model::Model;
use nnattr::patterns::{load_patterns, save_patterns, PatternStats, Patterns};
use nnattr::tensor::Tensor;

#[derive(Parser)]
#[command(name = "nnattr", version, about = "Attribution engine for feed-forward networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute an attribution for each input and write it to disk.
    Analyze(AnalyzeArgs),
    /// Fit PatternNet/PatternAttribution signal directions from data.
    FitPatterns(FitPatternsArgs),
    /// Score attributions with perturbation curves and AOPC.
    Evaluate(EvaluateArgs),
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Weight blob (raw little-endian).
    #[arg(long)]
    weights: PathBuf,
    /// Input tensor JSON or batch manifest.
    #[arg(long)]
    input: PathBuf,
    /// Method name (see `--method help` output on error for the list).
    #[arg(long)]
    method: String,
    /// Method parameters as k=v,k=v.
    #[arg(long, default_value = "")]
    param: String,
    /// Output unit: "max" or an index.
    #[arg(long, default_value = "max")]
    select: String,
    /// Pattern manifest for pattern_net / pattern_attribution.
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Output path (single input: inline JSON; batch: manifest + .bin blob).
    /// Prints to stdout when omitted (single input only).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Render the attribution as a PPM heatmap (single input only).
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Seed for stochastic components (smoothgrad noise).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct FitPatternsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Training data: tensor JSON or batch manifest.
    #[arg(long)]
    data: PathBuf,
    /// Pattern manifest output path (blob lands next to it as .bin).
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated method names to evaluate in-process.
    #[arg(long)]
    method: Option<String>,
    /// Method parameters as k=v,k=v (applied to every listed method).
    #[arg(long, default_value = "")]
    param: String,
    /// Precomputed attribution JSON (alternative to --method; single input).
    #[arg(long)]
    attribution: Option<PathBuf>,
    /// Pattern manifest for pattern methods.
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Region size RxC (use 1 for flat inputs).
    #[arg(long, default_value = "1")]
    region: String,
    /// Number of regions to perturb.
    #[arg(long)]
    steps: usize,
    /// Replacement value: one float or per-channel comma list.
    #[arg(long, default_value = "0")]
    value: String,
    /// Perturbation order: desc, random, or a comma list of both.
    #[arg(long, default_value = "desc")]
    order: String,
    #[arg(long, default_value = "max")]
    select: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Curve output path (JSON record, or array for multiple curves).
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Flags(String),
    File(String),
    Analysis(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Flags(_) => 2,
            CliError::File(_) => 3,
            CliError::Analysis(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Flags(m) | CliError::File(m) | CliError::Analysis(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Flags(e.to_string())
    }
}

impl From<FileError> for CliError {
    fn from(e: FileError) -> Self {
        CliError::File(e.to_string())
    }
}

impl From<AnalyzeError> for CliError {
    fn from(e: AnalyzeError) -> Self {
        CliError::Analysis(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::RegionTiling { .. }
            | EvalError::StepsOutOfRange { .. }
            | EvalError::ValueChannels { .. } => CliError::Flags(e.to_string()),
            other => CliError::Analysis(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::FitPatterns(args) => cmd_fit_patterns(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_model_files(model: &Path, weights: &Path) -> Result<Model, CliError> {
    let manifest = fileio::read_bytes(model)?;
    let blob = fileio::read_bytes(weights)?;
    nnattr::model::load_model(&manifest, &blob).map_err(|e| CliError::File(e.to_string()))
}

fn load_pattern_files(path: &Path, model: &Model) -> Result<Patterns, CliError> {
    let manifest = fileio::read_bytes(path)?;
    let blob = fileio::read_bytes(&fileio::blob_path_for(path))?;
    load_patterns(&manifest, &blob, model).map_err(|e| CliError::File(e.to_string()))
}

/// Builds the method config, resolving a `baseline=PATH` parameter to a
/// tensor first.
fn build_config(
    method: &str,
    param: &str,
    select: &str,
    seed: u64,
) -> Result<MethodConfig, CliError> {
    let mut params = parse_params(param)?;
    let baseline = match params.remove("baseline") {
        Some(path) => {
            let path = PathBuf::from(path);
            let bytes = fileio::read_bytes(&path)?;
            Some(fileio::tensor_from_json(&path, &bytes)?)
        }
        None => None,
    };
    let selector = parse_selector(select)?;
    Ok(build_method_config(method, &params, selector, seed, baseline)?)
}

fn attribution_doc(attr: &Attribution) -> serde_json::Value {
    serde_json::json!({
        "shape": attr.values.shape(),
        "data": attr.values.data(),
        "method": attr.method,
        "selected_unit": attr.selected_unit,
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let model = load_model_files(&args.model, &args.weights)?;
    let input = fileio::read_input_file(&args.input)?;
    let cfg = build_config(&args.method, &args.param, &args.select, args.seed)?;
    let patterns = args
        .patterns
        .as_deref()
        .map(|p| load_pattern_files(p, &model))
        .transpose()?;
    if input.is_batch() && args.out.is_none() {
        return Err(CliError::Flags("batch input requires --out".into()));
    }
    if input.is_batch() && args.heatmap.is_some() {
        return Err(CliError::Flags(
            "--heatmap supports single inputs only".into(),
        ));
    }
    let mut attributions = Vec::new();
    for (name, x) in input.items() {
        let attr = analyze(&model, x, &cfg, patterns.as_ref())?;
        attributions.push((name, attr));
    }
    match (&input, &args.out) {
        (InputSet::Single(_), Some(out)) => {
            let doc = attribution_doc(&attributions[0].1);
            fileio::write_bytes(out, serde_json::to_string_pretty(&doc).unwrap().as_bytes())?;
        }
        (InputSet::Single(_), None) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&attribution_doc(&attributions[0].1)).unwrap()
            );
        }
        (InputSet::Batch(_), Some(out)) => {
            let items: Vec<(String, &Tensor)> = attributions
                .iter()
                .map(|(name, attr)| (name.clone(), &attr.values))
                .collect();
            let mut extra = serde_json::Map::new();
            extra.insert(
                "method".into(),
                serde_json::to_value(&attributions[0].1.method).unwrap(),
            );
            let units: BTreeMap<String, usize> = attributions
                .iter()
                .map(|(name, attr)| (name.clone(), attr.selected_unit))
                .collect();
            extra.insert("selected_units".into(), serde_json::to_value(units).unwrap());
            fileio::write_batch(out, &items, &extra)?;
        }
        (InputSet::Batch(_), None) => unreachable!("checked above"),
    }
    if let Some(path) = &args.heatmap {
        let ppm = render_heatmap(&attributions[0].1.values, &HeatmapSpec::default())
            .map_err(|e| CliError::Analysis(e.to_string()))?;
        fileio::write_bytes(path, &ppm)?;
    }
    Ok(())
}

fn cmd_fit_patterns(args: FitPatternsArgs) -> Result<(), CliError> {
    let model = load_model_files(&args.model, &args.weights)?;
    let data = fileio::read_input_file(&args.data)?;
    let items = data.items();
    if items.is_empty() {
        return Err(CliError::Analysis("no samples in data file".into()));
    }
    let mut stats = PatternStats::new(&model);
    let batch: Vec<Tensor> = items.iter().map(|(_, t)| (*t).clone()).collect();
    stats
        .accumulate(&model, &batch)
        .map_err(|e| CliError::Analysis(e.to_string()))?;
    let patterns = stats
        .finalize(&model)
        .map_err(|e| CliError::Analysis(e.to_string()))?;
    for index in model.linear_layer_indices() {
        let layer = patterns.layer(index).expect("finalize covers linear layers");
        let units = match &model.layers[index] {
            nnattr::model::LayerSpec::Dense { out_features, .. } => *out_features,
            nnattr::model::LayerSpec::Conv2d { out_channels, .. } => *out_channels,
            _ => unreachable!(),
        };
        println!(
            "layer {index}: {} of {units} units degenerate",
            layer.degenerate_units.len()
        );
    }
    let (manifest, blob) = save_patterns(&patterns);
    fileio::write_bytes(&args.out, manifest.as_bytes())?;
    fileio::write_bytes(&fileio::blob_path_for(&args.out), &blob)?;
    Ok(())
}

fn parse_region(text: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Flags(format!("invalid --region {text:?}: expected R or RxC"));
    if let Some((r, c)) = text.split_once(['x', 'X']) {
        let r = r.trim().parse::<usize>().map_err(|_| bad())?;
        let c = c.trim().parse::<usize>().map_err(|_| bad())?;
        Ok((r, c))
    } else {
        let n = text.trim().parse::<usize>().map_err(|_| bad())?;
        Ok((n, n))
    }
}

fn parse_value(text: &str) -> Result<PerturbValue, CliError> {
    let values: Result<Vec<f64>, _> = text.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values = values.map_err(|_| {
        CliError::Flags(format!(
            "invalid --value {text:?}: expected a float or a comma list"
        ))
    })?;
    Ok(match values.as_slice() {
        [single] => PerturbValue::Scalar(*single),
        _ => PerturbValue::PerChannel(values),
    })
}

fn parse_orders(text: &str, seed: u64) -> Result<Vec<(String, PerturbOrder)>, CliError> {
    text.split(',')
        .map(|o| match o.trim() {
            "desc" | "descending" => Ok((
                "desc".to_string(),
                PerturbOrder::DescendingAttribution,
            )),
            "random" => Ok(("random".to_string(), PerturbOrder::Random { seed })),
            other => Err(CliError::Flags(format!(
                "invalid --order {other:?}: expected desc or random"
            ))),
        })
        .collect()
}

/// Attribution loaded from a previous `analyze` run.
fn load_attribution_file(path: &Path) -> Result<(Tensor, usize, serde_json::Value), CliError> {
    let bytes = fileio::read_bytes(path)?;
    let doc: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::File(format!("{}: {e}", path.display())))?;
    let tensor = fileio::tensor_from_json(path, &bytes)?;
    let unit = doc
        .get("selected_unit")
        .and_then(|u| u.as_u64())
        .ok_or_else(|| {
            CliError::File(format!(
                "{}: attribution file lacks \"selected_unit\"",
                path.display()
            ))
        })?;
    let method = doc
        .get("method")
        .cloned()
        .unwrap_or_else(|| serde_json::Value::String("attribution_file".into()));
    Ok((tensor, unit as usize, method))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let model = load_model_files(&args.model, &args.weights)?;
    let input = fileio::read_input_file(&args.input)?;
    let (region_h, region_w) = parse_region(&args.region)?;
    let value = parse_value(&args.value)?;
    let orders = parse_orders(&args.order, args.seed)?;
    let patterns = args
        .patterns
        .as_deref()
        .map(|p| load_pattern_files(p, &model))
        .transpose()?;

    // Each evaluation source yields (label, method-json, attribution) per input.
    enum Source {
        Methods(Vec<(String, MethodConfig)>),
        File(Tensor, usize, serde_json::Value),
    }
    let source = match (&args.method, &args.attribution) {
        (Some(names), None) => {
            let mut configs = Vec::new();
            for name in names.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                let cfg = build_config(name, &args.param, &args.select, args.seed)?;
                configs.push((name.to_string(), cfg));
            }
            if configs.is_empty() {
                return Err(CliError::Flags("--method list is empty".into()));
            }
            Source::Methods(configs)
        }
        (None, Some(path)) => {
            if input.is_batch() {
                return Err(CliError::Flags(
                    "--attribution supports single inputs only".into(),
                ));
            }
            let (tensor, unit, method) = load_attribution_file(path)?;
            Source::File(tensor, unit, method)
        }
        _ => {
            return Err(CliError::Flags(
                "exactly one of --method or --attribution is required".into(),
            ))
        }
    };

    let mut records = Vec::new();
    // label -> order -> aopc values, for the summary table.
    let mut table: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for (input_name, x) in input.items() {
        let attrs: Vec<(String, Attribution)> = match &source {
            Source::Methods(configs) => {
                let mut out = Vec::new();
                for (label, cfg) in configs {
                    let attr = analyze(&model, x, cfg, patterns.as_ref())?;
                    out.push((label.clone(), attr));
                }
                out
            }
            Source::File(tensor, unit, _) => vec![(
                "attribution_file".to_string(),
                Attribution {
                    values: tensor.clone(),
                    method: MethodConfig::new(
                        nnattr::analyzers::Method::Gradient,
                        NeuronSelector::Index(*unit),
                    ),
                    selected_unit: *unit,
                },
            )],
        };
        for (label, attr) in &attrs {
            for (order_name, order) in &orders {
                let cfg = PerturbationConfig {
                    region_h,
                    region_w,
                    steps: args.steps,
                    value: value.clone(),
                    order: *order,
                };
                let curve = perturbation_curve(&model, x, attr, &cfg)?;
                let method_json = match &source {
                    Source::Methods(_) => serde_json::to_value(&attr.method).unwrap(),
                    Source::File(_, _, method) => method.clone(),
                };
                records.push(serde_json::json!({
                    "input": input_name,
                    "method": method_json,
                    "scores": curve.scores,
                    "aopc": curve.aopc,
                    "config": cfg,
                }));
                table
                    .entry((label.clone(), order_name.clone()))
                    .or_default()
                    .push(curve.aopc);
            }
        }
    }

    let out_value = if records.len() == 1 {
        records.into_iter().next().unwrap()
    } else {
        serde_json::Value::Array(records)
    };
    fileio::write_bytes(
        &args.out,
        serde_json::to_string_pretty(&out_value).unwrap().as_bytes(),
    )?;

    println!("{:<24} {:<8} {:>12}", "method", "order", "mean AOPC");
    for ((label, order_name), values) in &table {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!("{label:<24} {order_name:<8} {mean:>12.6}");
    }
    Ok(())
}
