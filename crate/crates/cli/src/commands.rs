use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crosswalk_core::dataset::load_manifest;
use crosswalk_core::eval::{
    conditions_in_records, load_records, metrics_table, parse_conditions, render_report, report_from_records,
    run_experiment, write_report, Backend, FailurePolicy, RunOptions,
};
use crosswalk_core::gateway::{VlmEndpointConfig, VlmGateway};
use crosswalk_core::pipeline::{render_item_variant, RenderOptions};
use crosswalk_core::prompt::{build_prompt, prompt_text, PromptConfig, ScoreScale};
use crosswalk_core::rules::{classify, enumerate_rule_coverage, SafetyScore, SceneAttributes};
use crosswalk_core::synth::{generate_dataset, ScoreMix, SynthConfig, DEFAULT_NOISE};
use crosswalk_core::vision::Variant;

use crate::error::CliError;
use crate::server::{serve, ServeConfig};

#[derive(Debug, Parser)]
#[command(name = "crosswalk", version, about = "Crosswalk safety scoring pipeline")]
pub struct Cli {
    /// Report errors on stderr as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Compose an item's four views into one image.
    Compose(ItemImageArgs),
    /// Render a visual-knowledge overlay for an item.
    Overlay(OverlayArgs),
    /// Print the prompt for a configuration.
    Prompt(PromptArgs),
    /// Run prompting conditions over a dataset and write reports.
    Eval(EvalArgs),
    /// Recompute a report from records.jsonl.
    Metrics(MetricsArgs),
    /// Enumerate or apply the scene categorization rules.
    Rules(RulesArgs),
    /// Serve the annotation API and UI.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Score weights, e.g. `-2:2,-1:1,0:1,1:1,2:1`, or `uniform`.
    #[arg(long)]
    pub mix: Option<String>,
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: u8,
}

#[derive(Debug, Args)]
pub struct ItemImageArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub item: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OverlayKind {
    Bbox,
    Mask,
    Flow,
}

impl From<OverlayKind> for Variant {
    fn from(k: OverlayKind) -> Self {
        match k {
            OverlayKind::Bbox => Variant::Bbox,
            OverlayKind::Mask => Variant::Mask,
            OverlayKind::Flow => Variant::Flow,
        }
    }
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub kind: OverlayKind,
    #[command(flatten)]
    pub target: ItemImageArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    None,
    Bbox,
    Mask,
    Flow,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::None => Variant::None,
            VariantArg::Bbox => Variant::Bbox,
            VariantArg::Mask => Variant::Mask,
            VariantArg::Flow => Variant::Flow,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    #[value(name = "minus2_to_2")]
    Minus2To2,
    #[value(name = "one_to_5_mapped")]
    OneTo5Mapped,
}

impl From<ScaleArg> for ScoreScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Minus2To2 => ScoreScale::Minus2To2,
            ScaleArg::OneTo5Mapped => ScoreScale::OneTo5Mapped,
        }
    }
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub cot: bool,
    #[arg(long, value_enum, default_value = "none")]
    pub variant: VariantArg,
    /// Ask for a trailing `SAFETY_SCORE:` line.
    #[arg(long)]
    pub hint: bool,
    #[arg(long, value_enum, default_value = "minus2_to_2")]
    pub scale: ScaleArg,
    /// With --item, render the image and print a JSON record instead of text.
    #[arg(long, requires = "item")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub item: Option<String>,
    /// Where to write the attached PNG (JSON mode only).
    #[arg(long, requires = "item")]
    pub image_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    CountAsWrong,
    Exclude,
}

impl From<PolicyArg> for FailurePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::CountAsWrong => FailurePolicy::CountAsWrong,
            PolicyArg::Exclude => FailurePolicy::Exclude,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "eval-out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendArg,
    /// `all` or a comma list of baseline, cot, bbx, mask, flow.
    #[arg(long, default_value = "all")]
    pub conditions: String,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    #[arg(long)]
    pub hint: bool,
    #[arg(long, value_enum, default_value = "count-as-wrong")]
    pub failure_policy: PolicyArg,
    #[arg(long, env = "VLM_BASE_URL", default_value = "https://api.openai.com/v1")]
    pub base_url: String,
    #[arg(long, env = "VLM_MODEL", default_value = "gpt-4o")]
    pub model: String,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 120)]
    pub timeout: u64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    /// Stop after this many fresh queries (the run stays resumable).
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Also write report.md, report.json and histograms.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "count-as-wrong")]
    pub failure_policy: PolicyArg,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["enumerate", "classify"])))]
pub struct RulesArgs {
    /// Print per-score coverage of all 108 combinations.
    #[arg(long)]
    pub enumerate: bool,
    /// With --enumerate, write the full table as CSV.
    #[arg(long, requires = "enumerate")]
    pub csv: Option<PathBuf>,
    /// `car=..,light=..,signal=..,ped=..`
    #[arg(long)]
    pub classify: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory with the built annotation UI.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub threads: usize,
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json = args.iter().any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let text = e.to_string();
            let err = CliError::validation(text.trim_end().trim_start_matches("error: "));
            report(&err, json, stderr);
            return err.exit_code();
        }
    };
    match run(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            report(&e, cli.json, stderr);
            e.exit_code()
        }
    }
}

fn report(err: &CliError, json: bool, stderr: &mut dyn Write) {
    if json {
        let _ = writeln!(stderr, "{}", err.to_json());
    } else {
        let _ = writeln!(stderr, "error: {err}");
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Compose(a) => item_image(&a, Variant::None, out),
        Command::Overlay(a) => item_image(&a.target, a.kind.into(), out),
        Command::Prompt(a) => prompt(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Metrics(a) => metrics(a, out),
        Command::Rules(a) => rules(a, out),
        Command::Serve(a) => serve(ServeConfig {
            host: a.host,
            port: a.port,
            manifest: a.manifest,
            ui_dir: a.ui_dir,
            threads: a.threads,
            render: RenderOptions::default(),
        }),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = SynthConfig::new(a.n, a.seed);
    cfg.noise = a.noise;
    cfg.mix = a.mix.as_deref().map(str::parse::<ScoreMix>).transpose()?;
    let manifest = generate_dataset(&a.out, &cfg)?;
    writeln!(out, "wrote {} items to {}", manifest.items.len(), a.out.join("manifest.json").display())?;
    Ok(())
}

fn item_image(a: &ItemImageArgs, variant: Variant, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let item = manifest
        .item(&a.item)
        .ok_or_else(|| CliError::validation(format!("unknown item {:?}", a.item)))?;
    let rendered = render_item_variant(&manifest, item, variant, &RenderOptions::default())?;
    for w in &rendered.warnings {
        log::warn!("{w}");
    }
    rendered.image.raster.save_png(&a.out)?;
    writeln!(out, "{}", a.out.display())?;
    Ok(())
}

fn prompt(a: PromptArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = PromptConfig {
        include_cot: a.cot,
        variant: a.variant.into(),
        structured_output_hint: a.hint,
        score_scale: a.scale.into(),
    };
    let (Some(manifest_path), Some(item_id)) = (a.manifest.as_deref(), a.item.as_deref()) else {
        out.write_all(prompt_text(&cfg).as_bytes())?;
        return Ok(());
    };
    let manifest = load_manifest(manifest_path)?;
    let item = manifest
        .item(item_id)
        .ok_or_else(|| CliError::validation(format!("unknown item {item_id:?}")))?;
    let image = render_item_variant(&manifest, item, cfg.variant, &RenderOptions::default())?.image;
    let bundle = build_prompt(&cfg, image)?;
    if let Some(path) = &a.image_out {
        bundle.image.raster.save_png(path)?;
    }
    let record = bundle.record(a.image_out.as_ref().map(|p| p.display().to_string()));
    writeln!(out, "{}", serde_json::to_string_pretty(&record).expect("record serializes"))?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let conditions = parse_conditions(&a.conditions)?;
    if a.max_in_flight == 0 {
        return Err(CliError::validation("--max-in-flight must be at least 1"));
    }
    let mut opts = RunOptions::new(&a.out);
    opts.parallelism = a.max_in_flight;
    opts.structured_output_hint = a.hint;
    opts.failure_policy = a.failure_policy.into();
    opts.stop_after = a.stop_after;

    let gateway;
    let backend = match a.backend {
        BackendArg::Mock => Backend::Mock,
        BackendArg::Http => {
            let cfg = VlmEndpointConfig {
                base_url: a.base_url,
                model_name: a.model,
                temperature: a.temperature,
                timeout_secs: a.timeout,
                max_retries: a.max_retries,
                max_in_flight: a.max_in_flight,
                ..Default::default()
            };
            fs::create_dir_all(&a.out)?;
            gateway = VlmGateway::http(cfg)?.with_audit_log(&a.out.join("audit.jsonl"))?;
            Backend::Gateway(&gateway)
        }
    };
    let outcome = run_experiment(&manifest, &conditions, &backend, &opts)?;
    log::info!(
        "queried {}, reused {}, skipped {}",
        outcome.stats.queried,
        outcome.stats.reused,
        outcome.stats.skipped
    );
    out.write_all(metrics_table(&outcome.report).as_bytes())?;
    writeln!(out, "\nreport written to {}", a.out.join("report.md").display())?;
    Ok(())
}

fn metrics(a: MetricsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !a.records.is_file() {
        return Err(CliError::validation(format!("no records file at {}", a.records.display())));
    }
    let records = load_records(&a.records)?;
    if records.is_empty() {
        return Err(CliError::validation(format!("{} holds no records", a.records.display())));
    }
    let conditions = conditions_in_records(&records);
    let report = report_from_records(&conditions, &records, a.failure_policy.into(), Vec::new());
    if let Some(dir) = &a.out {
        write_report(dir, &render_report(&report)?)?;
    }
    out.write_all(metrics_table(&report).as_bytes())?;
    Ok(())
}

fn rules(a: RulesArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(kv) = &a.classify {
        let attrs = SceneAttributes::parse_kv(kv)?;
        let (score, _) = classify(&attrs);
        writeln!(out, "{}", score.level())?;
        return Ok(());
    }
    let coverage = enumerate_rule_coverage();
    if let Some(path) = &a.csv {
        write_csv(path, &coverage)?;
    }
    writeln!(out, "combinations: {}", coverage.total())?;
    for s in SafetyScore::ALL {
        writeln!(out, "{:>2} {:<17} {}", s.level(), s.title(), coverage.count_for(s))?;
    }
    writeln!(out, "conservative fallback: {}", coverage.fallback_count)?;
    Ok(())
}

fn write_csv(path: &Path, coverage: &crosswalk_core::rules::CoverageReport) -> Result<(), CliError> {
    let f = fs::File::create(path)?;
    coverage
        .write_csv(f)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}
