//! `deid`: command-line driver for worlds, experts, pipelines, reports and sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deid_core::eval::{aligned_csv, ldp_ratio_audit, AuditResult, VerificationRow};
use deid_core::obfuscator::{sample_laplace, NoiseMode, Variant};
use deid_core::pipeline::{
    self, build_world, evaluate, load_bundle, save_bundle, sweep, train_all, train_experts, Bundle, RunConfig, SweepParam,
    SweepRow,
};
use deid_core::rng::{derive_seed, DeidRng};
use deid_core::world::World;
use deid_core::{Error, Result};
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "deid", version, about = "Identity obfuscation experiments on a synthetic identity world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides `master_seed` from the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Only print errors and warnings.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Clone)]
struct BundleArgs {
    /// Directory written by `deid train`.
    #[arg(long, value_name = "DIR")]
    bundle: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    WorldGen(Common),
    /// Train and freeze every configured expert.
    ExpertTrain(Common),
    /// Train experts, extractor, phase 1 and phase 2; write a pipeline bundle.
    Train(Common),
    /// De-identification and utility report for a bundle.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        bundle: BundleArgs,
    },
    /// Inversion-attack report for a bundle.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        bundle: BundleArgs,
    },
    /// Empirical ε-LDP audit of a Laplace mechanism or a bundle's obfuscator.
    AuditLdp {
        #[command(flatten)]
        common: Common,
        /// Audit this bundle's obfuscator instead of the raw Laplace mechanism.
        #[arg(long, value_name = "DIR")]
        bundle: Option<PathBuf>,
        /// Samples per input.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        bins: usize,
    },
    /// Noise sweep over beta (MLP) or alpha (VED), averaged over seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_param)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
        /// Master seeds to average over; defaults to the config's seed.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Vec<u64>,
    },
}

fn parse_param(s: &str) -> std::result::Result<SweepParam, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Loaded configuration plus where outputs go.
struct Context {
    config: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Context {
    fn new(common: &Common, base: Option<RunConfig>) -> Result<Self> {
        let mut config = match (&common.config, base) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(c)) => c,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.master_seed = seed;
        }
        config.validate()?;
        let out = common
            .out
            .clone()
            .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("deid-out"));
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { config, out, quiet: common.quiet })
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("deid: {}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn stamp(&self) -> String {
        format!("# config_hash {} master_seed {}\n", self.config.hash(), self.config.master_seed)
    }

    /// Writes the resolved config and a `run.json` naming every artifact.
    fn finish(&self, command: &str, artifacts: &[&str], extra: Value) -> Result<()> {
        self.write("config.json", &self.config.to_json()?)?;
        let meta = json!({
            "command": command,
            "config_hash": self.config.hash(),
            "master_seed": self.config.master_seed,
            "version": env!("CARGO_PKG_VERSION"),
            "artifacts": artifacts,
            "details": extra,
        });
        self.write("run.json", &(serde_json::to_string_pretty(&meta)? + "\n"))?;
        if !self.quiet {
            for a in artifacts {
                println!("{}", self.path(a).display());
            }
        }
        Ok(())
    }
}

fn open_bundle(dir: &Path, common: &Common) -> Result<(Bundle, Context)> {
    let bundle = load_bundle(dir)?;
    let ctx = Context::new(common, Some(bundle.manifest.config.clone()))?;
    let same_dir = match (fs::canonicalize(dir), fs::canonicalize(&ctx.out)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same_dir {
        return Err(Error::Config("--out must differ from the bundle directory".into()));
    }
    if ctx.config.world_hash() != bundle.manifest.world_config_hash {
        return Err(Error::Protocol(
            "the configured world differs from the one the bundle was trained on (check --seed and world settings)"
                .into(),
        ));
    }
    Ok((bundle, ctx))
}

fn warn_impostors(ctx: &Context) {
    if ctx.config.eval_settings().impostors_too_few() {
        eprintln!(
            "deid: warning: n_impostor {} is too small to resolve FPR {}; TPR figures are coarse",
            ctx.config.eval.n_impostor, ctx.config.eval.fpr_target
        );
    }
}

fn world_gen(common: &Common) -> Result<()> {
    let ctx = Context::new(common, None)?;
    let world = build_world(&ctx.config)?;
    world.save(ctx.path("world.txt"))?;
    ctx.progress(format!("{} samples, {} identities", world.samples.len(), world.config.n_identities));
    ctx.finish(
        "world-gen",
        &["world.txt"],
        json!({ "n_samples": world.samples.len(), "world_config_hash": ctx.config.world_hash() }),
    )
}

fn expert_train(common: &Common) -> Result<()> {
    let ctx = Context::new(common, None)?;
    let world = build_world(&ctx.config)?;
    ctx.progress("training experts");
    let experts = train_experts(&world, &ctx.config)?;
    let dir = ctx.path("experts");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut names = Vec::new();
    let mut fingerprints = serde_json::Map::new();
    for (role, list) in [("ensemble", &experts.ensemble), ("heldout", &experts.heldout), ("utility", &experts.utility)] {
        for (i, e) in list.iter().enumerate() {
            let name = format!("experts/{role}{i}.ckpt");
            e.to_checkpoint().save(ctx.path(&name))?;
            fingerprints.insert(name.clone(), Value::String(e.fingerprint()));
            names.push(name);
        }
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    ctx.finish("expert-train", &refs, json!({ "fingerprints": fingerprints }))
}

fn train(common: &Common) -> Result<()> {
    let ctx = Context::new(common, None)?;
    ctx.progress(format!("training {} pipeline", ctx.config.obfuscator.variant));
    let run = train_all(&ctx.config)?;
    save_bundle(&ctx.out, &run.pipeline, &run.experts, &ctx.config)?;
    let echo = run.pipeline.epsilon_echo();
    ctx.progress(format!("sensitivity {:?}, epsilon {:?}", echo.delta_psi, echo.epsilon));
    ctx.finish(
        "train",
        &["manifest.json", "swap.ckpt", "critic.ckpt", "obfuscator.ckpt", "obfuscator.json", "extractor.ckpt"],
        json!({ "epsilon": echo }),
    )
}

fn rebuild_world(ctx: &Context) -> Result<World> {
    ctx.progress("rebuilding world");
    build_world(&ctx.config)
}

fn eval(common: &Common, bundle: &BundleArgs) -> Result<()> {
    let (b, ctx) = open_bundle(&bundle.bundle, common)?;
    warn_impostors(&ctx);
    let world = rebuild_world(&ctx)?;
    let report = evaluate(&b.pipeline, &world, &b.experts, &ctx.config)?;
    ctx.write("report.json", &report.to_json()?)?;
    ctx.write("report.csv", &(ctx.stamp() + &report.to_csv()))?;
    ctx.progress(format!(
        "held-out TPR@{} {:.4}, accuracy {:.2}%",
        report.fpr_target, report.average.tpr_at_fpr, report.average.verification_accuracy
    ));
    ctx.finish("eval", &["report.json", "report.csv"], json!({ "bundle": bundle.bundle }))
}

fn attack(common: &Common, bundle: &BundleArgs) -> Result<()> {
    let (b, ctx) = open_bundle(&bundle.bundle, common)?;
    warn_impostors(&ctx);
    let world = rebuild_world(&ctx)?;
    ctx.progress("training inversion attackers");
    let (rows, average) = pipeline::attack(&b.pipeline, &world, &b.experts, &ctx.config)?;
    let report = json!({
        "fpr_target": ctx.config.eval.fpr_target,
        "per_heldout_expert": rows,
        "average": average,
        "seed": ctx.config.seeds().attack,
        "master_seed": ctx.config.master_seed,
        "config_hash": ctx.config.hash(),
    });
    ctx.write("inversion.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let mut table = vec![vec!["expert".to_string(), "inverted_tpr".into(), "inverted_accuracy".into()]];
    for r in rows.iter().chain(std::iter::once(&average)) {
        table.push(row_cells(r));
    }
    ctx.write("inversion.csv", &(ctx.stamp() + &aligned_csv(&table)))?;
    ctx.progress(format!("inverted TPR {:.4}", average.tpr_at_fpr));
    ctx.finish("attack", &["inversion.json", "inversion.csv"], json!({ "bundle": bundle.bundle }))
}

fn row_cells(r: &VerificationRow) -> Vec<String> {
    vec![r.expert.clone(), format!("{:.6}", r.tpr_at_fpr), format!("{:.4}", r.verification_accuracy)]
}

fn audit(common: &Common, bundle: Option<&Path>, samples: usize, bins: usize) -> Result<()> {
    let (ctx, result, mechanism): (Context, AuditResult, Value) = match bundle {
        None => {
            let ctx = Context::new(common, None)?;
            let o = &ctx.config.obfuscator;
            let scale = match o.variant {
                Variant::Ved => o.alpha,
                Variant::Mlp => o.beta,
                Variant::Opp => 0.0,
            };
            if scale <= 0.0 {
                return Err(Error::Config("the configured obfuscator adds no noise; nothing to audit".into()));
            }
            // Sensitivity 1: inputs 0 and 1, so the claim is ε = 1/scale.
            let mech = move |z: &[f64], rng: &mut DeidRng| Ok(z[0] + sample_laplace(scale, rng)?);
            let seed = derive_seed(ctx.config.seeds().eval, "audit");
            let r = ldp_ratio_audit(mech, &[0.0], &[1.0], samples, bins, 1.0 / scale, seed)?;
            (ctx, r, json!({ "kind": "laplace", "scale": scale, "sensitivity": 1.0 }))
        }
        Some(dir) => {
            let (b, ctx) = open_bundle(dir, common)?;
            let echo = b.pipeline.epsilon_echo();
            let eps = echo
                .epsilon
                .ok_or_else(|| Error::Config("bundle obfuscator has no finite epsilon (no noise)".into()))?;
            let world = rebuild_world(&ctx)?;
            let train = world.train_samples();
            let first = train.first().ok_or_else(|| Error::Input("empty train split".into()))?;
            let other = train
                .iter()
                .find(|s| s.identity_label != first.identity_label)
                .ok_or_else(|| Error::Input("train split holds a single identity".into()))?;
            let z = b.pipeline.extractor.extract(&first.feature)?;
            let z_prime = b.pipeline.extractor.extract(&other.feature)?;
            let obf = &b.pipeline.obfuscator;
            let mech = |v: &[f64], rng: &mut DeidRng| {
                let z = deid_core::IdVector::from_raw(v)?;
                Ok(obf.apply(&z, NoiseMode::Infer, rng)?.as_slice()[0])
            };
            let seed = derive_seed(ctx.config.seeds().eval, "audit");
            let r = ldp_ratio_audit(mech, z.as_slice(), z_prime.as_slice(), samples, bins, eps, seed)?;
            (ctx, r, json!({ "kind": "obfuscator", "coordinate": 0, "epsilon": echo }))
        }
    };
    let verdict = json!({
        "mechanism": mechanism,
        "audit": result,
        "n_samples": samples,
        "n_bins": bins,
        "master_seed": ctx.config.master_seed,
        "config_hash": ctx.config.hash(),
    });
    ctx.write("audit.json", &(serde_json::to_string_pretty(&verdict)? + "\n"))?;
    ctx.progress(format!(
        "max log-ratio {:.4} vs claimed epsilon {:.4} + slack {}: {}",
        result.max_log_ratio,
        result.epsilon_claimed,
        result.slack,
        if result.passed { "passed" } else { "FAILED" }
    ));
    ctx.finish("audit-ldp", &["audit.json"], json!({ "passed": result.passed }))
}

fn run_sweep(common: &Common, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<()> {
    let ctx = Context::new(common, None)?;
    warn_impostors(&ctx);
    let seeds = if seeds.is_empty() { vec![ctx.config.master_seed] } else { seeds.to_vec() };
    ctx.progress(format!("sweeping {param} over {values:?} with seeds {seeds:?}"));
    let rows = sweep(&ctx.config, param, values, &seeds)?;
    let name = format!("sweep_{param}.csv");
    ctx.write(&name, &(ctx.stamp() + &SweepRow::csv(&rows)))?;
    ctx.finish("sweep", &[name.as_str()], json!({ "param": param, "values": values, "seeds": seeds }))
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Dimension(_) | Error::UnsupportedArchitecture(_) | Error::Json(_) => {
            ("config", 2)
        }
        Error::Protocol(_) | Error::InsufficientSamples(_) => ("protocol", 3),
        Error::Numeric { .. } | Error::NumericValue(_) | Error::Training(_) | Error::ExpertQuality { .. } => {
            ("numeric", 4)
        }
        Error::Io { .. } | Error::Checkpoint(_) => ("io", 5),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DEID_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DEID_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

fn dispatch(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::WorldGen(c) => world_gen(c),
        Command::ExpertTrain(c) => expert_train(c),
        Command::Train(c) => train(c),
        Command::Eval { common, bundle } => eval(common, bundle),
        Command::Attack { common, bundle } => attack(common, bundle),
        Command::AuditLdp { common, bundle, samples, bins } => audit(common, bundle.as_deref(), *samples, *bins),
        Command::Sweep { common, param, values, seeds } => run_sweep(common, *param, values, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            eprintln!("{}", json!({ "error": "usage", "exit_code": EXIT_USAGE, "message": e.kind().to_string() }));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            eprintln!("{}", json!({ "error": kind, "exit_code": code, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
