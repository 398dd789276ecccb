use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use langext::harness::{
    self, emit_report, text_table, ExperimentConfig, ExperimentReport, Method, ReportFormat, Universe,
};
use langext::lid::{lid_layer_sweep, LidMethod, LidModel, SweepSet};
use langext::model::{BaseModel, ModelConfig, Preset};
use langext::pele::{extend_language, AlphaSource, LanguageBundle};
use langext::peft::PeftKind;
use langext::tensor::Rng;
use langext::vocab::LanguageId;
use langext::Error;

#[derive(Parser)]
#[command(name = "langext", version, about = "Extend a frozen multilingual sequence model to new languages")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON); missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Model shape: desk or paper-shape.
    #[arg(long, global = true)]
    preset: Option<Preset>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and freeze the base model on the base languages.
    TrainBase,
    /// Language ID from intermediate encoder states.
    #[command(subcommand)]
    Lid(LidCommand),
    /// Train bundles for new languages.
    Extend(ExtendArgs),
    /// Evaluate all languages through saved bundles.
    Eval(EvalArgs),
    /// Run a non-bundle protocol.
    Baseline(BaselineArgs),
    /// Error and size of each kind with low-rank and dense vocabulary updates.
    XlaSweep(SweepArgs),
    /// Merge saved reports into one table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum LidCommand {
    /// Fit on every language at the split layer (or `--layer`).
    Fit {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "gda")]
        method: LidMethod,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Accuracy per layer and method on base (seen) and new (unseen) languages.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "gda,mlp")]
        methods: Vec<LidMethod>,
        /// Defaults to every encoder layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Language id to extend (e.g. 10); omit with --all.
    #[arg(long)]
    language: Option<u32>,
    /// Extend every new language in order.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value = "adapter")]
    kind: String,
    #[arg(long, default_value = "gt_one_hot")]
    alpha: AlphaSource,
    /// Directory holding earlier bundles (read for learnable weights, written to).
    #[arg(long)]
    bundles: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    bundles: Option<PathBuf>,
    #[arg(long, default_value = "gt_one_hot")]
    alpha: AlphaSource,
    /// Language ID model, required for LP-based weights.
    #[arg(long)]
    lid: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// mono, raw, fullft, cjt or er.
    #[arg(long)]
    method: String,
    /// Cached utterances per base language (er only).
    #[arg(long, default_value_t = 10)]
    cache: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "bitfit,lora,lora_star,mask,mask_lora_star,adapter,prompt")]
    kinds: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Index of the new language to adapt to.
    #[arg(long, default_value_t = 0)]
    target: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "text")]
    format: ReportFormat,
    #[arg(long, default_value = "report")]
    name: String,
}

/// Index of everything written under `--out`.
#[derive(Default, Serialize, Deserialize)]
struct Manifest {
    artifacts: BTreeMap<String, ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    command: String,
    bytes: u64,
    fnv1a64: String,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    command: &'static str,
    written: Vec<PathBuf>,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn record(&mut self, p: PathBuf) {
        self.written.push(p);
    }

    fn universe(&self) -> langext::Result<Universe> {
        Universe::generate(&self.cfg.data)
    }

    fn base(&self, checkpoint: &Option<PathBuf>) -> langext::Result<BaseModel> {
        let p = checkpoint.clone().unwrap_or_else(|| self.path("base.ckpt"));
        if !p.exists() {
            return Err(Error::Config(format!("missing base checkpoint {} (run train-base first)", p.display())));
        }
        BaseModel::load(&p)
    }

    fn kind(&self, name: &str) -> langext::Result<PeftKind> {
        if self.cfg.model.d_model >= ModelConfig::paper_shape(1, 1).d_model {
            PeftKind::paper_shape(name)
        } else {
            PeftKind::desk(name)
        }
    }

    fn emit_all(&mut self, report: &ExperimentReport, stem: &str) -> langext::Result<()> {
        for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::TextTable] {
            let p = self.path(&format!("{stem}.{}", f.extension()));
            emit_report(report, f, &p)?;
            self.record(p);
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, v: &T) -> langext::Result<()> {
        let p = self.path(rel);
        std::fs::write(&p, serde_json::to_string_pretty(v)? + "\n")?;
        self.record(p);
        Ok(())
    }

    fn finish(&self) -> langext::Result<()> {
        let mp = self.out.join("manifest.json");
        let mut m: Manifest = match std::fs::read_to_string(&mp) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(_) => Manifest::default(),
        };
        for p in &self.written {
            let bytes = std::fs::read(p)?;
            let mut h = fnv::FnvHasher::default();
            h.write(&bytes);
            let rel = p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/");
            m.artifacts.insert(rel, ManifestEntry { command: self.command.into(), bytes: bytes.len() as u64, fnv1a64: format!("{:016x}", h.finish()) });
        }
        std::fs::write(mp, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

fn load_config(g: &Global) -> langext::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(p) = g.preset {
        cfg.model = ModelConfig::preset(p, cfg.data.vocab_capacity, cfg.data.language.d_feat);
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn bundle_paths(dir: &Path) -> langext::Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "peleb"))
        .collect();
    v.sort();
    Ok(v)
}

fn load_bundles(dir: &Path, base: &BaseModel) -> langext::Result<Vec<LanguageBundle>> {
    let mut v = bundle_paths(dir)?.iter().map(|p| LanguageBundle::load(p, base)).collect::<langext::Result<Vec<_>>>()?;
    v.sort_by_key(|b| b.language);
    Ok(v)
}

fn run(cli: Cli) -> langext::Result<()> {
    let cfg = load_config(&cli.global)?;
    std::fs::create_dir_all(&cli.global.out)?;
    let command = match &cli.command {
        Command::TrainBase => "train-base",
        Command::Lid(LidCommand::Fit { .. }) => "lid fit",
        Command::Lid(LidCommand::Sweep { .. }) => "lid sweep",
        Command::Extend(_) => "extend",
        Command::Eval(_) => "eval",
        Command::Baseline(_) => "baseline",
        Command::XlaSweep(_) => "xla-sweep",
        Command::Report(_) => "report",
    };
    let mut ctx = Ctx { cfg, out: cli.global.out.clone(), command, written: Vec::new() };
    match cli.command {
        Command::TrainBase => {
            let u = ctx.universe()?;
            let base = harness::train_base(&ctx.cfg, &u)?;
            let p = ctx.path("base.ckpt");
            base.save(&p)?;
            ctx.record(p);
        }
        Command::Lid(LidCommand::Fit { checkpoint, method, layer }) => {
            let u = ctx.universe()?;
            let base = ctx.base(&checkpoint)?;
            let mut lid_cfg = ctx.cfg.clone();
            lid_cfg.lid.method = method;
            let lid = match layer {
                None => harness::fit_lid(&lid_cfg, &base, &u)?,
                Some(l) => {
                    let train: Vec<_> = u.all().flat_map(|l| &l.data.train).collect();
                    LidModel::fit(&base, &train, u.languages(), l, method, &lid_cfg.lid.mlp, &mut Rng::new(lid_cfg.seed).fork(2))?
                }
            };
            let p = ctx.path("lid.bin");
            lid.save(&p)?;
            ctx.record(p);
        }
        Command::Lid(LidCommand::Sweep { checkpoint, methods, layers }) => {
            let u = ctx.universe()?;
            let base = ctx.base(&checkpoint)?;
            let layers = if layers.is_empty() { (1..=base.config().n_enc_layers).collect() } else { layers };
            let seen = SweepSet { train: u.base_train(), test: u.base.iter().flat_map(|l| &l.data.test).collect() };
            let unseen = SweepSet { train: u.new_train(), test: u.new.iter().flat_map(|l| &l.data.test).collect() };
            let unseen = (!u.new.is_empty()).then_some(&unseen);
            let rows = lid_layer_sweep(&base, &seen, unseen, &layers, &methods, &ctx.cfg.lid.mlp, &Rng::new(ctx.cfg.seed).fork(3))?;
            ctx.write_json("lid_sweep.json", &rows)?;
        }
        Command::Extend(a) => {
            let u = ctx.universe()?;
            let base = ctx.base(&a.checkpoint)?;
            let dir = a.bundles.clone().unwrap_or_else(|| ctx.path("bundles"));
            std::fs::create_dir_all(&dir)?;
            let targets: Vec<usize> = match (a.language, a.all) {
                (_, true) => (0..u.new.len()).collect(),
                (Some(id), false) => vec![u
                    .new
                    .iter()
                    .position(|l| l.spec.id == LanguageId(id))
                    .ok_or_else(|| Error::Config(format!("L{id:02} is not a new language")))?],
                (None, false) => return Err(Error::Config("pass --language <id> or --all".into())),
            };
            let kind = ctx.kind(&a.kind)?;
            let mut cfg = ctx.cfg.clone();
            cfg.method = Method::Pele { alpha: a.alpha, peft: kind };
            let ext = cfg.extend_config(kind, a.alpha);
            let root = Rng::new(cfg.seed).fork(20);
            for i in targets {
                let lang = &u.new[i];
                let prior: Vec<LanguageBundle> = load_bundles(&dir, &base)?.into_iter().filter(|b| b.language < lang.spec.id).collect();
                let prior_refs: Vec<&LanguageBundle> = prior.iter().collect();
                let train: Vec<_> = lang.data.train.iter().collect();
                let b = extend_language(&base, &prior_refs, lang.spec.id, lang.spec.range, &train, &ext, root.fork(i as u64).next_u64())?;
                let p = dir.join(format!("{}.peleb", lang.spec.id));
                b.save(&p)?;
                ctx.record(p);
            }
        }
        Command::Eval(a) => {
            let u = ctx.universe()?;
            let base = ctx.base(&a.checkpoint)?;
            let dir = a.bundles.clone().unwrap_or_else(|| ctx.path("bundles"));
            let bundles = load_bundles(&dir, &base)?;
            let lid = a.lid.as_deref().map(LidModel::load).transpose()?;
            let mut cfg = ctx.cfg.clone();
            if let Some(b) = bundles.first() {
                cfg.method = Method::Pele { alpha: a.alpha, peft: b.kind };
            }
            let refs: Vec<&LanguageBundle> = bundles.iter().collect();
            let report = harness::evaluate_bundles(&cfg, &u, &base, &refs, a.alpha, lid.as_ref())?;
            ctx.emit_all(&report, "eval")?;
        }
        Command::Baseline(a) => {
            let mut cfg = ctx.cfg.clone();
            cfg.method = match a.method.as_str() {
                "mono" => Method::Mono,
                "raw" => Method::Raw,
                "fullft" => Method::FullFt,
                "cjt" => Method::Cjt,
                "er" => Method::Er { cache_per_lang: a.cache },
                other => return Err(Error::Config(format!("unknown baseline {other:?}"))),
            };
            cfg.validate()?;
            let u = ctx.universe()?;
            let base = match cfg.method {
                Method::Mono => a.checkpoint.as_ref().map(|_| ctx.base(&a.checkpoint)).transpose()?,
                _ => Some(ctx.base(&a.checkpoint)?),
            };
            let report = harness::run_baseline(&cfg, &u, base.as_ref())?;
            let stem = match cfg.method {
                Method::Er { cache_per_lang } => format!("baseline_er{cache_per_lang}"),
                _ => format!("baseline_{}", a.method),
            };
            ctx.emit_all(&report, &stem)?;
        }
        Command::XlaSweep(a) => {
            let u = ctx.universe()?;
            let base = ctx.base(&a.checkpoint)?;
            let kinds = a.kinds.iter().map(|k| ctx.kind(k)).collect::<langext::Result<Vec<_>>>()?;
            let rows = harness::xla_sweep(&ctx.cfg, &u, &base, a.target, &kinds, &a.seeds)?;
            ctx.write_json("xla_sweep.json", &rows)?;
        }
        Command::Report(a) => {
            let reports = a
                .inputs
                .iter()
                .map(|p| ExperimentReport::from_json(&std::fs::read_to_string(p)?))
                .collect::<langext::Result<Vec<_>>>()?;
            let refs: Vec<&ExperimentReport> = reports.iter().collect();
            let text = match a.format {
                ReportFormat::TextTable => text_table(&refs),
                ReportFormat::Json => serde_json::to_string_pretty(&reports)? + "\n",
                ReportFormat::Csv => {
                    let mut out = String::new();
                    for (i, r) in reports.iter().enumerate() {
                        let csv = r.to_csv()?;
                        // keep a single header line
                        out.push_str(if i == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
                    }
                    out
                }
            };
            let p = ctx.path(&format!("{}.{}", a.name, a.format.extension()));
            std::fs::write(&p, text)?;
            ctx.record(p);
        }
    }
    ctx.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Json(_) => 2,
                Error::NonFinite(_) => 3,
                _ => 1,
            })
        }
    }
}
