//! Command-line driver: one subcommand per pipeline stage, all artifacts in
//! one run directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use acebert::config::RunConfig;
use acebert::encoder::{Checkpoint, Model};
use acebert::pipeline::{self, Prepared};
use acebert::serving::{EmbeddingCache, HotQueryCache};
use acebert::synth::Corpus;
use acebert::Error;

#[derive(Parser, Debug)]
#[command(name = "acebert", version, about = "Cross-modal product retrieval pipeline")]
struct Cli {
    /// TOML config; defaults to the config recorded in the run directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to the newest one under --runs.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Root holding timestamped run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs: PathBuf,
    /// Config override `section.key=value` (TOML value syntax), repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Redo a stage even if its outputs exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into a new run directory.
    GenData,
    /// Pretrain the encoder on MLM, MPM and TIP.
    Pretrain,
    /// Fine-tune the dual encoder from the pretrained checkpoint.
    Finetune(Ablation),
    /// Recall@K and GAUC on the held-out clicks.
    Eval {
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Write every product embedding to the binary cache.
    Export,
    /// Distil the shallow query encoder and precompute the hot-query cache.
    Distill,
    /// Answer one query from the caches and the distilled encoder.
    Serve {
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct Ablation {
    #[arg(long = "use_roi", num_args = 0..=1, default_missing_value = "true")]
    use_roi: Option<bool>,
    #[arg(long = "use_pixel", num_args = 0..=1, default_missing_value = "true")]
    use_pixel: Option<bool>,
    #[arg(long = "use_hot_query", num_args = 0..=1, default_missing_value = "true")]
    use_hot_query: Option<bool>,
    #[arg(long = "use_adversarial", num_args = 0..=1, default_missing_value = "true")]
    use_adversarial: Option<bool>,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Eval { .. } => "eval",
            Command::Export => "export",
            Command::Distill => "distill",
            Command::Serve { .. } => "serve",
        }
    }
}

const STAGES: [&str; 7] = ["gen-data", "pretrain", "finetune", "eval", "export", "distill", "serve"];

fn stage_config(run: &Path, stage: &str) -> PathBuf {
    run.join(format!("{stage}.toml"))
}

/// Applies `key.path=value` to a TOML table, parsing the value as TOML and
/// falling back to a bare string.
fn set_key(root: &mut toml::Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn newest_run(root: &Path) -> Result<PathBuf, Error> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|_| Error::Missing(root.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.pop().ok_or_else(|| Error::Missing(root.join("<run>")))
}

struct Context {
    cfg: RunConfig,
    run: PathBuf,
    force: bool,
}

impl Context {
    fn resolve(cli: &Cli) -> Result<Self, Error> {
        let stage = cli.command.stage();
        let known_run = match &cli.run_dir {
            Some(d) => Some(d.clone()),
            None if stage == "gen-data" => None,
            None => Some(newest_run(&cli.runs)?),
        };
        let text = match (&cli.config, &known_run) {
            (Some(path), _) => {
                fs::read_to_string(path).map_err(|_| Error::Missing(path.clone()))?
            }
            (None, Some(run)) => {
                let pos = STAGES.iter().position(|s| *s == stage).expect("known stage");
                STAGES[..=pos]
                    .iter()
                    .rev()
                    .map(|s| stage_config(run, s))
                    .find(|p| p.exists())
                    .map(fs::read_to_string)
                    .transpose()?
                    .unwrap_or_default()
            }
            (None, None) => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::config("config", e.message()))?;
        let mut sets = cli.overrides.clone();
        if let Some(s) = cli.seed {
            sets.push(format!("seed={s}"));
        }
        match &cli.command {
            Command::Finetune(a) => {
                for (name, v) in [
                    ("modalities.use_roi", a.use_roi),
                    ("modalities.use_pixel", a.use_pixel),
                    ("modalities.use_hot_query", a.use_hot_query),
                    ("finetune.use_adversarial", a.use_adversarial),
                ] {
                    if let Some(v) = v {
                        sets.push(format!("{name}={v}"));
                    }
                }
            }
            Command::Eval { k: Some(ks) } => {
                let list: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
                sets.push(format!("eval.ks=[{}]", list.join(",")));
            }
            _ => {}
        }
        for s in &sets {
            set_key(&mut table, s)?;
        }
        let cfg = RunConfig::from_toml(&toml::to_string(&table).expect("table serializes"))?;
        let run = known_run.unwrap_or_else(|| cfg.run_dir(&cli.runs));
        fs::create_dir_all(&run)?;
        fs::write(stage_config(&run, stage), cfg.to_toml())?;
        info!("run directory {}", run.display());
        Ok(Context {
            cfg,
            run,
            force: cli.force,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run.join(name)
    }

    fn data(&self) -> Result<Prepared, Error> {
        let corpus = Corpus::load(&self.path("data"))?;
        Prepared::from_corpus(&self.cfg, corpus)
    }

    fn model(&self, name: &str) -> Result<Model, Error> {
        Model::from_checkpoint(&Checkpoint::load(&self.path(name))?)
    }

    fn save_model(&self, model: &Model, name: &str) -> Result<(), Error> {
        model.to_checkpoint().save(&self.path(name))
    }

    /// True when the stage's output exists and should be kept.
    fn done(&self, output: &str) -> bool {
        let exists = self.path(output).exists();
        if exists && !self.force {
            println!("{} exists; skipping (pass --force to redo)", self.path(output).display());
        }
        exists && !self.force
    }

    fn log(&self, name: &str) -> Result<BufWriter<File>, Error> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let ctx = Context::resolve(&cli)?;
    let cfg = &ctx.cfg;
    match &cli.command {
        Command::GenData => {
            if !ctx.done("data") {
                let corpus = Corpus::generate(&cfg.data, cfg.seed_for("data"))?;
                corpus.save(&ctx.path("data"))?;
            }
            println!("{}", ctx.run.display());
        }
        Command::Pretrain => {
            if !ctx.done("pretrain.ckpt") {
                let data = ctx.data()?;
                let mut log = ctx.log("pretrain.tsv")?;
                let (model, history) = pipeline::run_pretrain(cfg, &data, &mut log)?;
                log.flush()?;
                ctx.save_model(&model, "pretrain.ckpt")?;
                if let Some(l) = history.last() {
                    println!("pretrain done: mlm {:.4} mpm {:.4} tip {:.4}", l.mlm, l.mpm, l.tip);
                }
            }
        }
        Command::Finetune(_) => {
            if !ctx.done("finetune.ckpt") {
                let data = ctx.data()?;
                let mut model = ctx.model("pretrain.ckpt")?;
                data.hot.write_tsv(&ctx.path("hot_queries.tsv"))?;
                let mut log = ctx.log("finetune.tsv")?;
                let report = pipeline::run_finetune(cfg, &data, &mut model, &mut log)?;
                log.flush()?;
                ctx.save_model(&model, "finetune.ckpt")?;
                if let Some(r) = report.encoder_steps().last() {
                    println!("finetune done: main {:.4} adversarial {:.4}", r.losses.main, r.losses.adversarial);
                }
            }
        }
        Command::Eval { .. } => {
            let data = ctx.data()?;
            let model = ctx.model("finetune.ckpt")?;
            let report = pipeline::run_eval(cfg, &data, &model)?;
            report.write_jsonl(&ctx.path("metrics.jsonl"))?;
            print!("{}", report.summary());
        }
        Command::Export => {
            if !ctx.done("products.aceb") {
                let data = ctx.data()?;
                let model = ctx.model("finetune.ckpt")?;
                let cache = pipeline::export_embeddings(cfg, &data, &model)?;
                cache.save(&ctx.path("products.aceb"))?;
                println!("exported {} product embeddings", cache.len());
            }
        }
        Command::Distill => {
            if !ctx.done("student.ckpt") {
                let data = ctx.data()?;
                let teacher = ctx.model("finetune.ckpt")?;
                let (student, history) = pipeline::run_distill(cfg, &data, &teacher)?;
                ctx.save_model(&student, "student.ckpt")?;
                pipeline::build_hot_cache(cfg, &data, &teacher)?
                    .to_cache()?
                    .save(&ctx.path("hot_queries.aceb"))?;
                if let Some(l) = history.last() {
                    println!("distill done: 1 - cos {l:.5}");
                }
            }
        }
        Command::Serve { query, k } => {
            let products = EmbeddingCache::load(&ctx.path("products.aceb"))?;
            let hot = HotQueryCache::from_cache(&EmbeddingCache::load(&ctx.path("hot_queries.aceb"))?);
            let student = ctx.model("student.ckpt")?;
            let server = pipeline::build_server(cfg, &products, hot, student)?;
            let results = server.serve_query(query, k.unwrap_or(cfg.serving.k))?;
            let path = if server.encode_count() == 0 { "hot" } else { "encoded" };
            println!("# query {query:?} ({path})");
            for (rank, (id, score)) in results.iter().enumerate() {
                println!("{}\t{id}\t{score:.6}", rank + 1);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
